"""Network building blocks: conv/norm layers, the three backbone block
variants, and the downsampled spatial attention module."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    Tensor,
    conv2d,
    conv_transpose2d,
    instance_norm,
    leaky_relu,
    matmul,
    pad2d,
    parameter,
    relu,
    reshape,
    softmax,
    transpose,
)

BACKBONES = ("residual", "dilation", "sideconv")

# refuse quadratic attention beyond this many key positions
ATTENTION_MAX_POSITIONS = 4096


class Module:
    """Minimal parameter container; submodules and parameters are found by
    reflecting over instance attributes (including lists of modules)."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, *, stride=1, padding=0, dilation=1,
                 bias=True, rng=None, dtype=np.float32):
        kh, kw = _pair(kernel)
        ph, pw = _pair(padding)
        self.stride = int(stride)
        self.dilation = int(dilation)
        self.padding = (ph, pw)
        rng = rng or np.random.default_rng(0)
        self.weight = parameter(he_uniform(rng, (out_ch, in_ch, kh, kw), in_ch * kh * kw, dtype))
        self.bias = parameter(np.zeros(out_ch, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        ph, pw = self.padding
        if ph == pw:
            return conv2d(x, self.weight, self.bias, stride=self.stride, padding=ph,
                          dilation=self.dilation)
        return conv2d(pad2d(x, ph, pw), self.weight, self.bias, stride=self.stride,
                      padding=0, dilation=self.dilation)


class ConvTranspose2d(Module):
    def __init__(self, in_ch, out_ch, kernel, *, stride=1, padding=0, bias=True,
                 rng=None, dtype=np.float32):
        kh, kw = _pair(kernel)
        self.stride = int(stride)
        self.padding = int(padding)
        rng = rng or np.random.default_rng(0)
        self.weight = parameter(he_uniform(rng, (in_ch, out_ch, kh, kw), in_ch * kh * kw, dtype))
        self.bias = parameter(np.zeros(out_ch, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class InstanceNorm2d(Module):
    def __init__(self, channels, *, eps=1e-5, dtype=np.float32):
        self.eps = eps
        self.gamma = parameter(np.ones(channels, dtype=dtype))
        self.beta = parameter(np.zeros(channels, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return instance_norm(x, self.gamma, self.beta, eps=self.eps)


def _activation(name: str):
    if name == "relu":
        return relu
    if name == "leaky_relu":
        return lambda x: leaky_relu(x, 0.2)
    raise ConfigError(f"unknown activation {name!r}")


@dataclass
class BlockConfig:
    backbone: str = "residual"
    in_channels: int = 16
    out_channels: int = 16
    stride: int = 1
    dilation: int = 1
    normalization: str = "instance"
    activation: str = "relu"
    bottleneck: bool = False

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.dilation > 1 and not (self.backbone == "dilation" and self.bottleneck):
            raise ConfigError("dilation > 1 is only allowed in dilation-backbone bottleneck blocks")
        if self.normalization not in ("instance", "none"):
            raise ConfigError(f"normalization must be 'instance' or 'none', got {self.normalization!r}")


class SideConvUnit(Module):
    """One convolution step realized as the sum of parallel 3x3, 3x1 and 1x3
    kernels (all emitting identical spatial extents)."""

    def __init__(self, in_ch, out_ch, *, stride=1, rng=None, dtype=np.float32):
        self.conv3x3 = Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, rng=rng, dtype=dtype)
        self.conv3x1 = Conv2d(in_ch, out_ch, (3, 1), stride=stride, padding=(1, 0), bias=False,
                              rng=rng, dtype=dtype)
        self.conv1x3 = Conv2d(in_ch, out_ch, (1, 3), stride=stride, padding=(0, 1), bias=False,
                              rng=rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv3x3(x) + self.conv3x1(x) + self.conv1x3(x)


class DilatedUnit(Module):
    """Parallel 3x3 convs at dilations (1, 2, 4), outputs summed; padding
    matches dilation so the spatial extent is preserved."""

    DILATIONS = (1, 2, 4)

    def __init__(self, in_ch, out_ch, *, rng=None, dtype=np.float32):
        self.branches = [
            Conv2d(in_ch, out_ch, 3, stride=1, padding=d, dilation=d, bias=(d == 1),
                   rng=rng, dtype=dtype)
            for d in self.DILATIONS
        ]

    def __call__(self, x: Tensor) -> Tensor:
        out = self.branches[0](x)
        for branch in self.branches[1:]:
            out = out + branch(x)
        return out


def _make_unit(cfg: BlockConfig, in_ch, out_ch, stride, rng, dtype) -> Module:
    if cfg.backbone == "sideconv":
        return SideConvUnit(in_ch, out_ch, stride=stride, rng=rng, dtype=dtype)
    if cfg.backbone == "dilation" and cfg.bottleneck:
        if stride != 1:
            raise ConfigError("dilated bottleneck blocks must have stride 1")
        return DilatedUnit(in_ch, out_ch, rng=rng, dtype=dtype)
    return Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, rng=rng, dtype=dtype)


class BackboneBlock(Module):
    """Residual skeleton shared by all backbones:

        out = act( norm2(unit2(act(norm1(unit1(x))))) + shortcut(x) )

    unit = single 3x3 conv (residual / dilation outside the bottleneck),
    a side-conv triple, or a dilated triple (dilation bottleneck, which
    collapses to a single unit, see below). The shortcut is the identity
    when shapes allow, otherwise a strided 1x1 projection.
    """

    def __init__(self, cfg: BlockConfig, *, rng=None, dtype=np.float32):
        self.cfg = cfg
        norm = cfg.normalization == "instance"
        dilated = cfg.backbone == "dilation" and cfg.bottleneck
        self.unit1 = _make_unit(cfg, cfg.in_channels, cfg.out_channels, cfg.stride, rng, dtype)
        self.norm1 = InstanceNorm2d(cfg.out_channels, dtype=dtype) if norm else None
        # the dilated bottleneck variant is a single merged stage
        self.unit2 = None if dilated else _make_unit(cfg, cfg.out_channels, cfg.out_channels, 1, rng, dtype)
        self.norm2 = InstanceNorm2d(cfg.out_channels, dtype=dtype) if (norm and not dilated) else None
        if cfg.in_channels == cfg.out_channels and cfg.stride == 1:
            self.shortcut = None
        else:
            self.shortcut = Conv2d(cfg.in_channels, cfg.out_channels, 1, stride=cfg.stride,
                                   rng=rng, dtype=dtype)
        self.act = _activation(cfg.activation)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.unit1(x)
        if self.norm1 is not None:
            h = self.norm1(h)
        if self.unit2 is not None:
            h = self.act(h)
            h = self.unit2(h)
            if self.norm2 is not None:
                h = self.norm2(h)
        s = x if self.shortcut is None else self.shortcut(x)
        return self.act(h + s)


def make_block(cfg: BlockConfig, *, rng=None, dtype=np.float32) -> BackboneBlock:
    return BackboneBlock(cfg, rng=rng, dtype=dtype)


class SpatialAttention(Module):
    """Self-attention over spatial positions of a stride-2 downsampled map.

    Pipeline: downsample -> 1x1 query/key (C/8 channels) and value (C)
    projections -> softmax over key positions -> attended values scaled by
    a learnable scalar (init 0) summed with the downsampled input ->
    stride-2 transposed conv back to full resolution -> residual sum with
    the block input. With scale == 0 the module reduces exactly to
    upsample(downsample(x)) + x.
    """

    def __init__(self, channels, *, rng=None, dtype=np.float32,
                 max_positions=ATTENTION_MAX_POSITIONS):
        qk = max(1, channels // 8)
        self.max_positions = max_positions
        self.down = Conv2d(channels, channels, 3, stride=2, padding=1, rng=rng, dtype=dtype)
        self.query = Conv2d(channels, qk, 1, rng=rng, dtype=dtype)
        self.key = Conv2d(channels, qk, 1, rng=rng, dtype=dtype)
        self.value = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)
        self.up = ConvTranspose2d(channels, channels, 2, stride=2, rng=rng, dtype=dtype)
        self.scale = parameter(np.zeros((), dtype=dtype))

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        B, C, H, W = x.shape
        if H % 2 or W % 2:
            raise ShapeError(f"spatial attention needs even extents, got {H}x{W}")
        h2, w2 = H // 2, W // 2
        n = h2 * w2
        if n > self.max_positions:
            raise ConfigError(
                f"attention grid {h2}x{w2} = {n} positions exceeds the {self.max_positions} limit"
            )
        d = self.down(x)
        q = reshape(self.query(d), (B, -1, n))
        k = reshape(self.key(d), (B, -1, n))
        v = reshape(self.value(d), (B, C, n))
        energy = matmul(transpose(q, (0, 2, 1)), k)     # [B, n_query, n_key]
        attn = softmax(energy, axis=2)
        attended = matmul(v, transpose(attn, (0, 2, 1)))  # [B, C, n_query]
        pre = self.scale * reshape(attended, (B, C, h2, w2)) + d
        out = self.up(pre) + x
        return out, attn
