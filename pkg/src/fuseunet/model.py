"""Full segmentation network: three modality-specific encoders, per-level
pixel-wise max fusion, bottleneck, skip-connected decoder with optional
spatial attention at the last decoding layer, and two softmax heads."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndt
from .blocks import (
    BACKBONES,
    BlockConfig,
    Conv2d,
    ConvTranspose2d,
    Module,
    SpatialAttention,
    make_block,
)
from .errors import ConfigError, DataError, ShapeError
from .tensor import Tensor, concat, maximum, no_grad, softmax

ANATOMY_CLASSES = ("background", "myocardium", "left_ventricle", "right_ventricle")
PATHOLOGY_CLASSES = ("background", "infarct", "edema")


@dataclass
class ModelConfig:
    levels: int = 4
    base_channels: int = 16
    backbone: str = "residual"
    image_size: int = 288
    n_anatomy: int = 3
    n_pathology: int = 2
    attention_enabled: bool = True
    max_fusion_enabled: bool = True
    normalization: str = "instance"
    activation: str = "relu"

    def __post_init__(self):
        if self.levels < 2:
            raise ConfigError("levels must be >= 2")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be positive")
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.image_size % (1 << self.levels) != 0:
            raise ConfigError(
                f"image_size {self.image_size} must be divisible by 2^levels = {1 << self.levels}"
            )
        if self.n_anatomy < 1 or self.n_pathology < 1:
            raise ConfigError("class counts must be positive")

    def channels(self) -> list[int]:
        return [self.base_channels << k for k in range(self.levels)]


@dataclass
class FeatureBundle:
    """Per-level encoder features for the three modalities plus their
    pixel-wise max, all sharing shape at each level."""

    lge: list[Tensor]
    t2: list[Tensor]
    bssfp: list[Tensor]
    fused: list[Tensor] | None = None


@dataclass
class SegOutput:
    anatomy_probs: Tensor
    pathology_probs: Tensor
    attention_map: Tensor | None = None


def max_fuse(a: Tensor, b: Tensor, c: Tensor) -> Tensor:
    """Element-wise maximum of three equally-shaped tensors.

    Parameter-free; gradient ties resolve pairwise in the fixed order
    max(max(a, b), c), routing to the earlier argument.
    """
    if a.shape != b.shape or b.shape != c.shape:
        raise ShapeError(f"max_fuse needs equal shapes, got {a.shape}/{b.shape}/{c.shape}")
    return maximum(maximum(a, b), c)


class ModalityEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.blocks = []
        in_ch = 1
        for k, out_ch in enumerate(cfg.channels()):
            self.blocks.append(
                make_block(
                    BlockConfig(
                        backbone=cfg.backbone,
                        in_channels=in_ch,
                        out_channels=out_ch,
                        stride=1 if k == 0 else 2,
                        normalization=cfg.normalization,
                        activation=cfg.activation,
                    ),
                    rng=rng,
                    dtype=dtype,
                )
            )
            in_ch = out_ch

    def __call__(self, x: Tensor) -> list[Tensor]:
        feats = []
        h = x
        for block in self.blocks:
            h = block(h)
            feats.append(h)
        return feats


class MaxFusionUNet(Module):
    def __init__(self, config: ModelConfig, *, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6D6F64]))
        chans = config.channels()
        top = chans[-1]
        self.enc_lge = ModalityEncoder(config, rng, dtype)
        self.enc_t2 = ModalityEncoder(config, rng, dtype)
        self.enc_bssfp = ModalityEncoder(config, rng, dtype)

        def _block(in_ch, out_ch, bottleneck=False):
            return make_block(
                BlockConfig(
                    backbone=config.backbone,
                    in_channels=in_ch,
                    out_channels=out_ch,
                    stride=1,
                    dilation=4 if (bottleneck and config.backbone == "dilation") else 1,
                    normalization=config.normalization,
                    activation=config.activation,
                    bottleneck=bottleneck,
                ),
                rng=rng,
                dtype=dtype,
            )

        self.bottleneck = [_block(3 * top, 2 * top, bottleneck=True), _block(2 * top, 2 * top, bottleneck=True)]

        skip_mult = 4 if config.max_fusion_enabled else 3
        self.upconvs = []
        self.dec_blocks = []
        for k in reversed(range(config.levels)):
            ck = chans[k]
            if k == config.levels - 1:
                dec_in = 2 * top + skip_mult * ck
            else:
                self.upconvs.append(ConvTranspose2d(chans[k + 1], ck, 2, stride=2, rng=rng, dtype=dtype))
                dec_in = ck + skip_mult * ck
            self.dec_blocks.append(_block(dec_in, ck))

        self.attention = SpatialAttention(chans[0], rng=rng, dtype=dtype) if config.attention_enabled else None
        self.head_anatomy = Conv2d(chans[0], config.n_anatomy + 1, 1, rng=rng, dtype=dtype)
        self.head_pathology = Conv2d(chans[0], config.n_pathology + 1, 1, rng=rng, dtype=dtype)

    # -- forward pieces --------------------------------------------------
    def _check_inputs(self, x_lge, x_t2, x_bssfp):
        shapes = {x_lge.shape, x_t2.shape, x_bssfp.shape}
        if len(shapes) != 1:
            raise ShapeError(f"modality inputs are not aligned: {sorted(shapes)}")
        B, C, H, W = x_lge.shape
        if C != 1:
            raise ShapeError(f"modality inputs must be single-channel, got {C}")
        down = 1 << (self.config.levels - 1)
        if H % down or W % down:
            raise ShapeError(f"input {H}x{W} must be divisible by 2^(levels-1) = {down}")

    def encode(self, x_lge: Tensor, x_t2: Tensor, x_bssfp: Tensor) -> tuple[FeatureBundle, Tensor]:
        """Run the three encoders; returns per-level features (with their
        pixel-wise max when fusion is enabled) and the bottleneck input,
        the channel concatenation of the three deepest features."""
        self._check_inputs(x_lge, x_t2, x_bssfp)
        f_lge = self.enc_lge(x_lge)
        f_t2 = self.enc_t2(x_t2)
        f_bssfp = self.enc_bssfp(x_bssfp)
        fused = None
        if self.config.max_fusion_enabled:
            fused = [max_fuse(a, b, c) for a, b, c in zip(f_lge, f_t2, f_bssfp)]
        bundle = FeatureBundle(f_lge, f_t2, f_bssfp, fused)
        bottleneck_input = concat([f_lge[-1], f_t2[-1], f_bssfp[-1]], axis=1)
        return bundle, bottleneck_input

    def decode(self, bundle: FeatureBundle, bottleneck_input: Tensor, *, want_attention: bool = False) -> SegOutput:
        z = bottleneck_input
        for block in self.bottleneck:
            z = block(z)
        up_idx = 0
        for i, k in enumerate(reversed(range(self.config.levels))):
            if k != self.config.levels - 1:
                z = self.upconvs[up_idx](z)
                up_idx += 1
            skips = [bundle.lge[k], bundle.t2[k], bundle.bssfp[k]]
            if bundle.fused is not None:
                skips.append(bundle.fused[k])
            z = self.dec_blocks[i](concat([z] + skips, axis=1))
        attn = None
        if self.attention is not None:
            z, attn = self.attention(z)
        anatomy = softmax(self.head_anatomy(z), axis=1)
        pathology = softmax(self.head_pathology(z), axis=1)
        return SegOutput(anatomy, pathology, attn if want_attention else None)

    def forward(self, x_lge: Tensor, x_t2: Tensor, x_bssfp: Tensor, *, want_attention: bool = False) -> SegOutput:
        bundle, bottleneck_input = self.encode(x_lge, x_t2, x_bssfp)
        return self.decode(bundle, bottleneck_input, want_attention=want_attention)

    __call__ = forward

    # -- state -----------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(arrays))
        extra = sorted(set(arrays) - set(own))
        if missing or extra:
            raise DataError(f"checkpoint parameter names differ (missing={missing[:3]}, extra={extra[:3]})")
        for name, p in own.items():
            arr = arrays[name]
            if tuple(arr.shape) != p.shape:
                raise ShapeError(
                    f"checkpoint/config mismatch for parameter {name!r}: "
                    f"checkpoint {tuple(arr.shape)} vs model {p.shape}"
                )
            p.data = arr.astype(self.dtype, copy=True)


# ---------------------------------------------------------------------------
# checkpoint files: manifest + one NDT1 file per tensor


def save_arrays(directory: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name in sorted(arrays):
        blob = ndt.dumps(arrays[name])
        fname = name.replace("/", "_") + ".ndt"
        (directory / fname).write_bytes(blob)
        entries[name] = {"file": fname, "sha256": hashlib.sha256(blob).hexdigest()}
    manifest = {"format": "fuseunet-tensors-v1", "tensors": entries}
    if meta:
        manifest["meta"] = meta
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_arrays(directory: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.is_file():
        raise DataError(f"missing tensor manifest at {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt manifest {mpath}: {exc}") from exc
    if manifest.get("format") != "fuseunet-tensors-v1":
        raise DataError(f"unknown tensor bundle format in {mpath}")
    arrays = {}
    for name, entry in manifest["tensors"].items():
        fpath = directory / entry["file"]
        try:
            blob = fpath.read_bytes()
        except FileNotFoundError as exc:
            raise DataError(f"incomplete bundle: missing {fpath}") from exc
        if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
            raise DataError(f"checksum mismatch for {fpath}")
        arrays[name] = ndt.loads(blob, source=str(fpath))
    return arrays, manifest.get("meta", {})


def save_model_checkpoint(directory: str | Path, model: MaxFusionUNet, extra_meta: dict | None = None) -> None:
    meta = {"kind": "model", "dtype": model.dtype.name}
    if extra_meta:
        meta.update(extra_meta)
    save_arrays(directory, model.state_arrays(), meta=meta)


def load_model_checkpoint(directory: str | Path, model: MaxFusionUNet) -> dict:
    arrays, meta = load_arrays(directory)
    model.load_state(arrays)
    return meta


def predict_labels(model: MaxFusionUNet, x_lge, x_t2, x_bssfp, *, want_attention: bool = False):
    """Argmax label maps for both heads (and the attention map if asked)."""
    with no_grad():
        out = model.forward(x_lge, x_t2, x_bssfp, want_attention=want_attention)
    anatomy = np.argmax(out.anatomy_probs.data, axis=1).astype(np.uint8)
    pathology = np.argmax(out.pathology_probs.data, axis=1).astype(np.uint8)
    return anatomy, pathology, out
