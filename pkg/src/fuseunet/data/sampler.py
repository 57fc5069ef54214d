"""Dynamic patch resampling.

Each training iteration draws a patch size d = size_base + size_step * i
(i uniform), sets the batch size to the largest n with d*d*n inside the
fixed pixel budget d0*d0*n0, and fills the batch item-by-item: with
probability rho_c the crop window is centered on a uniformly chosen
pathology pixel of a uniformly chosen pathology-bearing slice (window
clamped inside the image, so the center pixel is always covered),
otherwise the slice and the window position are uniform.

Draws are a pure function of (dataset, seed, iteration): the RNG is
re-derived per iteration, so resumed runs reproduce the exact sequence.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from .records import Dataset

logger = logging.getLogger(__name__)


@dataclass
class SamplerConfig:
    rho_c: float = 0.89
    size_base: int = 96
    size_step: int = 16
    size_index_min: int = 0
    size_index_max: int | None = None  # derived from d0 when None
    d0: int = 288
    n0: int = 4
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rho_c <= 1.0:
            raise ConfigError(f"rho_c must lie in [0, 1], got {self.rho_c}")
        if self.size_base < 1 or self.size_step < 1 or self.d0 < 1 or self.n0 < 1:
            raise ConfigError("sizes and batch seed values must be positive")
        if self.size_base > self.d0:
            raise ConfigError(f"size_base {self.size_base} exceeds full size d0 {self.d0}")
        derived_max = (self.d0 - self.size_base) // self.size_step
        if self.size_index_max is None:
            self.size_index_max = derived_max
        if self.size_index_max > derived_max:
            raise ConfigError(f"size_index_max {self.size_index_max} would exceed d0 {self.d0}")
        if self.size_index_min < 0 or self.size_index_min > self.size_index_max:
            raise ConfigError("size index range is empty")

    def sizes(self) -> list[int]:
        return [self.size_base + self.size_step * i
                for i in range(self.size_index_min, self.size_index_max + 1)]

    def pixel_budget(self) -> int:
        return self.d0 * self.d0 * self.n0


@dataclass
class DrawItem:
    slice_index: int
    top: int
    left: int
    pathology_centered: bool


@dataclass
class ResampleDraw:
    iteration: int
    d: int
    n: int
    items: list[DrawItem] = field(default_factory=list)


def draw_patch_size(rng: np.random.Generator, config: SamplerConfig) -> int:
    i = int(rng.integers(config.size_index_min, config.size_index_max + 1))
    return config.size_base + config.size_step * i


def batch_size_for(d: int, config: SamplerConfig) -> int:
    """Largest batch whose pixel count stays inside the fixed d0^2*n0 budget."""
    if d < 1 or d > config.d0:
        raise ConfigError(f"patch size {d} outside (0, {config.d0}]")
    return config.pixel_budget() // (d * d)


def rng_for_iteration(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(iteration)]))


def _assemble(dataset: Dataset, d: int, items: list[DrawItem]) -> dict[str, np.ndarray]:
    n = len(items)
    batch = {
        "x_lge": np.empty((n, 1, d, d), dtype=np.float32),
        "x_t2": np.empty((n, 1, d, d), dtype=np.float32),
        "x_bssfp": np.empty((n, 1, d, d), dtype=np.float32),
        "y_ana": np.empty((n, d, d), dtype=np.uint8),
        "y_pat": np.empty((n, d, d), dtype=np.uint8),
    }
    for j, item in enumerate(items):
        r = dataset.records[item.slice_index]
        sl = (slice(item.top, item.top + d), slice(item.left, item.left + d))
        batch["x_lge"][j, 0] = r.x_lge[sl]
        batch["x_t2"][j, 0] = r.x_t2[sl]
        batch["x_bssfp"][j, 0] = r.x_bssfp[sl]
        batch["y_ana"][j] = r.y_ana[sl]
        batch["y_pat"][j] = r.y_pat[sl]
    return batch


class DynamicSampler:
    def __init__(self, dataset: Dataset, config: SamplerConfig):
        if len(dataset) == 0:
            raise ConfigError("cannot sample from an empty dataset")
        if config.d0 > dataset.image_size:
            raise ConfigError(
                f"sampler d0 {config.d0} exceeds dataset image size {dataset.image_size}"
            )
        self.dataset = dataset
        self.config = config
        self._pathology_slices = dataset.pathology_slice_indices()
        self._pathology_pixels = {
            i: np.argwhere(dataset.records[i].y_pat != 0) for i in self._pathology_slices
        }
        self._warned_no_pathology = False

    def draw(self, iteration: int) -> ResampleDraw:
        cfg = self.config
        rng = rng_for_iteration(cfg.seed, iteration)
        d = draw_patch_size(rng, cfg)
        n = batch_size_for(d, cfg)
        size = self.dataset.image_size
        span = size - d
        items = []
        for _ in range(n):
            centered = bool(rng.uniform() < cfg.rho_c)
            if centered and not self._pathology_slices:
                if not self._warned_no_pathology:
                    logger.warning("no pathology-bearing slices; falling back to uniform crops")
                    self._warned_no_pathology = True
                centered = False
            if centered:
                si = self._pathology_slices[int(rng.integers(len(self._pathology_slices)))]
                pix = self._pathology_pixels[si]
                py, px = pix[int(rng.integers(len(pix)))]
                top = int(np.clip(py - d // 2, 0, span))
                left = int(np.clip(px - d // 2, 0, span))
            else:
                si = int(rng.integers(len(self.dataset)))
                top = int(rng.integers(0, span + 1))
                left = int(rng.integers(0, span + 1))
            items.append(DrawItem(si, top, left, centered))
        return ResampleDraw(iteration=iteration, d=d, n=n, items=items)

    def sample(self, iteration: int) -> tuple[ResampleDraw, dict[str, np.ndarray]]:
        draw = self.draw(iteration)
        return draw, _assemble(self.dataset, draw.d, draw.items)


class FixedSampler:
    """Full-size images at the base batch size (the no-resample mode)."""

    def __init__(self, dataset: Dataset, config: SamplerConfig):
        if len(dataset) == 0:
            raise ConfigError("cannot sample from an empty dataset")
        self.dataset = dataset
        self.config = config

    def draw(self, iteration: int) -> ResampleDraw:
        rng = rng_for_iteration(self.config.seed, iteration)
        n = self.config.n0
        items = [DrawItem(int(rng.integers(len(self.dataset))), 0, 0, False) for _ in range(n)]
        return ResampleDraw(iteration=iteration, d=self.dataset.image_size, n=n, items=items)

    def sample(self, iteration: int) -> tuple[ResampleDraw, dict[str, np.ndarray]]:
        draw = self.draw(iteration)
        return draw, _assemble(self.dataset, draw.d, draw.items)
