"""Synthetic multi-modal cardiac phantoms with exact ground truth.

Geometry per slice: a blood-pool disk (LV) inside a muscle ring
(myocardium) with a crescent (RV) hugging the ring. An infarct arc-sector
sits inside the ring with probability 0.7; an edema arc strictly contains
any infarct (and appears alone with probability 0.2 otherwise), so
pathology is always inside the myocardium.

Modality renderings follow the clinical visibility pattern: the cine-like
channel shows anatomy contrast but no pathology, the enhancement channel
makes infarct bright and edema faint, and the fluid-sensitive channel
makes edema bright while infarct stays close to edema intensity. Each
channel gets a smooth multiplicative bias field and additive Gaussian
noise (sigma 0.03).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import ConfigError
from .records import Dataset, SliceRecord, write_record

NOISE_SIGMA = 0.03
BIAS_AMPLITUDE = 0.08

P_INFARCT = 0.7
P_EDEMA_ALONE = 0.2

MIN_SIZE = 96


def _bias_field(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth multiplicative field from a low-order cosine mixture."""
    u = np.linspace(0.0, 1.0, size)
    field = np.zeros((size, size))
    for p in range(3):
        for q in range(3):
            if p == 0 and q == 0:
                continue
            c = rng.uniform(-1.0, 1.0)
            field += c * np.outer(np.cos(np.pi * p * u), np.cos(np.pi * q * u))
    field /= max(1.0, np.abs(field).max())
    return 1.0 + BIAS_AMPLITUDE * field


def _sector_mask(angle: np.ndarray, start: float, width: float) -> np.ndarray:
    rel = np.mod(angle - start, 2.0 * np.pi)
    return rel < width


def _render(regions: dict[str, np.ndarray], values: dict[str, float],
            rng: np.random.Generator, size: int) -> np.ndarray:
    img = np.full((size, size), values["bg"])
    # later assignments overwrite: pathology painted after anatomy
    for name in ("lv", "rv", "myo", "edema", "infarct"):
        img[regions[name]] = values[name]
    img = img * _bias_field(rng, size)
    img = img + rng.normal(0.0, NOISE_SIGMA, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_phantom_record(rng: np.random.Generator, case_id: str, slice_id: int, size: int) -> SliceRecord:
    if size < MIN_SIZE:
        raise ConfigError(f"phantom size must be >= {MIN_SIZE}, got {size}")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = size * (0.5 + rng.uniform(-0.04, 0.04))
    cx = size * (0.5 + rng.uniform(-0.04, 0.04))
    radius = np.hypot(yy - cy, xx - cx)
    angle = np.arctan2(yy - cy, xx - cx)

    r_lv = size * rng.uniform(0.103, 0.127)
    r_out = r_lv + size * rng.uniform(0.048, 0.061)
    lv = radius < r_lv
    myo = (radius >= r_lv) & (radius < r_out)

    # RV crescent: a shifted disk minus the LV+ring footprint
    theta_rv = rng.uniform(0.0, 2.0 * np.pi)
    r_rv = size * rng.uniform(0.085, 0.105)
    d_rv = r_out + 0.55 * r_rv
    rv_cy = cy + d_rv * np.sin(theta_rv)
    rv_cx = cx + d_rv * np.cos(theta_rv)
    rv = (np.hypot(yy - rv_cy, xx - rv_cx) < r_rv) & (radius >= r_out * 1.02)

    infarct = np.zeros((size, size), dtype=bool)
    edema = np.zeros((size, size), dtype=bool)
    has_infarct = rng.uniform() < P_INFARCT
    has_edema = has_infarct or rng.uniform() < P_EDEMA_ALONE
    if has_edema:
        if has_infarct:
            width_inf = rng.uniform(np.deg2rad(40), np.deg2rad(90))
            start_inf = rng.uniform(0.0, 2.0 * np.pi)
            margin_lo = rng.uniform(np.deg2rad(15), np.deg2rad(30))
            margin_hi = rng.uniform(np.deg2rad(15), np.deg2rad(30))
            start_ed = start_inf - margin_lo
            width_ed = width_inf + margin_lo + margin_hi
            infarct = myo & _sector_mask(angle, start_inf, width_inf)
            edema = myo & _sector_mask(angle, start_ed, width_ed)
            edema |= infarct  # strict containment even under discretization
        else:
            width_ed = rng.uniform(np.deg2rad(50), np.deg2rad(120))
            start_ed = rng.uniform(0.0, 2.0 * np.pi)
            edema = myo & _sector_mask(angle, start_ed, width_ed)

    y_ana = np.zeros((size, size), dtype=np.uint8)
    y_ana[myo] = 1
    y_ana[lv] = 2
    y_ana[rv] = 3
    y_pat = np.zeros((size, size), dtype=np.uint8)
    y_pat[edema] |= 2
    y_pat[infarct] |= 1

    regions = {"lv": lv, "myo": myo, "rv": rv, "infarct": infarct, "edema": edema & ~infarct}
    jit = rng.uniform(-0.03, 0.03)
    x_bssfp = _render(regions, {"bg": 0.15 + jit, "lv": 0.85, "rv": 0.80, "myo": 0.35,
                                "infarct": 0.35, "edema": 0.35}, rng, size)
    x_lge = _render(regions, {"bg": 0.20 + jit, "lv": 0.55, "rv": 0.50, "myo": 0.25,
                              "infarct": 0.85, "edema": 0.35}, rng, size)
    x_t2 = _render(regions, {"bg": 0.15 + jit, "lv": 0.45, "rv": 0.45, "myo": 0.30,
                             "infarct": 0.78, "edema": 0.85}, rng, size)

    return SliceRecord(
        case_id=case_id, slice_id=slice_id,
        x_lge=x_lge, x_t2=x_t2, x_bssfp=x_bssfp,
        y_ana=y_ana, y_pat=y_pat,
    ).validate()


def generate_phantom_dataset(
    seed: int, n_cases: int, slices_per_case: int, size: int, out_dir: str | Path | None = None
) -> Dataset:
    """Deterministic dataset for (seed, n_cases, slices_per_case, size);
    optionally written to a directory in the manifest format."""
    if n_cases < 1 or slices_per_case < 1:
        raise ConfigError("need at least one case and one slice per case")
    records = []
    for c in range(n_cases):
        case_id = f"case{c:03d}"
        for s in range(slices_per_case):
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), c, s]))
            records.append(generate_phantom_record(rng, case_id, s, size))
    dataset = Dataset(records, size)
    if out_dir is not None:
        for record in records:
            write_record(record, out_dir)
    return dataset
