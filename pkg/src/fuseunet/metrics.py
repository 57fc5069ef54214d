"""Evaluation metrics: per-class Dice on discrete label maps, averaged
pathology score, and the infarct+edema union score, with report formatting
and a per-slice structured log."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .losses import pathology_target_planes

ANATOMY_IDS = {"myocardium": 1, "left_ventricle": 2, "right_ventricle": 3}
PATHOLOGY_IDS = {"infarct": 1, "edema": 2}

REPORT_COLUMNS = (
    "myocardium",
    "left_ventricle",
    "right_ventricle",
    "infarct",
    "edema",
    "avg_pathology",
    "union",
)


def dice_binary(pred_mask: np.ndarray, target_mask: np.ndarray) -> float:
    """2|P∩T| / (|P|+|T|); 1.0 when both masks are empty, 0.0 when exactly
    one is."""
    p = np.asarray(pred_mask, dtype=bool)
    t = np.asarray(target_mask, dtype=bool)
    np_, nt = int(p.sum()), int(t.sum())
    if np_ == 0 and nt == 0:
        return 1.0
    if np_ == 0 or nt == 0:
        return 0.0
    inter = int((p & t).sum())
    return 2.0 * inter / (np_ + nt)


def dice(pred_labels: np.ndarray, target_labels: np.ndarray, class_id: int) -> float:
    return dice_binary(np.asarray(pred_labels) == class_id, np.asarray(target_labels) == class_id)


def union_dice(pred_pathology_labels: np.ndarray, target_pathology_bits: np.ndarray) -> float:
    """Dice over the pooled infarct-or-edema support of both maps."""
    pred_union = np.isin(np.asarray(pred_pathology_labels), (1, 2))
    target_union = np.asarray(target_pathology_bits) != 0
    return dice_binary(pred_union, target_union)


def slice_scores(pred_ana: np.ndarray, pred_pat: np.ndarray, y_ana: np.ndarray, y_pat: np.ndarray) -> dict:
    """Per-slice Dice table for one (prediction, truth) pair of label maps."""
    infarct_t, edema_t = pathology_target_planes(y_pat)
    scores = {
        "myocardium": dice(pred_ana, y_ana, 1),
        "left_ventricle": dice(pred_ana, y_ana, 2),
        "right_ventricle": dice(pred_ana, y_ana, 3),
        "infarct": dice_binary(pred_pat == 1, infarct_t),
        "edema": dice_binary(pred_pat == 2, edema_t),
        "union": union_dice(pred_pat, y_pat),
    }
    scores["avg_pathology"] = 0.5 * (scores["infarct"] + scores["edema"])
    return scores


def aggregate(rows: list[dict]) -> dict:
    """Mean and std (population) per score column across slices."""
    out = {}
    for col in REPORT_COLUMNS:
        vals = np.array([r[col] for r in rows], dtype=np.float64)
        out[col] = {"mean": float(vals.mean()), "std": float(vals.std())}
    out["n_slices"] = len(rows)
    return out


def format_report(agg: dict) -> str:
    """Percent scores as mean (std) per column, tab separated."""
    header = "\t".join(REPORT_COLUMNS)
    cells = []
    for col in REPORT_COLUMNS:
        s = agg[col]
        cells.append(f"{100 * s['mean']:.1f} ({100 * s['std']:.1f})")
    return f"{header}\n" + "\t".join(cells) + f"\nn_slices\t{agg['n_slices']}\n"


def evaluate_model(model, records, *, keep_probs: bool = False) -> list[dict]:
    """Per-slice Dice rows for full-size forward passes (one slice per
    batch, gradient recording off)."""
    from .model import predict_labels
    from .tensor import Tensor

    rows = []
    for r in records:
        xs = [
            Tensor(getattr(r, f)[None, None].astype(model.dtype))
            for f in ("x_lge", "x_t2", "x_bssfp")
        ]
        pred_ana, pred_pat, out = predict_labels(model, *xs)
        row = {"case": r.case_id, "slice": r.slice_id}
        row.update(slice_scores(pred_ana[0], pred_pat[0], r.y_ana, r.y_pat))
        if keep_probs:
            row["_pred_ana"] = pred_ana[0]
            row["_pred_pat"] = pred_pat[0]
        rows.append(row)
    return rows


def write_slice_log(path: str | Path, rows: list[dict]) -> None:
    """One JSON record per slice: ids plus every score column."""
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_slice_log(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
