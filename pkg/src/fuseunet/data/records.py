"""On-disk sample store: one aligned multi-modal slice per record.

Directory layout: a ``manifest.json`` at the root (case/slice table with
per-file sha256 checksums and the image size) plus one NDT1 file per field
named ``{case}_{slice:03d}_{field}.ndt``. Images are float32 in [0, 1];
label maps are uint8 (anatomy codes 0..3, pathology bit flags 1=infarct,
2=edema).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import ndt
from ..errors import DataError

FIELDS = ("x_lge", "x_t2", "x_bssfp", "y_ana", "y_pat")
MANIFEST_NAME = "manifest.json"
FORMAT = "fuseunet-dataset-v1"


@dataclass
class SliceRecord:
    case_id: str
    slice_id: int
    x_lge: np.ndarray
    x_t2: np.ndarray
    x_bssfp: np.ndarray
    y_ana: np.ndarray
    y_pat: np.ndarray

    def validate(self) -> "SliceRecord":
        shapes = {getattr(self, f).shape for f in FIELDS}
        if len(shapes) != 1 or len(next(iter(shapes))) != 2:
            raise DataError(f"record {self.key}: fields must share one 2-D shape, got {shapes}")
        for f in ("x_lge", "x_t2", "x_bssfp"):
            img = getattr(self, f)
            if img.dtype != np.float32:
                raise DataError(f"record {self.key}: {f} must be float32")
            if img.min() < 0.0 or img.max() > 1.0:
                raise DataError(f"record {self.key}: {f} outside [0, 1]")
        for f in ("y_ana", "y_pat"):
            if getattr(self, f).dtype != np.uint8:
                raise DataError(f"record {self.key}: {f} must be uint8")
        if self.y_ana.max(initial=0) > 3:
            raise DataError(f"record {self.key}: anatomy codes must be 0..3")
        if self.y_pat.max(initial=0) > 3:
            raise DataError(f"record {self.key}: pathology bits must be 0..3")
        return self

    @property
    def key(self) -> str:
        return f"{self.case_id}/{self.slice_id}"

    @property
    def image_size(self) -> int:
        return self.x_lge.shape[0]

    def has_pathology(self) -> bool:
        return bool((self.y_pat != 0).any())


def _field_filename(case_id: str, slice_id: int, field: str) -> str:
    return f"{case_id}_{slice_id:03d}_{field}.ndt"


def _load_manifest(directory: Path) -> dict:
    path = directory / MANIFEST_NAME
    if not path.is_file():
        raise DataError(f"missing dataset manifest at {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt manifest {path}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise DataError(f"unknown dataset format in {path}")
    return manifest


def _save_manifest(directory: Path, manifest: dict) -> None:
    manifest["slices"].sort(key=lambda e: (e["case"], e["slice"]))
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def write_record(record: SliceRecord, directory: str | Path) -> None:
    """Write all five field files and update the manifest (bit-exact
    round-trips; re-writing an existing (case, slice) replaces it)."""
    record.validate()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if (directory / MANIFEST_NAME).is_file():
        manifest = _load_manifest(directory)
        if manifest["image_size"] != record.image_size:
            raise DataError(
                f"record size {record.image_size} differs from dataset size {manifest['image_size']}"
            )
    else:
        manifest = {"format": FORMAT, "image_size": record.image_size, "slices": []}
    files = {}
    for field in FIELDS:
        blob = ndt.dumps(getattr(record, field))
        fname = _field_filename(record.case_id, record.slice_id, field)
        (directory / fname).write_bytes(blob)
        files[field] = {"file": fname, "sha256": hashlib.sha256(blob).hexdigest()}
    entry = {"case": record.case_id, "slice": record.slice_id, "files": files}
    manifest["slices"] = [
        e for e in manifest["slices"] if not (e["case"] == record.case_id and e["slice"] == record.slice_id)
    ]
    manifest["slices"].append(entry)
    _save_manifest(directory, manifest)


def _read_entry(directory: Path, entry: dict) -> SliceRecord:
    values = {}
    for field in FIELDS:
        info = entry["files"].get(field)
        if info is None:
            raise DataError(f"incomplete record {entry['case']}/{entry['slice']}: no {field}")
        fpath = directory / info["file"]
        try:
            blob = fpath.read_bytes()
        except FileNotFoundError as exc:
            raise DataError(f"incomplete record {entry['case']}/{entry['slice']}: missing {fpath.name}") from exc
        if hashlib.sha256(blob).hexdigest() != info["sha256"]:
            raise DataError(f"checksum mismatch for {fpath}")
        values[field] = ndt.loads(blob, source=str(fpath))
    return SliceRecord(case_id=entry["case"], slice_id=entry["slice"], **values).validate()


def read_record(directory: str | Path, case_id: str, slice_id: int) -> SliceRecord:
    directory = Path(directory)
    manifest = _load_manifest(directory)
    for entry in manifest["slices"]:
        if entry["case"] == case_id and entry["slice"] == slice_id:
            return _read_entry(directory, entry)
    raise DataError(f"no record {case_id}/{slice_id} in {directory}")


class Dataset:
    """All records of a dataset directory, loaded eagerly in manifest order."""

    def __init__(self, records: list[SliceRecord], image_size: int):
        self.records = records
        self.image_size = image_size

    @classmethod
    def load(cls, directory: str | Path) -> "Dataset":
        directory = Path(directory)
        manifest = _load_manifest(directory)
        records = [_read_entry(directory, e) for e in manifest["slices"]]
        return cls(records, manifest["image_size"])

    def __len__(self) -> int:
        return len(self.records)

    def cases(self) -> list[str]:
        return sorted({r.case_id for r in self.records})

    def pathology_slice_indices(self) -> list[int]:
        return [i for i, r in enumerate(self.records) if r.has_pathology()]

    def subset(self, case_ids) -> "Dataset":
        wanted = set(case_ids)
        return Dataset([r for r in self.records if r.case_id in wanted], self.image_size)
