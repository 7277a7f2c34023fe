"""JSONL manifests: one clip per line, the dataset exchange format."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

log = logging.getLogger(__name__)

RATERS = ("human", "llm", "oracle", "none")
SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    pass


@dataclass
class ManifestRecord:
    clip_path: str
    label: float | None = None
    rater: str = "none"
    split: str = "train"
    condition: dict | None = None
    source_dataset: str = ""
    duration_s: float | None = None
    rater_detail: str | None = None

    def __post_init__(self):
        if self.rater not in RATERS:
            raise ManifestError(f"unknown rater {self.rater!r}")
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r}")
        if self.label is not None:
            self.label = float(self.label)
            if self.rater == "none":
                raise ManifestError(f"{self.clip_path}: labeled row needs a rater")

    @property
    def labeled(self) -> bool:
        return self.label is not None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestRecord":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ManifestError(f"unknown manifest fields {sorted(unknown)}")
        return cls(**d)


@dataclass
class Manifest:
    records: list = field(default_factory=list)
    base_dir: str = "."

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.clip_path in seen:
                raise ManifestError(f"duplicate clip_path {r.clip_path}")
            seen.add(r.clip_path)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def path_of(self, record: ManifestRecord) -> str:
        if os.path.isabs(record.clip_path):
            return record.clip_path
        return os.path.join(self.base_dir, record.clip_path)

    def labels(self) -> np.ndarray:
        return np.array([np.nan if r.label is None else r.label for r in self.records])

    def labeled(self) -> "Manifest":
        return Manifest([r for r in self.records if r.labeled], self.base_dir)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in self.records)

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode()).hexdigest()


def read_manifest(path) -> Manifest:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(ManifestRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, TypeError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
    return Manifest(records, os.path.dirname(os.path.abspath(path)))


def write_manifest(manifest: Manifest, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(manifest.to_jsonl())
    os.replace(tmp, path)


MAX_REJECT_FRACTION = 0.01


def _label_ok(value) -> bool:
    return value is not None and math.isfinite(value) and 1.0 <= value <= 5.0


def import_manifest(path, format: str = "jsonl", mapping: dict | None = None) -> Manifest:
    """Normalize an external human-rated corpus listing into a Manifest.

    ``jsonl`` rows need ``clip_path`` and ``label``. ``csv_mosmap`` needs a
    mapping with ``path_column`` and ``mos_column`` (optional ``source_dataset``,
    ``split``, ``base_dir``). Rows with labels outside [1, 5] are rejected;
    more than 1% rejects fails the import.
    """
    mapping = dict(mapping or {})
    source = mapping.get("source_dataset", os.path.splitext(os.path.basename(path))[0])
    split = mapping.get("split", "test")
    base_dir = mapping.get("base_dir", os.path.dirname(os.path.abspath(path)))
    rows = []
    if format == "jsonl":
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    d = json.loads(line)
                    rows.append((d["clip_path"], d.get("label"), d.get("duration_s")))
    elif format == "csv_mosmap":
        try:
            path_col, mos_col = mapping["path_column"], mapping["mos_column"]
        except KeyError as exc:
            raise ManifestError(f"csv_mosmap mapping needs {exc.args[0]!r}") from None
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                if path_col not in row or mos_col not in row:
                    raise ManifestError(f"CSV lacks column {path_col!r} or {mos_col!r}")
                rows.append((row[path_col], row[mos_col], None))
    else:
        raise ManifestError(f"unknown import format {format!r}")

    records, rejected = [], 0
    for clip, label, duration in rows:
        try:
            value = float(label)
        except (TypeError, ValueError):
            value = None
        if not _label_ok(value):
            log.warning("rejecting %s: label %r outside [1, 5]", clip, label)
            rejected += 1
            continue
        records.append(ManifestRecord(clip_path=clip, label=value, rater="human", split=split,
                                      source_dataset=source, duration_s=duration))
    if rows and rejected / len(rows) > MAX_REJECT_FRACTION:
        raise ManifestError(f"{rejected}/{len(rows)} rows rejected (> {MAX_REJECT_FRACTION:.0%})")
    return Manifest(records, base_dir)
