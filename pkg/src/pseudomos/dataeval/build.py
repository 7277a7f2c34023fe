"""Degraded-corpus builder: clean sources in, augmented WAVs plus unlabeled manifests out."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from functools import lru_cache

import numpy as np

from ..audio_io import AudioError, load_canonical, write_wav
from ..degrade import NoiseBank, apply, child_rng, sample_spec
from .manifest import Manifest, ManifestRecord, write_manifest

log = logging.getLogger(__name__)

TRAIN_CLIPS = 100000
VAL_CLIPS = 1129
VAL_FRACTION = VAL_CLIPS / (TRAIN_CLIPS + VAL_CLIPS)
SOURCE_NAME = "libriaugmented"


class DatasetError(RuntimeError):
    pass


def list_sources(clean_dir) -> list[str]:
    """Readable WAVs under ``clean_dir`` in sorted order; unreadable files are logged and skipped."""
    paths = []
    for root, _, names in sorted(os.walk(clean_dir)):
        for name in sorted(names):
            if not name.lower().endswith(".wav"):
                continue
            path = os.path.join(root, name)
            try:
                w = load_canonical(path)
            except (AudioError, OSError) as exc:
                log.warning("skipping unreadable source %s: %s", path, exc)
                continue
            if len(w) == 0:
                continue
            paths.append(path)
    return paths


def split_sizes(n_clips: int, val_fraction: float = VAL_FRACTION) -> tuple[int, int]:
    n_val = int(round(n_clips * val_fraction))
    return n_clips - n_val, n_val


def build_dataset(clean_dir, out_dir, n_clips: int, val_fraction: float = VAL_FRACTION,
                  seed: int = 0, noise_dir=None, conditions=None,
                  workers: int = 1) -> tuple[Manifest, Manifest]:
    """Write ``n_clips`` degraded clips and ``train.jsonl`` / ``val.jsonl`` under ``out_dir``.

    Clip ``i`` takes its source round-robin from a seeded shuffle of the
    sources and all its randomness from a child stream of ``(seed, i)``, so
    the output does not depend on ``workers``. The last ``round(n * val_fraction)``
    clips form the validation split.
    """
    if n_clips < 1:
        raise DatasetError("n_clips must be >= 1")
    if not 0.0 <= val_fraction < 1.0:
        raise DatasetError("val_fraction must be in [0, 1)")
    sources = list_sources(clean_dir)
    if not sources:
        raise DatasetError(f"no usable WAV sources under {clean_dir}")
    order = np.random.default_rng(seed).permutation(len(sources))
    bank = NoiseBank(noise_dir)
    clip_dir = os.path.join(out_dir, "clips")
    os.makedirs(clip_dir, exist_ok=True)
    n_train, _ = split_sizes(n_clips, val_fraction)

    load = lru_cache(maxsize=128)(load_canonical)

    def make(i):
        source = sources[order[i % len(sources)]]
        rng = child_rng(seed, i)
        spec = sample_spec(rng, conditions)
        out = apply(load(source), spec, rng, bank)
        rel = os.path.join("clips", f"clip_{i:06d}.wav")
        write_wav(out, os.path.join(out_dir, rel))
        return ManifestRecord(clip_path=rel, split="train" if i < n_train else "val",
                              condition=spec.to_dict(), source_dataset=SOURCE_NAME,
                              duration_s=out.duration_seconds)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(make, range(n_clips)))
    else:
        records = [make(i) for i in range(n_clips)]

    train = Manifest([r for r in records if r.split == "train"], str(out_dir))
    val = Manifest([r for r in records if r.split == "val"], str(out_dir))
    write_manifest(train, os.path.join(out_dir, "train.jsonl"))
    write_manifest(val, os.path.join(out_dir, "val.jsonl"))
    return train, val
