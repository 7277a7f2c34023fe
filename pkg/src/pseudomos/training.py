"""Gaussian NLL losses, the epoch loop with validation-PCC selection, and finetuning."""

from __future__ import annotations

import json
import logging
import math
import os
import shutil
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ndiff
from .audio_io import load_canonical
from .dataeval.manifest import Manifest
from .dataeval.metrics import UndefinedCorrelationError, pcc
from .features import pad_or_crop_array
from .models import DEEPMOS, DNSMOS_PRO, GaussianPrediction, QualityModel

log = logging.getLogger(__name__)

DEFAULT_EPOCHS = {DNSMOS_PRO: 500, DEEPMOS: 60, "finetune": 10}
EVAL_BATCH = 32


class TrainingError(RuntimeError):
    pass


class TrainConfigError(ValueError):
    pass


class ModelKindMismatch(TrainConfigError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 64
    epochs: int | None = None  # None: the default for the model kind
    dropout_enabled: bool = True
    seed: int = 0
    crop_frames: int = 624

    def __post_init__(self):
        if self.epochs is not None and self.epochs < 1:
            raise TrainConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise TrainConfigError("batch_size must be >= 1")
        if self.crop_frames < 1:
            raise TrainConfigError("crop_frames must be >= 1")
        if not self.lr >= 0.0:
            raise TrainConfigError("lr must be non-negative")

    def resolved_epochs(self, kind: str) -> int:
        return self.epochs if self.epochs is not None else DEFAULT_EPOCHS[kind]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# ---------------------------------------------------------------- losses

LOG_2PI = math.log(2.0 * math.pi)


def nll_terms(mean, variance, y):
    """Elementwise loss and its partials with respect to mean and variance."""
    mean = np.asarray(mean, dtype=np.float64)
    variance = np.asarray(variance, dtype=np.float64)
    r = np.asarray(y, dtype=np.float64) - mean
    loss = 0.5 * (LOG_2PI + np.log(variance) + r * r / variance)
    d_mean = -r / variance
    d_var = 0.5 * (1.0 / variance - r * r / (variance * variance))
    return loss, d_mean, d_var


def gaussian_nll(pred: GaussianPrediction, y: float) -> float:
    return float(nll_terms(pred.mean, pred.variance, y)[0])


def frame_nll(frame_preds, y: float, mask=None) -> float:
    """Mean per-frame NLL against the clip label; ``mask`` selects the frames that count."""
    frame_preds = list(frame_preds)
    if not frame_preds:
        raise ValueError("frame_nll needs at least one frame")
    means = np.array([p.mean for p in frame_preds])
    variances = np.array([p.variance for p in frame_preds])
    loss = nll_terms(means, variances, y)[0]
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != loss.shape or not mask.any():
            raise ValueError("mask must match the frames and select at least one")
        loss = loss[mask]
    return float(loss.mean())


def batch_loss(out: np.ndarray, labels: np.ndarray, n_real=None):
    """Batch loss and gradient with respect to the network output.

    ``out`` is (N, 2) for clip-level models or (N, T, 2) for frame-level ones;
    ``n_real`` gives the unpadded frame count per clip in the latter case.
    """
    labels = np.asarray(labels, dtype=np.float64)
    n = out.shape[0]
    if out.ndim == 2:
        loss, dm, dv = nll_terms(out[:, 0], out[:, 1], labels)
        weights = np.full(n, 1.0 / n)
    else:
        t = out.shape[1]
        counts = np.full(n, t) if n_real is None else np.minimum(np.asarray(n_real), t)
        mask = np.arange(t)[None, :] < counts[:, None]
        loss, dm, dv = nll_terms(out[..., 0], out[..., 1], labels[:, None])
        weights = mask / (counts[:, None] * n)
    total = float(np.sum(weights * loss))
    grad = np.stack([weights * dm, weights * dv], axis=-1).astype(out.dtype)
    return total, grad


# ---------------------------------------------------------------- data


class FeatureSet:
    """Features for every clip of a manifest, computed once and kept in memory."""

    def __init__(self, manifest: Manifest, model: QualityModel):
        if len(manifest) == 0:
            raise TrainingError("manifest is empty")
        self.paths = [manifest.path_of(r) for r in manifest]
        labels = manifest.labels()
        if np.isnan(labels).any():
            missing = [p for p, y in zip(self.paths, labels) if np.isnan(y)]
            raise TrainingError(f"{len(missing)} unlabeled clips, e.g. {missing[0]}")
        self.labels = labels
        self.values = [model.features(load_canonical(p)).astype(np.float32) for p in self.paths]

    def __len__(self):
        return len(self.paths)


def predict_set(model: QualityModel, data: FeatureSet) -> np.ndarray:
    """Eval-mode predicted means, batching clips of equal length."""
    means = np.empty(len(data))
    by_len = {}
    for i, v in enumerate(data.values):
        by_len.setdefault(max(v.shape[0], model.min_frames), []).append(i)
    for frames, idx in sorted(by_len.items()):
        for start in range(0, len(idx), EVAL_BATCH):
            chunk = idx[start:start + EVAL_BATCH]
            batch = np.full((len(chunk), frames, data.values[chunk[0]].shape[1]),
                            model.floor_value, dtype=np.float32)
            for j, i in enumerate(chunk):
                v = data.values[i]
                batch[j, :v.shape[0]] = v
            out = model.forward(batch)
            m = out[:, 0] if out.ndim == 2 else out[..., 0].mean(axis=1, dtype=np.float64)
            means[chunk] = m
    return means


def validation_pcc(model: QualityModel, data: FeatureSet) -> float | None:
    scores = np.clip(predict_set(model, data), 1.0, 5.0)
    try:
        return pcc(data.labels, scores)
    except UndefinedCorrelationError:
        return None


def select_best(val_pccs) -> tuple[int, float | None]:
    """1-based epoch of the highest PCC; ties go to the earliest, undefined never wins."""
    best_epoch, best = 1, None
    for epoch, value in enumerate(val_pccs, 1):
        if value is None or math.isnan(value):
            continue
        if best is None or value > best:
            best_epoch, best = epoch, value
    return best_epoch, best


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    model: QualityModel
    best_val_pcc: float | None
    best_epoch: int
    train_manifest_hash: str
    seed: int
    epochs: int = 1
    history: list = field(default_factory=list)

    def meta(self) -> dict:
        return {"best_val_pcc": self.best_val_pcc, "best_epoch": self.best_epoch,
                "train_manifest_hash": self.train_manifest_hash, "seed": self.seed,
                "epochs": self.epochs}

    def save(self, directory):
        self.model.save(directory, meta={"checkpoint": self.meta()})

    @classmethod
    def load(cls, directory) -> "Checkpoint":
        model = QualityModel.load(directory)
        with open(os.path.join(directory, "model.json")) as fh:
            meta = json.load(fh).get("checkpoint", {})
        return cls(model, meta.get("best_val_pcc"), int(meta.get("best_epoch", 1)),
                   meta.get("train_manifest_hash", ""), int(meta.get("seed", 0)),
                   int(meta.get("epochs", 1)))


# ---------------------------------------------------------------- loop


def _write_json(path, doc):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _fit(model: QualityModel, train_set: Manifest, val_set: Manifest, cfg: TrainConfig,
         epochs: int, run_dir, stage: str, train_data=None, val_data=None) -> Checkpoint:
    train_data = train_data or FeatureSet(train_set, model)
    val_data = val_data or FeatureSet(val_set, model)
    rng = np.random.default_rng(cfg.seed)
    optimizer = ndiff.Adam(model.graph, lr=cfg.lr)
    frame_level = model.kind == DEEPMOS
    train_hash = train_set.content_hash()

    metrics_fh = None
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        _write_json(os.path.join(run_dir, "config.json"), {
            "stage": stage, "train": cfg.to_dict(), "epochs": epochs,
            "model": model.cfg.to_dict(), "train_manifest_hash": train_hash,
            "val_manifest_hash": val_set.content_hash(),
        })
        metrics_fh = open(os.path.join(run_dir, "metrics.jsonl"), "w")

    history = []
    best_state, best_epoch, best_pcc = None, 1, None
    n = len(train_data)
    try:
        for epoch in range(1, epochs + 1):
            order = rng.permutation(n)
            total = 0.0
            for b, start in enumerate(range(0, n, cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                crops = [pad_or_crop_array(train_data.values[i], cfg.crop_frames, model.floor_value, rng)
                         for i in idx]
                batch = np.stack([c[0] for c in crops])
                out = model.forward(batch, train=True, rng=rng)
                loss, grad = batch_loss(out, train_data.labels[idx],
                                        [c[1] for c in crops] if frame_level else None)
                if not math.isfinite(loss):
                    clips = [train_data.paths[i] for i in idx[:5]]
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, batch {b}: output range "
                        f"[{np.nanmin(out):.4g}, {np.nanmax(out):.4g}], clips {clips}")
                model.graph.backward(grad, need_input_grad=False)
                optimizer.step()
                total += loss * len(idx)
            val = validation_pcc(model, val_data)
            row = {"epoch": epoch, "train_loss": total / n, "val_pcc": val}
            history.append(row)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(row) + "\n")
                metrics_fh.flush()
            log.info("%s epoch %d: loss %.4f val_pcc %s", stage, epoch, row["train_loss"], val)
            if val is not None and (best_pcc is None or val > best_pcc):
                best_state, best_epoch, best_pcc = model.graph.state(), epoch, val
            elif best_state is None and epoch == 1:
                best_state = model.graph.state()
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    best = model.copy()
    best.graph.load_state(best_state)
    ckpt = Checkpoint(best, best_pcc, best_epoch, train_hash, cfg.seed, epochs, history)
    if run_dir is not None:
        target = os.path.join(run_dir, "best")
        if os.path.isdir(target):
            shutil.rmtree(target)
        ckpt.save(target)
    return ckpt


def train(model: QualityModel, train_manifest: Manifest, val_manifest: Manifest, cfg: TrainConfig,
          run_dir=None, train_data=None, val_data=None) -> Checkpoint:
    """Train ``model`` in place; return the checkpoint of the best-validation epoch."""
    if not cfg.dropout_enabled:
        model.set_dropout_rate(0.0)
    return _fit(model, train_manifest, val_manifest, cfg, cfg.resolved_epochs(model.kind),
                run_dir, "train", train_data, val_data)


def finetune(ckpt: Checkpoint, train_manifest: Manifest, val_manifest: Manifest,
             cfg: TrainConfig, model_kind: str | None = None, run_dir=None,
             train_data=None, val_data=None) -> Checkpoint:
    """Continue from ``ckpt`` with fresh optimizer state and dropout off."""
    if cfg.dropout_enabled:
        raise TrainConfigError("finetuning runs with dropout disabled")
    if model_kind is not None and model_kind != ckpt.model.kind:
        raise ModelKindMismatch(f"checkpoint holds {ckpt.model.kind}, asked to finetune {model_kind}")
    model = ckpt.model.copy()
    model.set_dropout_rate(0.0)
    epochs = cfg.epochs if cfg.epochs is not None else DEFAULT_EPOCHS["finetune"]
    return _fit(model, train_manifest, val_manifest, cfg, epochs, run_dir, "finetune",
                train_data, val_data)
