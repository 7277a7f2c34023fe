"""DNSMOS Pro and DeePMOS regressors on top of the ndiff kernel."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import ndiff
from .audio_io import Waveform
from .features import LOG_FLOOR, StftConfig, TooShortError, log_magnitude, stft

DNSMOS_PRO = "dnsmos_pro"
DEEPMOS = "deepmos"
MODEL_KINDS = (DNSMOS_PRO, DEEPMOS)
VARIANCE_FLOOR = 1e-4
INITIAL_MEAN = 3.0

DEFAULT_WIDTHS = {
    DNSMOS_PRO: (16, 32, 64, 64),
    DEEPMOS: (16, 16, 16, 32, 32, 32, 64, 64, 64),
}


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianPrediction:
    mean: float
    variance: float

    @property
    def score(self) -> float:
        """Mean clamped to the 1-5 MOS scale, as reported."""
        return min(5.0, max(1.0, self.mean))


@dataclass
class ModelConfig:
    model_kind: str = DNSMOS_PRO
    widths: tuple = ()
    dropout_rate: float = 0.3
    head_hidden: int = 64
    lstm_hidden: int = 128
    n_bins: int = 257
    seed: int = 0

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ModelConfigError(f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}")
        if not self.widths:
            self.widths = DEFAULT_WIDTHS[self.model_kind]
        self.widths = tuple(int(w) for w in self.widths)
        if any(w < 1 for w in self.widths):
            raise ModelConfigError("channel widths must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ModelConfigError("dropout_rate must be in [0, 1)")
        if self.head_hidden < 1 or self.lstm_hidden < 1:
            raise ModelConfigError("hidden sizes must be >= 1")
        if self.model_kind == DEEPMOS and len(self.widths) % 3:
            raise ModelConfigError("deepmos widths come in groups of three conv layers")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: (tuple(v) if k == "widths" else v) for k, v in d.items()})


def _head_init(dense: ndiff.Dense):
    # start predictions mid-scale with softplus(0) variance
    dense.params["weight"] *= 0.1
    dense.params["bias"][0] = INITIAL_MEAN


def build_dnsmos_pro(cfg: ModelConfig) -> "QualityModel":
    """Conv blocks (conv3x3, BN, ReLU, 2x2 max-pool, dropout), global max, 2-layer head."""
    if cfg.model_kind != DNSMOS_PRO:
        raise ModelConfigError("build_dnsmos_pro needs model_kind='dnsmos_pro'")
    rng = np.random.default_rng(cfg.seed)
    layers = []
    prev = 1
    for width in cfg.widths:
        layers += [ndiff.Conv2d(prev, width, rng=rng), ndiff.BatchNorm(width), ndiff.ReLU(),
                   ndiff.MaxPool2d(), ndiff.Dropout(cfg.dropout_rate)]
        prev = width
    out = ndiff.Dense(cfg.head_hidden, 2, rng=rng)
    _head_init(out)
    layers += [ndiff.GlobalChannelMax(), ndiff.Dense(prev, cfg.head_hidden, rng=rng), ndiff.ReLU(),
               out, ndiff.Softplus(index=1, floor=VARIANCE_FLOOR)]
    return QualityModel(cfg, ndiff.Sequential(layers))


def deepmos_freq_bins(cfg: ModelConfig) -> int:
    f = cfg.n_bins
    for _ in range(len(cfg.widths) // 3):
        f = -(-f // 3)
    return f


def build_deepmos(cfg: ModelConfig) -> "QualityModel":
    """Conv3x3 + ReLU + dropout stack, every third layer strided (1, 3); BiLSTM; per-frame head."""
    if cfg.model_kind != DEEPMOS:
        raise ModelConfigError("build_deepmos needs model_kind='deepmos'")
    rng = np.random.default_rng(cfg.seed)
    layers = []
    prev = 1
    for i, width in enumerate(cfg.widths):
        stride = (1, 3) if i % 3 == 2 else (1, 1)
        layers += [ndiff.Conv2d(prev, width, stride=stride, rng=rng), ndiff.ReLU(),
                   ndiff.Dropout(cfg.dropout_rate)]
        prev = width
    out = ndiff.Dense(2 * cfg.lstm_hidden, 2, rng=rng)
    _head_init(out)
    layers += [ndiff.FrameFlatten(),
               ndiff.BiLSTM(prev * deepmos_freq_bins(cfg), cfg.lstm_hidden, rng=rng),
               out, ndiff.Softplus(index=1, floor=VARIANCE_FLOOR)]
    return QualityModel(cfg, ndiff.Sequential(layers))


def build_model(cfg: ModelConfig) -> "QualityModel":
    return build_dnsmos_pro(cfg) if cfg.model_kind == DNSMOS_PRO else build_deepmos(cfg)


def clip_score(frame_preds) -> GaussianPrediction:
    """Average frame means and frame variances into one clip-level Gaussian."""
    frame_preds = list(frame_preds)
    if not frame_preds:
        raise ValueError("clip_score needs at least one frame prediction")
    means = np.array([p.mean for p in frame_preds])
    variances = np.array([p.variance for p in frame_preds])
    return GaussianPrediction(float(means.mean()), float(variances.mean()))


class QualityModel:
    """A built graph plus the config that produced it."""

    def __init__(self, cfg: ModelConfig, graph: ndiff.Sequential):
        self.cfg = cfg
        self.graph = graph

    @property
    def kind(self) -> str:
        return self.cfg.model_kind

    @property
    def min_frames(self) -> int:
        return 2 ** len(self.cfg.widths) if self.kind == DNSMOS_PRO else 1

    def n_parameters(self) -> int:
        return self.graph.n_parameters()

    def dropout_layers(self):
        return [layer for layer in self.graph if isinstance(layer, ndiff.Dropout)]

    def set_dropout_rate(self, rate: float):
        for layer in self.dropout_layers():
            layer.rate = float(rate)
        self.cfg.dropout_rate = float(rate)

    def features(self, w: Waveform, stft_cfg: StftConfig = StftConfig()) -> np.ndarray:
        """Frames x bins input: log-magnitude for DNSMOS Pro, magnitude for DeePMOS."""
        spec = stft(w, stft_cfg)
        if self.kind == DNSMOS_PRO:
            spec = log_magnitude(spec)
        return spec.values

    @property
    def floor_value(self) -> float:
        return float(np.log(LOG_FLOOR)) if self.kind == DNSMOS_PRO else 0.0

    def forward(self, batch: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        """(N, T, F) features -> (N, 2) for DNSMOS Pro or (N, T, 2) for DeePMOS."""
        x = np.asarray(batch, dtype=np.float32)[..., None]
        return self.graph.forward(x, train=train, rng=rng)

    def predict_features(self, values: np.ndarray) -> GaussianPrediction:
        values = np.asarray(values)
        if values.shape[0] < self.min_frames:
            pad = np.full((self.min_frames - values.shape[0], values.shape[1]), self.floor_value)
            values = np.vstack([values, pad])
        out = self.forward(values[None])[0]
        if self.kind == DNSMOS_PRO:
            return GaussianPrediction(float(out[0]), float(out[1]))
        return clip_score(GaussianPrediction(float(m), float(v)) for m, v in out)

    def predict_frames(self, values: np.ndarray) -> list[GaussianPrediction]:
        if self.kind != DEEPMOS:
            raise ModelConfigError("frame-level predictions exist only for deepmos")
        out = self.forward(np.asarray(values)[None])[0]
        return [GaussianPrediction(float(m), float(v)) for m, v in out]

    def save(self, directory, meta: dict | None = None):
        doc = {"model_kind": self.kind, "model_config": self.cfg.to_dict()}
        doc.update(meta or {})
        ndiff.save_graph(self.graph, directory, doc)

    @classmethod
    def load(cls, directory) -> "QualityModel":
        graph, doc = ndiff.load_graph(directory)
        return cls(ModelConfig.from_dict(doc["model_config"]), graph)

    def copy(self) -> "QualityModel":
        clone = build_model(ModelConfig.from_dict(self.cfg.to_dict()))
        clone.graph.load_state(self.graph.state())
        for src, dst in zip(self.dropout_layers(), clone.dropout_layers()):
            dst.rate = src.rate
        return clone


def predict(model: QualityModel, w: Waveform, stft_cfg: StftConfig = StftConfig()) -> GaussianPrediction:
    """Eval-mode, full-length clip prediction."""
    if len(w.samples) < stft_cfg.window_len:
        raise TooShortError(f"clip has {len(w.samples)} samples, need {stft_cfg.window_len}")
    return model.predict_features(model.features(w, stft_cfg))


def read_model_kind(directory) -> str:
    with open(os.path.join(directory, "model.json")) as fh:
        return json.load(fh)["model_kind"]
