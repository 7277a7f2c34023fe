"""Magnitude and log-magnitude spectrograms, fixed-length batching, feature cache."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .audio_io import Waveform

LOG_FLOOR = 1e-8
MAGNITUDE = "magnitude"
LOG_MAGNITUDE = "log_magnitude"
_KIND_CODES = {MAGNITUDE: 0, LOG_MAGNITUDE: 1}


class FeatureError(ValueError):
    pass


class TooShortError(FeatureError):
    pass


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 512
    hop: int = 256
    fft_len: int = 512

    def __post_init__(self):
        if self.fft_len < self.window_len:
            raise FeatureError("fft_len must be >= window_len")
        if not 0 < self.hop <= self.window_len:
            raise FeatureError("hop must be in (0, window_len]")

    @property
    def n_bins(self) -> int:
        return self.fft_len // 2 + 1

    def window(self) -> np.ndarray:
        # periodic Hann
        n = np.arange(self.window_len)
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / self.window_len)


@dataclass(frozen=True, eq=False)
class Spectrogram:
    values: np.ndarray  # frames x bins
    bin_hz: float
    frame_hop_s: float
    kind: str = MAGNITUDE

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def floor_value(self) -> float:
        return 0.0 if self.kind == MAGNITUDE else float(np.log(LOG_FLOOR))

    def with_values(self, values) -> "Spectrogram":
        return Spectrogram(values, self.bin_hz, self.frame_hop_s, self.kind)


def n_frames_for(n_samples: int, cfg: StftConfig) -> int:
    if n_samples < cfg.window_len:
        return 0
    return 1 + (n_samples - cfg.window_len) // cfg.hop


def stft(w: Waveform, cfg: StftConfig = StftConfig()) -> Spectrogram:
    """Hann-windowed STFT magnitude, no centering padding."""
    x = w.samples
    if len(x) < cfg.window_len:
        raise TooShortError(f"clip has {len(x)} samples, need at least {cfg.window_len}")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.window_len)[::cfg.hop]
    spec = np.abs(np.fft.rfft(frames * cfg.window(), n=cfg.fft_len, axis=1))
    return Spectrogram(spec, w.sample_rate / cfg.fft_len, cfg.hop / w.sample_rate, MAGNITUDE)


def log_magnitude(s: Spectrogram) -> Spectrogram:
    if s.kind != MAGNITUDE:
        raise TypeError(f"log_magnitude expects a magnitude spectrogram, got {s.kind}")
    return Spectrogram(np.log(np.maximum(s.values, LOG_FLOOR)), s.bin_hz, s.frame_hop_s,
                       LOG_MAGNITUDE)


def pad_or_crop_array(values: np.ndarray, frames: int, floor: float,
                      rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Return a ``frames``-long view/copy of ``values`` and the count of real frames."""
    if frames <= 0:
        raise FeatureError("frames must be positive")
    n = values.shape[0]
    if n == frames:
        return values, n
    if n > frames:
        start = int(rng.integers(0, n - frames + 1))
        return values[start:start + frames], frames
    out = np.full((frames,) + values.shape[1:], floor, dtype=values.dtype)
    out[:n] = values
    return out, n


def pad_or_crop(s: Spectrogram, frames: int, rng: np.random.Generator) -> Spectrogram:
    values, _ = pad_or_crop_array(s.values, frames, s.floor_value, rng)
    return s.with_values(values)


def save_features(s: Spectrogram, path) -> None:
    frames, bins = s.values.shape
    header = struct.pack("<IIB", frames, bins, _KIND_CODES[s.kind])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(s.values, dtype="<f4").tobytes())


def load_features(path, bin_hz: float = 16000 / 512, frame_hop_s: float = 256 / 16000) -> Spectrogram:
    with open(path, "rb") as fh:
        data = fh.read()
    frames, bins, code = struct.unpack("<IIB", data[:9])
    kind = {v: k for k, v in _KIND_CODES.items()}[code]
    values = np.frombuffer(data[9:], dtype="<f4").reshape(frames, bins).astype(np.float64)
    return Spectrogram(values, bin_hz, frame_hop_s, kind)
