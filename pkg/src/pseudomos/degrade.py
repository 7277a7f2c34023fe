"""Simulated conferencing impairments: the 16 LibriAugmented conditions.

Every operation works on 16 kHz float64 waveforms and takes any randomness
from an explicit ``numpy.random.Generator`` so results are reproducible per
clip regardless of call order.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from .audio_io import CANONICAL_RATE, AudioError, Waveform, load_canonical, resample_array

log = logging.getLogger(__name__)

IDENTITY = "Identity"
NOISE = "AddBackgroundNoise"
CLIPPING = "ClippingImpairment"
GAIN = "GainTransition"
LOWPASS = "LowPassFilter"
MP3 = "Mp3Compression"
PITCH = "PitchShift"
ROOM = "RoomSimulator"
MASK = "TimeMask"
STRETCH = "TimeStretch"

SINGLE_CONDITIONS = (IDENTITY, NOISE, CLIPPING, GAIN, LOWPASS, MP3, PITCH, ROOM, MASK, STRETCH)

PAIR_CONDITIONS = {
    "Noise+Room": (NOISE, ROOM),
    "Noise+LPF": (NOISE, LOWPASS),
    "Noise+TimeStretch": (NOISE, STRETCH),
    "Room+Mp3": (ROOM, MP3),
    "PitchShift+LPF": (PITCH, LOWPASS),
    "GainTransition+TimeMask": (GAIN, MASK),
}

CONDITIONS = SINGLE_CONDITIONS + tuple(PAIR_CONDITIONS)

# Ratio column as printed; sums to 0.998 and is renormalized below.
RAW_RATIOS = {c: 0.050 for c in SINGLE_CONDITIONS}
RAW_RATIOS.update({c: 0.083 for c in PAIR_CONDITIONS})

_total = sum(RAW_RATIOS.values())
CONDITION_WEIGHTS = {c: r / _total for c, r in RAW_RATIOS.items()}

PARAM_RANGES = {
    "snr_db": (-10.0, 15.0),
    "clip_percentile": (10.0, 40.0),
    "gain_db": (-60.0, 20.0),
    "cutoff_hz": (500.0, 1000.0),
    "bit_rate_kbps": (8.0, 14.0),
    "semitones": (-4.0, 4.0),
    "rt60_s": (0.8, 1.5),
    "band_part": (0.2, 0.5),
    "rate": (0.5, 2.0),
}

CONDITION_PARAMS = {
    IDENTITY: (),
    NOISE: ("snr_db",),
    CLIPPING: ("clip_percentile",),
    GAIN: ("gain_db",),
    LOWPASS: ("cutoff_hz",),
    MP3: ("bit_rate_kbps",),
    PITCH: ("semitones",),
    ROOM: ("rt60_s",),
    MASK: ("band_part",),
    STRETCH: ("rate",),
}


class DegradationError(ValueError):
    pass


class DegenerateNoiseError(DegradationError):
    pass


def constituents(condition: str) -> tuple[str, ...]:
    if condition in PAIR_CONDITIONS:
        return PAIR_CONDITIONS[condition]
    if condition in CONDITION_PARAMS:
        return (condition,)
    raise DegradationError(f"unknown condition {condition!r}")


@dataclass
class DegradationSpec:
    condition: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        needed = [p for c in constituents(self.condition) for p in CONDITION_PARAMS[c]]
        missing = [p for p in needed if p not in self.params]
        if missing:
            raise DegradationError(f"{self.condition} is missing parameters {missing}")

    def to_dict(self) -> dict:
        return {"condition": self.condition, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationSpec":
        return cls(d["condition"], {k: float(v) for k, v in d.get("params", {}).items()})


def child_rng(seed: int, index: int) -> np.random.Generator:
    """Independent per-clip stream; depends only on (seed, index)."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(index),)))


def sample_spec(rng: np.random.Generator, conditions=None) -> DegradationSpec:
    """Draw a condition by the renormalized ratios, then each parameter uniformly.

    ``conditions`` restricts the draw to a subset (weights renormalized over it).
    """
    names = list(CONDITIONS if conditions is None else conditions)
    p = np.array([CONDITION_WEIGHTS[c] for c in names])
    condition = names[int(rng.choice(len(names), p=p / p.sum()))]
    params = {}
    for c in constituents(condition):
        for name in CONDITION_PARAMS[c]:
            lo, hi = PARAM_RANGES[name]
            params[name] = float(rng.uniform(lo, hi))
    return DegradationSpec(condition, params)


# ---------------------------------------------------------------- noise sources

NOISE_KINDS = ("white", "pink", "speech_shaped")


def generate_noise(kind: str, n: int, rng: np.random.Generator, sr: int = CANONICAL_RATE) -> np.ndarray:
    white = rng.standard_normal(n)
    if kind == "white":
        return white
    if kind == "pink":
        spec = np.fft.rfft(white)
        f = np.arange(len(spec), dtype=np.float64)
        f[0] = 1.0
        return np.fft.irfft(spec / np.sqrt(f), n=n)
    if kind == "speech_shaped":
        # rough long-term speech spectrum: 100 Hz high-pass, 6 dB/oct roll-off above ~500 Hz
        sos = np.vstack([signal.butter(2, 100, "highpass", fs=sr, output="sos"),
                         signal.butter(1, 500, "lowpass", fs=sr, output="sos")])
        return signal.sosfilt(sos, white)
    raise DegradationError(f"unknown noise kind {kind!r}")


class NoiseBank:
    """Built-in noise generators plus optional WAV files from a directory."""

    def __init__(self, noise_dir=None):
        self.files = []
        if noise_dir is not None:
            for name in sorted(os.listdir(noise_dir)):
                if not name.lower().endswith(".wav"):
                    continue
                path = os.path.join(noise_dir, name)
                try:
                    w = load_canonical(path)
                except (AudioError, OSError) as exc:
                    log.warning("skipping noise file %s: %s", path, exc)
                    continue
                if np.any(w.samples != 0):
                    self.files.append(w.samples)

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        k = int(rng.integers(0, len(NOISE_KINDS) + len(self.files)))
        if k < len(NOISE_KINDS):
            return generate_noise(NOISE_KINDS[k], n, rng)
        src = self.files[k - len(NOISE_KINDS)]
        offset = int(rng.integers(0, len(src)))
        return np.resize(np.roll(src, -offset), n)


# ---------------------------------------------------------------- operations

def _energy(x: np.ndarray) -> float:
    return float(np.dot(x, x))


def add_noise(w: Waveform, snr_db: float, noise) -> Waveform:
    """Add ``noise`` scaled so the full-clip speech/noise energy ratio equals ``snr_db``."""
    if not math.isfinite(snr_db):
        raise DegradationError("snr_db must be finite")
    n = np.asarray(noise.samples if isinstance(noise, Waveform) else noise, dtype=np.float64)
    n = np.resize(n, len(w.samples))
    e_noise = _energy(n)
    if e_noise == 0.0:
        raise DegenerateNoiseError("noise source is silent")
    gain = math.sqrt(_energy(w.samples) / (e_noise * 10.0 ** (snr_db / 10.0)))
    return w.with_samples(w.samples + gain * n)


def clip_impair(w: Waveform, percentile: float) -> Waveform:
    """Clamp at the (100 - percentile)-th percentile of absolute amplitude."""
    x = w.samples
    if not np.any(x):
        return w.with_samples(x.copy())
    t = np.percentile(np.abs(x), 100.0 - percentile)
    return w.with_samples(np.clip(x, -t, t))


def draw_segment(n: int, fraction: float, rng: np.random.Generator) -> tuple[int, int]:
    length = int(round(fraction * n))
    start = int(rng.integers(0, n - length + 1))
    return start, length


def gain_transition(w: Waveform, gain_db: float, rng: np.random.Generator | None = None,
                    segment: tuple[int, int] | None = None) -> Waveform:
    """Ramp gain linearly in dB from 0 to ``gain_db`` over a segment, holding it after.

    The segment covers a uniform 20-80% of the clip at a uniform position unless
    ``segment=(start, length)`` pins it.
    """
    n = len(w.samples)
    if segment is None:
        frac = rng.uniform(0.2, 0.8)
        segment = draw_segment(n, frac, rng)
    start, length = segment
    gain = np.zeros(n)
    if length > 0:
        gain[start:start + length] = np.linspace(0.0, gain_db, length, endpoint=False)
    gain[start + length:] = gain_db
    return w.with_samples(w.samples * 10.0 ** (gain / 20.0))


def low_pass(w: Waveform, cutoff_hz: float) -> Waveform:
    """4th-order Butterworth low-pass as two cascaded biquads."""
    sos = signal.butter(4, cutoff_hz, "lowpass", fs=w.sample_rate, output="sos")
    return w.with_samples(signal.sosfilt(sos, w.samples))


def _hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _cstft(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    pad = n_fft // 2
    total = len(x) + 2 * pad
    extra = (-(total - n_fft)) % hop
    padded = np.concatenate([np.zeros(pad), x, np.zeros(pad + extra)])
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop]
    return np.fft.rfft(frames * _hann(n_fft), axis=1)


def _cistft(spec: np.ndarray, n_fft: int, hop: int, length: int) -> np.ndarray:
    win = _hann(n_fft)
    frames = np.fft.irfft(spec, n=n_fft, axis=1) * win
    n_out = n_fft + hop * (len(frames) - 1)
    y = np.zeros(n_out)
    norm = np.zeros(n_out)
    for i, fr in enumerate(frames):
        y[i * hop:i * hop + n_fft] += fr
        norm[i * hop:i * hop + n_fft] += win ** 2
    nz = norm > 1e-8
    y[nz] /= norm[nz]
    y = y[n_fft // 2:]
    if len(y) >= length:
        return y[:length]
    return np.concatenate([y, np.zeros(length - len(y))])


def mp3_bandwidth(bit_rate_kbps: float) -> float:
    return 2800.0 + 400.0 * (bit_rate_kbps - 8.0)


MP3_QUANT_SCALE = 0.4


def mp3_like(w: Waveform, bit_rate_kbps: float) -> Waveform:
    """Codec-artifact stand-in: band-limit plus coarse per-frame magnitude quantization."""
    n_fft, hop = 512, 128
    spec = _cstft(w.samples, n_fft, hop)
    freqs = np.fft.rfftfreq(n_fft, 1.0 / w.sample_rate)
    spec[:, freqs > mp3_bandwidth(bit_rate_kbps)] = 0.0
    mag = np.abs(spec)
    peak = mag.max(axis=1, keepdims=True)
    step = (MP3_QUANT_SCALE / bit_rate_kbps) * np.where(peak > 0, peak, 1.0)
    qmag = np.round(mag / step) * step
    with np.errstate(invalid="ignore", divide="ignore"):
        spec = np.where(mag > 0, spec * (qmag / np.where(mag > 0, mag, 1.0)), 0.0)
    return w.with_samples(_cistft(spec, n_fft, hop, len(w.samples)))


PV_FFT = 1024
PV_HOP = 256


def _phase_vocoder(x: np.ndarray, rate: float) -> np.ndarray:
    out_len = int(round(len(x) / rate))
    spec = _cstft(x, PV_FFT, PV_HOP)
    steps = np.arange(0.0, spec.shape[0], rate)
    spec = np.vstack([spec, np.zeros((1, spec.shape[1]), dtype=spec.dtype)])
    idx = steps.astype(np.int64)
    alpha = (steps - idx)[:, None]
    c0, c1 = spec[idx], spec[idx + 1]
    mag = (1.0 - alpha) * np.abs(c0) + alpha * np.abs(c1)
    advance = 2.0 * np.pi * PV_HOP * np.arange(spec.shape[1]) / PV_FFT
    dphase = np.angle(c1) - np.angle(c0) - advance
    dphase -= 2.0 * np.pi * np.round(dphase / (2.0 * np.pi))
    increments = advance + dphase
    phase = np.angle(spec[0]) + np.vstack([np.zeros((1, spec.shape[1])),
                                           np.cumsum(increments[:-1], axis=0)])
    return _cistft(mag * np.exp(1j * phase), PV_FFT, PV_HOP, out_len)


def time_stretch(w: Waveform, rate: float) -> Waveform:
    """Phase-vocoder stretch; ``rate`` is a speed factor (2.0 halves duration)."""
    if rate == 1.0:
        return w.with_samples(w.samples.copy())
    return w.with_samples(_phase_vocoder(w.samples, rate))


def pitch_shift(w: Waveform, semitones: float) -> Waveform:
    """Shift pitch by stretching 2**(s/12) longer, then resampling to the original length."""
    if semitones == 0.0:
        return w.with_samples(w.samples.copy())
    factor = 2.0 ** (semitones / 12.0)
    stretched = _phase_vocoder(w.samples, 1.0 / factor)
    shifted = resample_array(stretched, w.sample_rate * factor, w.sample_rate,
                             out_len=len(w.samples))
    return w.with_samples(shifted)


def room_impulse_response(rt60_s: float, rng: np.random.Generator,
                          sr: int = CANONICAL_RATE) -> np.ndarray:
    """Unit direct path followed by an exponentially decaying Gaussian tail.

    Tail energy decays 60 dB over ``rt60_s`` and its total equals the direct-path
    energy (0 dB direct-to-reverberant ratio).
    """
    n = int(math.ceil(rt60_s * sr))
    t = np.arange(n) / sr
    tail = rng.standard_normal(n) * 10.0 ** (-3.0 * t / rt60_s)
    tail[0] = 0.0
    tail *= 1.0 / math.sqrt(_energy(tail))
    tail[0] = 1.0
    return tail


def room_simulate(w: Waveform, rt60_s: float, rng: np.random.Generator) -> Waveform:
    rir = room_impulse_response(rt60_s, rng, w.sample_rate)
    wet = signal.fftconvolve(w.samples, rir)[:len(w.samples)]
    return w.with_samples(wet)


MASK_FADE_S = 0.005


def time_mask(w: Waveform, band_part: float, rng: np.random.Generator | None = None,
              start: int | None = None) -> Waveform:
    """Zero a contiguous ``band_part`` fraction of the clip.

    5 ms linear fades sit just outside the zeroed segment so the segment itself
    is exactly silent.
    """
    x = w.samples
    n = len(x)
    if n < int(0.020 * w.sample_rate):
        return w.with_samples(x.copy())
    length = int(round(band_part * n))
    if start is None:
        start = int(rng.integers(0, n - length + 1))
    fade = int(round(MASK_FADE_S * w.sample_rate))
    gain = np.ones(n)
    gain[start:start + length] = 0.0
    ramp = np.linspace(1.0, 0.0, fade + 1)[1:]
    lo = max(0, start - fade)
    gain[lo:start] = ramp[fade - (start - lo):]
    hi = min(n, start + length + fade)
    gain[start + length:hi] = ramp[::-1][:hi - start - length]
    return w.with_samples(x * gain)


# ---------------------------------------------------------------- dispatch

def _apply_single(w: Waveform, condition: str, params: dict, rng: np.random.Generator,
                  noise_bank: NoiseBank) -> Waveform:
    if condition == IDENTITY:
        return w
    if condition == NOISE:
        return add_noise(w, params["snr_db"], noise_bank.draw(len(w), rng))
    if condition == CLIPPING:
        return clip_impair(w, params["clip_percentile"])
    if condition == GAIN:
        return gain_transition(w, params["gain_db"], rng)
    if condition == LOWPASS:
        return low_pass(w, params["cutoff_hz"])
    if condition == MP3:
        return mp3_like(w, params["bit_rate_kbps"])
    if condition == PITCH:
        return pitch_shift(w, params["semitones"])
    if condition == ROOM:
        return room_simulate(w, params["rt60_s"], rng)
    if condition == MASK:
        return time_mask(w, params["band_part"], rng)
    if condition == STRETCH:
        return time_stretch(w, params["rate"])
    raise DegradationError(f"unknown condition {condition!r}")


_DEFAULT_BANK = NoiseBank()


def apply(w: Waveform, spec: DegradationSpec, rng: np.random.Generator,
          noise_bank: NoiseBank | None = None) -> Waveform:
    """Apply ``spec`` (pairs left to right) and rescale if the peak exceeds 1."""
    if w.sample_rate != CANONICAL_RATE:
        raise DegradationError(f"expected {CANONICAL_RATE} Hz input, got {w.sample_rate}")
    bank = noise_bank or _DEFAULT_BANK
    out = w
    for c in constituents(spec.condition):
        out = _apply_single(out, c, spec.params, rng, bank)
    peak = float(np.max(np.abs(out.samples))) if len(out.samples) else 0.0
    if peak > 1.0:
        out = out.with_samples(out.samples / peak)
    return out
