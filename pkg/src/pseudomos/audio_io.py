"""WAV reading/writing and band-limited resampling for mono speech clips."""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import i0

CANONICAL_RATE = 16000

_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_IEEE_FLOAT = 0x0003
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE

RESAMPLE_TAPS = 32
KAISER_BETA = 8.6


class AudioError(Exception):
    pass


class WavFormatError(AudioError):
    """The file is not a well-formed RIFF/WAVE container."""


class UnsupportedCodecError(AudioError):
    pass


class EmptyClipError(AudioError):
    pass


class ValidationError(AudioError, ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Waveform:
    """Mono samples (float64, nominal range [-1, 1]) at ``sample_rate`` Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if int(self.sample_rate) <= 0:
            raise ValidationError(f"sample_rate must be positive, got {self.sample_rate}")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValidationError("Waveform samples must be one-dimensional")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration_seconds(self) -> float:
        return len(self.samples) / self.sample_rate

    def with_samples(self, samples) -> "Waveform":
        return Waveform(samples, self.sample_rate)


def _iter_chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack("<4sI", data[pos:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        yield cid, body
        pos += 8 + size + (size & 1)


def decode_wav(data: bytes) -> Waveform:
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError("missing RIFF/WAVE header")
    fmt = None
    payload = None
    for cid, body in _iter_chunks(data):
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            payload = body
    if fmt is None or len(fmt) < 16:
        raise WavFormatError("missing or truncated fmt chunk")
    if payload is None:
        raise WavFormatError("missing data chunk")

    tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", fmt[:16])
    if tag == _WAVE_FORMAT_EXTENSIBLE:
        if len(fmt) < 26:
            raise WavFormatError("truncated WAVE_FORMAT_EXTENSIBLE header")
        tag = struct.unpack("<H", fmt[24:26])[0]
    if channels not in (1, 2):
        raise UnsupportedCodecError(f"{channels} channels not supported")
    if rate <= 0:
        raise WavFormatError("sample rate is zero")

    if tag == _WAVE_FORMAT_PCM and bits == 16:
        dtype = np.dtype("<i2")
        scale = 1.0 / 32768.0
    elif tag == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        dtype = np.dtype("<f4")
        scale = None
    else:
        raise UnsupportedCodecError(f"format tag {tag:#06x} with {bits} bits not supported")

    frame_bytes = dtype.itemsize * channels
    n_frames = len(payload) // frame_bytes
    if n_frames == 0:
        raise EmptyClipError("WAV data chunk holds no samples")
    raw = np.frombuffer(payload[:n_frames * frame_bytes], dtype=dtype).astype(np.float64)
    if scale is not None:
        raw *= scale
    if channels == 2:
        raw = raw.reshape(n_frames, 2).mean(axis=1)
    return Waveform(raw, rate)


def read_wav(path) -> Waveform:
    """Read a PCM16 or float32 WAV file as a mono waveform.

    Stereo input is averaged to mono; PCM16 is scaled by 1/32768.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    return decode_wav(data)


def _validate_for_write(w: Waveform) -> np.ndarray:
    if len(w.samples) == 0:
        raise ValidationError("cannot write an empty waveform")
    if not np.all(np.isfinite(w.samples)):
        raise ValidationError("waveform contains non-finite samples")
    return w.samples.astype("<f4")


def encode_wav(w: Waveform) -> bytes:
    """Serialize as an IEEE-float32 mono WAV byte string."""
    pcm = _validate_for_write(w).tobytes()
    n = len(w.samples)
    fmt = struct.pack("<HHIIHHH", _WAVE_FORMAT_IEEE_FLOAT, 1, w.sample_rate,
                      w.sample_rate * 4, 4, 32, 0)
    buf = io.BytesIO()
    riff_size = 4 + (8 + len(fmt)) + (8 + 4) + (8 + len(pcm))
    buf.write(struct.pack("<4sI4s", b"RIFF", riff_size, b"WAVE"))
    buf.write(struct.pack("<4sI", b"fmt ", len(fmt)) + fmt)
    buf.write(struct.pack("<4sII", b"fact", 4, n))
    buf.write(struct.pack("<4sI", b"data", len(pcm)) + pcm)
    return buf.getvalue()


def write_wav(w: Waveform, path) -> None:
    data = encode_wav(w)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _kaiser_sinc(d: np.ndarray, cutoff: float, half_width: float) -> np.ndarray:
    # cutoff in cycles per input sample
    window = np.zeros_like(d)
    inside = np.abs(d) <= half_width
    window[inside] = i0(KAISER_BETA * np.sqrt(1.0 - (d[inside] / half_width) ** 2)) / i0(KAISER_BETA)
    return 2.0 * cutoff * np.sinc(2.0 * cutoff * d) * window


def resample_array(x: np.ndarray, source_rate: float, target_rate: float,
                   out_len: int | None = None) -> np.ndarray:
    """Windowed-sinc interpolation of ``x`` from ``source_rate`` to ``target_rate``.

    Rates may be non-integer (used internally by pitch shifting). Each output
    sample is a normalized weighted sum of the 32 nearest input samples.
    """
    x = np.asarray(x, dtype=np.float64)
    if source_rate == target_rate and out_len in (None, len(x)):
        return x.copy()
    ratio = target_rate / source_rate
    if out_len is None:
        out_len = int(round(len(x) * ratio))
    cutoff = 0.5 * min(1.0, ratio)
    half = RESAMPLE_TAPS // 2
    padded = np.concatenate([np.zeros(half), x, np.zeros(half + 1)])
    out = np.empty(out_len)
    offsets = np.arange(-half + 1, half + 1)
    chunk = 32768
    for start in range(0, out_len, chunk):
        n = np.arange(start, min(start + chunk, out_len))
        t = n / ratio
        base = np.floor(t).astype(np.int64)
        idx = base[:, None] + offsets[None, :]
        h = _kaiser_sinc(t[:, None] - idx, cutoff, float(half))
        norm = h.sum(axis=1, keepdims=True)
        norm[np.abs(norm) < 1e-12] = 1.0
        taps = padded[np.clip(idx + half, 0, len(padded) - 1)]
        out[n] = np.einsum("ij,ij->i", taps, h / norm)
    return out


def resample(w: Waveform, target_rate: int) -> Waveform:
    if target_rate <= 0:
        raise ValidationError("target_rate must be positive")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    return Waveform(resample_array(w.samples, w.sample_rate, target_rate), target_rate)


def load_canonical(path) -> Waveform:
    """Read a clip and bring it to the 16 kHz pipeline rate."""
    w = read_wav(path)
    if w.sample_rate != CANONICAL_RATE:
        w = resample(w, CANONICAL_RATE)
    return w
