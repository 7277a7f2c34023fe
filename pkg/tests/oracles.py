"""Reference computations written independently of the package, for cross-checking."""

from __future__ import annotations

import math

import numpy as np


def brute_pcc(x, y) -> float:
    n = len(x)
    mx = math.fsum(x) / n
    my = math.fsum(y) / n
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def brute_ranks(x) -> list[float]:
    """Average ranks by pairwise counting: rank = 1 + #smaller + (#equal - 1) / 2."""
    out = []
    for a in x:
        smaller = sum(1 for b in x if b < a)
        equal = sum(1 for b in x if b == a)
        out.append(1.0 + smaller + (equal - 1) / 2.0)
    return out


def brute_srcc(x, y) -> float:
    return brute_pcc(brute_ranks(x), brute_ranks(y))


def energy_snr_db(clean, noisy) -> float:
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noisy, dtype=np.float64) - clean
    return 10.0 * math.log10(np.sum(clean ** 2) / np.sum(noise ** 2))


def rms(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.mean(x * x)))


def spectral_peak_hz(x, sr: int) -> float:
    """Peak frequency from a Hann-windowed, 8x zero-padded FFT with parabolic refinement."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    nfft = 8 * (1 << int(math.ceil(math.log2(n))))
    mag = np.abs(np.fft.rfft(x * np.hanning(n), n=nfft))
    k = int(np.argmax(mag[1:-1])) + 1
    a, b, c = np.log(mag[k - 1:k + 2] + 1e-300)
    shift = 0.5 * (a - c) / (a - 2 * b + c) if (a - 2 * b + c) != 0 else 0.0
    return (k + shift) * sr / nfft


def schroeder_rt60(ir, sr: int, lo_db: float = -5.0, hi_db: float = -25.0) -> float:
    """RT60 from the backward-integrated energy decay curve, line fit between two levels."""
    e = np.asarray(ir, dtype=np.float64) ** 2
    edc = np.cumsum(e[::-1])[::-1]
    edc_db = 10.0 * np.log10(edc / edc[0] + 1e-300)
    idx = np.where((edc_db <= lo_db) & (edc_db >= hi_db))[0]
    t = idx / sr
    slope, _ = np.polyfit(t, edc_db[idx], 1)
    return -60.0 / slope


def central_difference(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """d f(x) / dx elementwise for scalar-valued f, perturbing ``x`` in place.

    Fourth-order central stencil: truncation error O(h^4), so near-zero
    gradient entries are still resolved well below the 1e-4 check.
    """
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        vals = []
        for step in (2.0 * h, h, -h, -2.0 * h):
            flat[i] = old + step
            vals.append(f())
        flat[i] = old
        g[i] = (-vals[0] + 8.0 * vals[1] - 8.0 * vals[2] + vals[3]) / (12.0 * h)
    return grad


def max_relative_error(a, b, floor: float = 1e-6) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
