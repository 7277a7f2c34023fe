"""Speech-like clean clips for desk-scale runs when no clean corpus is at hand.

Clips alternate voiced syllables (glottal pulse trains through
three formant resonators), short unvoiced bursts and pauses over a -60 dB
noise floor.
"""

from __future__ import annotations

import os

import numpy as np
from scipy import signal

from .audio_io import CANONICAL_RATE, Waveform, write_wav

_VOWEL_FORMANTS = (
    (730, 1090, 2440),
    (270, 2290, 3010),
    (300, 870, 2240),
    (530, 1840, 2480),
    (570, 840, 2410),
    (660, 1720, 2410),
)


def _resonator(freq: float, bw: float, sr: int):
    r = np.exp(-np.pi * bw / sr)
    theta = 2.0 * np.pi * freq / sr
    return [1.0 - r], [1.0, -2.0 * r * np.cos(theta), r * r]


def _voiced(n: int, rng: np.random.Generator, sr: int) -> np.ndarray:
    f0 = rng.uniform(90.0, 240.0)
    contour = f0 * (1.0 + 0.15 * np.sin(np.linspace(0, np.pi * rng.uniform(0.5, 2.0), n)))
    contour *= 1.0 + 0.01 * rng.standard_normal(n)
    phase = np.cumsum(contour / sr)
    pulses = np.diff(np.floor(phase), prepend=0.0)
    src = signal.lfilter([1.0], [1.0, -0.95], pulses)
    out = np.zeros(n)
    for k, formant in enumerate(_VOWEL_FORMANTS[int(rng.integers(len(_VOWEL_FORMANTS)))]):
        b, a = _resonator(formant * rng.uniform(0.92, 1.08), 80.0 + 40.0 * k, sr)
        out += signal.lfilter(b, a, src) / (k + 1)
    env = np.sin(np.linspace(0.0, np.pi, n)) ** 0.6
    return out * env


def _unvoiced(n: int, rng: np.random.Generator, sr: int) -> np.ndarray:
    sos = signal.butter(2, [2500.0, min(7000.0, sr / 2 - 100)], "bandpass", fs=sr, output="sos")
    env = np.sin(np.linspace(0.0, np.pi, n))
    return signal.sosfilt(sos, rng.standard_normal(n)) * env * 0.3


def synth_speech(duration_s: float, rng: np.random.Generator, sr: int = CANONICAL_RATE) -> Waveform:
    n = int(round(duration_s * sr))
    x = np.zeros(n)
    pos = int(rng.integers(0, int(0.1 * sr)))
    while pos < n:
        kind = rng.random()
        if kind < 0.65:
            seg = int(rng.uniform(0.12, 0.30) * sr)
            part = _voiced(seg, rng, sr)
        elif kind < 0.85:
            seg = int(rng.uniform(0.05, 0.12) * sr)
            part = _unvoiced(seg, rng, sr)
        else:
            seg = int(rng.uniform(0.05, 0.20) * sr)
            part = np.zeros(seg)
        end = min(n, pos + seg)
        x[pos:end] += part[:end - pos]
        pos = end
    peak = np.max(np.abs(x))
    if peak > 0:
        x *= rng.uniform(0.3, 0.7) / peak
    x += 1e-3 * np.std(x) * rng.standard_normal(n)
    return Waveform(x, sr)


def write_clean_corpus(out_dir, n_clips: int, duration_s: float = 2.0, seed: int = 0) -> list[str]:
    """Write ``n_clips`` synthetic clean clips as float32 WAVs; returns their paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i in range(n_clips):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        path = os.path.join(out_dir, f"clean_{i:05d}.wav")
        write_wav(synth_speech(duration_s, rng), path)
        paths.append(path)
    return paths
