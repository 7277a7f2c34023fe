import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pseudomos.audio_io import Waveform
from pseudomos.features import (
    LOG_FLOOR, LOG_MAGNITUDE, MAGNITUDE, FeatureError, Spectrogram, StftConfig, TooShortError,
    load_features, log_magnitude, n_frames_for, pad_or_crop, save_features, stft,
)

from conftest import tone


def test_config_defaults_and_validation():
    cfg = StftConfig()
    assert (cfg.window_len, cfg.hop, cfg.fft_len, cfg.n_bins) == (512, 256, 512, 257)
    with pytest.raises(FeatureError):
        StftConfig(window_len=512, fft_len=256)
    with pytest.raises(FeatureError):
        StftConfig(hop=600)


def test_sine_peak_bin():
    s = stft(Waveform(tone(1000, 1.0), 16000))
    assert s.values.shape[1] == 257
    assert np.all(s.values.argmax(axis=1) == 32)


def test_zero_input():
    s = stft(Waveform(np.zeros(4000), 16000))
    assert np.all(s.values == 0.0)


def test_parseval_energy(rng):
    x = rng.standard_normal(16000 * 2)
    cfg = StftConfig()
    s = stft(Waveform(x, 16000), cfg)
    w = cfg.window()
    # one-sided spectrum: count interior bins twice
    power = s.values ** 2
    total = power[:, 0] + power[:, -1] + 2 * power[:, 1:-1].sum(axis=1)
    est = total.sum() / (cfg.fft_len * np.sum(w ** 2) / cfg.window_len)
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.window_len)[::cfg.hop]
    assert abs(est / np.sum(frames ** 2) - 1) <= 0.01


def test_too_short():
    with pytest.raises(TooShortError):
        stft(Waveform(np.zeros(511), 16000))


@settings(max_examples=50, deadline=None)
@given(st.integers(512, 5000))
def test_frame_count_formula(n):
    s = stft(Waveform(np.zeros(n), 16000))
    assert s.n_frames == 1 + (n - 512) // 256 == n_frames_for(n, StftConfig())


def test_amplitude_linearity(rng):
    x = rng.standard_normal(3000)
    a = stft(Waveform(x, 16000)).values
    b = stft(Waveform(2 * x, 16000)).values
    assert np.array_equal(b, 2 * a)


def test_log_magnitude_values():
    s = Spectrogram(np.array([[1.0, 0.0, math.e]]), 31.25, 0.016, MAGNITUDE)
    out = log_magnitude(s)
    assert out.kind == LOG_MAGNITUDE
    assert out.values[0, 0] == 0.0
    assert math.isclose(out.values[0, 1], math.log(1e-8))
    assert math.isclose(out.values[0, 2], 1.0)
    assert math.isclose(out.values[0, 1], -18.42, abs_tol=0.005)
    with pytest.raises(TypeError):
        log_magnitude(out)


def test_log_round_trip(rng):
    v = rng.uniform(1e-7, 10, size=(5, 7))
    back = np.exp(log_magnitude(Spectrogram(v, 1, 1)).values)
    assert np.max(np.abs(back / v - 1)) <= 1e-12


def test_pad_or_crop_contracts(rng):
    s = Spectrogram(rng.uniform(0, 1, size=(100, 4)), 1, 1, MAGNITUDE)
    same = pad_or_crop(s.with_values(s.values[:60]), 60, rng)
    assert np.array_equal(same.values, s.values[:60])
    crop = pad_or_crop(s, 60, rng).values
    starts = [i for i in range(41) if np.array_equal(s.values[i:i + 60], crop)]
    assert len(starts) == 1
    short = Spectrogram(np.log(rng.uniform(0.1, 1, size=(40, 4))), 1, 1, LOG_MAGNITUDE)
    padded = pad_or_crop(short, 60, rng).values
    assert np.array_equal(padded[:40], short.values)
    assert np.all(padded[40:] == math.log(LOG_FLOOR))
    zero_pad = pad_or_crop(s.with_values(s.values[:40]), 60, rng).values
    assert np.all(zero_pad[40:] == 0.0)


def test_crop_deterministic_under_seed(rng):
    s = Spectrogram(rng.uniform(size=(300, 3)), 1, 1)
    a = pad_or_crop(s, 50, np.random.default_rng(8)).values
    b = pad_or_crop(s, 50, np.random.default_rng(8)).values
    assert np.array_equal(a, b)


def test_feature_cache_round_trip(tmp_path, rng):
    s = log_magnitude(stft(Waveform(rng.standard_normal(4000), 16000)))
    save_features(s, tmp_path / "f.bin")
    raw = (tmp_path / "f.bin").read_bytes()
    assert raw[:9] == np.array([s.n_frames, 257], "<u4").tobytes() + b"\x01"
    back = load_features(tmp_path / "f.bin")
    assert back.kind == LOG_MAGNITUDE
    assert np.array_equal(back.values, s.values.astype(np.float32))
