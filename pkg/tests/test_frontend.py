import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from birdsep.audio import AudioBuffer
from birdsep.frontend import (FrontendConfig, MelSpectrogram, PcenParams, channel_normalize, classifier_features,
                              draw_lowpass, frame_starts, lowpass_scale, mel_spectrogram, pcen)

SR = 22050


def tone(freq, seconds=1.0, amp=0.5):
    t = np.arange(int(seconds * SR)) / SR
    return AudioBuffer(amp * np.sin(2 * np.pi * freq * t), SR)


def mel(values, rate=100.0):
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    return MelSpectrogram(values, rate, 0.08, (60.0, 10000.0), values.shape[1])


def test_default_shape():
    m = mel_spectrogram(tone(1000.0, 2.0))
    frame_len = round(0.08 * SR)
    assert m.n_channels == 160 and m.values.shape[1] == 160
    assert m.frame_rate_hz == 100.0
    assert m.n_frames == math.floor((2 * SR - frame_len) / (SR / 100)) + 1


def test_frame_starts_fractional_hop():
    starts = frame_starts(1000, 100, 220.5)
    assert starts.tolist() == [0, 220, 441, 661, 882]
    assert frame_starts(50, 100, 10).size == 0


@pytest.mark.parametrize("channel", [40, 100, 150])
def test_tone_at_center_frequency_peaks_in_its_channel(channel):
    # center frequencies from the HTK mel formula written out by hand
    lo = 2595 * math.log10(1 + 60 / 700)
    hi = 2595 * math.log10(1 + 10000 / 700)
    step = (hi - lo) / 161
    center = 700 * (10 ** ((lo + step * (channel + 1)) / 2595) - 1)
    m = mel_spectrogram(tone(center))
    assert np.all(np.argmax(m.values, axis=1) == channel)


def test_silence_gives_zero_energy():
    m = mel_spectrogram(AudioBuffer(np.zeros(SR), SR))
    assert np.all(m.values == 0)


def test_invalid_config():
    with pytest.raises(ValueError, match="frequency"):
        mel_spectrogram(tone(440.0), FrontendConfig(fmax_hz=12000.0))
    with pytest.raises(ValueError, match="shorter"):
        mel_spectrogram(AudioBuffer(np.zeros(100), SR))


def test_disjoint_tones_add_in_power():
    a, b = tone(800.0, amp=0.3), tone(5000.0, amp=0.4)
    both = mel_spectrogram(a.with_samples(a.samples + b.samples)).values
    separate = mel_spectrogram(a).values + mel_spectrogram(b).values
    assert np.max(np.abs(both - separate)) / np.max(separate) < 1e-3


def test_pcen_zero_input():
    out = pcen(mel(np.zeros((20, 4))))
    np.testing.assert_array_equal(out.values, 0.0)


@pytest.mark.parametrize("c", [1e-3, 0.5, 7.0, 300.0])
def test_pcen_constant_input_fixed_point(c):
    p = PcenParams()
    out = pcen(mel(np.full((200, 3), c)), p)
    expected = (c / (p.eps + c) ** p.alpha + p.delta) ** p.root - p.delta ** p.root
    np.testing.assert_allclose(out.values[50:], expected, rtol=0, atol=1e-6)


def test_pcen_compresses_gain():
    rng = np.random.default_rng(3)
    e = rng.uniform(0.1, 10.0, size=(100, 8))
    y1 = pcen(mel(e)).values
    y2 = pcen(mel(2 * e)).values
    assert np.all(y2 < 2 * y1)


def test_pcen_matches_direct_recursion():
    rng = np.random.default_rng(4)
    e = rng.uniform(0.0, 5.0, size=(30, 2))
    p = PcenParams()
    M = np.empty_like(e)
    prev = e[0]
    for t in range(e.shape[0]):
        prev = p.smooth * e[t] + (1 - p.smooth) * prev
        M[t] = prev
    ref = (e / (p.eps + M) ** p.alpha + p.delta) ** p.root - p.delta ** p.root
    np.testing.assert_allclose(pcen(mel(e), p).values, ref, rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 20), st.floats(0.0, 5.0))
def test_pcen_monotone_in_current_frame(seed, t, bump):
    e = np.random.default_rng(seed).uniform(0.0, 3.0, size=(24, 2))
    raised = e.copy()
    raised[t] += bump
    assert np.all(pcen(mel(raised)).values[t] >= pcen(mel(e)).values[t] - 1e-12)


def test_pcen_rejects_nonfinite():
    with pytest.raises(ValueError):
        pcen(mel(np.array([[1.0], [np.inf]])))


def test_channel_normalize_hand_example():
    x = np.array([1.0, 2.0, 3.0, 10.0])
    # mean 4, std sqrt(12.5) ~ 3.54 -> 10 is excluded; retained {1,2,3}: mean 2, std sqrt(2/3)
    sd = math.sqrt(2.0 / 3.0)
    expected = [(v - 2.0) / sd for v in x]
    np.testing.assert_allclose(channel_normalize(mel(x)).values[:, 0], expected, rtol=1e-12)


def test_channel_normalize_constant_channel():
    assert np.all(channel_normalize(mel(np.full((10, 2), 3.5))).values == 0.0)


def test_channel_normalize_without_exclusions_is_plain_standardization():
    # symmetric two-point channel: every value sits exactly at mean +- std
    x = np.array([-1.0, 1.0] * 8)
    out = channel_normalize(mel(x)).values[:, 0]
    np.testing.assert_allclose(out, (x - x.mean()) / x.std(), rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_channel_normalize_retained_mean_zero(seed):
    x = np.random.default_rng(seed).standard_normal((50, 3))
    out = channel_normalize(mel(x)).values
    mu, sd = x.mean(0), x.std(0)
    for c in range(3):
        kept = out[x[:, c] <= mu[c] + sd[c], c]
        assert abs(kept.mean()) < 1e-6


def test_lowpass_scale_cases():
    ones = mel(np.ones((3, 160)))
    np.testing.assert_array_equal(lowpass_scale(ones, 10, 0.0).values, ones.values)
    last = lowpass_scale(ones, 159, 3.0).values
    np.testing.assert_array_equal(last[:, :159], 1.0)
    assert last[0, 159] == 1.0  # the cutoff channel itself is at 0 dB
    out = lowpass_scale(ones, 80, 1.0).values
    np.testing.assert_array_equal(out[:, :81], 1.0)
    assert math.isclose(out[0, 100], 0.1, rel_tol=1e-12)
    with pytest.raises(ValueError):
        lowpass_scale(ones, 160, 1.0)
    with pytest.raises(ValueError):
        lowpass_scale(ones, 5, -1.0)


def test_draw_lowpass_range():
    rng = np.random.default_rng(0)
    draws = [draw_lowpass(rng, 160) for _ in range(500)]
    assert min(c for c, _ in draws) >= 40 and max(c for c, _ in draws) < 160
    assert all(0.5 <= s <= 2.0 for _, s in draws)


def test_classifier_features_pipeline():
    cfg = FrontendConfig(n_channels=32)
    f = classifier_features(tone(2000.0, 2.0), cfg)
    assert f.values.shape == (mel_spectrogram(tone(2000.0, 2.0), cfg).n_frames, 32)
    assert np.all(np.isfinite(f.values))
