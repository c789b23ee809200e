import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from birdsep.audio import AudioBuffer
from birdsep.mixit import SeparatorTrainConfig, train_separator
from birdsep.separator import Separator, SeparatorConfig, mixture_consistency

SR = 8000


def small(**kw):
    base = dict(sample_rate_hz=SR, n_basis=32, n_sources=3, n_blocks=2, n_repeats=1,
                hidden_channels=8, dilations=(1, 2))
    base.update(kw)
    return SeparatorConfig(**base)


def test_default_config_geometry():
    cfg = SeparatorConfig()
    assert (cfg.window, cfg.hop) == (22, 11)
    assert cfg.n_sources == 4 and cfg.n_basis == 256


def test_config_validation():
    with pytest.raises(ValueError):
        SeparatorConfig(n_sources=1)
    with pytest.raises(ValueError):
        SeparatorConfig(basis_window_ms=0.5, basis_hop_ms=1.0)
    with pytest.raises(ValueError):
        SeparatorConfig(dilations=(1, 2))
    assert SeparatorConfig.from_dict(SeparatorConfig().to_dict()) == SeparatorConfig()


def test_impulse_analysis_picks_basis_rows():
    model = Separator(small(dtype="float64"))
    win, hop = model.cfg.window, model.cfg.hop
    n, i = 200, 57
    x = np.zeros(n)
    x[i] = 1.0
    coeffs = model.analyze(AudioBuffer(x, SR))
    basis = model.store["basis/analysis"].data
    pos = i + (win - hop)
    for f in range(coeffs.shape[0]):
        offset = pos - f * hop
        if 0 <= offset < win:
            np.testing.assert_allclose(coeffs[f], basis[offset], rtol=1e-12)
        else:
            assert not coeffs[f].any()


def test_round_trip_at_initialization():
    model = Separator(small())
    x = np.random.default_rng(0).standard_normal(1000) * 0.3
    y = model.synthesize(model.analyze(AudioBuffer(x, SR)), len(x)).samples
    assert np.max(np.abs(y - x)) / np.max(np.abs(x)) < 1e-3


def test_zero_input_and_short_input():
    model = Separator(small())
    z = AudioBuffer(np.zeros(300), SR)
    assert not model.analyze(z).any()
    assert not model.synthesize(model.analyze(z), 300).samples.any()
    sep = model.separate(z)
    assert len(sep) == 3 and all(s.is_silent for s in sep.sources)
    with pytest.raises(ValueError):
        model.analyze(AudioBuffer(np.ones(model.cfg.window - 1), SR))


def test_mixture_consistency_cases():
    rng = np.random.default_rng(1)
    mix = rng.standard_normal(50)
    parts = rng.standard_normal((3, 50))
    parts[2] = mix - parts[0] - parts[1]
    np.testing.assert_allclose(mixture_consistency(parts, mix), parts, atol=1e-15)
    np.testing.assert_array_equal(mixture_consistency(np.zeros((2, 50)), mix), np.stack([mix / 2, mix / 2]))
    S = rng.standard_normal((4, 50))
    P = mixture_consistency(S, mix)
    assert np.max(np.abs(P.sum(0) - mix)) < 1e-6
    np.testing.assert_allclose(mixture_consistency(P, mix), P, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(30, 400))
def test_untrained_model_outputs_are_consistent(seed, n):
    rng = np.random.default_rng(seed)
    model = Separator(small(seed=seed % 1000))
    x = AudioBuffer(rng.uniform(-1, 1, n), SR)
    sep = model.separate(x)
    assert all(len(s) == n for s in sep.sources)
    total = sep.as_array().sum(0)
    assert np.max(np.abs(total - x.samples)) / np.max(np.abs(x.samples)) < 1e-5
    _, masks = model.forward(x.samples[None])
    assert np.all((masks.data > 0) & (masks.data < 1))


def test_rate_mismatch_and_nan_guard():
    model = Separator(small())
    with pytest.raises(ValueError, match="rate"):
        model.separate(AudioBuffer(np.ones(100), 16000))
    model.store["mask/w"].data[...] = np.nan
    with pytest.raises(FloatingPointError):
        model.separate(AudioBuffer(np.random.default_rng(0).standard_normal(100), SR))


def test_checkpoint_round_trip(tmp_path):
    model = Separator(small())
    model.save(tmp_path / "m.ckpt")
    again = Separator.load(tmp_path / "m.ckpt")
    assert again.cfg == model.cfg
    x = AudioBuffer(np.random.default_rng(2).standard_normal(200), SR)
    np.testing.assert_array_equal(again.separate(x).as_array(), model.separate(x).as_array())


def band_energy_db(x, lo, hi):
    spec = np.abs(np.fft.rfft(x)) ** 2
    f = np.fft.rfftfreq(x.size, 1 / SR)
    return 10 * np.log10(spec[(f >= lo) & (f < hi)].sum() + 1e-20)


def test_trained_model_splits_disjoint_tones():
    rng = np.random.default_rng(0)
    t = np.arange(SR // 2) / SR
    recs = []
    for k in range(16):
        f = 400.0 if k % 2 == 0 else 2500.0
        recs.append(AudioBuffer(rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * f * t + rng.uniform(0, 6.3)), SR))
    cfg = small(n_sources=2)
    tc = SeparatorTrainConfig(steps=150, batch_size=4, crop_s=0.05, learning_rate=3e-3)
    model, _ = train_separator(recs, cfg, tc)
    mix = AudioBuffer(0.5 * np.sin(2 * np.pi * 400 * t) + 0.5 * np.sin(2 * np.pi * 2500 * t + 1.0), SR)
    sources = model.separate(mix).as_array()
    low = [band_energy_db(s, 300, 500) - band_energy_db(s, 2400, 2600) for s in sources]
    # one source is dominated by the low tone, the other by the high tone
    assert max(low) > 10 and min(low) < -10
