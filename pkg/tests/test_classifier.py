import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from birdsep.audio import AudioBuffer
from birdsep.augment import AugmentConfig
from birdsep.autodiff import Tensor
from birdsep.classifier import (Classifier, ClassifierConfig, ClassifierEnsemble, ClassifierTrainConfig,
                                autopool, ensemble_logit_average, smoothed_bce, smoothed_bce_tensor,
                                stack_targets, taxonomic_loss, train_classifier)
from birdsep.frontend import FrontendConfig
from birdsep.labels import DatasetError, LabeledClip, LabelSet, Taxonomy, head_targets
from birdsep.synth import SynthSpecies, render_song
from gradcheck import numeric_grad, rel_error

LN2 = math.log(2.0)
TAX = Taxonomy({f"sp{i}": (f"g{i // 2}", f"f{i // 4}", "o0") for i in range(4)} | {"xs": ("g0", "f0", "o0")},
               ("sp0", "sp1", "sp2", "sp3"))


def tiny_config(**kw):
    base = dict(sample_rate_hz=8000, widths=(4, 8), hidden_dim=8,
                frontend=FrontendConfig(n_channels=16, fmin_hz=100.0, fmax_hz=3800.0), dtype="float64")
    base.update(kw)
    return ClassifierConfig(**base)


def softplus(x):
    return math.log1p(math.exp(-abs(x))) + max(x, 0.0)


# ---------------------------------------------------------------- autopool

def test_autopool_alpha_zero_is_mean():
    h = np.random.default_rng(0).standard_normal((3, 7, 5))
    np.testing.assert_allclose(autopool(h, np.zeros(5)), h.mean(axis=1), rtol=1e-15, atol=1e-15)
    t = autopool(Tensor(h), Tensor(np.zeros(5)))
    np.testing.assert_allclose(t.data, h.mean(axis=1), rtol=1e-15, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.integers(-10, 10), min_size=3, max_size=3), min_size=1, max_size=12))
def test_autopool_large_alpha_approaches_max(rows):
    h = np.array(rows, dtype=float) / 10.0  # bounded in [-1, 1] on a 0.1 grid
    out = autopool(h, np.full(3, 100.0))
    assert np.max(np.abs(out - h.max(axis=0))) < 1e-3


def test_autopool_single_step_identity():
    h = np.random.default_rng(1).standard_normal((1, 4))
    np.testing.assert_array_equal(autopool(h, np.array([0.0, 1.0, -3.0, 50.0])), h[0])


# ---------------------------------------------------------------- losses

def test_smoothed_bce_closed_forms():
    assert smoothed_bce([0.0], [1.0]) == pytest.approx(LN2, abs=1e-15)
    assert smoothed_bce([0.0], [0.0]) == pytest.approx(LN2, abs=1e-15)
    expected = 0.95 * softplus(-2.0) + 0.05 * softplus(2.0)
    assert smoothed_bce([2.0], [1.0]) == pytest.approx(expected, rel=1e-14)
    assert expected == pytest.approx(0.2269, abs=1e-4)


def test_smoothed_bce_masking():
    base = smoothed_bce([2.0, -1.0], [1.0, 0.0], mask=[1.0, 0.0])
    assert base == smoothed_bce([2.0, 1e6], [1.0, 1.0], mask=[1.0, 0.0])
    assert base == smoothed_bce([2.0], [1.0])


def test_smoothed_bce_empty_mask_logs(caplog):
    with caplog.at_level(logging.DEBUG, logger="birdsep.classifier"):
        assert smoothed_bce([1.0, 2.0], [0.0, 1.0], mask=[0.0, 0.0]) == 0.0
    assert "masked" in caplog.text
    assert smoothed_bce_tensor(Tensor(np.ones(2)), np.ones(2), 0.1, np.zeros(2)).item() == 0.0


def test_graph_bce_matches_numpy():
    rng = np.random.default_rng(3)
    z, y, m = rng.standard_normal((4, 5)), (rng.random((4, 5)) < 0.5) * 1.0, (rng.random((4, 5)) < 0.7) * 1.0
    assert smoothed_bce_tensor(Tensor(z), y, 0.1, m).item() == pytest.approx(smoothed_bce(z, y, 0.1, m), rel=1e-13)


def zero_logits(tax=TAX):
    return {"species": np.zeros(tax.size("species")), "genus": np.zeros(tax.size("genus")),
            "family": np.zeros(tax.size("family")), "order": np.zeros(tax.size("order")), "detection": np.zeros(1)}


def test_taxonomic_loss_at_zero_logits():
    tg = head_targets(LabelSet({"sp1"}), TAX)
    # every head sits at p = 0.5, so each head-average BCE is ln 2
    assert taxonomic_loss(zero_logits(), tg) == pytest.approx(LN2 + 0.1 * 3 * LN2 + LN2, rel=1e-14)
    assert taxonomic_loss(zero_logits(), tg, head_weight=0.0) == pytest.approx(2 * LN2, rel=1e-14)


def test_taxonomic_loss_zero_head_weight_is_species_plus_detection():
    rng = np.random.default_rng(4)
    logits = {k: rng.standard_normal(v.shape) for k, v in zero_logits().items()}
    tg = head_targets(LabelSet({"sp2"}, {"sp0"}), TAX)
    expected = (smoothed_bce(logits["species"], tg.targets["species"], 0.1, tg.masks["species"])
                + smoothed_bce(logits["detection"], tg.targets["detection"], 0.1, tg.masks["detection"]))
    assert taxonomic_loss(logits, tg, head_weight=0.0) == pytest.approx(expected, rel=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
def test_masked_logit_does_not_change_loss(seed, new_value):
    rng = np.random.default_rng(seed)
    logits = {k: rng.standard_normal(v.shape) for k, v in zero_logits().items()}
    tg = head_targets(LabelSet({"sp0"}, {"sp3"}), TAX)
    before = taxonomic_loss(logits, tg)
    logits["species"][TAX.index["species"]["sp3"]] = new_value
    assert taxonomic_loss(logits, tg) == before


def test_extra_species_clip_supervises_higher_heads():
    tg = head_targets(LabelSet({"xs"}), TAX)
    logits = zero_logits()
    logits["genus"][TAX.index["genus"]["g0"]] = 5.0
    moved = taxonomic_loss(logits, tg)
    assert moved < taxonomic_loss(zero_logits(), tg)


# ---------------------------------------------------------------- ensembling

def test_ensemble_closed_forms():
    assert ensemble_logit_average([[0.9], [0.5]])[0] == pytest.approx(0.75, abs=1e-12)
    for p in (0.01, 0.3, 0.77):
        assert abs(ensemble_logit_average([[p], [p], [p]])[0] - p) < 1e-12
        assert abs(ensemble_logit_average([[p], [1 - p]])[0] - 0.5) < 1e-12
    assert np.all(np.isfinite(ensemble_logit_average([[0.0, 1.0], [0.0, 1.0]])))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=5), st.integers(0, 4), st.floats(0.0, 1.0))
def test_ensemble_monotone(ps, k, bump):
    k = k % len(ps)
    raised = list(ps)
    raised[k] = max(ps[k], bump)
    assert ensemble_logit_average(np.array(raised)[:, None])[0] >= ensemble_logit_average(np.array(ps)[:, None])[0]


# ---------------------------------------------------------------- model

def model(seed=0, **kw):
    return Classifier.for_taxonomy(tiny_config(**kw), TAX, seed=seed)


def test_head_widths_match_taxonomy():
    out = model().predict(AudioBuffer(np.zeros(8000), 8000))
    assert {h: v.shape[1] for h, v in out.logits.items()} == {"species": 4, "genus": 2, "family": 1, "order": 1,
                                                               "detection": 1}


def test_backbone_zero_input_finite_and_deterministic():
    m = model()
    a = m.backbone_forward(np.zeros((1, 64, 16))).data
    b = m.backbone_forward(np.zeros((1, 64, 16))).data
    assert a.shape == (1, 64 // 4, 8) and np.all(np.isfinite(a))
    np.testing.assert_array_equal(a, b)


def test_backbone_batch_duplicates_identical():
    x = np.random.default_rng(5).standard_normal((1, 64, 16))
    h = model().backbone_forward(np.concatenate([x, x])).data
    np.testing.assert_array_equal(h[0], h[1])


def test_backbone_normalization_is_per_example():
    m = model(widths=(4, 8, 8))
    rng = np.random.default_rng(6)
    a, b = rng.standard_normal((1, 64, 16)), 5.0 * rng.standard_normal((1, 64, 16)) + 2.0
    both = m.backbone_forward(np.concatenate([a, b])).data
    np.testing.assert_allclose(both[0], m.backbone_forward(a).data[0], rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(both[1], m.backbone_forward(b).data[0], rtol=1e-12, atol=1e-12)


def test_backbone_shape_errors():
    m = model()
    with pytest.raises(ValueError, match="channels"):
        m.backbone_forward(np.zeros((1, 64, 12)))
    with pytest.raises(ValueError, match="small"):
        m.backbone_forward(np.zeros((1, 2, 16)))
    with pytest.raises(ValueError, match="rate"):
        m.predict(AudioBuffer(np.zeros(16000), 16000))


def test_classifier_gradient_matches_finite_differences():
    m = model(widths=(2, 3), hidden_dim=3)
    x = np.random.default_rng(7).standard_normal((2, 8, 16))
    tg = stack_targets([head_targets(LabelSet({"sp1"}, {"sp2"}), TAX), head_targets(LabelSet(), TAX)])
    m.store["autopool/alpha"].data[...] = [0.5, -0.3, 1.0]

    def loss():
        return taxonomic_loss(m.forward(x), tg)

    m.store.zero_grad()
    loss().backward()
    for name in ("conv0/w", "conv1/norm_gain", "proj/w", "autopool/alpha", "head/genus/w", "head/detection/b"):
        p = m.store[name]
        orig = p.data.copy()

        def f(v):
            p.data[...] = v
            return loss().item()

        num = numeric_grad(f, orig)
        p.data[...] = orig
        assert rel_error(p.grad, num) < 1e-4, name


def test_checkpoint_and_ensemble(tmp_path):
    a, b = model(seed=1), model(seed=2)
    a.save(tmp_path / "a.ckpt")
    b.save(tmp_path / "b.ckpt")
    ens = ClassifierEnsemble.load([tmp_path / "a.ckpt", tmp_path / "b.ckpt"])
    w = AudioBuffer(np.random.default_rng(8).standard_normal(8000) * 0.1, 8000)
    expected = ensemble_logit_average(np.stack([a.species_probabilities([w]), b.species_probabilities([w])]))
    np.testing.assert_array_equal(ens.species_probabilities([w]), expected)
    assert ens.species_names == TAX.targets
    with pytest.raises(ValueError):
        ClassifierEnsemble([])


def test_predict_independent_of_batching():
    m = model(dtype="float32")
    rng = np.random.default_rng(9)
    ws = [AudioBuffer(rng.standard_normal(8000) * 0.1, 8000) for _ in range(3)]
    together = m.species_probabilities(ws)
    alone = np.concatenate([m.species_probabilities([w]) for w in ws])
    np.testing.assert_array_equal(together, alone)


# ---------------------------------------------------------------- training

SPECIES = [SynthSpecies(f"sp{i}", f, s, 0.15, 0.3) for i, (f, s) in
           enumerate([(400.0, 0.0), (900.0, 2000.0), (1600.0, -1500.0), (1900.0, 0.0)])]


def labeled_clips(n_per, seconds=1.2, seed=0):
    rng = np.random.default_rng(seed)
    clips = []
    n = int(seconds * 8000)
    for sp in SPECIES:
        for _ in range(n_per):
            x = render_song(sp, n, 8000, rng, 0.5) + 0.003 * rng.standard_normal(n)
            clips.append(LabeledClip(AudioBuffer(x, 8000), LabelSet({sp.code})))
    return clips


def quiet_augment():
    return AugmentConfig(window_s=1.0, p_example_mix=0.0, p_noise=0.0, p_noise_only=0.0, p_lowpass=0.0,
                         gain_range=(0.5, 0.5))


def test_overfits_small_set():
    clips = labeled_clips(3)[:10]
    tc = ClassifierTrainConfig(steps=150, batch_size=8, learning_rate=0.01, n_models=1, augment=quiet_augment())
    ens, curves = train_classifier(clips, [], TAX, tiny_config(dtype="float32"), tc)
    windows = [c.audio.crop(800, 8000) for c in clips]
    probs = ens.species_probabilities(windows)
    truth = [TAX.index["species"][next(iter(c.labels.foreground))] for c in clips]
    assert np.mean(np.argmax(probs, axis=1) == truth) == 1.0
    assert np.mean(curves[0][-10:]) < np.mean(curves[0][:10])


def test_training_reproducible(tmp_path):
    clips = labeled_clips(2)
    tc = ClassifierTrainConfig(steps=4, batch_size=4, n_models=2, augment=quiet_augment())
    runs = []
    for k in range(2):
        out = tmp_path / str(k)
        out.mkdir()
        _, curves = train_classifier(clips, [], TAX, tiny_config(dtype="float32"), tc, out)
        runs.append((curves, [(out / f"classifier_{i}.ckpt").read_bytes() for i in range(2)]))
    assert runs[0] == runs[1]
    # members use distinct seeds
    assert runs[0][1][0] != runs[0][1][1]


def test_label_outside_taxonomy_rejected():
    clips = [LabeledClip(AudioBuffer(np.zeros(9600), 8000), LabelSet({"zzz"}))] * 2
    with pytest.raises(DatasetError):
        train_classifier(clips, [], TAX, tiny_config(), ClassifierTrainConfig(steps=1, augment=quiet_augment()))
