import logging
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from backdoor_lab import data, gradcheck, harness, nn, relearn
from backdoor_lab.errors import InputError
from backdoor_lab.relearn import OriginalRowBank, reinit_neurons, similarity_penalty
from backdoor_lab.rng import make_rng
from conftest import dense


def wide_model(rng, features=512, k=10):
    clf = dense(rng.normal(size=(k, features)), rng.normal(size=k), dtype=np.float32)
    return nn.Model([nn.Flatten(), clf], input_shape=(features, 1, 1))


# -- reinitialisation -------------------------------------------------------

def test_reinit_touches_exactly_flagged_rows_and_biases(rng):
    model = wide_model(rng)
    out = reinit_neurons(model, [0, 6], np.random.default_rng(1))
    before = [p.copy() for p in model.params()]
    changed = sum(int(np.count_nonzero(a != b)) for a, b in zip(before, out.params()))
    assert changed == 2 * (512 + 1)
    assert np.all(out.classifier.b[[0, 6]] == 0)
    assert np.max(np.abs(out.classifier.W[[0, 6]])) <= np.float32(math.sqrt(2 / 512))
    keep = [i for i in range(10) if i not in (0, 6)]
    assert out.classifier.W[keep].tobytes() == model.classifier.W[keep].tobytes()
    # the input model is untouched
    assert all(a.tobytes() == b.tobytes() for a, b in zip(before, model.params()))


def test_reinit_all_rows_leaves_features(rng):
    model = nn.build_model((3, 8, 8), 4, rng)
    out = reinit_neurons(model, range(4), np.random.default_rng(1))
    for a, b in zip(model.layers[:-1], out.layers[:-1]):
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a.params, b.params))
    assert np.all(out.classifier.W != model.classifier.W)


def test_reinit_validation(rng):
    model = wide_model(rng, 8, 3)
    with pytest.raises(InputError):
        reinit_neurons(model, [3], rng)
    with pytest.raises(InputError):
        reinit_neurons(model, [], rng)


def test_random_neuron_selection():
    assert relearn.select_random_neurons(5, 5, np.random.default_rng(0)) == [0, 1, 2, 3, 4]
    a = relearn.select_random_neurons(10, 3, make_rng(4, "reinit"))
    assert a == relearn.select_random_neurons(10, 3, make_rng(4, "reinit"))
    with pytest.raises(InputError):
        relearn.select_random_neurons(4, 5, np.random.default_rng(0))


def test_bank_is_read_only(rng):
    bank = OriginalRowBank.capture(wide_model(rng, 8, 3), [2])
    with pytest.raises(ValueError):
        bank.rows[0, 0] = 1.0


# -- penalty ----------------------------------------------------------------

def pen(w, o, kind):
    W = np.array([w], dtype=float)
    return similarity_penalty(W, OriginalRowBank((0,), np.array([o], dtype=float)), kind)[0]


def test_penalty_examples():
    assert pen([0.3, -2.0], [0.3, -2.0], "cosine") == pytest.approx(1.0)
    assert pen([1, 0], [0, 1], "cosine") == 0.0 and pen([1, 0], [0, 1], "inner_product") == 0.0
    assert pen([-2, 0], [1, 0], "cosine") == pytest.approx(-1.0)
    assert pen([-2, 0], [1, 0], "inner_product") == pytest.approx(-2.0)
    assert pen([-2, 0], [1, 0], "none") == 0.0


def test_zero_norm_rows_contribute_nothing():
    W = np.zeros((2, 3))
    bank = OriginalRowBank((0, 1), np.array([[1.0, 2, 3], [0, 0, 0]]))
    W[1] = [1, 1, 1]
    value, grad = similarity_penalty(W, bank, "cosine")
    assert value == 0.0 and np.all(grad == 0)


def test_penalty_gradient_only_on_flagged_rows(rng):
    W = rng.normal(size=(5, 4))
    bank = OriginalRowBank((1, 3), rng.normal(size=(2, 4)))
    for kind in ("cosine", "inner_product"):
        _, grad = similarity_penalty(W, bank, kind)
        assert np.all(grad[[0, 2, 4]] == 0) and np.any(grad[[1, 3]] != 0)
    np.testing.assert_array_equal(similarity_penalty(W, bank, "inner_product")[1][[1, 3]], bank.rows)


@pytest.mark.parametrize("kind", ["cosine", "inner_product"])
def test_penalty_gradient_matches_finite_differences(kind, rng):
    W = rng.normal(size=(6, 9))
    bank = OriginalRowBank((0, 4), rng.normal(size=(2, 9)))
    errs = gradcheck.check_penalty(W, bank, kind, rng, n_probes=100, h=1e-5)
    assert max(errs) < 1e-3


rows = hnp.arrays(np.float64, 6, elements=st.floats(-10, 10)).filter(
    lambda r: np.linalg.norm(r) > 1e-3)


@settings(max_examples=300, deadline=None)
@given(rows, rows, st.floats(0.01, 100))
def test_cosine_scale_invariant_inner_product_linear(w, o, c):
    assert pen(c * w, o, "cosine") == pytest.approx(pen(w, o, "cosine"), abs=1e-9)
    assert pen(c * w, o, "inner_product") == pytest.approx(
        c * pen(w, o, "inner_product"), rel=1e-9, abs=1e-9)


def test_bank_width_mismatch(rng):
    with pytest.raises(InputError):
        similarity_penalty(np.zeros((2, 3)), OriginalRowBank((0,), np.zeros((1, 4))), "cosine")


def test_regularizer_validation():
    with pytest.raises(InputError):
        relearn.RelearnConfig(regularizer="l2")
    assert relearn.RelearnConfig(regularizer="none").effective_alpha == 0.0
    cfg = relearn.RelearnConfig()
    assert (cfg.lr, cfg.alpha, cfg.epochs, cfg.batch_size, cfg.momentum) == (0.01, 0.7, 20, 16, 0.9)


# -- relearning and the full defense ------------------------------------------

@pytest.fixture(scope="module")
def desk():
    cfg = harness.ExperimentConfig()
    fx = harness.build_fixture(cfg, 0)
    model, _ = harness.run_attack(cfg, fx)
    dd = data.sample_defense_set(fx.train_clean, 0.01, make_rng(0, "defense"))
    return cfg, fx, model, dd


def test_alpha_zero_equals_plain_fine_tuning(desk):
    cfg, _, model, dd = desk
    bank = OriginalRowBank.capture(model, [0])
    start = reinit_neurons(model, [0], make_rng(0, "reinit"))
    a, _ = relearn.relearn(start, bank, dd, replace(cfg.relearn, alpha=0.0))
    b, _ = relearn.relearn(start, bank, dd, replace(cfg.relearn, regularizer="none"))
    empty = OriginalRowBank((), np.zeros((0, model.feature_dim)))
    c, _ = relearn.relearn(start, empty, dd, cfg.relearn)
    assert a.equals(b) and a.equals(c)


def test_cosine_relearning_drives_rows_past_orthogonal():
    # the penalty mechanism itself, on the target row of ten desk fixtures
    cfg = harness.ExperimentConfig()
    below = 0
    for seed in range(10):
        fx = harness.build_fixture(cfg, seed)
        model, _ = harness.run_attack(cfg, fx)
        dd = data.sample_defense_set(fx.train_clean, 0.01, make_rng(seed, "defense"))
        bank = OriginalRowBank.capture(model, [0])
        start = reinit_neurons(model, [0], make_rng(seed, "reinit"))
        out, _ = relearn.relearn(start, bank, dd, replace(cfg.relearn, seed=seed))
        below += similarity_penalty(out.classifier.W.astype(float), bank, "cosine")[0] < 0.2
    assert below >= 7


def test_relearn_logs_one_row_per_epoch(desk):
    cfg, fx, model, dd = desk
    bank = OriginalRowBank.capture(model, [0])
    _, report = relearn.relearn(model, bank, dd, cfg.relearn, monitor=harness.monitor_for(cfg, fx))
    assert [r[:2] for r in report.rows] == [("relearn", e) for e in range(20)]
    assert 0 <= report.clean_accuracy <= 1


def test_defend_never_modifies_input_and_reports_reinit_set(desk, monkeypatch):
    cfg, _, model, dd = desk
    before = model.copy()
    seen = []
    real = relearn.reinit_neurons
    monkeypatch.setattr(relearn, "reinit_neurons",
                        lambda m, s, r: seen.append(list(s)) or real(m, s, r))
    for idf in ({"tau": 0.5}, {"random_neurons": 2}):
        seen.clear()
        _, report, _ = relearn.ulrl_defend(model, dd, cfg.unlearn, cfg.relearn,
                                           make_rng(0, "reinit"), **idf)
        assert model.equals(before)
        assert seen == ([report.flagged] if report.flagged else [])
    assert report.method == "random" and len(report.flagged) == 2


def test_empty_set_falls_back_to_fine_tuning(desk, caplog):
    cfg, _, model, dd = desk
    with caplog.at_level(logging.WARNING):
        _, report, _ = relearn.ulrl_defend(model, dd, cfg.unlearn, cfg.relearn,
                                           make_rng(0, "reinit"), tau=1e6)
    assert report.flagged == [] and report.fine_tune_only
    assert "plain fine-tuning" in caplog.text


def test_defend_input_checks(desk):
    cfg, _, model, dd = desk
    with pytest.raises(InputError):
        relearn.ulrl_defend(model, dd.subset(np.arange(0)), cfg.unlearn, cfg.relearn,
                            make_rng(0, "x"))


@pytest.mark.xfail(strict=True, reason="desk backdoor survives both; random-1 is lower (0.94 vs 0.99)")
def test_random_single_neuron_leaves_more_backdoor_than_ulrl():
    cfg = harness.ExperimentConfig()
    rand = cfg.with_value("identify.random_neurons", "1")
    ulrl, rnd = [], []
    for seed in range(10):
        fx = harness.build_fixture(cfg, seed)
        model, _ = harness.run_attack(cfg, fx)
        r = harness.run_seed(cfg, seed, model=model, fixture=fx)
        ulrl.append(r.asr_after if r.ok else r.asr_before)
        rnd.append(harness.run_seed(rand, seed, model=model, fixture=fx).asr_after)
    assert np.mean(rnd) > np.mean(ulrl)
