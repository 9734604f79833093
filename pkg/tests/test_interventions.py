import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cbmlab.datagen import TaskSpec, generate_task, inject_salt_pepper
from cbmlab.interventions import (
    BayesApproxConfig,
    InterventionCurve,
    curve_auc,
    exact_bayes_accuracy,
    exact_bayes_curve,
    intervened_predictions,
    intervention_curve,
    intervention_orders,
    load_masked_bayes,
    masked_bayes_curve,
    n_intervened,
    save_masked_bayes,
    train_masked_bayes,
)
from cbmlab.models import ForwardOptions, ModelConfig, init_model
from cbmlab.training import TrainConfig, accuracy, train

FRACTIONS = [0.0, 0.5, 1.0]


def test_curve_auc_examples():
    assert curve_auc([0, 0.5, 1], [0.8, 0.8, 0.8]) == pytest.approx(0.8)
    assert curve_auc([0, 1], [0.5, 1.0]) == pytest.approx(0.75)
    assert curve_auc([0, 0.25, 1], [0, 1, 1]) == pytest.approx(0.875)


def test_curve_auc_needs_two_points():
    with pytest.raises(ValueError):
        curve_auc([0], [1])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 8))
def test_curve_auc_monotone_and_bounded(seed, n):
    rng = np.random.default_rng(seed)
    f = np.r_[0.0, np.sort(rng.choice(np.arange(1, 100), n - 2, replace=False)) / 100, 1.0]
    lo = rng.random(n)
    hi = np.minimum(lo + rng.random(n) * 0.5, 1.0)
    assert 0.0 <= curve_auc(f, lo) <= curve_auc(f, hi) <= 1.0


@pytest.mark.parametrize("grid", [[0.5, 1.0], [0.0, 0.5], [0.0, 0.6, 0.4, 1.0]])
def test_fraction_grid_validation(grid):
    spec = TaskSpec(K=3, k=2, n=4, L=8, N=50)
    with pytest.raises(ValueError):
        exact_bayes_curve(spec, generate_task(spec).subset("test"), grid, trials=1)


def test_orders_are_permutations_and_reproducible():
    a = intervention_orders(5, 4, seed=9)
    b = intervention_orders(5, 4, seed=9)
    for x, y in zip(a, b):
        assert sorted(x) == list(range(5)) and np.array_equal(x, y)
    assert n_intervened(0.5, 3) == 2 and n_intervened(1.0, 3) == 3 and n_intervened(0.0, 3) == 0


def test_curve_file_round_trip(tmp_path):
    curve = InterventionCurve([0.0, 0.5, 1.0], [[0.1, 0.2, 0.3], [0.2, 0.4, 0.5]])
    path, summary = curve.write(tmp_path / "c.csv", "# h")
    back = InterventionCurve.read(path)
    np.testing.assert_array_equal(back.accuracies, curve.accuracies)
    assert summary.read_text().splitlines()[-1].startswith("auc,")
    np.testing.assert_allclose(curve.mean, [0.15, 0.3, 0.4])
    np.testing.assert_allclose(curve.std, [0.05, 0.1, 0.1])
    assert curve.auc == curve_auc(curve.fractions, curve.mean)


# -- exact Bayes ----------------------------------------------------------------------

def test_exact_bayes_complete_task_full_intervention():
    spec = TaskSpec(K=3, k=3, n=4, L=8, N=300, seed=2)
    curve = exact_bayes_curve(spec, generate_task(spec).subset("test"), FRACTIONS, trials=3, seed=1)
    assert curve.at(1.0) == 1.0


def test_exact_bayes_no_intervention_is_chance():
    spec = TaskSpec(K=3, k=3, n=4, L=8, N=3000, seed=2)
    curve = exact_bayes_curve(spec, generate_task(spec).subset("test"), FRACTIONS, trials=2)
    assert curve.at(0.0) == pytest.approx(1 / 8, abs=0.04)


def test_exact_bayes_incomplete_matches_enumeration():
    spec = TaskSpec(K=4, k=2, n=4, L=16, N=4000, seed=3)
    # with two of four bits observed every label consistent with them is equally likely
    assert exact_bayes_accuracy(spec, [0, 1]) == 0.25
    curve = exact_bayes_curve(spec, generate_task(spec).subset("test"), FRACTIONS, trials=2)
    assert curve.at(1.0) == pytest.approx(0.25, abs=0.05)


def test_exact_bayes_accuracy_against_brute_force():
    spec = TaskSpec(K=4, k=3, n=1, L=5, N=1)
    expect = 0.0
    for observed in range(8):
        counts = np.zeros(5)
        for hidden in range(2):
            counts[(observed + 8 * hidden) % 5] += 1
        expect += counts.max() / 2
    assert exact_bayes_accuracy(spec, [0, 1, 2]) == pytest.approx(expect / 8)


# -- model curves ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained():
    ds = generate_task(TaskSpec(K=4, k=2, n=10, L=8, N=600, seed=4))
    cfg = TrainConfig(max_epochs=6, val_freq=3, val_mc_samples=2, seed=1)
    out = {}
    for kind in ("vanilla_cbm", "mixcem"):
        m = init_model(ModelConfig(kind, n_in=10, k=2, L=8, m=4, backbone_widths=(16,), seed=2))
        out[kind] = train(m, ds, cfg)[0]
    return ds, out


def test_fraction_zero_is_plain_accuracy(trained):
    ds, models = trained
    test = ds.subset("test")
    for m in models.values():
        opts = ForwardOptions(dropout_p=0.5 if m.config.kind == "mixcem" else 0.0, mc_samples=3, rng_seed=5)
        curve = intervention_curve(m, test, FRACTIONS, trials=2, opts=opts, seed=1)
        assert np.all(curve.accuracies[:, 0] == accuracy(m, test, opts))


def test_vanilla_full_intervention_is_shift_invariant(trained):
    ds, models = trained
    test = ds.subset("test")
    m = models["vanilla_cbm"]
    noisy = inject_salt_pepper(test.x, 0.4, ds.feature_stats, seed=3)
    clean_pred = intervened_predictions(m, test.x, test.c, [0, 1], ForwardOptions())
    noisy_pred = intervened_predictions(m, noisy, test.c, [0, 1], ForwardOptions())
    np.testing.assert_array_equal(clean_pred, noisy_pred)
    a = intervention_curve(m, test, FRACTIONS, 2, ForwardOptions(), seed=1)
    b = intervention_curve(m, test, FRACTIONS, 2, ForwardOptions(), shift=0.4, stats=ds.feature_stats, seed=1)
    assert a.at(1.0) == b.at(1.0)


def test_curves_reproducible_and_thread_independent(trained, monkeypatch):
    ds, models = trained
    test = ds.subset("test")
    m = models["mixcem"]
    opts = ForwardOptions(dropout_p=0.5, mc_samples=3, rng_seed=5)
    monkeypatch.setenv("CBMLAB_THREADS", "1")
    a = intervention_curve(m, test, FRACTIONS, 3, opts, shift=0.3, stats=ds.feature_stats, seed=2)
    monkeypatch.setenv("CBMLAB_THREADS", "4")
    b = intervention_curve(m, test, FRACTIONS, 3, opts, shift=0.3, stats=ds.feature_stats, seed=2)
    assert a.accuracies.tobytes() == b.accuracies.tobytes()
    assert a.accuracies.shape == (3, 3)


# -- masked Bayes ---------------------------------------------------------------------

def test_masked_bayes_defaults():
    cfg = BayesApproxConfig()
    assert cfg.hidden_widths == (28, 64, 32)
    assert (cfg.mask_prob, cfg.mask_value, cfg.epochs) == (0.25, 0.5, 75)
    with pytest.raises(ValueError):
        BayesApproxConfig(mask_prob=1.5)


def test_masked_bayes_input_construction():
    spec = TaskSpec(K=3, k=3, n=4, L=8, N=60)
    bayes = train_masked_bayes(generate_task(spec), BayesApproxConfig(epochs=1))
    out = bayes.masked_input([[1, 0, 1]], [0, 2])
    np.testing.assert_array_equal(out, [[1.0, 0.5, 1.0]])


def test_masked_bayes_tracks_exact_on_enumerable_task(tmp_path):
    spec = TaskSpec(K=3, k=3, n=4, L=8, N=2000, seed=6)
    ds = generate_task(spec)
    bayes = train_masked_bayes(ds, BayesApproxConfig(epochs=75, seed=1))
    test = ds.subset("test")
    masked = masked_bayes_curve(bayes, test, FRACTIONS, trials=2)
    exact = exact_bayes_curve(spec, test, FRACTIONS, trials=2)
    assert abs(masked.at(1.0) - exact.at(1.0)) <= 0.02
    back = load_masked_bayes(save_masked_bayes(bayes, tmp_path / "b.json"))
    np.testing.assert_array_equal(back.predict_proba(np.full((1, 3), 0.5)), bayes.predict_proba(np.full((1, 3), 0.5)))
