import numpy as np
import pytest

from cbmlab.datagen import TaskSpec, generate_task
from cbmlab.models import Model, ModelConfig, init_model
from cbmlab.tensorcore import check_gradients
from cbmlab.training import (
    HISTORY_COLUMNS,
    TrainConfig,
    TrainingError,
    baseline_loss,
    concept_pos_weight,
    loss_for,
    mixcem_loss,
    train,
)


def batch(n=8, n_in=4, k=3, L=4, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, n_in)), rng.integers(0, 2, size=(n, k)), rng.integers(0, L, size=n)


def mixcem(k=3, m=2, widths=(5,), n_in=4, L=4, seed=0):
    return init_model(ModelConfig("mixcem", n_in=n_in, k=k, L=L, m=m, backbone_widths=widths, seed=seed))


def rng(seed=0):
    return np.random.default_rng(seed)


def test_zero_weights_total_is_task():
    res = mixcem_loss(mixcem(), batch(), TrainConfig(lambda_c=0.0, lambda_p=0.0), rng())
    assert res.total == res.task


@pytest.mark.parametrize("lc,lp", [(1.0, 1.0), (0.3, 2.5)])
def test_loss_decomposition(lc, lp):
    res = mixcem_loss(mixcem(), batch(), TrainConfig(lambda_c=lc, lambda_p=lp), rng())
    assert res.total == pytest.approx(res.task + lc * res.bce + lp * res.prior, abs=1e-9)
    assert min(res.task, res.bce, res.prior) >= 0


def test_prior_gradient_on_residual_weights_is_zero():
    model = mixcem()
    cfg = TrainConfig()
    res = mixcem_loss(model, batch(), cfg, rng())
    g = res.graph
    grads = g.backward(g.node("prior"))
    for name in ("R_pos", "R_neg", "b_pos", "b_neg", "psi.W0", "v_s"):
        assert not np.any(grads[name]), name


def test_full_randint_full_dropout_task_equals_prior():
    model = mixcem(seed=3)
    cfg = TrainConfig(p_int=1.0, p_drop=1.0, lambda_c=0.7, lambda_p=1.3)
    for s in range(4):
        res = mixcem_loss(model, batch(seed=s), cfg, rng(s))
        assert res.task == pytest.approx(res.prior, abs=1e-9)
        assert res.total == pytest.approx((1 + 1.3) * res.prior + 0.7 * res.bce, abs=1e-9)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_mixcem_loss_gradients(seed):
    model = mixcem(k=3, m=4, widths=(8,), seed=seed)
    res = mixcem_loss(model, batch(n=5, seed=seed), TrainConfig(), rng(seed))
    assert check_gradients(res.graph, res.loss, 1e-5) < 1e-4


def test_baseline_loss_gradients():
    for kind in ("vanilla_cbm", "cem"):
        model = init_model(ModelConfig(kind, n_in=4, k=3, L=4, m=2, backbone_widths=(5,), seed=1))
        res = baseline_loss(model, batch(n=5), TrainConfig(), rng())
        assert check_gradients(res.graph, res.loss, 1e-5) < 1e-4


def test_non_binary_concepts_rejected():
    x, c, y = batch()
    with pytest.raises(ValueError):
        mixcem_loss(mixcem(), (x, c * 0.5, y), TrainConfig(), rng())


def test_cem_loss_matches_gate_open_mixcem():
    k, m = 3, 2
    mix = mixcem(k=k, m=m, widths=(5,), seed=4)
    mix.params["c_pos"][:] = 0.0
    mix.params["c_neg"][:] = 0.0
    cfg_c = ModelConfig("cem", n_in=4, k=k, L=4, m=m, backbone_widths=(5,), embedding_activation="linear")
    cem = Model(cfg_c, {"psi.W0": mix.params["psi.W0"], "psi.b0": mix.params["psi.b0"], "v_s": mix.params["v_s"],
                        "f.W": mix.params["f.W"], "f.b": mix.params["f.b"],
                        "emb_pos.W": mix.params["R_pos"], "emb_pos.b": mix.params["b_pos"].reshape(-1),
                        "emb_neg.W": mix.params["R_neg"], "emb_neg.b": mix.params["b_neg"].reshape(-1)})
    cfg = TrainConfig(lambda_p=0.0, p_drop=0.0, p_int=0.4)
    a = baseline_loss(cem, batch(seed=2), cfg, rng(9))
    b = mixcem_loss(mix, batch(seed=2), cfg, rng(9), gate_open=True)
    assert a.task == pytest.approx(b.task, abs=1e-12)
    assert a.bce == pytest.approx(b.bce, abs=1e-12)
    assert a.total == pytest.approx(b.total, abs=1e-12)


def test_vanilla_bce_vanishes_for_perfect_concepts():
    k = 3
    model = init_model(ModelConfig("vanilla_cbm", n_in=k, k=k, L=4, backbone_widths=(k,)))
    model.params["psi.W0"] = np.eye(k)
    model.params["concept.W"] = 5000.0 * np.eye(k)
    c = np.random.default_rng(0).integers(0, 2, size=(20, k))
    res = baseline_loss(model, (2.0 * c - 1.0, c, np.zeros(20, dtype=int)), TrainConfig(), rng())
    assert res.bce < 1e-12


def test_hybrid_without_concept_weight_is_black_box_loss():
    model = init_model(ModelConfig("hybrid_cbm", n_in=4, k=3, L=4, backbone_widths=(5,), k_prime=2))
    res = baseline_loss(model, batch(), TrainConfig(lambda_c=0.0), rng())
    assert res.total == res.task


def test_pos_weight():
    c = np.array([[1, 0], [0, 0], [0, 1], [0, 1]])
    np.testing.assert_array_equal(concept_pos_weight(c), [3.0, 1.0])
    res = loss_for(mixcem(k=2), batch(k=2), TrainConfig(class_weighted_bce=True), rng(), concept_pos_weight(c))
    assert np.isfinite(res.total)


# -- loop -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_task():
    return generate_task(TaskSpec(K=3, k=3, n=6, L=4, N=300, sigma_x=0.1, seed=1))


def small_cfg(**kw):
    return TrainConfig(**{"max_epochs": 6, "val_freq": 2, "val_mc_samples": 2, "seed": 3, **kw})


def test_zero_epochs_returns_initial_params(tiny_task):
    model = mixcem(n_in=6)
    out, hist = train(model, tiny_task, small_cfg(max_epochs=0))
    assert hist.rows == []
    for n in model.params:
        assert out.params[n].tobytes() == model.params[n].tobytes()


def test_training_is_deterministic(tiny_task):
    a, ha = train(mixcem(n_in=6), tiny_task, small_cfg())
    b, hb = train(mixcem(n_in=6), tiny_task, small_cfg())
    for n in a.params:
        assert a.params[n].tobytes() == b.params[n].tobytes()
    assert ha.rows == hb.rows


def test_history_decomposition_and_checkpoints(tiny_task, tmp_path):
    cfg = small_cfg(lambda_c=0.5, lambda_p=2.0)
    model, hist = train(mixcem(n_in=6), tiny_task, cfg)
    for r in hist.rows:
        assert r["total"] == pytest.approx(r["task"] + 0.5 * r["bce"] + 2.0 * r["prior"], abs=1e-9)
    best = min(c["val_loss"] for c in hist.checkpoints())
    val = tiny_task.subset("val")
    vres = loss_for(model, (val.x, val.c, val.y), cfg, np.random.default_rng(np.random.SeedSequence([3, 17])))
    assert vres.total == pytest.approx(best, abs=1e-12)
    path = hist.write_csv(tmp_path / "h.csv", "# test")
    lines = path.read_text().splitlines()
    assert lines[0] == "# test" and lines[1] == ",".join(HISTORY_COLUMNS) and len(lines) == 2 + len(hist.rows)


def test_early_stopping_and_lr_decay(tiny_task):
    cfg = small_cfg(max_epochs=60, lr=1e-6, patience=1, val_freq=1, plateau_epochs=2)
    _, hist = train(mixcem(n_in=6), tiny_task, cfg)
    assert hist.stop_reason in ("early_stopping", "max_epochs")
    assert any("lr ->" in e for e in hist.events)


def test_non_finite_loss_aborts(tiny_task):
    model = mixcem(n_in=6)
    model.params["f.W"] *= 1e300
    model.params["psi.W0"] *= 1e300
    with pytest.raises(TrainingError, match="epoch 1 batch 0"):
        train(model, tiny_task, small_cfg())


def test_mixcem_learns_complete_task():
    ds = generate_task(TaskSpec(K=3, k=3, n=8, L=4, N=1500, sigma_x=0.1, seed=0))
    model = init_model(ModelConfig("mixcem", n_in=8, k=3, L=4, m=8, backbone_widths=(32, 32), seed=0))
    _, hist = train(model, ds, TrainConfig(max_epochs=150, seed=0))
    assert max(c["val_acc"] for c in hist.checkpoints()) >= 0.95
