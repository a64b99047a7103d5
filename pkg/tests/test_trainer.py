import json

import numpy as np
import pytest

from molt import tensor as T
from molt.backbone import forward_collect
from molt.config import MoltConfig
from molt.trainer import (Adam, MoltModel, TrainingDiverged, accuracy, activation_counts, cosine_lr, count_trainable,
                          dataset_for, estimate_activation_memory, evaluate, run_grad_suite, tiny_config, train)
from molt.tensor import Parameter

SMALL = {
    "backbone": {"depth": 4, "width": 8, "heads": 2, "n_tokens": 4, "seed": 0},
    "stage_plan": {"early": [1, 2], "mid": [3], "late": [4], "adapted": ["mid", "late"]},
    "fdm": {"n_uda": 1, "n_cda": 1, "n_tokens": 2, "heads": 2},
    "data": {"regime": "audio-only", "num_classes": 3, "n": 90, "noise": 0.5},
    "optim": {"epochs": 3, "batch_size": 16, "lr": 0.01},
}


def small(**changes) -> MoltConfig:
    cfg = MoltConfig.from_dict(SMALL)
    return cfg.replace(**changes) if changes else cfg


def hand_count(cfg: MoltConfig) -> int:
    d, nz, k = cfg.backbone.width, cfg.fdm.n_tokens, cfg.data.num_classes
    nu, nc = cfg.fdm.n_uda, cfg.fdm.n_cda
    e = nu + nc
    per_layer = nu * 2 * (nz * d + 4 * d * d) + nc * 2 * (nz * d + 7 * d * d) + d * d + d + (d + 1) * e
    layers = len(cfg.adapted_layers)
    fusion = {"mlp": 2 * (d * d + 2 * d), "learnable-gates": 2 * layers, "avg-pool": 0}[cfg.fusion]
    return layers * per_layer + fusion + 2 * d * k + k


# optimiser -------------------------------------------------------------------

def test_adam_zero_step_size_is_noop():
    p = Parameter(np.array([1.0, -2.0]), "p")
    opt = Adam([p], lr=0.0)
    opt.step({"p": np.array([3.0, 4.0])})
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    p = Parameter(np.array([1.0, -2.0]), "p")
    Adam([p], lr=0.1).step({"p": np.array([3.0, -4.0])})
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-7)


def test_cosine_schedule():
    assert cosine_lr(1e-3, 0, 100) == 1e-3
    assert cosine_lr(1e-3, 50, 100) == pytest.approx(5e-4)
    assert cosine_lr(1e-3, 100, 100) == pytest.approx(0.0)


# accounting ------------------------------------------------------------------

@pytest.mark.parametrize("changes", [
    {}, {"fusion": "learnable-gates"}, {"fusion": "avg-pool"}, {"fdm.n_uda": 3, "fdm.n_cda": 0},
    {"fdm.n_tokens": 6}, {"stage_plan.adapted": ["early", "mid", "late"]},
])
def test_trainable_count_matches_hand_count(changes):
    cfg = small(**changes)
    assert count_trainable(cfg).trainable_count == hand_count(cfg)


def test_default_hand_count():
    cfg = MoltConfig()
    rep = count_trainable(cfg)
    assert rep.trainable_count == hand_count(cfg) == 50760
    assert sum(rep.per_module.values()) == rep.trainable_count
    assert rep.frozen_count == 2 * 8 * (4 * 32 * 32 + 2 * 32 * 128 + 128 + 32 + 4 * 32)


@pytest.mark.parametrize("key, values", [
    ("stage_plan.adapted", [["late"], ["mid", "late"], ["early", "mid", "late"]]),
    ("fdm.n_uda", [1, 2, 3]),
    ("fdm.n_cda", [0, 1, 2]),
    ("fdm.n_tokens", [2, 4, 6, 8]),
])
def test_trainable_fraction_strictly_increases(key, values):
    fr = [count_trainable(small(**{key: v})).trainable_fraction for v in values]
    assert all(a < b for a, b in zip(fr, fr[1:]))


def test_memory_model():
    cfg = MoltConfig()
    assert activation_counts(cfg, []) == (0, 0)
    rep = estimate_activation_memory(cfg)
    plans = rep.per_plan
    assert len(plans) == 7
    late, every = plans["late"], plans["early+mid+late"]
    assert late["parallel"] < every["parallel"]
    assert rep.activation_elements_adapted == late["parallel"]
    assert late["parallel"] < every["sequential"]
    for p in plans.values():
        assert p["parallel"] <= p["sequential"]
    # monotone in the adapted set
    for name, p in plans.items():
        for other, q in plans.items():
            if set(name.split("+")) < set(other.split("+")):
                assert p["parallel"] < q["parallel"] and p["sequential"] <= q["sequential"]


# model behaviour -------------------------------------------------------------

def test_parallel_taps_are_unchanged_by_adapters():
    cfg = small()
    model = MoltModel(cfg)
    x = np.random.default_rng(0).normal(size=(5, 4, 8))
    before = [f.data.copy() for f in forward_collect(model.stacks["audio"], x)]
    out = model.forward(x, x)
    T.backward(model.losses(out, np.zeros(5, dtype=int)).total, model.parameters())
    after = [f.data for f in forward_collect(model.stacks["audio"], x)]
    assert all(np.array_equal(a, b) for a, b in zip(before, after))


def test_train_updates_only_adapters_and_is_deterministic():
    cfg = small()
    m1, r1 = train(cfg)
    m2, r2 = train(cfg)
    fresh = MoltModel(cfg)
    for p, q in zip(m1.frozen_parameters(), fresh.frozen_parameters()):
        assert np.array_equal(p.data, q.data)
    assert any(not np.array_equal(p.data, q.data) for p, q in zip(m1.parameters(), fresh.parameters()))
    assert r1.to_json() == r2.to_json()
    assert len(r1.epochs) == 3
    assert set(r1.epochs[0]) == {"epoch", "total", "task_loss", "tor_audio", "tor_visual", "train_accuracy",
                                 "val_accuracy", "lr"}
    json.loads(r1.to_json())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_step_and_lr():
    cfg = small(**{"optim.lr": 1e200, "optim.schedule": "constant"})
    with pytest.raises(TrainingDiverged, match=r"step \d+ \(lr=1e\+200\)"):
        train(cfg)


def test_evaluate_and_accuracy():
    cfg = small()
    model = MoltModel(cfg)
    ds = dataset_for(cfg)
    # zero head: all logits tie, argmax picks class 0
    model.head_w.data[:] = 0.0
    idx = ds.split("test")
    assert evaluate(model, ds, "test") == pytest.approx(float((ds.labels[idx] == 0).mean()))
    with pytest.raises(ValueError):
        accuracy([], [])
    ds.splits["empty"] = np.array([], dtype=int)
    try:
        with pytest.raises(ValueError, match="empty"):
            evaluate(model, ds, "empty")
    finally:
        del ds.splits["empty"]


# gradient suite --------------------------------------------------------------

def test_grad_suite_tiny_config():
    rep = run_grad_suite()
    assert rep.max_rel_error < 1e-5
    assert rep.n_checked == sum(p.size for p in MoltModel(tiny_config()).parameters())


def test_grad_suite_rejects_large_shapes():
    with pytest.raises(ValueError):
        run_grad_suite(MoltConfig())


def test_lambda_zero_keeps_parameters_and_tor_has_no_effect():
    cfg = tiny_config(lambda_tor=0.0)
    model = MoltModel(cfg)
    assert len(model.parameters()) == len(MoltModel(tiny_config()).parameters())
    rng = np.random.default_rng(0)
    fa = {l: rng.normal(size=(2, 4, 4)) for l in model.layers}
    fv = {l: rng.normal(size=(2, 4, 4)) for l in model.layers}
    out = model.forward_features(fa, fv)
    bundle = model.losses(out, np.array([0, 1]))
    assert bundle.total.item() == bundle.task_loss.item()


def test_router_perturbation_changes_loss_and_gets_gradient():
    cfg = tiny_config()
    model = MoltModel(cfg)
    for p in model.parameters():
        p.data += np.random.default_rng(1).normal(0, 0.5, p.shape)
    rng = np.random.default_rng(2)
    fa = {l: rng.normal(size=(2, 4, 4)) for l in model.layers}
    fv = {l: rng.normal(size=(2, 4, 4)) for l in model.layers}
    labels = np.array([0, 2])

    def loss():
        return model.losses(model.forward_features(fa, fv), labels).total

    base = loss().item()
    router = model.fdms[model.layers[0]].router
    grads = T.backward(loss(), model.parameters())
    assert np.abs(grads[router.w2.name]).sum() > 0
    router.w2.data += 0.1
    router.w2.data[:, 0] += 0.5
    assert loss().item() != base
