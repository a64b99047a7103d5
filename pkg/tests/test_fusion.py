import csv
import math

import numpy as np
import pytest

from molt import tensor as T
from molt.fusion import METHODS, TokenFuser, fuse_with, layer_logits, tfm_fuse, tfm_weights, write_fusion_csv
from molt.tensor import ShapeError, Tensor

D, NZ = 4, 3


def layers(n, seed=0, batch=()):
    rng = np.random.default_rng(seed)
    return [Tensor(rng.normal(size=(*batch, NZ, D))) for _ in range(n)]


def fuser(method, n, seed=0):
    return TokenFuser.init(np.random.default_rng(seed), method, D, n, "f")


def test_mlp_starts_uniform():
    np.testing.assert_allclose(tfm_weights(fuser("mlp", 2), layers(2)).data, [0.5, 0.5], atol=1e-15)


def test_avg_pool_uniform():
    np.testing.assert_allclose(tfm_weights(fuser("avg-pool", 4), layers(4)).data, [0.25] * 4)


def test_mlp_logits_ln3():
    f = fuser("mlp", 2)
    f.w1.data[:] = np.eye(D)
    f.w2.data[:] = 0.0
    f.w2.data[0, 0] = 2 * math.log(3)
    a = np.zeros((NZ, D))
    b = np.zeros((NZ, D))
    b[:, 0] = math.atanh(0.5)
    np.testing.assert_allclose(tfm_weights(f, [Tensor(a), Tensor(b)]).data, [0.25, 0.75], atol=1e-14)


def test_empty_list_rejected():
    with pytest.raises(ValueError):
        tfm_weights(fuser("mlp", 1), [])


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        tfm_weights(fuser("avg-pool", 2), [Tensor(np.ones((NZ, D))), Tensor(np.ones((NZ + 1, D)))])
    with pytest.raises(ShapeError):
        tfm_weights(fuser("avg-pool", 3), layers(2))


def test_unknown_method():
    with pytest.raises(ValueError):
        fuser("max", 2)


@pytest.mark.parametrize("method", METHODS)
def test_single_layer_passthrough(method):
    z = layers(1)
    np.testing.assert_allclose(tfm_fuse(fuser(method, 1), z).data, z[0].data, atol=1e-15)


@pytest.mark.parametrize("method", METHODS)
def test_identical_layers(method):
    f = fuser(method, 3)
    if f.w2 is not None:
        f.w2.data[:] = np.random.default_rng(1).normal(size=f.w2.shape)
    z = layers(1) * 3
    np.testing.assert_allclose(tfm_fuse(f, z).data, z[0].data, atol=1e-12)


def test_weighted_sum_oracle_and_convexity():
    z = layers(3, seed=2)
    alpha = np.array([0.2, 0.5, 0.3])
    out = fuse_with(Tensor(alpha), z).data
    np.testing.assert_allclose(out, sum(a * t.data for a, t in zip(alpha, z)), atol=1e-14)
    st = np.stack([t.data for t in z])
    assert (out <= st.max(0) + 1e-12).all() and (out >= st.min(0) - 1e-12).all()


@pytest.mark.parametrize("method", METHODS)
def test_weights_are_probability_vectors(method):
    f = fuser(method, 3)
    rng = np.random.default_rng(4)
    for p in f.parameters():
        p.data[:] = rng.normal(size=p.shape) * 2
    w = tfm_weights(f, layers(3, seed=5, batch=(50,))).data
    assert w.shape == (50, 3) and (w >= 0).all()
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)


def test_input_dependence_by_method():
    rng = np.random.default_rng(6)
    mlp, gates = fuser("mlp", 2), fuser("learnable-gates", 2)
    mlp.w2.data[:] = rng.normal(size=mlp.w2.shape)
    gates.gates.data[:] = [0.3, -0.4]
    a, b = layers(2, seed=1), layers(2, seed=2)
    assert not np.allclose(tfm_weights(mlp, a).data, tfm_weights(mlp, b).data)
    np.testing.assert_array_equal(tfm_weights(gates, a).data, tfm_weights(gates, b).data)


def test_argmax_invariant_to_logit_shift():
    f = fuser("mlp", 3)
    f.w2.data[:] = np.random.default_rng(3).normal(size=f.w2.shape)
    logits = layer_logits(f, layers(3, seed=8))
    shifted = T.softmax(logits + 7.5).data
    assert np.argmax(shifted) == np.argmax(T.softmax(logits).data)
    np.testing.assert_allclose(shifted, T.softmax(logits).data, atol=1e-14)


def test_fusion_csv(tmp_path):
    write_fusion_csv(tmp_path / "f.csv", [("r", "audio", 7, 0.25), ("r", "audio", 8, 0.75)])
    rows = list(csv.reader(open(tmp_path / "f.csv")))
    assert rows == [["run_id", "modality", "layer_index", "alpha"], ["r", "audio", "7", "0.25"],
                    ["r", "audio", "8", "0.75"]]


def test_fuser_gradients():
    f = fuser("mlp", 3)
    rng = np.random.default_rng(9)
    for p in f.parameters():
        p.data[:] = rng.normal(size=p.shape)
    z = layers(3, seed=10, batch=(2,))
    r = Tensor(rng.normal(size=(2, NZ, D)))
    rep = T.grad_check(lambda: T.total(tfm_fuse(f, z) * r), f.parameters())
    assert rep.max_rel_error < 1e-6
