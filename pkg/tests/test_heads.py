import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exchanger import autodiff as ad
from exchanger.autodiff import Tensor
from exchanger.errors import ContractError, DataError
from exchanger.heads import (
    IGNORE_LABEL,
    ClassifierParams,
    DenseHeadParams,
    cosine_logits,
    cosine_softmax_loss,
    cross_entropy,
    dense_head,
    focal_ce_loss,
    mil_pool,
    temporal_pool,
)


# -- pooling ------------------------------------------------------------------

def test_mil_pool_examples():
    same = Tensor(np.tile([0.3, -1.0, 2.0], (4, 1)))
    np.testing.assert_allclose(mil_pool(same).data, [0.3, -1.0, 2.0], rtol=1e-6)
    np.testing.assert_array_equal(mil_pool(Tensor([[1.0, 0.0], [0.0, 1.0]])).data, [0.5, 0.5])


def test_mil_pool_ignores_invalid_pixels():
    x = Tensor([[1.0, 2.0], [100.0, -100.0], [3.0, 4.0]])
    np.testing.assert_array_equal(mil_pool(x, np.array([True, False, True])).data, [2.0, 3.0])


def test_pooling_needs_a_valid_entry():
    with pytest.raises(DataError):
        mil_pool(Tensor(np.ones((2, 3))), np.zeros(2, bool))
    with pytest.raises(DataError):
        temporal_pool(Tensor(np.ones((2, 4, 3))), np.array([[True] * 4, [False] * 4]))


def test_temporal_pool_examples():
    const = Tensor(np.tile([1.5, -0.5], (5, 1)))
    np.testing.assert_allclose(temporal_pool(const, np.ones(5, bool)).data, [1.5, -0.5])
    two = Tensor([[2.0, 0.0], [4.0, 1.0]])
    np.testing.assert_array_equal(temporal_pool(two, np.ones(2, bool)).data, [3.0, 0.5])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 10), st.integers(0, 5), st.integers(0, 2**31))
def test_temporal_pool_invariant_to_masked_extension(t, k, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(t, 3))
    base = temporal_pool(Tensor(x), np.ones(t, bool)).data
    ext = np.concatenate([x, rng.normal(0, 50, (k, 3))])
    mask = np.concatenate([np.ones(t, bool), np.zeros(k, bool)])
    np.testing.assert_allclose(temporal_pool(Tensor(ext), mask).data, base, rtol=1e-5, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31))
def test_mil_pool_permutation_invariant(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 5))
    perm = rng.permutation(n)
    np.testing.assert_allclose(mil_pool(Tensor(x[perm])).data, mil_pool(Tensor(x)).data, rtol=1e-5, atol=1e-6)


# -- cosine classifier ---------------------------------------------------------------

def _params_with(prototypes, scale):
    p = ClassifierParams.init(4, len(prototypes), np.random.default_rng(0), hidden=8, d_proj=len(prototypes[0]))
    p.prototypes = Tensor(np.asarray(prototypes, float), requires_grad=True)
    p.scale = Tensor(np.array([scale]), requires_grad=True)
    return p


def test_cosine_loss_closed_form():
    params = _params_with([[1.0, 0.0], [0.0, 1.0]], 1.0)
    loss = cosine_softmax_loss(Tensor([1.0, 0.0]), 0, params).item()
    assert math.isclose(loss, -math.log(math.e / (math.e + 1)), abs_tol=1e-6)
    assert math.isclose(loss, 0.31326, abs_tol=1e-5)


def test_identical_prototypes_give_log_k():
    params = _params_with([[0.3, 0.4, 1.0]] * 5, 10.0)
    for f in ([1.0, 0.0, 0.0], [-2.0, 3.0, 0.5]):
        assert math.isclose(cosine_softmax_loss(Tensor(f), 2, params).item(), math.log(5), rel_tol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3), st.integers(0, 2**31))
def test_cosine_loss_scale_invariance(a, b, seed):
    rng = np.random.default_rng(seed)
    protos = rng.normal(size=(3, 6))
    f = rng.normal(size=(2, 6))
    ref = cosine_softmax_loss(Tensor(f), [0, 2], _params_with(protos, 7.0)).item()
    scaled = cosine_softmax_loss(Tensor(f * a), [0, 2], _params_with(protos * b, 7.0)).item()
    assert math.isclose(ref, scaled, rel_tol=1e-4, abs_tol=1e-6)


def test_zero_feature_is_finite():
    params = _params_with([[1.0, 0.0], [0.0, 1.0]], 10.0)
    f = Tensor(np.zeros(2), requires_grad=True)
    loss = cosine_softmax_loss(f, 1, params)
    ad.backward(loss)
    assert math.isclose(loss.item(), math.log(2), rel_tol=1e-6)
    assert np.all(np.isfinite(f.grad))


def test_label_out_of_range():
    params = _params_with([[1.0, 0.0], [0.0, 1.0]], 1.0)
    with pytest.raises(ContractError):
        cosine_softmax_loss(Tensor([1.0, 0.0]), 2, params)


def test_classifier_shapes_and_learnable_scale():
    p = ClassifierParams.init(16, 5, np.random.default_rng(1))
    assert p.proj_w1.shape == (16, 256) and p.proj_w2.shape == (256, 128)
    assert p.prototypes.shape == (5, 128)
    assert p.scale.requires_grad and p.scale.item() == 10.0
    logits = cosine_logits(Tensor(np.random.default_rng(2).normal(size=(3, 128))), p)
    assert logits.shape == (3, 5)
    assert np.all(np.abs(logits.data) <= 10.0 + 1e-4)


# -- focal loss ---------------------------------------------------------------------------

def test_focal_closed_form():
    assert math.isclose(focal_ce_loss(Tensor([[0.0, 0.0]]), [1], 2.0).item(), 0.25 * math.log(2), abs_tol=1e-7)
    assert math.isclose(0.25 * math.log(2), 0.17329, abs_tol=1e-5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 7))
def test_focal_gamma_zero_is_cross_entropy(seed, k):
    rng = np.random.default_rng(seed)
    with ad.precision(np.float64):
        logits = Tensor(rng.normal(0, 3, (6, k)))
        labels = rng.integers(0, k, 6)
        a = focal_ce_loss(logits, labels, 0.0).item()
        b = cross_entropy(logits, labels).item()
    z = logits.data
    direct = np.mean(np.log(np.exp(z).sum(-1)) - z[np.arange(6), labels])
    assert abs(a - b) <= 1e-7 and abs(a - direct) <= 1e-7


def test_focal_confident_prediction_near_zero():
    assert focal_ce_loss(Tensor([[30.0, 0.0, 0.0]]), [0], 2.0).item() < 1e-12


def test_focal_ignores_ignore_label():
    logits = Tensor([[0.0, 0.0], [5.0, -5.0]])
    both = focal_ce_loss(logits, [1, IGNORE_LABEL], 2.0).item()
    assert math.isclose(both, focal_ce_loss(Tensor([[0.0, 0.0]]), [1], 2.0).item(), rel_tol=1e-6)


def test_focal_rejects_negative_gamma():
    with pytest.raises(ContractError):
        focal_ce_loss(Tensor([[0.0, 1.0]]), [0], -1.0)


# -- dense head ----------------------------------------------------------------------

def test_zero_weights_uniform_probabilities():
    p = DenseHeadParams(Tensor(np.zeros((4, 3))), Tensor(np.zeros(3)))
    logits = dense_head(Tensor(np.random.default_rng(0).normal(size=(5, 5, 4))), p)
    probs = ad.softmax(logits, axis=-1).data
    assert logits.shape == (5, 5, 3)
    np.testing.assert_allclose(probs, 1 / 3, rtol=1e-6)


def test_one_by_one_grid_is_plain_classification():
    p = DenseHeadParams.init(4, 3, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(4,))
    grid = dense_head(Tensor(x.reshape(1, 1, 4)), p).data.reshape(3)
    np.testing.assert_allclose(grid, x @ p.weight.data + p.bias.data, rtol=1e-5)


def test_linear_probe_weights_reproduce_probe_accuracy():
    rng = np.random.default_rng(0)
    k, d = 4, 6
    centers = rng.normal(0, 2, (k, d))
    labels = rng.integers(0, k, (8, 8))
    feats = centers[labels] + rng.normal(0, 1.0, (8, 8, d))
    # least-squares probe on one-hot targets with a bias column
    x = np.concatenate([feats.reshape(-1, d), np.ones((64, 1))], axis=1)
    w, *_ = np.linalg.lstsq(x, np.eye(k)[labels.reshape(-1)], rcond=None)
    probe_acc = np.mean((x @ w).argmax(-1) == labels.reshape(-1))
    head = DenseHeadParams(Tensor(w[:d]), Tensor(w[d]))
    head_acc = np.mean(dense_head(Tensor(feats), head).data.argmax(-1) == labels)
    assert head_acc == probe_acc
    assert probe_acc > 0.5
