import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvmcad import tensor as T
from mvmcad.cfl import (cosine_distance_map, cross_feature_loss, hard_mining_threshold,
                        plain_alignment_loss, selection_size)
from mvmcad.errors import DimensionError
from mvmcad.tensor import Tensor

from conftest import check_grad


def _t(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def test_cosine_distance_examples(f64):
    rng = np.random.default_rng(0)
    a = rng.normal(size=(2, 5, 4))
    np.testing.assert_allclose(cosine_distance_map(_t(a), _t(a)).data, 0.0, atol=1e-15)
    np.testing.assert_allclose(cosine_distance_map(_t(a), _t(-a)).data, 2.0, atol=1e-15)
    e = np.eye(4)[None, :2]
    o = np.eye(4)[None, 2:]
    np.testing.assert_array_equal(cosine_distance_map(_t(e), _t(o)).data, 1.0)
    with pytest.raises(DimensionError):
        cosine_distance_map(_t(a), _t(a[:, :3]))


def test_mining_examples():
    h, idx = hard_mining_threshold(np.arange(1, 11) / 10.0)
    assert h == 1.0 and idx.tolist() == [9]
    h, idx = hard_mining_threshold(np.full(7, 0.3))
    assert idx.tolist() == list(range(7))
    rng = np.random.default_rng(1)
    s = rng.uniform(size=25)
    h, idx = hard_mining_threshold(s)
    ranked = sorted(s, reverse=True)
    assert h == ranked[2]
    assert sorted(idx.tolist()) == sorted(i for i in range(25) if s[i] >= ranked[2])
    assert len(idx) >= 3


def test_selection_size_is_ceiling():
    assert selection_size(10) == 1
    assert selection_size(11) == 2
    assert selection_size(25) == 3
    assert selection_size(1) == 1
    assert selection_size(128) == 13


def test_loss_extremes(f64):
    rng = np.random.default_rng(2)
    fe1, fe2 = rng.normal(size=(2, 2, 6, 4))
    loss, _ = cross_feature_loss(_t(fe1), _t(fe2), _t(fe2), _t(fe1))
    assert loss.item() == pytest.approx(0.0, abs=1e-15)
    loss, _ = cross_feature_loss(_t(fe1), _t(fe2), _t(-fe2), _t(-fe1))
    assert loss.item() == pytest.approx(2.0, abs=1e-15)


def test_loss_hand_composition(f64):
    rng = np.random.default_rng(3)
    fe1, fe2 = rng.normal(size=(2, 1, 10, 4))
    f1, f2 = rng.normal(size=(2, 1, 10, 4))

    def cos_dist(a, b):
        return 1 - np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))

    s1 = max(cos_dist(fe1[0, i], f2[0, i]) for i in range(10))
    s2 = max(cos_dist(fe2[0, i], f1[0, i]) for i in range(10))
    loss, report = cross_feature_loss(_t(fe1), _t(fe2), _t(f1), _t(f2))
    assert loss.item() == pytest.approx(0.5 * (s1 + s2), abs=1e-12)
    assert report.threshold_h == pytest.approx([s1, s2], abs=1e-12)
    assert report.selected_fraction == [0.1, 0.1]


def test_gradient_is_zero_outside_mined_tokens(f64):
    rng = np.random.default_rng(4)
    fe1, fe2, f1, f2 = (rng.normal(size=(2, 20, 8)) for _ in range(4))
    t1, t2 = Tensor(f1, requires_grad=True), Tensor(f2, requires_grad=True)
    loss, _ = cross_feature_loss(_t(fe1), _t(fe2), t1, t2)
    T.backward(loss)
    _, mined2 = hard_mining_threshold(cosine_distance_map(_t(fe1), _t(f2)))
    _, mined1 = hard_mining_threshold(cosine_distance_map(_t(fe2), _t(f1)))
    for grad, mined in ((t2.grad, mined2), (t1.grad, mined1)):
        flat = grad.reshape(40, 8)
        outside = np.setdiff1d(np.arange(40), mined)
        assert np.all(flat[outside] == 0.0)
        assert np.all(np.linalg.norm(flat[mined], axis=1) > 0)


def test_cross_pairing_structure(f64):
    rng = np.random.default_rng(5)
    fe1, fe2, f1, f2 = (rng.normal(size=(1, 10, 4)) for _ in range(4))
    _, base = cross_feature_loss(_t(fe1), _t(fe2), _t(f1), _t(f2))
    bumped = f1 + rng.normal(size=f1.shape)
    _, after = cross_feature_loss(_t(fe1), _t(fe2), _t(bumped), _t(f2))
    assert after.per_pair[0] == base.per_pair[0]
    assert after.per_pair[1] != base.per_pair[1]


def test_scale_invariance(f64):
    rng = np.random.default_rng(6)
    fe1, fe2, f1, f2 = (rng.normal(size=(2, 8, 4)) for _ in range(4))
    scales = rng.uniform(0.1, 10.0, size=(2, 8, 1))
    a = cosine_distance_map(_t(fe1), _t(f2)).data
    b = cosine_distance_map(_t(fe1), _t(f2 * scales)).data
    np.testing.assert_allclose(a, b, atol=1e-6)
    la, _ = cross_feature_loss(_t(fe1), _t(fe2), _t(f1), _t(f2))
    lb, _ = cross_feature_loss(_t(fe1), _t(fe2), _t(f1), _t(f2 * scales))
    assert abs(la.item() - lb.item()) <= 1e-6


def test_loss_gradients(f64):
    rng = np.random.default_rng(7)
    for _ in range(20):
        fe1, fe2, f1, f2 = (rng.normal(size=(1, 10, 4)) for _ in range(4))
        check_grad(lambda t: cross_feature_loss(_t(fe1), _t(fe2), _t(f1), t)[0], f2)
        check_grad(lambda t: cross_feature_loss(t, _t(fe2), _t(f1), _t(f2))[0], fe1)


def test_plain_variant_pairs_uncrossed_without_mining(f64):
    rng = np.random.default_rng(8)
    fe1, fe2 = rng.normal(size=(2, 1, 10, 4))
    loss, report = plain_alignment_loss(_t(fe1), _t(fe2), _t(fe1), _t(fe2))
    assert loss.item() == pytest.approx(0.0, abs=1e-15)
    f1, f2 = rng.normal(size=(2, 1, 10, 4))
    loss, _ = plain_alignment_loss(_t(fe1), _t(fe2), _t(f1), _t(f2))
    ref = 0.5 * (cosine_distance_map(_t(fe1), _t(f1)).data.mean()
                 + cosine_distance_map(_t(fe2), _t(f2)).data.mean())
    assert loss.item() == pytest.approx(ref, abs=1e-14)
    assert report.selected_fraction == [1.0, 1.0]


def test_inverted_mining_selects_complement(f64):
    rng = np.random.default_rng(9)
    fe1, fe2, f1, f2 = (rng.normal(size=(1, 10, 4)) for _ in range(4))
    _, report = cross_feature_loss(_t(fe1), _t(fe2), _t(f1), _t(f2), invert_mining=True)
    assert report.selected_fraction == [0.9, 0.9]


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 30))
def test_loss_in_range(seed, n):
    rng = np.random.default_rng(seed)
    with T.default_dtype(np.float64):
        feats = [_t(rng.normal(size=(1, n, 3))) for _ in range(4)]
        loss, report = cross_feature_loss(*feats)
    assert 0.0 <= loss.item() <= 2.0
    assert all(0 < f <= 1 for f in report.selected_fraction)
