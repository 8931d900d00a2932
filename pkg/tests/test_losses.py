import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tripemb import losses
from tripemb.errors import UsageError
from tripemb.losses import ClipBounds

B = ClipBounds(-0.01, 0.1)

finite = st.floats(-10, 10, allow_nan=False)
vec2 = arrays(np.float64, 2, elements=finite)


def test_sq_euclidean_examples():
    assert losses.sq_euclidean([1, 1], [1, 1]) == 0
    assert losses.sq_euclidean([0, 0], [3, 4]) == 25
    assert losses.sq_euclidean([0.1, 0.2], [0.4, 0.6]) == pytest.approx(0.25, abs=1e-15)


def test_sq_euclidean_dim_mismatch():
    with pytest.raises(UsageError):
        losses.sq_euclidean([0, 0], [0, 0, 0])


@given(vec2, vec2)
def test_sq_euclidean_metric_properties(a, b):
    assert losses.sq_euclidean(a, b) == losses.sq_euclidean(b, a)
    assert losses.sq_euclidean(a, b) >= 0
    assert losses.sq_euclidean(a, a.copy()) == 0


def test_clip_examples():
    assert losses.clip(-0.5, B) == 0.0
    assert losses.clip(0.2, B) == 1.0
    assert losses.clip(0.045, B) == pytest.approx(0.5, abs=1e-15)
    assert losses.clip(B.l, B) == 0.0
    assert losses.clip(B.u, B) == 1.0


def test_bounds_validated():
    with pytest.raises(UsageError):
        ClipBounds(0.1, 0.1)


@given(st.floats(-1, 1), st.floats(-1, 1))
def test_clip_monotone(x, y):
    lo, hi = sorted((x, y))
    assert losses.clip(lo, B) <= losses.clip(hi, B)


@given(st.floats(-0.01, 0.1))
def test_clip_linear_inside(x):
    assert losses.clip(x, B) == pytest.approx((x + 0.01) / 0.11, abs=1e-12)


def test_clipped_loss_examples():
    assert losses.clipped_triplet_loss([0, 0], [0, 0], [1, 0], B) == 0.0
    assert losses.clipped_triplet_loss([0, 0], [1, 0], [0, 0], B) == 1.0
    # 0.09 - 0.04 = 0.05 -> 0.06 / 0.11
    assert losses.clipped_triplet_loss([0, 0], [0.3, 0], [0.2, 0], B) == pytest.approx(0.545455, abs=1e-6)


def test_hinge_examples():
    assert losses.hinge_triplet_loss([0, 0], [0, 0], [5, 5], 0.0) == 0.0
    assert losses.hinge_triplet_loss([0, 0], [1, 0], [2, 0], 0.0) == 0.0
    assert losses.hinge_triplet_loss([0, 0], [1, 0], [2, 0], 4.0) == 1.0
    with pytest.raises(UsageError):
        losses.hinge_triplet_loss([0, 0], [1, 0], [2, 0], -1.0)


@given(vec2, vec2, vec2)
def test_pre_clip_antisymmetry(hi, hj, hk):
    assert losses.triplet_arg(hi, hj, hk) == -losses.triplet_arg(hi, hk, hj)


@given(vec2, vec2, vec2)
def test_loss_extremes_iff(hi, hj, hk):
    x = losses.triplet_arg(hi, hj, hk)
    loss = losses.clipped_triplet_loss(hi, hj, hk, B)
    assert (loss == 0) == (x <= B.l)
    assert (loss == 1) == (x >= B.u)
    assert 0 <= loss <= 1


@given(vec2, vec2, vec2)
def test_violation_implies_loss_above_clip_of_zero(hi, hj, hk):
    if losses.is_violated(hi, hj, hk):
        assert losses.clipped_triplet_loss(hi, hj, hk, B) > losses.clip(0.0, B)


def test_loss_grad_flat_regions():
    for args in (([0, 0], [0, 0], [1, 0]), ([0, 0], [1, 0], [0, 0])):
        for g in losses.loss_grad(*map(np.array, args), B):
            assert not np.any(g)


def _fd_grads(f, vecs, h=1e-7):
    out = []
    for v in range(3):
        g = np.zeros_like(vecs[v])
        for i in range(len(g)):
            plus = [x.copy() for x in vecs]
            minus = [x.copy() for x in vecs]
            plus[v][i] += h
            minus[v][i] -= h
            g[i] = (f(*plus) - f(*minus)) / (2 * h)
        out.append(g)
    return out


def test_loss_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    checked = 0
    while checked < 50:
        hi, hj, hk = (rng.normal(scale=0.2, size=3) for _ in range(3))
        x = losses.triplet_arg(hi, hj, hk)
        if not B.l + 1e-4 < x < B.u - 1e-4:
            continue
        analytic = losses.loss_grad(hi, hj, hk, B)
        numeric = _fd_grads(lambda a, b, c: losses.clipped_triplet_loss(a, b, c, B), [hi, hj, hk])
        for a, n in zip(analytic, numeric):
            np.testing.assert_allclose(a, n, rtol=1e-6, atol=1e-9)
        checked += 1


def test_hinge_grad_matches_finite_differences():
    rng = np.random.default_rng(1)
    hi, hj, hk = (rng.normal(size=2) for _ in range(3))
    margin = abs(losses.triplet_arg(hi, hj, hk)) + 1.0  # active side
    analytic = losses.hinge_loss_grad(hi, hj, hk, margin)
    numeric = _fd_grads(lambda a, b, c: losses.hinge_triplet_loss(a, b, c, margin), [hi, hj, hk])
    for a, n in zip(analytic, numeric):
        np.testing.assert_allclose(a, n, rtol=1e-6)


def test_loss_grad_batched_equals_rowwise():
    rng = np.random.default_rng(2)
    hi, hj, hk = (rng.normal(scale=0.1, size=(20, 2)) for _ in range(3))
    batched = losses.loss_grad(hi, hj, hk, B)
    for r in range(20):
        single = losses.loss_grad(hi[r], hj[r], hk[r], B)
        for a, b in zip(batched, single):
            np.testing.assert_array_equal(a[r], b)


def test_is_violated_examples():
    assert not losses.is_violated([0, 0], [0, 0], [1, 1])
    assert losses.is_violated([0, 0], [1, 1], [0, 0])
    assert not losses.is_violated([2, 2], [2, 2], [2, 2])


def test_violation_rate_examples():
    emb = np.zeros((4, 2))
    assert losses.violation_rate(emb, [(0, 1, 2), (1, 2, 3)]) == 0.0
    emb = np.array([[0, 0], [0.1, 0], [1, 0]])
    assert losses.violation_rate(emb, [(0, 1, 2), (0, 2, 1)]) == 50.0


def test_violation_rate_errors():
    with pytest.raises(UsageError):
        losses.violation_rate(np.zeros((3, 2)), [])
    with pytest.raises(UsageError):
        losses.violation_rate(np.zeros((3, 2)), [(0, 1, 3)])


def test_violation_rate_random_embedding_near_half():
    rng = np.random.default_rng(5)
    emb = rng.normal(size=(2000, 2))
    triplets = np.array([rng.choice(2000, 3, replace=False) for _ in range(10000)])
    assert abs(losses.violation_rate(emb, triplets) - 50.0) <= 2.0


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_violation_rate_permutation_and_relabel_invariant(seed):
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(12, 3))
    triplets = np.array([rng.choice(12, 3, replace=False) for _ in range(40)])
    base = losses.violation_rate(emb, triplets)
    assert losses.violation_rate(emb, triplets[rng.permutation(40)]) == base
    relabel = rng.permutation(12)  # image i becomes relabel[i]
    new_emb = np.empty_like(emb)
    new_emb[relabel] = emb
    assert losses.violation_rate(new_emb, relabel[triplets]) == base
