import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from po2pls.errors import (
    InvalidParams,
    InvalidRanks,
    NonOrthogonalLoadings,
    NonPositiveVariance,
    OrderingViolation,
    RankDeficientConcatenation,
)
from po2pls.model import (
    RankSpec,
    implied_covariance,
    match_components,
    sample,
    validate_and_normalize,
)

from _helpers import dense_sigma, random_theta


def test_rankspec_bounds():
    RankSpec(p=5, q=4, r=1, r_x=3, r_y=2)
    with pytest.raises(InvalidRanks):
        RankSpec(p=5, q=4, r=0)
    with pytest.raises(InvalidRanks):
        RankSpec(p=5, q=4, r=1, r_x=-1)
    with pytest.raises(InvalidRanks):
        RankSpec(p=5, q=4, r=2, r_x=3)
    with pytest.raises(InvalidRanks):
        RankSpec(p=5, q=4, r=2, r_y=2)


def test_rankspec_slices():
    R = RankSpec(p=8, q=6, r=2, r_x=1, r_y=3)
    assert R.k == 8
    assert list(R.x_index) == [0, 1, 4]
    assert list(R.y_index) == [2, 3, 5, 6, 7]


def test_params_are_immutable(small_theta):
    with pytest.raises(ValueError):
        small_theta.W[0, 0] = 1.0
    with pytest.raises(AttributeError):
        small_theta.sigma_e2 = 2.0


def test_canonical_theta_unchanged(small_theta):
    canon = validate_and_normalize(small_theta)
    again = validate_and_normalize(canon)
    for name, a in canon.arrays().items():
        assert np.array_equal(a, again.arrays()[name]), name


def test_negated_w_column_is_restored(small_theta):
    canon = validate_and_normalize(small_theta)
    W = canon.W.copy()
    W[:, 0] *= -1
    flipped = canon.replace(W=W)
    out = validate_and_normalize(flipped)
    np.testing.assert_array_equal(out.W, canon.W)
    np.testing.assert_array_equal(out.B, canon.B)
    np.testing.assert_array_equal(out.sigma_t2, canon.sigma_t2)
    np.testing.assert_array_equal(out.sigma_h2, canon.sigma_h2)
    # the joint sign moves to C so that the covariance of the input is kept
    np.testing.assert_allclose(dense_sigma(out), dense_sigma(flipped), atol=1e-13)


def test_negative_b_moves_sign_to_c(small_theta):
    B = small_theta.B.copy()
    B[1] *= -1
    theta = small_theta.replace(B=B)
    out = validate_and_normalize(theta)
    assert np.all(out.B > 0)
    np.testing.assert_allclose(dense_sigma(out), dense_sigma(theta), atol=1e-13)


def test_joint_components_sorted(rng):
    ranks = RankSpec(p=6, q=5, r=2, r_x=1, r_y=1)
    theta = random_theta(rng, ranks).replace(B=[1.0, 1.0], sigma_t2=[1.0, 3.0], sigma_h2=[0.2, 0.7])
    out = validate_and_normalize(theta)
    np.testing.assert_allclose(out.sigma_t2 * out.B, [3.0, 1.0])
    np.testing.assert_allclose(out.sigma_h2, [0.7, 0.2])
    np.testing.assert_allclose(np.abs(out.W), np.abs(theta.W[:, ::-1]))
    np.testing.assert_allclose(np.abs(out.C), np.abs(theta.C[:, ::-1]))
    np.testing.assert_allclose(dense_sigma(out), dense_sigma(theta), atol=1e-13)


def test_ties_ordered_by_sigma_t(rng):
    ranks = RankSpec(p=6, q=5, r=2)
    theta = random_theta(rng, ranks).replace(B=[2.0, 1.0], sigma_t2=[1.0, 2.0])
    out = validate_and_normalize(theta)
    np.testing.assert_allclose(out.sigma_t2, [2.0, 1.0])
    with pytest.raises(OrderingViolation):
        validate_and_normalize(theta, strict=True)


def test_zero_b_orders_by_sigma_t(rng):
    ranks = RankSpec(p=6, q=5, r=2)
    theta = random_theta(rng, ranks).replace(B=[0.0, 0.0], sigma_t2=[0.5, 2.0])
    out = validate_and_normalize(theta)
    np.testing.assert_allclose(out.sigma_t2, [2.0, 0.5])
    # with B = 0 the C columns are canonicalised on their own
    assert all(c[np.argmax(np.abs(c))] > 0 for c in out.C.T)
    np.testing.assert_allclose(dense_sigma(out), dense_sigma(theta), atol=1e-13)


def test_validation_errors(small_theta):
    W = small_theta.W.copy()
    W[:, 0] *= 2
    with pytest.raises(NonOrthogonalLoadings):
        validate_and_normalize(small_theta.replace(W=W))
    with pytest.raises(RankDeficientConcatenation):
        validate_and_normalize(small_theta.replace(W_perp=small_theta.W[:, :1]))
    with pytest.raises(NonPositiveVariance):
        validate_and_normalize(small_theta.replace(sigma_e2=0.0))
    with pytest.raises(NonPositiveVariance):
        validate_and_normalize(small_theta.replace(sigma_t2=[1.0, -1.0]))


def test_implied_covariance_blocks(small_theta):
    th = small_theta
    S = implied_covariance(th).dense()
    p = th.ranks.p
    Sx = th.W @ np.diag(th.sigma_t2) @ th.W.T + th.W_perp @ np.diag(th.sigma_to2) @ th.W_perp.T
    Sx += th.sigma_e2 * np.eye(p)
    Sy = th.C @ np.diag(th.sigma_u2) @ th.C.T + th.C_perp @ np.diag(th.sigma_uo2) @ th.C_perp.T
    Sy += th.sigma_f2 * np.eye(th.ranks.q)
    np.testing.assert_allclose(S[:p, :p], Sx, atol=1e-13)
    np.testing.assert_allclose(S[p:, p:], Sy, atol=1e-13)
    np.testing.assert_allclose(S[:p, p:], th.W @ np.diag(th.sigma_t2 * th.B) @ th.C.T, atol=1e-13)
    np.testing.assert_allclose(S, dense_sigma(th), atol=1e-12)


def test_zero_b_gives_zero_cross_block(small_theta):
    th = small_theta.replace(B=np.zeros(2))
    S = implied_covariance(th).dense()
    assert np.all(S[:8, 8:] == 0.0)


def test_ppls_special_case(rng):
    ranks = RankSpec(p=6, q=4, r=2)
    th = random_theta(rng, ranks).replace(B=[1.0, 1.0], sigma_h2=[0.0, 0.0])
    S = implied_covariance(th).dense()
    np.testing.assert_allclose(S[6:, 6:], th.C @ np.diag(th.sigma_t2) @ th.C.T + th.sigma_f2 * np.eye(4), atol=1e-13)


def test_sample_is_deterministic(small_theta):
    X1, Y1 = sample(small_theta, 50, seed=3)
    X2, Y2 = sample(small_theta, 50, seed=3)
    assert np.array_equal(X1, X2) and np.array_equal(Y1, Y2)
    X3, _ = sample(small_theta, 50, seed=4)
    assert not np.array_equal(X1, X3)


def test_sample_latents_follow_the_model(small_theta):
    X, Y, lat = sample(small_theta, 5, seed=1, return_latents=True)
    assert X.shape == (5, 8) and Y.shape == (5, 5)
    assert lat.t.shape == (5, 2) and lat.t_perp.shape == (5, 1)
    # u - tB is the heterogeneity draw, with finite variance
    assert np.all(np.isfinite(lat.u - lat.t * small_theta.B))


def test_sample_rejects_degenerate_variances(small_theta):
    bad = small_theta.replace(sigma_e2=0.0, sigma_f2=0.0, sigma_h2=[0.0, 0.0])
    with pytest.raises(InvalidParams):
        sample(bad, 10, seed=0)
    with pytest.raises(InvalidParams):
        sample(small_theta, 0, seed=0)


def test_sample_covariance_matches_implied(rng):
    ranks = RankSpec(p=6, q=4, r=2, r_x=1, r_y=1)
    th = random_theta(rng, ranks)
    n = 10**6
    X, Y = sample(th, n, seed=11)
    Z = np.hstack([X, Y])
    emp = Z.T @ Z / n  # zero-mean model
    S = implied_covariance(th).dense()
    # Var(z_i z_j) = S_ii S_jj + S_ij^2 for a zero-mean Gaussian
    se = np.sqrt((np.outer(np.diag(S), np.diag(S)) + S**2) / n)
    assert np.all(np.abs(emp - S) < 3.0 * se), np.max(np.abs(emp - S) / se)


def test_match_components_recovers_permutation(rng):
    A = np.linalg.qr(rng.standard_normal((30, 4)))[0]
    perm = np.array([2, 0, 3, 1])
    est = A[:, perm] * np.array([1, -1, -1, 1]) + 0.01 * rng.standard_normal((30, 4))
    got = match_components(est, A)
    np.testing.assert_array_equal(got, np.argsort(perm))
    for k in range(4):
        assert abs(est[:, got[k]] @ A[:, k]) > 0.9


# -- properties -----------------------------------------------------------

dims = st.tuples(
    st.integers(3, 10), st.integers(3, 10), st.integers(1, 3), st.integers(0, 3), st.integers(0, 3)
).filter(lambda d: d[2] + d[3] < d[0] and d[2] + d[4] < d[1])


@settings(max_examples=60, deadline=None)
@given(dims=dims, seed=st.integers(0, 2**32 - 1))
def test_normalize_idempotent(dims, seed):
    th = random_theta(np.random.default_rng(seed), RankSpec(*dims))
    once = validate_and_normalize(th)
    twice = validate_and_normalize(once)
    for name, a in once.arrays().items():
        assert np.array_equal(a, twice.arrays()[name]), name
    np.testing.assert_allclose(dense_sigma(once), dense_sigma(th), atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(dims=dims, seed=st.integers(0, 2**32 - 1), data=st.data())
def test_sign_flips_leave_covariance_unchanged(dims, seed, data):
    R = RankSpec(*dims)
    th = random_theta(np.random.default_rng(seed), R)
    signs = st.sampled_from([-1.0, 1.0])
    dw = np.array(data.draw(st.lists(signs, min_size=R.r, max_size=R.r)))
    dwo = np.array(data.draw(st.lists(signs, min_size=R.r_x, max_size=R.r_x)))
    dco = np.array(data.draw(st.lists(signs, min_size=R.r_y, max_size=R.r_y)))
    flipped = th.replace(W=th.W * dw, C=th.C * dw, W_perp=th.W_perp * dwo, C_perp=th.C_perp * dco)
    np.testing.assert_allclose(implied_covariance(flipped).dense(), implied_covariance(th).dense(), rtol=0, atol=1e-12)
    # and the canonical forms coincide
    assert validate_and_normalize(flipped).allclose(validate_and_normalize(th), rtol=0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(dims=dims, seed=st.integers(0, 2**32 - 1))
def test_implied_covariance_is_symmetric_psd(dims, seed):
    th = random_theta(np.random.default_rng(seed), RankSpec(*dims), h_low=0.0)
    S = implied_covariance(th).dense()
    np.testing.assert_array_equal(S, S.T)
    assert np.linalg.eigvalsh(S).min() >= -1e-10
    assert np.linalg.eigvalsh(implied_covariance(th).latent_cov).min() >= -1e-10
