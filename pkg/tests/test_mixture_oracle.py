import math

import numpy as np
import pytest

from rsmlab.errors import DomainError, SingularityError
from rsmlab.flow_schedules import FlowSpec
from rsmlab.mixture_oracle import (
    GaussianMixture,
    LinearReward,
    TiltedPair,
    grid_tilt_weights,
    logpdf,
    marginal_at,
    psi_star,
    sample,
    score,
    tilt,
    toy_reference,
    toy_reward,
    tweedie,
)

VP = FlowSpec(kind="vp")
RF = FlowSpec(kind="rf")

STD_NORMAL = GaussianMixture(weights=[1.0], means=[[0.0, 0.0]], component_var=1.0)


def fd_logpdf_grad(gmm, x, h=1e-5):
    g = np.zeros(2)
    for d in range(2):
        e = np.zeros(2)
        e[d] = h
        g[d] = (logpdf(gmm, x + e) - logpdf(gmm, x - e)) / (2 * h)
    return g


# ------------------------------------------------------------------- types


def test_mixture_validation():
    with pytest.raises(DomainError):
        GaussianMixture(weights=[0.5, 0.6], means=[[0, 0], [1, 1]], component_var=1.0)
    with pytest.raises(DomainError):
        GaussianMixture(weights=[1.0], means=[[0, 0]], component_var=0.0)
    with pytest.raises(DomainError):
        GaussianMixture(weights=[], means=np.zeros((0, 2)), component_var=1.0)


def test_linear_reward():
    r = toy_reward()
    assert r(np.array([2.0, 7.0])) == pytest.approx(4.0)
    assert r(np.zeros((5, 2))).shape == (5,)


# -------------------------------------------------------------------- tilt


def test_tilt_single_gaussian():
    out = tilt(STD_NORMAL, LinearReward(slope=[1.0, 0.0]), 1.0)
    assert np.allclose(out.means, [[1.0, 0.0]])
    assert out.component_var == 1.0


def test_tilt_toy_golden():
    out = tilt(toy_reference(), toy_reward(), 1.0)
    assert np.allclose(out.means - toy_reference().means, [0.5, 0.0])
    # closed form: weights prop to exp(c . mu_k); verified against the
    # 400x400 grid integration oracle below
    assert np.allclose(out.weights, [0.78559703, 0.03911257, 0.17529039], atol=5e-8)
    numeric = grid_tilt_weights(toy_reference(), toy_reward(), 1.0)
    assert np.max(np.abs(numeric - out.weights)) < 1e-6


def test_tilt_zero_slope():
    out = tilt(toy_reference(), LinearReward(slope=[0.0, 0.0], intercept=5.0), 2.0)
    assert np.allclose(out.weights, toy_reference().weights)
    assert np.allclose(out.means, toy_reference().means)


def test_tilt_alpha_domain():
    with pytest.raises(DomainError):
        tilt(STD_NORMAL, toy_reward(), 0.0)


def test_tilt_matches_grid_integration_randomized():
    rng = np.random.default_rng(7)
    for _ in range(20):
        k = rng.integers(1, 4)
        w = rng.random(k) + 0.1
        w /= w.sum()
        gmm = GaussianMixture(
            weights=w, means=rng.uniform(-4, 4, (k, 2)), component_var=rng.uniform(0.5, 2.0)
        )
        reward = LinearReward(slope=rng.uniform(-0.6, 0.6, 2), intercept=rng.normal())
        alpha = rng.uniform(0.5, 3.0)
        closed = tilt(gmm, reward, alpha).weights
        numeric = grid_tilt_weights(gmm, reward, alpha)
        assert np.max(np.abs(closed - numeric) / np.maximum(closed, 1e-12)) < 1e-6


def test_tilted_pair_build_validates():
    pair = TiltedPair.build(toy_reference(), toy_reward(), 1.0)
    assert pair.alpha == 1.0
    assert pair.target.weights[0] > pair.target.weights[1]


# ---------------------------------------------------------------- marginal


def test_marginal_identity_at_zero():
    m = marginal_at(toy_reference(), VP, 0.0)
    assert np.allclose(m.means, toy_reference().means)
    assert m.component_var == pytest.approx(1.0)


def test_marginal_vp_preserves_unit_variance():
    g = GaussianMixture(weights=[1.0], means=[[4.0, 0.0]], component_var=1.0)
    # any VP time: var stays 1 because a^2 + b^2 = 1; means scale by a
    m = marginal_at(g, VP, 0.5)
    a = math.sqrt(VP.alpha_bar(0.5))
    assert m.component_var == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(m.means, [[4.0 * a, 0.0]])


def test_marginal_rf_half():
    g = GaussianMixture(weights=[1.0], means=[[4.0, 0.0]], component_var=1.0)
    m = marginal_at(g, RF, 0.5)
    assert np.allclose(m.means, [[2.0, 0.0]])
    assert m.component_var == pytest.approx(0.5)


# ------------------------------------------------------------------- score


def test_score_single_gaussian():
    assert np.allclose(score(STD_NORMAL, np.array([1.0, 2.0])), [-1.0, -2.0])


def test_score_symmetric_two_component():
    g = GaussianMixture(weights=[0.5, 0.5], means=[[-2.0, 0.0], [2.0, 0.0]], component_var=1.0)
    for y in (-1.0, 0.5, 2.0):
        s = score(g, np.array([0.0, y]))
        assert s[0] == pytest.approx(0.0, abs=1e-12)
        assert s[1] == pytest.approx(-y)


def test_score_toy_origin_fd_golden():
    # (0,0) is a saddle of the toy mixture: score vanishes by symmetry
    s = score(toy_reference(), np.zeros(2))
    assert np.allclose(s, [0.0, 0.0], atol=1e-12)
    assert np.allclose(fd_logpdf_grad(toy_reference(), np.zeros(2)), s, atol=1e-8)


def test_score_matches_fd_randomized():
    rng = np.random.default_rng(11)
    g = toy_reference()
    for _ in range(100):
        x = rng.uniform(-6, 6, 2)
        assert np.allclose(score(g, x), fd_logpdf_grad(g, x), atol=1e-6)


def test_score_far_tail_is_stable():
    # log-sum-exp keeps responsibilities from underflowing at the outer nodes
    x = np.array([40.0, -40.0])
    s = score(toy_reference(), x)
    assert np.all(np.isfinite(s))


# ------------------------------------------------------------------ logpdf


def test_logpdf_single_gaussian_origin():
    assert logpdf(STD_NORMAL, np.zeros(2)) == pytest.approx(-math.log(2 * math.pi))


def test_logpdf_two_component_midpoint():
    g = GaussianMixture(weights=[0.5, 0.5], means=[[-1.0, 0.0], [1.0, 0.0]], component_var=1.0)
    expect = math.log(math.exp(-0.5)) - math.log(2 * math.pi)
    assert logpdf(g, np.zeros(2)) == pytest.approx(expect)


def test_logpdf_toy_golden_and_normalization():
    val = float(logpdf(toy_reference(), np.array([3.0, -math.sqrt(3.0)])))
    assert val == pytest.approx(-2.9364893246174963, rel=1e-12)
    xs = np.linspace(-12, 12, 400)
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=-1)
    cell = (24.0 / 399.0) ** 2
    assert np.exp(logpdf(toy_reference(), pts)).sum() * cell == pytest.approx(1.0, abs=1e-9)


# ----------------------------------------------------------------- tweedie


def test_tweedie_noiseless():
    x = np.array([0.6, -0.2])
    assert np.allclose(tweedie(x, np.array([9.0, 9.0]), 2.0, 0.0), x / 2.0)


def test_tweedie_singularity():
    with pytest.raises(SingularityError):
        tweedie(np.zeros(2), np.zeros(2), 0.0, 1.0)


def test_tweedie_single_gaussian_exact():
    # posterior mean of N(mu, I) data equals mu + a/(a^2+b^2) (x - a mu)
    rng = np.random.default_rng(3)
    mu = np.array([1.5, -2.0])
    g = GaussianMixture(weights=[1.0], means=[mu], component_var=1.0)
    for t in (0.2, 0.5, 0.8):
        a = math.sqrt(VP.alpha_bar(t))
        b = math.sqrt(1.0 - VP.alpha_bar(t))
        marg = marginal_at(g, VP, t)
        for _ in range(10):
            x = rng.normal(size=2) * 2.0
            got = tweedie(x, score(marg, x), a, b)
            expect = mu + a / (a * a + b * b) * (x - a * mu)
            assert np.allclose(got, expect, atol=1e-12)


def test_tweedie_toy_mc_golden():
    """Monte-Carlo posterior-mean oracle, 1e6 importance-weighted samples.

    Frozen from: x0 ~ toy mixture (seed 12345), weights prop to
    N(x_t; a x0, b^2 I) with a = b = sqrt(1/2), x_t = (1, 1).
    ESS ~ 1.2e5, coordinate SE ~ 2e-3.
    """
    a = b = math.sqrt(0.5)
    x_t = np.array([1.0, 1.0])
    marg = GaussianMixture(
        weights=toy_reference().weights,
        means=a * toy_reference().means,
        component_var=1.0,
    )
    got = tweedie(x_t, score(marg, x_t), a, b)
    assert np.allclose(got, [0.96426407, 1.97837096], atol=0.01)


def test_tweedie_jensen_gap_grows_at_low_snr():
    """On the mixture, |E[x0|x_t] - x_t-like identity| says nothing, but the
    posterior mean must deviate from any single-component conjugate map at
    low SNR; measured as spread of tweedie against per-component posterior."""
    g = toy_reference()
    x = np.array([0.5, 0.3])
    gaps = []
    for t in (0.1, 0.7):
        a = math.sqrt(VP.alpha_bar(t))
        b = math.sqrt(1.0 - VP.alpha_bar(t))
        marg = marginal_at(g, VP, t)
        xhat = tweedie(x, score(marg, x), a, b)
        # conjugate single-component answer anchored at the nearest node
        k = np.argmin(np.sum((g.means - xhat) ** 2, axis=1))
        single = g.means[k] + a / (a * a + b * b) * (x - a * g.means[k])
        gaps.append(np.linalg.norm(xhat - single))
    assert gaps[1] > gaps[0]


# ---------------------------------------------------------------- psi_star


def test_psi_star_single_gaussian_analytic():
    pair = TiltedPair.build(STD_NORMAL, LinearReward(slope=[1.0, 0.0]), 1.0)
    rng = np.random.default_rng(5)
    for t in (0.0, 0.3, 0.7):
        a = math.sqrt(VP.alpha_bar(t))
        for _ in range(5):
            x = rng.normal(size=2) * 3
            assert np.allclose(psi_star(pair, VP, t, x), [a, 0.0], atol=1e-10)


def test_psi_star_vanishes_at_prior():
    pair = TiltedPair.build(toy_reference(), toy_reward(), 1.0)
    x = np.array([0.3, -0.4])
    # a_1 ~ 6.6e-3 for the default schedule; the tilt is O(a) at the prior
    assert np.linalg.norm(psi_star(pair, VP, 1.0, x)) < 0.05
    assert np.linalg.norm(psi_star(pair, VP, 1.0, x)) < 0.1 * np.linalg.norm(
        psi_star(pair, VP, 0.0, x)
    )


def test_psi_star_fd_golden_mid_snr():
    """FD of (log p*_t - log p_ref_t) at abar = 0.5, x = (0,0)."""
    pair = TiltedPair.build(toy_reference(), toy_reward(), 1.0)
    t = 0.25896026418687645  # abar(t) = 0.5 for the default linear beta
    assert VP.alpha_bar(t) == pytest.approx(0.5, abs=1e-9)
    x = np.zeros(2)
    got = psi_star(pair, VP, t, x)
    mt = marginal_at(pair.target, VP, t)
    mr = marginal_at(pair.reference, VP, t)
    h = 1e-5
    fd = np.zeros(2)
    for d in range(2):
        e = np.zeros(2)
        e[d] = h
        fd[d] = (
            (logpdf(mt, x + e) - logpdf(mr, x + e)) - (logpdf(mt, x - e) - logpdf(mr, x - e))
        ) / (2 * h)
    assert np.allclose(got, fd, atol=1e-7)
    assert np.allclose(got, [1.32553392, -0.20110058], atol=1e-6)


def test_psi_star_one_step_consistency():
    """Small-instance check of the recursive form of the optimal guidance:
    the Monte-Carlo average of the next-step value gradient over the optimal
    kernel, scaled by sigma^2/omega, reproduces psi_star one step later.

    The identity holds exactly for the continuous-time kernel; one discrete
    step contributes an O(dt) bias (measured ~1.4 dt here), so the bound is
    3 MC standard errors plus an explicit discretization allowance.
    """
    from rsmlab.flow_schedules import NoiseSpec, TimeGrid, kernel_schedule
    from rsmlab.mixture_oracle import marginal_at as marg_at

    pair = TiltedPair.build(toy_reference(), toy_reward(), 1.0)
    grid = TimeGrid.uniform(2000)
    dt = 1.0 / 2000.0
    ks = kernel_schedule(VP, grid, NoiseSpec(rule="ddpm_equivalent"), "ddim")
    rng = np.random.default_rng(17)
    for i in (600, 1200):
        k = ks[i]
        t_i, t_im1 = grid.times[i], grid.times[i - 1]
        x = sample(marg_at(pair.reference, VP, t_i), 1, rng)[0]
        s_star = score(marg_at(pair.target, VP, t_i), x)
        mean = k.kappa * x + k.omega * s_star
        y = mean + k.sigma * rng.standard_normal((20_000, 2))
        grads = pair.alpha * psi_star(pair, VP, t_im1, y)
        est = (k.sigma**2 / (pair.alpha * k.omega)) * grads.mean(axis=0)
        se = (k.sigma**2 / (pair.alpha * k.omega)) * grads.std(axis=0) / math.sqrt(len(y))
        target = psi_star(pair, VP, t_i, x)
        assert np.all(np.abs(est - target) < 3.0 * se + 3.0 * dt * np.maximum(1.0, np.abs(target)))


# ------------------------------------------------------------------ sample


def test_sample_moments():
    rng = np.random.default_rng(9)
    pts = sample(toy_reference(), 200_000, rng)
    mean = pts.mean(axis=0)
    # mixture mean is (0, 0) by symmetry
    assert np.allclose(mean, [0.0, 0.0], atol=0.02)
