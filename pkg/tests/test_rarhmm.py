import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import multivariate_normal

from conftest import enumerate_paths, random_model, random_traj
from hybriddyn.errors import DimensionMismatch, DomainError
from hybriddyn.priors import HyperParams, log_prior
from hybriddyn.rarhmm import (HybridPolicy, ModelParams, count_parameters,
                              forecast, log_posterior, sample_action, sample_step,
                              sample_trajectory, transition_row)
from scipy.special import logsumexp


def _zero_link(model):
    return model.copy(link=model.link.with_params(np.zeros(model.link.size)))


def test_zero_link_uniform_row(rng):
    m = _zero_link(random_model(rng, K=3))
    np.testing.assert_allclose(transition_row(m, 1, np.ones(2), np.ones(1)), np.full(3, 1 / 3))


def test_linear_link_softmax_example(rng):
    m = _zero_link(random_model(rng, K=2, d=1, m=1))
    W = np.zeros((2, 2, 3))
    W[0, 0, -1] = np.log(3.0)
    m = m.copy(link=m.link.with_params(W.ravel()))
    np.testing.assert_allclose(transition_row(m, 0, [0.4], [1.0]), [0.75, 0.25], atol=1e-12)


def test_logit_shift_invariance(rng):
    m = random_model(rng, K=3)
    W = m.link.unpack()[0].copy()
    x, u = rng.normal(size=2), rng.normal(size=1)
    row = transition_row(m, 2, x, u)
    W[2, :, -1] += 17.0
    np.testing.assert_allclose(transition_row(m.copy(link=m.link.with_params(W.ravel())), 2, x, u),
                               row, atol=1e-12)


def test_transition_row_errors(rng):
    m = random_model(rng, K=2)
    with pytest.raises(DimensionMismatch):
        transition_row(m, 0, np.ones(3), np.ones(1))
    with pytest.raises(DomainError):
        transition_row(m, 5, np.ones(2), np.ones(1))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["linear", "neural"]))
def test_rows_are_probability_vectors(seed, kind):
    r = np.random.default_rng(seed)
    m = random_model(r, K=3, link=kind, link_std=5.0)
    x, u = 100 * r.normal(size=2), 100 * r.normal(size=1)
    for i in range(3):
        row = transition_row(m, i, x, u)
        assert np.all(row >= 0) and abs(row.sum() - 1) < 1e-12


def test_noiseless_step(rng):
    m = random_model(rng, K=2)
    m = m.copy(Lam=np.tile(1e12 * np.eye(2), (2, 1, 1)))
    x, u = rng.normal(size=2), rng.normal(size=1)
    z, xn = sample_step(m, 0, x, u, np.random.default_rng(0))
    np.testing.assert_allclose(xn, m.A[z] @ x + m.B[z] @ u + m.c[z], atol=1e-5)


def test_single_regime_and_determinism(rng):
    m = random_model(rng, K=1, degree=1)
    zs, xs, us = sample_trajectory(m, 10, 7)
    assert np.all(zs == 0) and np.all(np.isfinite(xs))
    zs2, xs2, us2 = sample_trajectory(m, 10, 7)
    np.testing.assert_array_equal(xs, xs2)
    np.testing.assert_array_equal(us, us2)


def test_sample_action_noiseless_and_zero_gain(rng):
    m = random_model(rng, K=2, d=1, degree=3)
    x = np.array([0.7])
    tight = m.copy(Delta=np.tile(1e14 * np.eye(1), (2, 1, 1)))
    u = sample_action(tight, 1, x, np.random.default_rng(0))
    np.testing.assert_allclose(u, m.Kc[1] @ np.array([1, 0.7, 0.49, 0.343]), atol=1e-6)
    zero = m.copy(Kc=np.zeros_like(m.Kc), Delta=np.tile(np.eye(1), (2, 1, 1)))
    draws = np.array([sample_action(zero, 0, x, r) for r in
                      [np.random.default_rng(s) for s in range(2000)]])
    assert abs(draws.mean()) < 0.1
    with pytest.raises(DomainError):
        sample_action(random_model(rng), 0, x, np.random.default_rng(0))


def test_forecast_single_regime_is_affine_rollout(rng):
    m = random_model(rng, K=1)
    traj = random_traj(rng, 5, 2, 1)
    controls = rng.normal(size=(6, 1))
    pred = forecast(m, traj, controls, 6)
    x = traj.x[-1]
    for h in range(6):
        x = m.A[0] @ x + m.B[0] @ controls[h] + m.c[0]
        np.testing.assert_allclose(pred[h], x, atol=1e-12)


def test_forecast_known_regime_one_step(rng):
    m = random_model(rng, K=2)
    # make regime 1 absorbing and certain
    W = np.zeros((2, 2, 4))
    W[:, 1, -1] = 50.0
    m = m.copy(link=m.link.with_params(W.ravel()))
    traj = random_traj(rng, 4, 2, 1)
    u = rng.normal(size=(1, 1))
    np.testing.assert_allclose(forecast(m, traj, u, 1)[0],
                               m.A[1] @ traj.x[-1] + m.B[1] @ u[0] + m.c[1], atol=1e-12)


def _hyper(model):
    p = model.ctl_features.size if model.closed_loop else None
    return HyperParams.default(model.K, model.d, model.m, p)


def test_log_posterior_single_regime_closed_form(rng):
    m = random_model(rng, K=1, d=2, m=1)
    traj = random_traj(rng, 8, 2, 1)
    ll = multivariate_normal.logpdf(traj.x[0], m.mu[0], np.linalg.inv(m.Omega[0]))
    cov = np.linalg.inv(m.Lam[0])
    for t in range(1, 8):
        mean = m.A[0] @ traj.x[t - 1] + m.B[0] @ traj.u[t - 1] + m.c[0]
        ll += multivariate_normal.logpdf(traj.x[t], mean, cov)
    h = _hyper(m)
    assert log_posterior([traj], m, h) == pytest.approx(ll + log_prior(m, h), rel=1e-12)


def test_log_posterior_duplicate_adds_loglik(rng):
    m = random_model(rng, K=2, degree=2)
    t = random_traj(rng, 6, 2, 1)
    h = _hyper(m)
    one, two = log_posterior([t], m, h), log_posterior([t, t], m, h)
    _, logp = enumerate_paths(m, t)
    assert two - one == pytest.approx(logsumexp(logp), abs=1e-9)


@pytest.mark.parametrize("seed", range(4))
def test_log_likelihood_matches_enumeration(seed):
    r = np.random.default_rng(seed)
    K = int(r.integers(1, 4))
    m = random_model(r, K=K, degree=2 if seed % 2 else None)
    t = random_traj(r, int(r.integers(1, 7)), 2, 1)
    h = _hyper(m)
    _, logp = enumerate_paths(m, t)
    assert log_posterior([t], m, h) - log_prior(m, h) == pytest.approx(logsumexp(logp), abs=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["linear", "neural"]))
def test_label_permutation_symmetry(seed, kind):
    r = np.random.default_rng(seed)
    m = random_model(r, K=3, link=kind, degree=1)
    t = random_traj(r, 10, 2, 1)
    perm = r.permutation(3)
    h = _hyper(m)
    a = log_posterior([t], m, h) - log_prior(m, h)
    pm = m.permute(perm)
    b = log_posterior([t], pm, h) - log_prior(pm, h)
    assert a == pytest.approx(b, abs=1e-10)


def test_count_parameters_enumeration(rng):
    m = random_model(rng, K=1, d=1, m=1, degree=1)
    # phi 0, init mu 1 + Omega 1, dynamics A 1 + B 1 + c 1 + Lam 1, link 1*1*3, ctl 2 + 1
    assert count_parameters(m) == 0 + 2 + 4 + 3 + 3
    m1 = random_model(rng, K=2, d=2, m=1, degree=3)
    m2 = random_model(rng, K=4, d=2, m=1, degree=3)
    assert count_parameters(m2) > 2 * count_parameters(m1)


def test_model_dict_round_trip(rng):
    for m in (random_model(rng, K=2, degree=3), random_model(rng, K=3, link="neural")):
        back = ModelParams.from_dict(json.loads(json.dumps(m.to_dict())))
        t = random_traj(rng, 5, 2, 1)
        h = _hyper(m)
        assert log_posterior([t], back, h) == log_posterior([t], m, h)


def test_noiseless_limit_is_piecewise_affine(rng):
    m = random_model(rng, K=2, prec_scale=1e14)
    u = rng.normal(size=(15, 1))
    zs, xs, _ = sample_trajectory(m, 15, 3, u=u)
    for t in range(14):
        z = zs[t + 1]
        np.testing.assert_allclose(xs[t + 1], m.A[z] @ xs[t] + m.B[z] @ u[t] + m.c[z], atol=1e-5)


def test_hybrid_policy_modes(rng):
    m = random_model(rng, K=2, d=1, degree=2)
    x = np.array([0.3])
    for mode in ("mean", "map", "sample"):
        pol = HybridPolicy(m, mode, action_limit=0.5)
        u = pol(x, np.random.default_rng(0))
        assert u.shape == (1,) and abs(u[0]) <= 0.5
        np.testing.assert_allclose(pol.belief.sum(), 1.0)
    pol = HybridPolicy(m, "mean")
    u = pol(x)
    feats = m.ctl_features(x)
    means = np.array([m.Kc[k] @ feats for k in range(2)])
    np.testing.assert_allclose(u, pol.belief @ means, atol=1e-12)
