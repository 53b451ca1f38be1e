import math

import numpy as np
import pandas as pd
import pytest
from scipy.optimize import minimize_scalar

from iprior.errors import DataError, NumericalError
from iprior.estimation import (ControlOptions, deviance, em_step, fit_direct, fit_em,
                               fit_fixed, fit_mixed, iprior, log_likelihood,
                               log_likelihood_gradient, q_function, standard_errors, update)
from iprior.model import CovariateSpec, Hyperparameters, ModelSpec, load_model

QUIET = dict(silent=True)


def dense_loglik(H, psi, y):
    """Naive oracle: build Sigma densely and use a generic log-determinant."""
    y = y - y.mean()
    S = psi * H @ H + np.eye(len(y)) / psi
    _, logdet = np.linalg.slogdet(S)
    return -0.5 * len(y) * math.log(2 * math.pi) - 0.5 * logdet - 0.5 * y @ np.linalg.solve(S, y)


def fd_gradient(f, theta, h=1e-5):
    g = np.empty_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h
        g[j] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


@pytest.fixture
def toy(rng):
    n = 25
    x = rng.uniform(-2, 2, n)
    g = rng.choice(list("abc"), n)
    y = np.sin(x) + (g == "a") + 0.3 * rng.normal(size=n)
    return pd.DataFrame({"y": y, "x": x, "g": g, "z": rng.normal(size=n)})


def model_of(df, *covs, **kw):
    return load_model(ModelSpec("y", tuple(covs), **kw), df)


# -- log-likelihood -------------------------------------------------------------


def test_zero_scale_closed_form(toy):
    m = model_of(toy, "x", est_lambda=False, lambda_init=0.0)
    psi = 1.7
    yt = toy["y"].to_numpy() - toy["y"].mean()
    n = len(yt)
    want = -n / 2 * math.log(2 * math.pi) + n / 2 * math.log(psi) - psi / 2 * yt @ yt
    assert log_likelihood(m, [math.log(psi)]) == pytest.approx(want, rel=1e-12)


def test_single_observation_closed_form():
    # With one observation the centred Gram is zero, so H = 0 and y~ = 0.
    m = model_of(pd.DataFrame({"y": [3.0], "x": [1.0]}), "x")
    assert log_likelihood(m, [0.3, 0.2]) == pytest.approx(
        -0.5 * math.log(2 * math.pi) - 0.5 * math.log(math.exp(-0.2)), rel=1e-12)


def test_matches_dense_oracle(toy, rng):
    m = model_of(toy, CovariateSpec("x", "fbm,0.4"), "g", "z", interactions=["1:2"])
    for _ in range(5):
        theta = rng.normal(size=4)
        p = m.layout.to_param(theta)
        want = dense_loglik(m.build_H(p), p.psi, toy["y"].to_numpy())
        assert log_likelihood(m, theta) == pytest.approx(want, rel=1e-8)


def test_deviance_is_minus_twice_loglik(toy, rng):
    m = model_of(toy, "x", "g")
    theta = rng.normal(size=3)
    assert deviance(m, theta) == -2.0 * log_likelihood(m, theta)


def test_joint_sign_flip_leaves_likelihood_unchanged(toy, rng):
    m = model_of(toy, "x", "g", CovariateSpec("z", "se,1.3"))
    theta = rng.normal(size=4)
    flipped = theta.copy()
    flipped[:3] *= -1
    assert log_likelihood(m, flipped) == pytest.approx(log_likelihood(m, theta), rel=1e-12)


def test_theta_must_be_finite(toy):
    m = model_of(toy, "x")
    with pytest.raises(DataError):
        log_likelihood(m, [np.nan, 0.0])


# -- gradient -----------------------------------------------------------------


GRADIENT_MODELS = {
    "linear": lambda df: model_of(df, "x"),
    "additive": lambda df: model_of(df, "x", "g", interactions=["1:2"]),
    "fbm": lambda df: model_of(df, CovariateSpec("x", "fbm"), "g", est_hurst=True),
    "se": lambda df: model_of(df, CovariateSpec("x", "se"), est_lengthscale=True),
    "poly": lambda df: model_of(df, CovariateSpec("x", "poly2,0.5"), "z", est_offset=True),
}


@pytest.mark.parametrize("name", sorted(GRADIENT_MODELS))
def test_gradient_matches_finite_differences(toy, rng, name):
    m = GRADIENT_MODELS[name](toy)
    for _ in range(5):
        theta = rng.normal(scale=0.7, size=len(m.layout))
        got = log_likelihood_gradient(m, theta)
        want = fd_gradient(lambda t: log_likelihood(m, t), theta)
        err = np.abs(got - want) / np.maximum(1.0, np.abs(want))
        assert err.max() < 1e-4, (name, theta, got, want)


def test_gradient_zero_at_zero_scale(toy):
    m = model_of(toy, "x", "g")
    g = log_likelihood_gradient(m, np.array([0.0, 0.0, 0.3]))
    np.testing.assert_allclose(g[:2], 0.0, atol=1e-12)


def test_psi_gradient_vanishes_at_inner_optimum(toy):
    m = model_of(toy, "x", "g")
    lam = (0.8, -0.4)
    res = minimize_scalar(lambda t: -log_likelihood(m, [*lam, t]), bounds=(-8, 8),
                          method="bounded", options={"xatol": 1e-12})
    g = log_likelihood_gradient(m, np.array([*lam, res.x]))
    assert abs(g[2]) < 1e-6


# -- posterior moments ------------------------------------------------------------


def test_posterior_moments_match_joint_gaussian_conditioning(rng):
    n = 7
    df = pd.DataFrame({"y": rng.normal(size=n), "x": rng.normal(size=n)})
    m = model_of(df, CovariateSpec("x", "fbm,0.6"))
    fit = fit_fixed(m, [math.log(1.3), math.log(0.8)])
    H = m.build_H(fit.param)
    psi = fit.param.psi
    # (w, y~) jointly Gaussian: Cov(w) = psi I, Cov(w, y) = psi H, Cov(y) = psi H^2 + I/psi.
    Syy = psi * H @ H + np.eye(n) / psi
    Swy = psi * H
    yt = m.y_centred
    mean = Swy @ np.linalg.solve(Syy, yt)
    cov = psi * np.eye(n) - Swy @ np.linalg.solve(Syy, Swy.T)
    np.testing.assert_allclose(fit.w, mean, rtol=1e-8, atol=1e-10)
    fac = fit.factor
    np.testing.assert_allclose((fac.vectors / (psi * fac.values ** 2 + 1 / psi)) @ fac.vectors.T,
                               cov, rtol=1e-8, atol=1e-10)


# -- direct -------------------------------------------------------------------------


def test_nothing_to_estimate(toy):
    m = model_of(toy, "x", fixed_hyp=True)
    with pytest.raises(DataError, match="nothing to estimate"):
        fit_direct(m, ControlOptions(**QUIET))


def test_direct_scale_only_matches_grid_search(rng):
    n = 30
    x = rng.normal(size=n)
    df = pd.DataFrame({"y": 2.0 * (x - x.mean()) * (x @ x) / n + rng.normal(size=n) * 0.1,
                       "x": x})
    m = model_of(df, "x", est_psi=False, psi_init=4.0)
    fit = fit_direct(m, ControlOptions(maxit=200, seed=1, **QUIET))
    grid = np.linspace(-4, 4, 4001)
    ll = np.array([log_likelihood(m, [t]) for t in grid])
    t0 = grid[np.argmax(ll)]
    oracle = minimize_scalar(lambda t: -log_likelihood(m, [t]), bounds=(t0 - 0.01, t0 + 0.01),
                             method="bounded", options={"xatol": 1e-10})
    assert fit.theta[0] == pytest.approx(oracle.x, abs=1e-4)


def test_direct_bad_start_dimension(toy):
    m = model_of(toy, "x")
    with pytest.raises(DataError):
        fit_direct(m, ControlOptions(theta0=(0.0,), **QUIET))


# -- EM -----------------------------------------------------------------------------


def test_em_psi_only_step_maximises_q(toy):
    m = model_of(toy, "x", est_lambda=False, lambda_init=0.7)
    current = Hyperparameters((0.7,), (None,), 0.5)
    new = em_step(m, current)
    grid = np.exp(np.linspace(-4, 4, 8001))
    q = [q_function(m, Hyperparameters((0.7,), (None,), g), current) for g in grid]
    best = grid[int(np.argmax(q))]
    assert new.psi == pytest.approx(best, rel=2e-3)
    refined = minimize_scalar(lambda t: -q_function(m, Hyperparameters((0.7,), (None,),
                                                                       math.exp(t)), current),
                              bounds=(math.log(best) - 0.01, math.log(best) + 0.01),
                              method="bounded", options={"xatol": 1e-12})
    assert new.psi == pytest.approx(math.exp(refined.x), rel=1e-8)


def test_em_lambda_updates_maximise_q_coordinatewise(toy):
    m = model_of(toy, "x", "g", "z", interactions=["1:2"])
    current = Hyperparameters((0.3, 1.2, -0.5), (None,) * 3, 0.9)
    new = em_step(m, current)
    # After the coordinate updates, each lambda is a stationary point of Q given the others.
    for k in range(3):
        def q_at(v, k=k):
            lam = list(new.lam)
            lam[k] = v
            return q_function(m, Hyperparameters(tuple(lam), new.kernel_params, new.psi),
                              current)
        h = 1e-5
        d = (q_at(new.lam[k] + h) - q_at(new.lam[k] - h)) / (2 * h)
        curv = (q_at(new.lam[k] + h) - 2 * q_at(new.lam[k]) + q_at(new.lam[k] - h)) / h ** 2
        if k < 2:
            continue  # earlier coordinates were optimised before later ones moved
        assert abs(d) < 1e-4 * max(1.0, abs(curv))


def test_em_trace_is_monotone(toy):
    m = model_of(toy, CovariateSpec("x", "se,0.8"), "g", interactions=["1:2"],
                 est_lengthscale=True)
    fit = fit_em(m, ControlOptions(maxit=60, seed=3, **QUIET))
    assert np.all(np.diff(fit.trace) >= -1e-9)


def test_em_restart_at_optimum_stops_quickly(toy):
    m = model_of(toy, "x", "g")
    fit = fit_em(m, ControlOptions(maxit=5000, seed=1, **QUIET))
    assert fit.converged
    again = fit_em(m, ControlOptions(maxit=50, theta0=tuple(fit.theta), **QUIET))
    assert again.niter <= 2 and again.converged


def test_em_unavailable_for_nystrom(rng):
    df = pd.DataFrame({"y": rng.normal(size=40), "x": rng.normal(size=40)})
    m = model_of(df, "x", nystrom=8, nys_seed=1)
    assert m.methods == ("direct", "fixed")
    with pytest.raises(DataError):
        iprior(m, method="em", silent=True)


def test_em_and_direct_agree(toy):
    m = model_of(toy, CovariateSpec("x", "fbm"))
    em = fit_em(m, ControlOptions(maxit=5000, seed=2, **QUIET))
    direct = max((fit_direct(m, ControlOptions(maxit=500, seed=s, **QUIET)) for s in range(3)),
                 key=lambda f: f.loglik)
    assert em.loglik == pytest.approx(direct.loglik, abs=1e-3)


# -- mixed ----------------------------------------------------------------------------


def test_mixed_without_em_is_direct(toy):
    m = model_of(toy, "x", "g")
    ctl = ControlOptions(maxit=200, em_maxit=0, seed=4, **QUIET)
    mixed, direct = fit_mixed(m, ctl), fit_direct(m, ctl)
    np.testing.assert_array_equal(mixed.theta, direct.theta)
    assert mixed.trace == direct.trace


def test_mixed_with_full_em_budget_is_em(toy):
    m = model_of(toy, "x", "g")
    ctl = ControlOptions(maxit=30, em_maxit=30, seed=4, **QUIET)
    mixed, em = fit_mixed(m, ctl), fit_em(m, ctl)
    np.testing.assert_array_equal(mixed.theta, em.theta)
    assert mixed.trace == em.trace


def test_mixed_improves_on_short_em(toy):
    m = model_of(toy, CovariateSpec("x", "fbm"), "g")
    ctl = ControlOptions(maxit=300, em_maxit=5, seed=5, **QUIET)
    mixed = fit_mixed(m, ctl)
    em5 = fit_em(m, ControlOptions(maxit=5, seed=5, **QUIET))
    assert mixed.loglik >= em5.loglik
    assert mixed.trace[:5] == em5.trace


# -- fixed ----------------------------------------------------------------------------


def test_fixed_reproduces_fit(toy):
    m = model_of(toy, "x", "g")
    fit = fit_direct(m, ControlOptions(maxit=200, seed=1, **QUIET))
    again = fit_fixed(m, fit.theta)
    assert again.loglik == fit.loglik
    assert again.se is None


def test_fixed_zero_scale_has_zero_weights(toy):
    m = model_of(toy, "x", "g")
    fit = fit_fixed(m, [0.0, 0.0, 0.1])
    assert not np.any(fit.w)


def test_fixed_loglik_is_log_likelihood(toy, rng):
    m = model_of(toy, "x", "z")
    theta = rng.normal(size=3)
    assert fit_fixed(m, theta).loglik == log_likelihood(m, theta)


def test_fixed_requires_theta(toy):
    with pytest.raises(DataError):
        fit_fixed(model_of(toy, "x"))


def test_fixed_param_is_transform_of_theta(toy, rng):
    m = model_of(toy, CovariateSpec("x", "fbm"), est_hurst=True)
    theta = rng.normal(size=3)
    assert fit_fixed(m, theta).param == m.layout.to_param(theta)


# -- restarts and update ------------------------------------------------------------------


def test_restarts_are_reproducible(toy):
    m = model_of(toy, CovariateSpec("x", "se"), est_lengthscale=True)
    ctl = ControlOptions(maxit=100, restarts=4, no_cores=3, seed=11, **QUIET)
    a, b = iprior(m, control=ctl), iprior(m, control=ctl)
    np.testing.assert_array_equal(a.theta, b.theta)
    assert a.loglik == b.loglik


def test_best_of_many_restarts_beats_single_runs(rng):
    # A wiggly signal under an SE kernel has a smooth and a wiggly optimum.
    n = 60
    x = np.sort(rng.uniform(0, 10, n))
    df = pd.DataFrame({"y": np.sin(3 * x) + 0.3 * x + 0.3 * rng.normal(size=n), "x": x})
    m = model_of(df, CovariateSpec("x", "se"), est_lengthscale=True)
    best = iprior(m, control=ControlOptions(maxit=200, restarts=8, seed=7, **QUIET))
    singles = [fit_direct(m, ControlOptions(maxit=200, seed=[7, i], **QUIET))
               for i in range(8)]
    assert best.loglik >= max(f.loglik for f in singles) - 1e-6


def test_single_restart_is_a_continued_seeded_run(toy):
    m = model_of(toy, "x", "g")
    ctl = ControlOptions(maxit=200, restarts=1, par_maxit=5, seed=3, **QUIET)
    fit = iprior(m, control=ctl)
    plain = fit_direct(m, ControlOptions(maxit=200, seed=3, **QUIET))
    assert fit.loglik == pytest.approx(plain.loglik, abs=1e-6)


def test_update_continues_from_estimate(toy):
    m = model_of(toy, "x", "g")
    short = fit_em(m, ControlOptions(maxit=5, seed=1, **QUIET))
    more = update(short, iter_update=50)
    assert more.loglik >= short.loglik
    assert more.niter <= 50


# -- standard errors --------------------------------------------------------------------


def test_se_for_known_fisher_information(rng):
    # With H = 0, log L = n/2 log psi - psi/2 S and the information for log psi is n/2.
    n = 400
    df = pd.DataFrame({"y": rng.normal(scale=1.5, size=n), "x": rng.normal(size=n)})
    m = model_of(df, "x", est_lambda=False, lambda_init=0.0)
    fit = fit_direct(m, ControlOptions(maxit=200, seed=1, **QUIET))
    psi = fit.param.psi
    assert psi == pytest.approx(n / (m.y_centred @ m.y_centred), rel=1e-6)
    assert fit.se.se_theta[0] == pytest.approx(math.sqrt(2 / n), rel=0.02)
    assert fit.se.se[0] == pytest.approx(psi * math.sqrt(2 / n), rel=0.02)


def test_se_delta_method_and_tests(toy):
    m = model_of(toy, "x", "g")
    fit = fit_direct(m, ControlOptions(maxit=300, seed=2, **QUIET))
    se = fit.se
    assert se.available
    np.testing.assert_allclose(se.se[:2], se.se_theta[:2], rtol=1e-14)
    assert se.se[2] == pytest.approx(se.se_theta[2] * fit.param.psi, rel=1e-12)
    np.testing.assert_allclose(se.z, fit.estimates / se.se, rtol=1e-12)
    from scipy.stats import norm
    np.testing.assert_allclose(se.p, 2 * norm.sf(np.abs(se.z)), rtol=1e-12)


def test_se_unavailable_away_from_optimum(toy):
    m = model_of(toy, "x", "g")
    # A saddle: zero scales make the Hessian singular in the lambda block.
    se = standard_errors(m, np.array([0.0, 0.0, 0.0]))
    assert not se.available
    assert "not positive definite" in se.message


# -- control --------------------------------------------------------------------------


@pytest.mark.parametrize("kw", [dict(maxit=0), dict(em_maxit=-1), dict(stop_crit=0.0),
                                dict(maxit=3, par_maxit=5)])
def test_control_validation(kw):
    with pytest.raises(DataError):
        ControlOptions(**kw)


def test_cores_env_override(monkeypatch):
    monkeypatch.setenv("IPRIOR_NUM_CORES", "3")
    assert ControlOptions().cores == 3
    assert ControlOptions(restarts=True).n_restarts == 3
    assert ControlOptions(no_cores=2).cores == 2


def test_nonfinite_start_is_numerical_error(toy):
    m = model_of(toy, "x")
    with pytest.raises((NumericalError, DataError)):
        fit_direct(m, ControlOptions(theta0=(0.0, 800.0), **QUIET))
