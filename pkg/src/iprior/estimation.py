"""Maximum-likelihood estimation of I-prior hyperparameters.

The marginal model for the centred response is ``y ~ N(0, Sigma)`` with
``Sigma = psi * H^2 + I / psi``.  Estimation works on the unconstrained
vector ``theta`` described by the model's :class:`~iprior.model.ThetaLayout`.

Methods:

* ``direct`` -- L-BFGS on the deviance with an analytic gradient,
* ``em``     -- EM treating the I-prior weights ``w ~ N(0, psi I)`` as
  missing; closed-form updates for ``psi`` and every scale parameter
  entering ``H`` linearly, numerical maximisation of the Q-function for
  the rest,
* ``mixed``  -- a few EM steps, then direct,
* ``fixed``  -- no optimisation; posterior quantities at a given ``theta``.
"""

from __future__ import annotations

import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.optimize
from scipy.stats import norm

from .errors import DataError, NumericalError
from .linalg import EigenFactor, sigma_apply, sigma_diag, sigma_logdet
from .model import Hyperparameters, LoadedModel

__all__ = [
    "ControlOptions",
    "FitResult",
    "StandardErrors",
    "log_likelihood",
    "deviance",
    "log_likelihood_gradient",
    "q_function",
    "em_step",
    "fit_direct",
    "fit_em",
    "fit_mixed",
    "fit_fixed",
    "fit_restarts",
    "iprior",
    "update",
    "standard_errors",
]

EM_SLACK = 1e-9
CORES_ENV = "IPRIOR_NUM_CORES"


def default_cores() -> int:
    env = os.environ.get(CORES_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(frozen=True)
class ControlOptions:
    maxit: int = 100
    em_maxit: int = 5
    stop_crit: float = 1e-8
    theta0: tuple | None = None
    restarts: int | bool = 0
    no_cores: int | None = None
    par_maxit: int = 5
    silent: bool = False
    seed: int | None = None

    def __post_init__(self):
        if self.maxit < 1:
            raise DataError("maxit must be at least 1")
        if self.em_maxit < 0:
            raise DataError("em_maxit must be non-negative")
        if not self.stop_crit > 0:
            raise DataError("stop_crit must be positive")
        if self.par_maxit < 1 or self.par_maxit > self.maxit:
            raise DataError("par_maxit must lie in [1, maxit]")
        if self.theta0 is not None:
            object.__setattr__(self, "theta0", tuple(float(t) for t in np.atleast_1d(self.theta0)))

    @property
    def cores(self) -> int:
        return self.no_cores or default_cores()

    @property
    def n_restarts(self) -> int:
        if self.restarts is True:
            return self.cores
        return int(self.restarts or 0)


@dataclass(frozen=True)
class StandardErrors:
    se: np.ndarray | None
    z: np.ndarray | None
    p: np.ndarray | None
    se_theta: np.ndarray | None
    message: str = "ok"

    @property
    def available(self) -> bool:
        return self.se is not None


@dataclass
class FitResult:
    """Result of an I-prior fit; see :mod:`iprior.posterior` for accessors."""

    model: LoadedModel
    method: str
    theta: np.ndarray
    param: Hyperparameters
    loglik: float
    trace: list
    niter: int
    converged: bool
    message: str
    time: float
    w: np.ndarray
    factor: EigenFactor
    se: StandardErrors | None = None
    control: ControlOptions = field(default_factory=ControlOptions)

    @property
    def estimates(self) -> np.ndarray:
        """Natural-scale values of the estimated hyperparameters, in slot order."""
        return np.array([s.inverse(t) for s, t in zip(self.model.layout.slots, self.theta)])

    def __str__(self):
        from .posterior import summary

        return summary(self)


# ---------------------------------------------------------------------------
# Likelihood and gradient
# ---------------------------------------------------------------------------


def _loglik(model: LoadedModel, param: Hyperparameters, fac: EigenFactor | None = None):
    if not param.psi > 0 or not math.isfinite(param.psi):
        raise NumericalError(f"psi must be positive and finite, got {param.psi}")
    fac = model.eigen(param) if fac is None else fac
    y = model.y_centred
    a = sigma_apply(fac, param.psi, y)
    ll = -0.5 * model.n * math.log(2 * math.pi) - 0.5 * sigma_logdet(fac, param.psi) - 0.5 * y @ a
    return float(ll), fac, a


def log_likelihood(model: LoadedModel, theta) -> float:
    """Marginal log-likelihood at ``theta``."""
    return _loglik(model, model.layout.to_param(theta))[0]


def deviance(model: LoadedModel, theta) -> float:
    return -2.0 * log_likelihood(model, theta)


def _numeric_gradient(model, theta, step=1e-6):
    theta = np.asarray(theta, dtype=float)
    g = np.empty_like(theta)
    for j in range(theta.size):
        h = step * max(1.0, abs(theta[j]))
        e = np.zeros_like(theta)
        e[j] = h
        g[j] = (log_likelihood(model, theta + e) - log_likelihood(model, theta - e)) / (2 * h)
    return g


def log_likelihood_gradient(model: LoadedModel, theta) -> np.ndarray:
    """Gradient of the log-likelihood with respect to ``theta``.

    Scale and error-precision components are analytic; kernel-parameter
    derivatives of the Gram matrix use central differences.  Nyström
    models with more than one term fall back to differencing the
    log-likelihood itself.
    """
    theta = np.asarray(theta, dtype=float)
    layout = model.layout
    if model.nystrom and not model.scalable:
        return _numeric_gradient(model, theta)
    param = layout.to_param(theta)
    psi = param.psi
    _, fac, a = _loglik(model, param)
    u = fac.values
    s = 1.0 / sigma_diag(fac, psi)
    Ha = fac.apply(a)
    n_null = fac.n - fac.rank
    grad = np.empty(len(layout))
    for j, slot in enumerate(layout.slots):
        if slot.name == "psi":
            tr = np.sum(s * (u ** 2 - psi ** -2)) - n_null / psi
            quad = Ha @ Ha - (a @ a) / psi ** 2
            d = 0.5 * (quad - tr)
        else:
            if model.scalable and slot.name == "lambda":
                base = model._base_factor
                diag = base.values
                Da = base.apply(a)
            else:
                D = model.dH(param, slot)
                V = fac.vectors
                diag = np.einsum("ij,ij->j", V, D @ V)
                Da = D @ a
            d = psi * (Ha @ Da - np.sum(s * u * diag))
        grad[j] = d * slot.derivative(theta[j])
    return grad


# ---------------------------------------------------------------------------
# EM
# ---------------------------------------------------------------------------


class _Moments:
    """Posterior moments of ``w`` at the current parameter, in the eigenbasis of ``H``."""

    def __init__(self, model: LoadedModel, param: Hyperparameters):
        fac = model.eigen(param)
        self.model = model
        self.V = fac.vectors
        self.psi = param.psi
        self.s = 1.0 / sigma_diag(fac, param.psi)
        self.yV = self.V.T @ model.y_centred
        self.wV = param.psi * fac.values * self.s * self.yV
        self.trW = float(np.sum(self.s) + self.wV @ self.wV)
        self.yy = float(self.yV @ self.yV)
        if model.scalable:
            self.u1 = model._base_factor.values

    def rotate(self, M: np.ndarray) -> np.ndarray:
        return self.V.T @ M @ self.V

    def h_tilde(self, param: Hyperparameters):
        """``V^T H V``: a diagonal vector on the scalable path, else a matrix."""
        if self.model.scalable:
            return param.lam[0] * self.u1
        return self.rotate(self.model.build_H(param))

    def fit_terms(self, Ht):
        """``(y^T H w, tr(H W H))`` for a rotated kernel matrix."""
        if Ht.ndim == 1:
            Hw = Ht * self.wV
            return float(self.yV @ Hw), float(np.sum(Ht ** 2 * self.s) + Hw @ Hw)
        Hw = Ht @ self.wV
        return float(self.yV @ Hw), float(np.sum(Ht ** 2 * self.s[None, :]) + Hw @ Hw)

    def q(self, param: Hyperparameters) -> float:
        """Q-function up to an additive constant."""
        yHw, tr = self.fit_terms(self.h_tilde(param))
        resid = self.yy - 2 * yHw + tr
        return -0.5 * param.psi * resid - 0.5 * self.trW / param.psi

    def lambda_update(self, param: Hyperparameters, k: int, slot) -> float:
        lam = param.lam[k]
        if self.model.scalable:
            num = float(self.yV @ (self.u1 * self.wV))
            den = float(np.sum(self.u1 ** 2 * (self.s + self.wV ** 2)))
            return num / den if den > 0 else lam
        P = self.rotate(self.model.dH(param, slot))
        R = self.h_tilde(param) - lam * P
        Pw, Rw = P @ self.wV, R @ self.wV
        num = float(self.yV @ Pw - np.sum(P * R * self.s[None, :]) - Rw @ Pw)
        den = float(np.sum(P * P * self.s[None, :]) + Pw @ Pw)
        return num / den if den > 0 else lam

    def psi_update(self, param: Hyperparameters) -> float:
        yHw, tr = self.fit_terms(self.h_tilde(param))
        resid = self.yy - 2 * yHw + tr
        return math.sqrt(self.trW / resid)


def q_function(model: LoadedModel, param: Hyperparameters, current: Hyperparameters) -> float:
    """Expected complete-data log-likelihood at ``param`` given moments at ``current``.

    Defined up to an additive constant that does not depend on ``param``.
    """
    return _Moments(model, current).q(param)


def _set(param: Hyperparameters, slot, value) -> Hyperparameters:
    if slot.name == "lambda":
        lam = list(param.lam)
        lam[slot.index] = value
        return replace(param, lam=tuple(lam))
    if slot.name == "psi":
        return replace(param, psi=value)
    kp = list(param.kernel_params)
    kp[slot.index] = value
    return replace(param, kernel_params=tuple(kp))


def em_step(model: LoadedModel, param: Hyperparameters) -> Hyperparameters:
    """One EM iteration: E-step at ``param``, then conditional M-steps."""
    mom = _Moments(model, param)
    layout = model.layout
    numeric = []
    for slot in layout.slots:
        if slot.name == "lambda" and model.kernels[slot.index].kind != "poly":
            param = _set(param, slot, mom.lambda_update(param, slot.index, slot))
        elif slot.name != "psi":
            numeric.append(slot)
    if numeric:
        param = _numeric_mstep(mom, param, numeric)
    if any(s.name == "psi" for s in layout.slots):
        param = replace(param, psi=mom.psi_update(param))
    return param


def _numeric_mstep(mom: _Moments, param: Hyperparameters, slots) -> Hyperparameters:
    start = np.array([s.forward(_get(param, s)) for s in slots])

    def unpack(t):
        p = param
        for s, v in zip(slots, t):
            p = _set(p, s, s.inverse(v))
        return p

    def objective(t):
        try:
            val = -mom.q(unpack(t))
        except (NumericalError, DataError, FloatingPointError):
            return np.inf
        return val if np.isfinite(val) else np.inf

    f0 = objective(start)
    res = scipy.optimize.minimize(objective, start, method="L-BFGS-B")
    if np.isfinite(res.fun) and res.fun < f0:
        return unpack(res.x)
    return param


def _get(param: Hyperparameters, slot) -> float:
    if slot.name == "lambda":
        return param.lam[slot.index]
    if slot.name == "psi":
        return param.psi
    return param.kernel_params[slot.index]


def _theta_of(model: LoadedModel, param: Hyperparameters) -> np.ndarray:
    """Theta for ``param``; a lone scale parameter's sign is not identified."""
    layout = model.layout
    if any(s.name == "lambda" and s.transform == "log" for s in layout.slots):
        param = replace(param, lam=tuple(abs(v) for v in param.lam))
    return layout.to_theta(param)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


def _say(control: ControlOptions, msg: str):
    if not control.silent:
        print(msg, file=sys.stderr)


def _check_estimable(model: LoadedModel):
    if len(model.layout) == 0:
        raise DataError("nothing to estimate: every hyperparameter is fixed")


def _start(model: LoadedModel, control: ControlOptions, theta0=None) -> np.ndarray:
    p = len(model.layout)
    if theta0 is None:
        theta0 = control.theta0
    if theta0 is not None:
        theta0 = np.asarray(theta0, dtype=float)
        if theta0.size != p:
            raise DataError(f"theta0 needs {p} values, got {theta0.size}")
        return theta0
    rng = np.random.default_rng(control.seed)
    for _ in range(10):
        theta = rng.standard_normal(p)
        try:
            if np.isfinite(log_likelihood(model, theta)):
                return theta
        except NumericalError:
            pass
    raise NumericalError("could not find a starting value with finite log-likelihood")


def _posterior(model: LoadedModel, param: Hyperparameters):
    ll, fac, a = _loglik(model, param)
    w = param.psi * fac.apply(a)
    return ll, fac, w


def _result(model, method, theta, trace, niter, converged, message, t0, control):
    param = model.layout.to_param(theta)
    ll, fac, w = _posterior(model, param)
    return FitResult(model=model, method=method, theta=np.asarray(theta, dtype=float),
                     param=param, loglik=ll, trace=list(trace), niter=niter,
                     converged=converged, message=message, time=time.perf_counter() - t0,
                     w=w, factor=fac, control=control)


def _budget(control: ControlOptions, maxit: int) -> ControlOptions:
    return replace(control, maxit=maxit, par_maxit=min(control.par_maxit, maxit))


def _with_se(fit: FitResult) -> FitResult:
    fit.se = standard_errors(fit.model, fit.theta)
    return fit


def fit_direct(model: LoadedModel, control: ControlOptions | None = None,
               theta0=None, se: bool = True) -> FitResult:
    """Minimise the deviance by L-BFGS."""
    control = control or ControlOptions()
    _check_estimable(model)
    t0 = time.perf_counter()
    theta = _start(model, control, theta0)
    trace = []
    prev = [log_likelihood(model, theta)]
    state = {"stopped": False}

    def fun(t):
        try:
            ll, _, _ = _loglik(model, model.layout.to_param(t))
        except (NumericalError, DataError):
            return np.inf
        return -2.0 * ll if np.isfinite(ll) else np.inf

    def jac(t):
        try:
            return -2.0 * log_likelihood_gradient(model, t)
        except (NumericalError, DataError):
            return np.zeros_like(t)

    def callback(intermediate_result):
        ll = -0.5 * intermediate_result.fun
        trace.append(ll)
        if not control.silent and len(trace) % 10 == 0:
            _say(control, f"iter {len(trace):5d}  loglik = {ll:.6f}")
        gain = ll - prev[0]
        prev[0] = ll
        if abs(gain) < control.stop_crit:
            state["stopped"] = True
            raise StopIteration

    res = scipy.optimize.minimize(fun, theta, jac=jac, method="L-BFGS-B", callback=callback,
                                  options={"maxiter": control.maxit, "ftol": 1e-15,
                                           "gtol": 1e-9})
    if not np.isfinite(res.fun):
        fit = _result(model, "direct", theta, trace, len(trace), False,
                      "aborted (non-finite)", t0, control)
        return fit
    if state["stopped"] or res.success:
        converged, msg = True, "converged"
    elif len(trace) >= control.maxit:
        converged, msg = False, "maxit reached"
    else:
        converged, msg = False, f"aborted ({res.message})"
    fit = _result(model, "direct", res.x, trace, len(trace), converged, msg, t0, control)
    _say(control, f"direct: {msg} after {fit.niter} iterations, loglik = {fit.loglik:.6f}")
    return _with_se(fit) if se else fit


def fit_em(model: LoadedModel, control: ControlOptions | None = None,
           theta0=None, se: bool = True) -> FitResult:
    """EM algorithm; the log-likelihood trace is non-decreasing."""
    control = control or ControlOptions()
    _check_estimable(model)
    if model.nystrom:
        raise DataError("the EM algorithm is not available for Nystrom models")
    t0 = time.perf_counter()
    theta = _start(model, control, theta0)
    param = model.layout.to_param(theta)
    ll = _loglik(model, param)[0]
    trace = []
    converged, msg = False, "maxit reached"
    for it in range(control.maxit):
        new = em_step(model, param)
        try:
            ll_new = _loglik(model, new)[0]
        except NumericalError:
            ll_new = -np.inf
        if not np.isfinite(ll_new):
            converged, msg = False, "aborted (non-finite)"
            break
        if ll_new < ll - EM_SLACK:
            raise NumericalError(
                f"EM step {it + 1} decreased the log-likelihood from {ll!r} to {ll_new!r}")
        trace.append(ll_new)
        gain = ll_new - ll
        param, ll = new, ll_new
        if not control.silent and (it + 1) % 100 == 0:
            _say(control, f"EM iter {it + 1:5d}  loglik = {ll:.6f}")
        if gain < control.stop_crit:
            converged, msg = True, "converged"
            break
    fit = _result(model, "em", _theta_of(model, param), trace, len(trace), converged, msg,
                  t0, control)
    _say(control, f"em: {msg} after {fit.niter} iterations, loglik = {fit.loglik:.6f}")
    return _with_se(fit) if se else fit


def fit_mixed(model: LoadedModel, control: ControlOptions | None = None,
              theta0=None, se: bool = True) -> FitResult:
    """``em_maxit`` EM iterations, then direct optimisation.

    Both phases share the ``maxit`` budget; the direct phase is skipped
    when EM has converged or used the whole budget.
    """
    control = control or ControlOptions()
    _check_estimable(model)
    t0 = time.perf_counter()
    theta = _start(model, control, theta0)
    em_iters = min(control.em_maxit, control.maxit)
    if em_iters > 0:
        em = fit_em(model, _budget(control, em_iters), theta0=theta, se=False)
        theta, trace, niter = em.theta, list(em.trace), em.niter
        if em.converged or niter >= control.maxit:
            fit = _result(model, "mixed", theta, trace, niter, em.converged, em.message,
                          t0, control)
            return _with_se(fit) if se else fit
    else:
        trace, niter = [], 0
    direct = fit_direct(model, _budget(control, control.maxit - niter), theta0=theta,
                        se=False)
    fit = _result(model, "mixed", direct.theta, trace + direct.trace, niter + direct.niter,
                  direct.converged, direct.message, t0, control)
    return _with_se(fit) if se else fit


def fit_fixed(model: LoadedModel, theta=None) -> FitResult:
    """Posterior quantities at fixed ``theta`` (default: the layout's fixed values)."""
    t0 = time.perf_counter()
    if theta is None:
        if len(model.layout):
            raise DataError("theta is required when the model has estimable hyperparameters")
        theta = np.zeros(0)
    theta = np.asarray(theta, dtype=float)
    return _result(model, "fixed", theta, [], 0, True, "fixed hyperparameters", t0,
                   ControlOptions(silent=True))


_METHODS = {"direct": fit_direct, "em": fit_em, "mixed": fit_mixed}


def fit_restarts(model: LoadedModel, method: str = "direct",
                 control: ControlOptions | None = None) -> FitResult:
    """Short runs from independent random starts; continue the best one.

    Run ``i`` draws its start from a generator seeded by ``(seed, i)``.
    Ties in log-likelihood go to the lowest run index.
    """
    control = control or ControlOptions()
    _check_estimable(model)
    fitter = _METHODS[method]
    runs = max(1, control.n_restarts)
    p = len(model.layout)
    seed = control.seed if control.seed is not None else np.random.SeedSequence().entropy
    starts = [np.random.default_rng([seed, i]).standard_normal(p) for i in range(runs)]
    short = replace(control, maxit=control.par_maxit, restarts=0, silent=True)

    def run(theta0):
        try:
            return fitter(model, short, theta0=theta0, se=False)
        except NumericalError:
            return None

    with ThreadPoolExecutor(max_workers=min(control.cores, runs)) as pool:
        results = list(pool.map(run, starts))
    lls = [r.loglik if r is not None and np.isfinite(r.loglik) else -np.inf for r in results]
    if not np.any(np.isfinite(lls)):
        raise NumericalError("every restart produced a non-finite log-likelihood")
    best = int(np.argmax(lls))
    _say(control, "restart log-likelihoods: " + ", ".join(f"{v:.4f}" for v in lls)
         + f"; continuing run {best + 1}")
    t0 = time.perf_counter() - results[best].time
    cont = fitter(model, replace(control, restarts=0), theta0=results[best].theta, se=False)
    fit = _result(model, cont.method, cont.theta, results[best].trace + cont.trace,
                  results[best].niter + cont.niter, cont.converged, cont.message, t0, control)
    return _with_se(fit)


def iprior(model: LoadedModel, method: str = "direct", control: ControlOptions | None = None,
           theta=None, **options) -> FitResult:
    """Fit an I-prior model.

    ``options`` are forwarded to :class:`ControlOptions`; ``theta`` is only
    used by ``method="fixed"``.
    """
    if isinstance(control, dict):
        control = ControlOptions(**control)
    if options:
        control = replace(control or ControlOptions(), **options)
    control = control or ControlOptions()
    if method not in model.methods:
        raise DataError(f"method {method!r} not available; choose from {model.methods}")
    if method == "fixed":
        return fit_fixed(model, theta)
    if control.n_restarts > 0:
        return fit_restarts(model, method, control)
    return _METHODS[method](model, control)


def update(fit: FitResult, iter_update: int = 100, method: str | None = None,
           control: ControlOptions | None = None) -> FitResult:
    """Continue estimation from ``fit.theta`` with a fresh iteration counter."""
    method = method or ("direct" if fit.method == "fixed" else fit.method)
    control = replace(control or fit.control, maxit=iter_update, restarts=0,
                      par_maxit=min(fit.control.par_maxit, iter_update), theta0=None)
    if method == "fixed":
        return fit_fixed(fit.model, fit.theta)
    return _METHODS[method](fit.model, control, theta0=fit.theta)


# ---------------------------------------------------------------------------
# Standard errors
# ---------------------------------------------------------------------------


def standard_errors(model: LoadedModel, theta_hat) -> StandardErrors:
    """Standard errors from the numerical Hessian, mapped by the delta method."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    p = theta_hat.size
    if p == 0:
        return StandardErrors(None, None, None, None, "nothing estimated")
    hess = np.empty((p, p))
    for j in range(p):
        h = 1e-4 * max(1.0, abs(theta_hat[j]))
        e = np.zeros(p)
        e[j] = h
        gp = log_likelihood_gradient(model, theta_hat + e)
        gm = log_likelihood_gradient(model, theta_hat - e)
        hess[:, j] = -(gp - gm) / (2 * h)
    hess = 0.5 * (hess + hess.T)
    if not np.all(np.isfinite(hess)):
        return StandardErrors(None, None, None, None, "Hessian is not finite")
    try:
        chol = np.linalg.cholesky(hess)
    except np.linalg.LinAlgError:
        return StandardErrors(None, None, None, None,
                              "Hessian is not positive definite (boundary or saddle point)")
    inv = np.linalg.inv(chol)
    se_theta = np.sqrt(np.sum(inv ** 2, axis=0))
    se = se_theta * np.abs(model.layout.derivatives(theta_hat))
    est = np.array([s.inverse(t) for s, t in zip(model.layout.slots, theta_hat)])
    z = est / se
    pval = 2 * norm.sf(np.abs(z))
    return StandardErrors(se, z, pval, se_theta)
