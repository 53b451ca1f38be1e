"""Post-estimation: fitted values, prediction with credible intervals,
residuals, accessors, plot data and the printed summary."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.stats import norm

from .errors import DataError
from .estimation import FitResult
from .kernels import Categorical, Continuous
from .linalg import sigma_diag

__all__ = [
    "Prediction",
    "UNAVAILABLE",
    "intercept",
    "fitted_values",
    "predict",
    "residuals",
    "plot_data",
    "summary",
    "get_intercept",
    "get_hyp",
    "get_lambda",
    "get_psi",
    "get_se",
    "get_kernels",
    "get_kern_matrix",
    "get_prederror",
    "get_estl",
    "get_method",
    "get_convergence",
    "get_niter",
    "get_time",
    "get_size",
]


class _Unavailable:
    """Marker returned by accessors for quantities a fit does not have."""

    def __repr__(self):
        return "UNAVAILABLE"

    def __bool__(self):
        return False


UNAVAILABLE = _Unavailable()


@dataclass(frozen=True)
class Prediction:
    point: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    rmse: float | None = None
    alpha: float | None = None

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({"point": self.point})
        if self.lower is not None:
            df["lower"] = self.lower
            df["upper"] = self.upper
        return df

    def __len__(self):
        return self.point.shape[0]


def intercept(fit: FitResult) -> float:
    return fit.model.y_mean


def _rmse(y, yhat) -> float:
    return float(np.sqrt(np.mean((np.asarray(y, dtype=float) - yhat) ** 2)))


def _predict_columns(fit: FitResult, columns, intervals, alpha, y_test, noise=True):
    model = fit.model
    h = model.cross_H(columns, fit.param)
    point = model.y_mean + h @ fit.w
    lower = upper = None
    if intervals:
        if not 0 < alpha < 1:
            raise DataError(f"alpha must lie in (0, 1), got {alpha}")
        var = _f_variance(fit, h)
        if noise:
            var = var + 1.0 / fit.param.psi
        half = norm.ppf(1 - alpha / 2) * np.sqrt(var)
        lower, upper = point - half, point + half
    rmse = None if y_test is None else _rmse(y_test, point)
    return Prediction(point, lower, upper, rmse, alpha if intervals else None)


def _f_variance(fit: FitResult, h: np.ndarray) -> np.ndarray:
    """Posterior variance of ``f`` at rows of the cross kernel ``h``."""
    fac = fit.factor
    psi = fit.param.psi
    proj = h @ fac.vectors
    var = np.sum(proj ** 2 / sigma_diag(fac, psi), axis=1)
    if not fac.full:
        var = var + psi * (np.sum(h ** 2, axis=1) - np.sum(proj ** 2, axis=1))
    return np.maximum(var, 0.0)


def fitted_values(fit: FitResult, intervals: bool = False, alpha: float = 0.05) -> Prediction:
    """Posterior-mean fitted values with the training RMSE."""
    model = fit.model
    return _predict_columns(fit, model.columns, intervals, alpha, model.y)


def predict(fit: FitResult, newdata, intervals: bool = False, alpha: float = 0.05,
            y_test=None, noise: bool = True) -> Prediction:
    """Predict at new covariate values.

    ``newdata`` is a table holding the training covariate columns.  The
    intervals are for a new response (posterior variance of ``f`` plus the
    error variance) unless ``noise=False``.  If ``y_test`` is ``None`` and the
    table holds the response column, that column is used for the RMSE;
    pass ``y_test=False`` to skip it.
    """
    model = fit.model
    columns = model.new_columns(newdata)
    if y_test is None:
        try:
            y_test = np.asarray(newdata[model.spec.response], dtype=float)
        except (KeyError, IndexError, ValueError, TypeError):
            y_test = None
    elif y_test is False:
        y_test = None
    return _predict_columns(fit, columns, intervals, alpha, y_test, noise=noise)


def residuals(fit: FitResult) -> np.ndarray:
    return fit.model.y - fitted_values(fit).point


# ---------------------------------------------------------------------------
# Accessors
# ---------------------------------------------------------------------------


def get_intercept(fit: FitResult) -> float:
    return intercept(fit)


def get_hyp(fit: FitResult) -> dict:
    """All hyperparameters, estimated and fixed."""
    model = fit.model
    p = fit.param
    single = model.p == 1
    out = {}
    for k, lam in enumerate(p.lam):
        out["lambda" if single else f"lambda[{k + 1}]"] = lam
    for k, (ker, v) in enumerate(zip(model.kernels, p.kernel_params)):
        if ker.param_name is not None:
            out[ker.param_name if single else f"{ker.param_name}[{k + 1}]"] = v
    out["psi"] = p.psi
    return out


def get_lambda(fit: FitResult) -> np.ndarray:
    return np.array(fit.param.lam)


def get_psi(fit: FitResult) -> float:
    return fit.param.psi


def get_se(fit: FitResult):
    if fit.se is None or not fit.se.available:
        return UNAVAILABLE
    return dict(zip(fit.model.hyperparameter_names(), fit.se.se))


def get_kernels(fit: FitResult) -> dict:
    return {name: str(fit.model.kernel_at(k, fit.param))
            for k, name in enumerate(fit.model.names)}


def get_kern_matrix(fit: FitResult) -> np.ndarray:
    return fit.model.build_H(fit.param)


def get_prederror(fit: FitResult) -> float:
    return fitted_values(fit).rmse


def get_estl(fit: FitResult) -> dict:
    flags = fit.model.spec.estimate
    return {("lambda" if k == "lambda_" else k): v for k, v in flags.items()}


def get_method(fit: FitResult) -> str:
    return fit.method


def get_convergence(fit: FitResult) -> dict:
    return {"converged": fit.converged, "message": fit.message}


def get_niter(fit: FitResult) -> int:
    return fit.niter


def get_time(fit: FitResult) -> float:
    return fit.time


def get_size(fit: FitResult) -> int:
    return fit.model.size()


# ---------------------------------------------------------------------------
# Plot data
# ---------------------------------------------------------------------------


def plot_data(fit: FitResult, kind: str = "fitted", alpha: float = 0.05,
              n_grid: int = 200, n_draws: int = 50, seed: int | None = None) -> pd.DataFrame:
    """Numbers behind the standard diagnostic plots.

    ``fitted``: regression curve on an evenly spaced grid over the single
    continuous covariate, one curve per combination of categorical levels.
    ``resid``: residuals against fitted values.  ``iter``: log-likelihood
    trace.  ``ppc``: observed response next to ``n_draws`` posterior
    predictive replicates.
    """
    if kind == "fitted":
        return _plot_fitted(fit, alpha, n_grid)
    if kind == "resid":
        fv = fitted_values(fit).point
        return pd.DataFrame({"fitted": fv, "resid": fit.model.y - fv})
    if kind == "iter":
        return pd.DataFrame({"iteration": np.arange(1, len(fit.trace) + 1),
                             "loglik": np.asarray(fit.trace, dtype=float)})
    if kind == "ppc":
        return _plot_ppc(fit, n_draws, seed)
    raise DataError(f"unknown plot kind {kind!r}")


def _plot_fitted(fit, alpha, n_grid):
    model = fit.model
    cont = [k for k, c in enumerate(model.columns) if isinstance(c, Continuous)]
    cats = [k for k, c in enumerate(model.columns) if isinstance(c, Categorical)]
    if len(cont) != 1 or model.columns[cont[0]].dim != 1 or len(cont) + len(cats) != model.p:
        raise DataError("fitted-line data needs exactly one scalar continuous covariate "
                        "(plus optional categorical ones)")
    k = cont[0]
    x = model.columns[k].values[:, 0]
    grid = np.linspace(x.min(), x.max(), n_grid)
    levels = [model.columns[c].levels for c in cats]
    combos = pd.MultiIndex.from_product(levels).tolist() if cats else [()]
    frames = []
    for combo in combos:
        combo = combo if isinstance(combo, tuple) else (combo,)
        table = {model.names[k]: grid}
        for c, lev in zip(cats, combo):
            table[model.names[c]] = np.full(n_grid, lev)
        pred = predict(fit, table, intervals=True, alpha=alpha, y_test=False)
        df = pd.DataFrame({"x": grid})
        for c, lev in zip(cats, combo):
            df[model.names[c]] = lev
        df["fitted"] = pred.point
        df["lower"] = pred.lower
        df["upper"] = pred.upper
        frames.append(df)
    return pd.concat(frames, ignore_index=True)


def _plot_ppc(fit, n_draws, seed):
    model = fit.model
    rng = np.random.default_rng(seed)
    fac = fit.factor
    psi = fit.param.psi
    scale = np.sqrt(1.0 / sigma_diag(fac, psi))
    # w ~ N(w_tilde, Sigma^{-1}); H annihilates the complement of the factor.
    z = rng.standard_normal((fac.rank, n_draws))
    w = fit.w[:, None] + fac.vectors @ (scale[:, None] * z)
    f = fac.apply(w)
    eps = rng.standard_normal((model.n, n_draws)) / math.sqrt(psi)
    draws = model.y_mean + f + eps
    df = pd.DataFrame(draws, columns=[f"draw_{i + 1}" for i in range(n_draws)])
    df.insert(0, "observed", model.y)
    return df


# ---------------------------------------------------------------------------
# Summary
# ---------------------------------------------------------------------------

_KIND_NAMES = {"linear": "Linear", "fbm": "Fractional Brownian motion", "se": "Squared exponential",
               "poly": "Polynomial", "pearson": "Pearson"}
_METHOD_NAMES = {"em": "EM algorithm", "direct": "Direct optimisation", "mixed": "Mixed (EM + direct)",
                 "fixed": "Fixed hyperparameters"}


def _stars(p):
    for cut, s in ((0.001, "***"), (0.01, "**"), (0.05, "*"), (0.1, ".")):
        if p < cut:
            return s
    return ""


def summary(fit: FitResult) -> str:
    model = fit.model
    lines = ["RKHS used:"]
    for k, name in enumerate(model.names):
        ker = model.kernel_at(k, fit.param)
        extra = "" if ker.param is None else f" ({ker.param_name} = {ker.param:g})"
        lines.append(f"{_KIND_NAMES[ker.kind]} ({name}){extra}")
    for a, b in model.interactions:
        lines.append(f"Interaction ({model.names[a]} x {model.names[b]})")
    res = residuals(fit)
    q = np.quantile(res, [0, 0.25, 0.5, 0.75, 1])
    lines += ["", "Residuals:",
              "    Min.  1st Qu.   Median  3rd Qu.     Max. ",
              " ".join(f"{v:8.4f}" for v in q), "", "Hyperparameters:"]
    names = model.hyperparameter_names()
    if names:
        lines.append(f"{'':10s} {'Estimate':>10s} {'S.E.':>10s} {'z':>8s} {'P[|Z>z|]':>9s}")
        est = fit.estimates
        se = fit.se
        for j, nm in enumerate(names):
            if se is not None and se.available:
                lines.append(f"{nm:10s} {est[j]:10.4f} {se.se[j]:10.4f} {se.z[j]:8.3f} "
                             f"{se.p[j]:9.3g} {_stars(se.p[j])}")
            else:
                lines.append(f"{nm:10s} {est[j]:10.4f} {'NA':>10s} {'NA':>8s} {'NA':>9s}")
        if se is not None and not se.available:
            lines.append(f"Standard errors unavailable: {se.message}")
    else:
        lines.append("none estimated")
    lines += ["", f"{_METHOD_NAMES[fit.method]}{' (Nystrom)' if model.nystrom else ''}. "
                  f"Iterations: {fit.niter}/{fit.control.maxit}",
              f"Convergence: {fit.message}. Time taken: {fit.time:.4f} secs",
              f"Log-likelihood value: {fit.loglik:.4f}",
              f"RMSE of prediction: {get_prederror(fit):.6f} (Training)"]
    return "\n".join(lines)
