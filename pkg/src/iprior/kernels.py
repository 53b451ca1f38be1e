"""Reproducing kernels and Gram matrices.

Five kernels are supported: canonical linear, fractional Brownian motion
(fBm), squared exponential (SE), polynomial and Pearson.  Every ``kern_*``
function takes a training column ``x`` and an optional second column ``y``
and returns a :class:`GramMatrix` whose ``[i, j]`` entry is
``h(x[i], y[j])``.  When ``centre=True`` the kernel is centred with respect
to the points in ``x``, which always play the role of the training set.

The scale parameter is not applied here, except for the polynomial kernel
where it sits inside the power.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DataError

__all__ = [
    "Continuous",
    "Categorical",
    "Functional",
    "CentringStats",
    "GramMatrix",
    "as_covariate",
    "sobolev_inner_product",
    "centre_gram",
    "kern_linear",
    "kern_canonical",
    "kern_fbm",
    "kern_se",
    "kern_poly",
    "kern_pearson",
]


# ---------------------------------------------------------------------------
# Covariate columns
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Continuous:
    """Real covariate with ``n`` rows and ``d`` columns."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[1] < 1:
            raise DataError("continuous covariate must be a vector or a 2-d array")
        if not np.all(np.isfinite(v)):
            raise DataError("continuous covariate contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def features(self) -> np.ndarray:
        return self.values

    def take(self, idx) -> "Continuous":
        return Continuous(self.values[idx])


@dataclass(frozen=True)
class Functional:
    """Discretised curves on a common regular grid, one curve per row.

    Inner products use the Sobolev form, which is the Euclidean inner
    product of first differences along the grid.
    """

    curves: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.curves, dtype=float)
        if c.ndim != 2:
            raise DataError("functional covariate must be a 2-d array of curves")
        if c.shape[1] < 2:
            raise DataError("functional covariate needs at least 2 grid points")
        if not np.all(np.isfinite(c)):
            raise DataError("functional covariate contains non-finite values")
        c.setflags(write=False)
        object.__setattr__(self, "curves", c)

    def __len__(self):
        return self.curves.shape[0]

    @property
    def dim(self) -> int:
        return self.curves.shape[1]

    def features(self) -> np.ndarray:
        return np.diff(self.curves, axis=1)

    def take(self, idx) -> "Functional":
        return Functional(self.curves[idx])


@dataclass(frozen=True)
class Categorical:
    """Nominal covariate.

    ``levels`` and ``counts`` describe the empirical distribution of the
    column and are what the Pearson kernel uses.
    """

    labels: np.ndarray
    levels: tuple = field(default=None)
    counts: tuple = field(default=None)

    def __post_init__(self):
        lab = np.asarray(self.labels).astype(str)
        if lab.ndim != 1:
            raise DataError("categorical covariate must be one-dimensional")
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)
        if self.levels is None:
            levels, counts = np.unique(lab, return_counts=True)
            object.__setattr__(self, "levels", tuple(levels.tolist()))
            object.__setattr__(self, "counts", tuple(int(c) for c in counts))

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return 1

    def probabilities(self) -> dict:
        n = sum(self.counts)
        return {lev: c / n for lev, c in zip(self.levels, self.counts)}

    def take(self, idx) -> "Categorical":
        return Categorical(self.labels[idx])


def as_covariate(x):
    """Coerce arrays to a covariate column; numeric data becomes Continuous."""
    if isinstance(x, (Continuous, Categorical, Functional)):
        return x
    arr = np.asarray(x)
    if arr.dtype.kind in "biuf":
        return Continuous(arr)
    return Categorical(arr)


def sobolev_inner_product(z, zprime) -> float:
    """Discretised Sobolev inner product of two curves on a regular grid."""
    z = np.asarray(z, dtype=float)
    zprime = np.asarray(zprime, dtype=float)
    if z.ndim != 1 or z.shape != zprime.shape:
        raise DataError("curves must be 1-d and of equal length")
    if z.size < 2:
        raise DataError("curves need at least 2 grid points")
    return float(np.dot(np.diff(z), np.diff(zprime)))


# ---------------------------------------------------------------------------
# Gram matrices and centring
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CentringStats:
    """Training means of an uncentred kernel.

    ``means[i]`` is the average of ``h(x_i, x_j)`` over training ``j``;
    ``grand`` is the average over all training pairs.
    """

    means: np.ndarray
    grand: float


@dataclass(frozen=True)
class GramMatrix:
    values: np.ndarray
    centred: bool = False
    stats: CentringStats | None = None

    def __post_init__(self):
        self.values.setflags(write=False)

    @property
    def shape(self):
        return self.values.shape

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


def _symmetrise(K):
    return 0.5 * (K + K.T)


def _stats_of(K: np.ndarray) -> CentringStats:
    means = K.mean(axis=1)
    return CentringStats(means=means, grand=float(means.mean()))


def centre_gram(H, stats: CentringStats | None = None) -> GramMatrix:
    """Centre a Gram matrix using training statistics.

    Without ``stats``, ``H`` must be a square training self-Gram and its own
    statistics are used (and returned).  With ``stats``, ``H`` is a cross-Gram
    of shape ``(n_train, m)`` whose rows index training points.
    """
    K = np.asarray(H.values if isinstance(H, GramMatrix) else H, dtype=float)
    if stats is None:
        if K.ndim != 2 or K.shape[0] != K.shape[1]:
            raise DataError("self-Gram must be square when no centring stats are given")
        stats = _stats_of(K)
        out = K - stats.means[:, None] - stats.means[None, :] + stats.grand
        # Second pass removes rounding residue, which matters when the
        # centred values are tiny relative to K.
        r = out.mean(axis=0)
        out = _symmetrise(out - r[:, None] - r[None, :] + r.mean())
    else:
        if K.ndim != 2 or K.shape[0] != stats.means.shape[0]:
            raise DataError(
                f"cross-Gram has {K.shape[0]} training rows, stats have {stats.means.shape[0]}"
            )
        out = K - stats.means[:, None] - K.mean(axis=0)[None, :] + stats.grand
    return GramMatrix(out, centred=True, stats=stats)


def _pair(x, y):
    x = as_covariate(x)
    y = x if y is None else as_covariate(y)
    if isinstance(x, Categorical) or isinstance(y, Categorical):
        raise DataError("categorical covariates only support the Pearson kernel")
    if type(x) is not type(y):
        raise DataError("x and y must be the same kind of covariate")
    if x.dim != y.dim:
        raise DataError(f"dimension mismatch: {x.dim} vs {y.dim}")
    return x, y


def _finish(raw_fn, x, y, centre: bool, stats: CentringStats | None) -> GramMatrix:
    """Evaluate ``raw_fn(a, b)`` on features and optionally centre."""
    X = x.features()
    if y is None:
        K = _symmetrise(raw_fn(X, X))
        if not centre:
            return GramMatrix(K)
        return centre_gram(K)
    Y = y.features()
    K = raw_fn(X, Y)
    if not centre:
        return GramMatrix(K)
    if stats is None:
        stats = _stats_of(raw_fn(X, X))
    return centre_gram(K, stats)


def _sq_dists(A, B):
    return cdist(A, B, "sqeuclidean")


def _dot(A, B):
    return A @ B.T


def kern_linear(x, y=None, centre: bool = False, stats: CentringStats | None = None) -> GramMatrix:
    """Canonical linear kernel ``<x, x'>``."""
    x, yy = _pair(x, y)
    return _finish(_dot, x, None if y is None else yy, centre, stats)


kern_canonical = kern_linear


def kern_fbm(x, y=None, gamma: float = 0.5, centre: bool = False,
             stats: CentringStats | None = None) -> GramMatrix:
    """Fractional Brownian motion kernel with Hurst coefficient ``gamma``."""
    if not 0.0 < gamma < 1.0:
        raise DataError(f"Hurst coefficient must lie in (0, 1), got {gamma}")
    x, yy = _pair(x, y)

    def raw(A, B):
        na = np.sum(A * A, axis=1) ** gamma
        nb = np.sum(B * B, axis=1) ** gamma
        return -0.5 * (_sq_dists(A, B) ** gamma - na[:, None] - nb[None, :])

    return _finish(raw, x, None if y is None else yy, centre, stats)


def kern_se(x, y=None, lengthscale: float = 1.0, centre: bool = False,
            stats: CentringStats | None = None) -> GramMatrix:
    """Squared exponential kernel with length scale ``lengthscale``."""
    if not lengthscale > 0:
        raise DataError(f"length scale must be positive, got {lengthscale}")
    x, yy = _pair(x, y)

    def raw(A, B):
        return np.exp(-_sq_dists(A, B) / (2.0 * lengthscale ** 2))

    return _finish(raw, x, None if y is None else yy, centre, stats)


def kern_poly(x, y=None, degree: int = 2, offset: float = 0.0, lam: float = 1.0,
              centre: bool = False, stats: CentringStats | None = None) -> GramMatrix:
    """Polynomial kernel ``(lam * <x, x'> + offset) ** degree``.

    With ``centre=True`` only the inner product is centred; the returned
    ``stats`` are those of the inner product.
    """
    if int(degree) != degree or degree < 1:
        raise DataError(f"polynomial degree must be an integer >= 1, got {degree}")
    if offset < 0:
        raise DataError(f"polynomial offset must be non-negative, got {offset}")
    inner = kern_linear(x, y, centre=centre, stats=stats)
    K = (lam * inner.values + offset) ** int(degree)
    return GramMatrix(K, centred=False, stats=inner.stats)


def kern_pearson(x, y=None, centre: bool = False,
                 stats: CentringStats | None = None) -> GramMatrix:
    """Pearson kernel for nominal covariates.

    Probabilities are the empirical level frequencies of the training
    column ``x``; labels in ``y`` must all occur in ``x``.
    """
    x = as_covariate(x)
    if not isinstance(x, Categorical):
        raise DataError("Pearson kernel requires a categorical covariate")
    if y is None:
        yy = x
    else:
        yy = as_covariate(y)
        if not isinstance(yy, Categorical):
            raise DataError("Pearson kernel requires a categorical covariate")
        unseen = set(yy.labels.tolist()) - set(x.levels)
        if unseen:
            raise DataError(f"unseen categorical level(s): {sorted(unseen)}")
    prob = x.probabilities()
    px = np.array([prob[lab] for lab in x.labels])

    def raw(a, b):
        return (a[:, None] == b[None, :]) / px[:, None] - 1.0

    K = raw(x.labels, yy.labels)
    if not centre:
        return GramMatrix(K)
    if y is None:
        return centre_gram(K)
    if stats is None:
        stats = _stats_of(raw(x.labels, x.labels))
    return centre_gram(K, stats)
