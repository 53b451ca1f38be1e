"""Eigen-based operations on the marginal covariance ``psi * H^2 + I / psi``.

The kernel matrix ``H`` is kept as an :class:`EigenFactor`
``H = V diag(u) V^T``.  ``V`` may have fewer columns than rows (Nyström);
the orthogonal complement of ``V`` is then an eigenspace of ``H`` with
eigenvalue zero, so the covariance acts there as ``I / psi``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NumericalError

__all__ = [
    "EigenFactor",
    "NystromFactor",
    "sym_eigen",
    "sigma_diag",
    "sigma_apply",
    "sigma_logdet",
    "nystrom_eigen",
    "woodbury_apply",
]


@dataclass(frozen=True)
class EigenFactor:
    vectors: np.ndarray
    values: np.ndarray

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def rank(self) -> int:
        return self.vectors.shape[1]

    @property
    def full(self) -> bool:
        return self.rank == self.n

    def scaled(self, c: float) -> "EigenFactor":
        """Factor of ``c * H``; eigenvalues are no longer sorted if ``c < 0``."""
        return type(self)(**{**self.__dict__, "values": c * self.values})

    def matrix(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.T

    def apply(self, v: np.ndarray) -> np.ndarray:
        """``H @ v`` for a vector or a matrix of column vectors."""
        proj = self.vectors.T @ v
        return self.vectors @ (self.values * proj.T).T


@dataclass(frozen=True)
class NystromFactor(EigenFactor):
    """Approximate eigendecomposition built from ``m`` active points."""

    m: int = 0
    active: np.ndarray | None = None


def sym_eigen(H) -> EigenFactor:
    """Full spectral factorisation of a symmetric matrix, eigenvalues ascending."""
    H = np.asarray(H, dtype=float)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError("matrix must be square")
    if not np.all(np.isfinite(H)):
        raise NumericalError("matrix has non-finite entries")
    u, V = scipy.linalg.eigh(0.5 * (H + H.T))
    return EigenFactor(vectors=V, values=u)


def _check_psi(psi):
    if not psi > 0:
        raise ValueError(f"psi must be positive, got {psi}")


def sigma_diag(fac: EigenFactor, psi: float) -> np.ndarray:
    """Eigenvalues ``psi * u^2 + 1 / psi`` of the covariance on ``V``."""
    _check_psi(psi)
    return psi * fac.values ** 2 + 1.0 / psi


def sigma_apply(fac: EigenFactor, psi: float, v) -> np.ndarray:
    """Solve ``(psi H^2 + I / psi) x = v``; ``v`` may be a vector or matrix."""
    d = sigma_diag(fac, psi)
    v = np.asarray(v, dtype=float)
    V = fac.vectors
    proj = V.T @ v
    scaled = proj / d if v.ndim == 1 else proj / d[:, None]
    out = V @ scaled
    if not fac.full:
        out = out + psi * (v - V @ proj)
    return out


def sigma_logdet(fac: EigenFactor, psi: float) -> float:
    d = sigma_diag(fac, psi)
    return float(np.sum(np.log(d)) - (fac.n - fac.rank) * np.log(psi))


def nystrom_eigen(A, B, rtol: float = 1e-10) -> NystromFactor:
    """Orthogonal Nyström eigendecomposition from blocks ``A`` and ``B``.

    ``A`` is the ``m x m`` kernel block of the active points and ``B`` the
    ``m x (n - m)`` block against the remaining points.  Eigenvectors are
    returned with the active points first, in the order of the blocks.
    Eigenvalues of ``A`` below ``rtol * max|u|`` are discarded.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    m = A.shape[0]
    if m < 2 or A.shape != (m, m) or B.shape[0] != m:
        raise ValueError("A must be m x m with m >= 2 and B must have m rows")
    u, V = scipy.linalg.eigh(0.5 * (A + A.T))
    keep = np.abs(u) > rtol * np.max(np.abs(u)) if np.any(u) else np.zeros(m, bool)
    u, V = u[keep], V[:, keep]
    n = m + B.shape[1]
    if u.size == 0:
        return NystromFactor(vectors=np.zeros((n, 0)), values=np.zeros(0),
                             m=m, active=np.arange(m))
    C = np.vstack([V, B.T @ (V / u)])
    # H ~ C diag(u) C^T; re-diagonalise through a thin QR of C.
    Q, R = np.linalg.qr(C)
    core = (R * u) @ R.T
    lam, W = scipy.linalg.eigh(0.5 * (core + core.T))
    return NystromFactor(vectors=Q @ W, values=lam, m=m, active=np.arange(m))


def woodbury_apply(Q, psi: float, v) -> np.ndarray:
    """Solve ``(psi (Q Q^T)^2 + I / psi) x = v`` with the Woodbury identity.

    Evaluates ``psi [I - Q ((psi^2 Q^T Q)^{-1} + Q^T Q)^{-1} Q^T] v`` at
    ``O(n q^2)`` cost.
    """
    _check_psi(psi)
    Q = np.asarray(Q, dtype=float)
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(Q)):
        raise NumericalError("factor has non-finite entries")
    G = Q.T @ Q
    if not np.any(G):
        return psi * v
    try:
        Ginv = scipy.linalg.inv(psi ** 2 * G)
        inner = scipy.linalg.solve(Ginv + G, Q.T @ v, assume_a="sym")
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError("inner Woodbury system is singular") from exc
    return psi * (v - Q @ inner)
