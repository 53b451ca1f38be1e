"""Synthetic data: a smooth regression benchmark and I-prior sample paths."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.stats import norm

from .errors import DataError
from .model import KernelSpec

__all__ = ["SimConfig", "smooth_mean", "gen_smooth", "sample_iprior_path"]


@dataclass(frozen=True)
class SimConfig:
    n: int
    xlim: tuple[float, float] = (-1.0, 6.0)
    seed: int | None = None
    const: float = 1.0
    noise_sd: float = 0.9

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise DataError(f"n must be a positive integer, got {self.n}")
        lo, hi = self.xlim
        if not lo < hi:
            raise DataError(f"xlim must satisfy lo < hi, got {self.xlim}")
        if self.noise_sd < 0:
            raise DataError(f"noise SD must be non-negative, got {self.noise_sd}")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "xlim", (float(lo), float(hi)))


def smooth_mean(x, const: float = 1.0) -> np.ndarray:
    """Two Gaussian bumps plus an exponential ramp switched on at x = 4.5."""
    x = np.asarray(x, dtype=float)
    bumps = 0.35 * norm.pdf(x, 1.0, 0.8) + 0.65 * norm.pdf(x, 4.0, 1.5)
    ramp = np.where(x > 4.5, np.exp(1.25 * (np.minimum(x, 50.0) - 4.5)), 0.0)
    return const + bumps + ramp


def gen_smooth(cfg: SimConfig) -> pd.DataFrame:
    """Draw ``cfg.n`` points from the smooth benchmark; columns ``y`` and ``X``.

    ``X`` is uniform on ``xlim`` and then jittered by up to half an average
    spacing either way.
    """
    rng = np.random.default_rng(cfg.seed)
    lo, hi = cfg.xlim
    x = rng.uniform(lo, hi, cfg.n)
    half = (hi - lo) / (2 * cfg.n)
    x = x + rng.uniform(-half, half, cfg.n)
    y = smooth_mean(x, cfg.const) + cfg.noise_sd * rng.standard_normal(cfg.n)
    return pd.DataFrame({"y": y, "X": x})


def sample_iprior_path(kernel: KernelSpec | str, xs, psi: float = 1.0, seed=None,
                       n_paths: int = 1, lam: float = 1.0) -> np.ndarray:
    """Sample functions ``f = lam * H w`` with ``w ~ N(0, psi I)``.

    ``H`` is the centred Gram matrix of ``kernel`` on the grid ``xs``, so the
    draws have covariance ``psi * lam**2 * H^2``.  Returns an array of shape
    ``(len(xs),)`` for one path and ``(len(xs), n_paths)`` otherwise.
    """
    if isinstance(kernel, str):
        kernel = KernelSpec.parse(kernel)
    if not psi > 0:
        raise DataError(f"psi must be positive, got {psi}")
    xs = np.asarray(xs)
    if xs.size == 0 or xs.shape[0] == 0:
        raise DataError("grid is empty")
    if kernel.kind == "poly":
        H = kernel.gram(xs, centre=True, lam=lam).values
    else:
        H = lam * kernel.gram(xs, centre=True).values
    rng = np.random.default_rng(seed)
    w = np.sqrt(psi) * rng.standard_normal((H.shape[0], n_paths))
    f = H @ w
    return f[:, 0] if n_paths == 1 else f
