"""Model configuration and the kernel loader.

:func:`load_model` turns a :class:`ModelSpec` plus a data table into a
:class:`LoadedModel`: centred per-covariate Gram matrices, interaction
terms, the response centred at its mean, and the layout of the
unconstrained hyperparameter vector ``theta``.
"""

from __future__ import annotations

import math
import re
import threading
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.stats import norm

from . import kernels as K
from .errors import DataError, NumericalError
from .linalg import EigenFactor, NystromFactor, nystrom_eigen, sym_eigen

__all__ = [
    "KernelSpec",
    "CovariateSpec",
    "ModelSpec",
    "Slot",
    "Hyperparameters",
    "ThetaLayout",
    "LoadedModel",
    "load_model",
    "build_H",
    "theta_to_param",
    "param_to_theta",
    "check_theta",
    "to_gpr_kernel",
]

KINDS = ("linear", "fbm", "se", "poly", "pearson")
_PARAM_NAME = {"fbm": "hurst", "se": "lengthscale", "poly": "offset"}
_FD_STEP = 1e-5


def _fmt(x: float) -> str:
    return f"{x:g}"


@dataclass(frozen=True)
class KernelSpec:
    """One covariate's kernel: kind plus its kernel hyperparameters."""

    kind: str
    hurst: float = 0.5
    lengthscale: float = 1.0
    degree: int = 2
    offset: float = 0.0

    def __post_init__(self):
        kind = "linear" if self.kind == "canonical" else self.kind
        if kind not in KINDS:
            raise DataError(f"unknown kernel {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if not 0.0 < self.hurst < 1.0:
            raise DataError(f"Hurst coefficient must lie in (0, 1), got {self.hurst}")
        if not self.lengthscale > 0:
            raise DataError(f"length scale must be positive, got {self.lengthscale}")
        if int(self.degree) != self.degree or self.degree < 1:
            raise DataError(f"polynomial degree must be an integer >= 1, got {self.degree}")
        if self.offset < 0:
            raise DataError(f"polynomial offset must be non-negative, got {self.offset}")

    @classmethod
    def parse(cls, text: str) -> "KernelSpec":
        """Parse ``"<name>[,<value>]"``, e.g. ``"fbm,0.7"`` or ``"poly3,1"``."""
        m = re.fullmatch(r"\s*([a-z]+?)(\d*)\s*(?:,\s*([^,\s]+)\s*)?", text.lower())
        if not m:
            raise DataError(f"malformed kernel string {text!r}")
        name, deg, value = m.groups()
        if deg and name != "poly":
            raise DataError(f"malformed kernel string {text!r}")
        try:
            val = None if value is None else float(value)
        except ValueError:
            raise DataError(f"malformed kernel string {text!r}") from None
        if name in ("linear", "canonical", "pearson"):
            if val is not None:
                raise DataError(f"kernel {name!r} takes no parameter")
            return cls(name)
        if name == "fbm":
            return cls("fbm", hurst=0.5 if val is None else val)
        if name == "se":
            return cls("se", lengthscale=1.0 if val is None else val)
        if name == "poly":
            return cls("poly", degree=int(deg) if deg else 2, offset=0.0 if val is None else val)
        raise DataError(f"unknown kernel {name!r}")

    def __str__(self):
        if self.kind == "fbm":
            return f"fbm,{_fmt(self.hurst)}"
        if self.kind == "se":
            return f"se,{_fmt(self.lengthscale)}"
        if self.kind == "poly":
            return f"poly{self.degree},{_fmt(self.offset)}"
        return self.kind

    @property
    def param_name(self) -> str | None:
        return _PARAM_NAME.get(self.kind)

    @property
    def param(self) -> float | None:
        name = self.param_name
        return None if name is None else getattr(self, name)

    def with_param(self, value: float | None) -> "KernelSpec":
        if self.param_name is None or value is None:
            return self
        return replace(self, **{self.param_name: float(value)})

    def gram(self, x, y=None, centre=True, lam=1.0, stats=None) -> K.GramMatrix:
        """Evaluate this kernel; ``lam`` only matters for the polynomial kernel."""
        if self.kind == "linear":
            return K.kern_linear(x, y, centre=centre, stats=stats)
        if self.kind == "fbm":
            return K.kern_fbm(x, y, gamma=self.hurst, centre=centre, stats=stats)
        if self.kind == "se":
            return K.kern_se(x, y, lengthscale=self.lengthscale, centre=centre, stats=stats)
        if self.kind == "poly":
            return K.kern_poly(x, y, degree=self.degree, offset=self.offset, lam=lam,
                               centre=centre, stats=stats)
        return K.kern_pearson(x, y, centre=centre, stats=stats)


@dataclass(frozen=True)
class CovariateSpec:
    """A covariate in the model.

    ``type`` is one of ``auto``, ``continuous``, ``categorical`` or
    ``functional``.  ``columns`` lists the data columns making up the
    covariate; by default it is the single column ``name``, or for a
    functional covariate every column named ``<name>.<suffix>``.
    """

    name: str
    kernel: KernelSpec | None = None
    type: str = "auto"
    columns: tuple | None = None

    def __post_init__(self):
        if self.type not in ("auto", "continuous", "categorical", "functional"):
            raise DataError(f"unknown covariate type {self.type!r}")
        if isinstance(self.kernel, str):
            object.__setattr__(self, "kernel", KernelSpec.parse(self.kernel))
        if self.columns is not None:
            object.__setattr__(self, "columns", tuple(self.columns))


def _parse_interaction(item) -> tuple[int, int]:
    if isinstance(item, str):
        parts = item.split(":")
        if len(parts) != 2:
            raise DataError(f"interaction {item!r} must have the form 'a:b'")
        try:
            a, b = int(parts[0]), int(parts[1])
        except ValueError:
            raise DataError(f"interaction {item!r} must have the form 'a:b'") from None
    else:
        a, b = item
    return int(a), int(b)


@dataclass(frozen=True)
class ModelSpec:
    """Everything needed to load an I-prior model from a data table.

    Interactions are 1-based covariate positions, as in ``"1:2"``.
    ``fixed_hyp=True`` fixes every hyperparameter and ``fixed_hyp=False``
    estimates every one, overriding the ``est_*`` flags.  ``nystrom`` is
    ``None``/``False`` (off), ``True`` (10% of the sample) or a sample size.
    """

    response: str
    covariates: tuple
    interactions: tuple = ()
    est_lambda: bool = True
    est_hurst: bool = False
    est_lengthscale: bool = False
    est_offset: bool = False
    est_psi: bool = True
    fixed_hyp: bool | None = None
    lambda_init: tuple | None = None
    psi_init: float | None = None
    nystrom: int | bool | None = None
    nys_seed: int | None = None

    def __post_init__(self):
        covs = tuple(c if isinstance(c, CovariateSpec) else CovariateSpec(**c)
                     if isinstance(c, dict) else CovariateSpec(c) for c in self.covariates)
        if not covs:
            raise DataError("model needs at least one covariate")
        object.__setattr__(self, "covariates", covs)
        inter = tuple(_parse_interaction(i) for i in self.interactions)
        p = len(covs)
        for a, b in inter:
            if not (1 <= a <= p and 1 <= b <= p) or a == b:
                raise DataError(f"invalid interaction {a}:{b} for {p} covariates")
        if len({frozenset(i) for i in inter}) != len(inter):
            raise DataError("duplicate interaction terms")
        object.__setattr__(self, "interactions", inter)
        if self.lambda_init is not None:
            lam = tuple(float(v) for v in np.atleast_1d(self.lambda_init))
            if len(lam) == 1 and p > 1:
                lam = lam * p
            if len(lam) != p:
                raise DataError(f"lambda_init needs {p} values, got {len(lam)}")
            object.__setattr__(self, "lambda_init", lam)
        if self.psi_init is not None and not self.psi_init > 0:
            raise DataError("psi_init must be positive")

    @property
    def estimate(self) -> dict:
        """Effective estimation flags after applying ``fixed_hyp``."""
        flags = dict(lambda_=self.est_lambda, hurst=self.est_hurst,
                     lengthscale=self.est_lengthscale, offset=self.est_offset,
                     psi=self.est_psi)
        if self.fixed_hyp is not None:
            flags = {k: not self.fixed_hyp for k in flags}
        return flags

    def to_dict(self) -> dict:
        out = {"response": self.response,
               "interactions": [f"{a}:{b}" for a, b in self.interactions],
               "estimate": {"lambda": self.est_lambda, "hurst": self.est_hurst,
                            "lengthscale": self.est_lengthscale, "offset": self.est_offset,
                            "psi": self.est_psi},
               "covariate": []}
        if self.fixed_hyp is not None:
            out["estimate"]["fixed_hyp"] = self.fixed_hyp
        init = {}
        if self.lambda_init is not None:
            init["lambda"] = list(self.lambda_init)
        if self.psi_init is not None:
            init["psi"] = self.psi_init
        if init:
            out["init"] = init
        if self.nystrom not in (None, False):
            nys = {"m": self.nystrom}
            if self.nys_seed is not None:
                nys["seed"] = self.nys_seed
            out["nystrom"] = nys
        for c in self.covariates:
            entry = {"name": c.name, "type": c.type}
            if c.kernel is not None:
                entry["kernel"] = str(c.kernel)
            if c.columns is not None:
                entry["columns"] = list(c.columns)
            out["covariate"].append(entry)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        try:
            est = dict(d.get("estimate", {}))
            init = d.get("init", {})
            nys = d.get("nystrom", {})
            known = {"lambda", "hurst", "lengthscale", "offset", "psi", "fixed_hyp"}
            if set(est) - known:
                raise DataError(f"unknown estimate flags: {sorted(set(est) - known)}")
            covs = []
            for c in d["covariate"]:
                c = dict(c)
                covs.append(CovariateSpec(name=c.pop("name"), kernel=c.pop("kernel", None),
                                          type=c.pop("type", "auto"),
                                          columns=c.pop("columns", None)))
                if c:
                    raise DataError(f"unknown covariate keys: {sorted(c)}")
            return cls(response=d["response"], covariates=tuple(covs),
                       interactions=tuple(d.get("interactions", ())),
                       est_lambda=est.get("lambda", True), est_hurst=est.get("hurst", False),
                       est_lengthscale=est.get("lengthscale", False),
                       est_offset=est.get("offset", False), est_psi=est.get("psi", True),
                       fixed_hyp=est.get("fixed_hyp"),
                       lambda_init=init.get("lambda"), psi_init=init.get("psi"),
                       nystrom=nys.get("m"), nys_seed=nys.get("seed"))
        except KeyError as exc:
            raise DataError(f"model configuration is missing {exc.args[0]!r}") from None

    def to_toml(self) -> str:
        import tomlkit

        return tomlkit.dumps(self.to_dict())

    @classmethod
    def from_toml(cls, text: str) -> "ModelSpec":
        import tomlkit

        try:
            doc = tomlkit.parse(text).unwrap()
        except tomlkit.exceptions.ParseError as exc:
            raise DataError(f"cannot parse model configuration: {exc}") from None
        return cls.from_dict(doc)


# ---------------------------------------------------------------------------
# Hyperparameters and their unconstrained transform
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Hyperparameters:
    """Natural-scale hyperparameters.

    ``kernel_params[k]`` is the Hurst coefficient, length scale or offset of
    covariate ``k`` (``None`` for linear and Pearson kernels).
    """

    lam: tuple
    kernel_params: tuple
    psi: float

    def key(self) -> tuple:
        return (self.lam, self.kernel_params)


_TRANSFORM = {"lambda": "identity", "hurst": "qnorm", "lengthscale": "log",
              "offset": "log", "psi": "log"}


@dataclass(frozen=True)
class Slot:
    name: str
    index: int | None
    transform: str
    label: str

    def forward(self, value: float) -> float:
        """Natural value to theta."""
        if self.transform == "log":
            if not value > 0:
                raise DataError(f"{self.label} must be positive to take logs, got {value}")
            return math.log(value)
        if self.transform == "qnorm":
            if not 0 < value < 1:
                raise DataError(f"{self.label} must lie in (0, 1), got {value}")
            return float(ndtri(value))
        return float(value)

    def inverse(self, t: float) -> float:
        """Theta to natural value."""
        if self.transform == "log":
            return math.exp(t)
        if self.transform == "qnorm":
            return float(ndtr(t))
        return float(t)

    def derivative(self, t: float) -> float:
        """d(natural value) / d(theta)."""
        if self.transform == "log":
            return math.exp(t)
        if self.transform == "qnorm":
            return float(norm.pdf(t))
        return 1.0

    @property
    def theta_label(self) -> str:
        if self.transform == "identity":
            return self.label
        return f"{'log' if self.transform == 'log' else 'qnorm'}({self.label})"


@dataclass(frozen=True)
class ThetaLayout:
    slots: tuple
    fixed: Hyperparameters

    def __len__(self):
        return len(self.slots)

    def names(self, transformed: bool = False) -> list[str]:
        return [s.theta_label if transformed else s.label for s in self.slots]

    def to_param(self, theta) -> Hyperparameters:
        theta = np.asarray(theta, dtype=float).ravel()
        if theta.size != len(self.slots):
            raise DataError(f"theta has {theta.size} entries, layout has {len(self.slots)}")
        if not np.all(np.isfinite(theta)):
            raise DataError("theta must be finite")
        lam = list(self.fixed.lam)
        kp = list(self.fixed.kernel_params)
        psi = self.fixed.psi
        for s, t in zip(self.slots, theta):
            try:
                v = s.inverse(t)
            except OverflowError:
                raise NumericalError(f"{s.theta_label} = {t} overflows") from None
            if s.name == "lambda":
                lam[s.index] = v
            elif s.name == "psi":
                psi = v
            else:
                kp[s.index] = v
        return Hyperparameters(tuple(lam), tuple(kp), psi)

    def to_theta(self, param: Hyperparameters) -> np.ndarray:
        out = []
        for s in self.slots:
            if s.name == "lambda":
                v = param.lam[s.index]
            elif s.name == "psi":
                v = param.psi
            else:
                v = param.kernel_params[s.index]
            out.append(s.forward(v))
        return np.array(out, dtype=float)

    def derivatives(self, theta) -> np.ndarray:
        return np.array([s.derivative(t) for s, t in zip(self.slots, theta)])


def theta_to_param(layout: ThetaLayout, theta) -> Hyperparameters:
    return layout.to_param(theta)


def param_to_theta(layout: ThetaLayout, param: Hyperparameters) -> np.ndarray:
    return layout.to_theta(param)


def _build_layout(kernels, flags, fixed: Hyperparameters) -> ThetaLayout:
    p = len(kernels)
    single = p == 1
    slots = []

    def label(name, k):
        return name if single else f"{name}[{k + 1}]"

    if flags["lambda_"]:
        for k in range(p):
            slots.append(Slot("lambda", k, "log" if single else "identity", label("lambda", k)))
    for name in ("hurst", "lengthscale", "offset"):
        if flags[name]:
            for k, ker in enumerate(kernels):
                if ker.param_name == name:
                    slots.append(Slot(name, k, _TRANSFORM[name], label(name, k)))
    if flags["psi"]:
        slots.append(Slot("psi", None, "log", "psi"))
    return ThetaLayout(tuple(slots), fixed)


# ---------------------------------------------------------------------------
# Loaded model
# ---------------------------------------------------------------------------


def _column(data, name):
    try:
        return data[name]
    except (KeyError, IndexError):
        raise DataError(f"unknown column {name!r}") from None


def _is_numeric(values) -> bool:
    return np.asarray(values).dtype.kind in "biuf"


def _functional_columns(data, name) -> tuple:
    cols = tuple(c for c in data.keys() if str(c).startswith(f"{name}."))
    if not cols:
        raise DataError(f"no columns named {name}.* for functional covariate {name!r}")
    return cols


def resolve_covariate(cov: CovariateSpec, data):
    """Build the covariate column and kernel for one :class:`CovariateSpec`."""
    kind = cov.type
    if kind == "functional":
        cols = cov.columns or _functional_columns(data, cov.name)
        curves = np.column_stack([np.asarray(_column(data, c), dtype=float) for c in cols])
        column = K.Functional(curves)
    else:
        cols = cov.columns or (cov.name,)
        raw = [_column(data, c) for c in cols]
        if kind == "auto" and cov.kernel is not None and cov.kernel.kind == "pearson":
            kind = "categorical"
        elif kind == "auto":
            kind = "continuous" if all(_is_numeric(r) for r in raw) else "categorical"
        if kind == "categorical":
            if len(cols) != 1:
                raise DataError(f"categorical covariate {cov.name!r} must be a single column")
            column = K.Categorical(np.asarray(raw[0]).astype(str))
        else:
            try:
                vals = np.column_stack([np.asarray(r, dtype=float) for r in raw])
            except ValueError:
                raise DataError(f"covariate {cov.name!r} is not numeric") from None
            column = K.Continuous(vals)
    ker = cov.kernel
    if isinstance(column, K.Categorical):
        if ker is None:
            ker = KernelSpec("pearson")
        elif ker.kind != "pearson":
            raise DataError(f"categorical covariate {cov.name!r} requires the Pearson kernel")
    else:
        if ker is None:
            ker = KernelSpec("linear")
        elif ker.kind == "pearson":
            raise DataError(f"Pearson kernel on continuous covariate {cov.name!r}")
    return column, ker


class LoadedModel:
    """An I-prior model ready for estimation.

    Instances are treated as immutable.  Gram matrices of covariates whose
    kernel parameters are fixed are computed once at load time; the others
    are recomputed for each parameter value.  Under the Nyström method
    every Gram holds only the ``m`` rows of the active points.
    """

    def __init__(self, spec: ModelSpec, y, columns, kernels, nys_active=None):
        self.spec = spec
        self.y = np.asarray(y, dtype=float)
        self.y.setflags(write=False)
        self.n = self.y.shape[0]
        self.y_mean = float(self.y.mean())
        self.y_centred = self.y - self.y_mean
        self.names = tuple(c.name for c in spec.covariates)
        self.columns = tuple(columns)
        self.kernels = tuple(kernels)
        self.interactions = tuple((a - 1, b - 1) for a, b in spec.interactions)
        self.p = len(self.kernels)
        for col in self.columns:
            if len(col) != self.n:
                raise DataError("covariates and response differ in length")

        flags = spec.estimate
        lam = spec.lambda_init if spec.lambda_init is not None else (1.0,) * self.p
        fixed = Hyperparameters(tuple(lam), tuple(k.param for k in self.kernels),
                                1.0 if spec.psi_init is None else float(spec.psi_init))
        self.layout = _build_layout(self.kernels, flags, fixed)
        self._varying = tuple(
            any(s.index == k and s.name not in ("lambda", "psi") for s in self.layout.slots)
            for k in range(self.p))

        self.nys_active = None if nys_active is None else np.sort(np.asarray(nys_active))
        if self.nys_active is not None:
            rest = np.setdiff1d(np.arange(self.n), self.nys_active)
            self.nys_order = np.concatenate([self.nys_active, rest])
        self._grams = {}
        self._stats = {}
        for k in range(self.p):
            if not self._varying[k]:
                g, st = self._compute_base(k, self.kernels[k].param)
                g.setflags(write=False)
                self._grams[k] = g
                self._stats[k] = st
        self._hadamard = {}
        for a, b in self.interactions:
            if a in self._grams and b in self._grams and "poly" not in (
                    self.kernels[a].kind, self.kernels[b].kind):
                h = self._grams[a] * self._grams[b]
                h.setflags(write=False)
                self._hadamard[(a, b)] = h
        self._memo = threading.local()

    # -- basic properties --------------------------------------------------

    @property
    def nystrom(self) -> bool:
        return self.nys_active is not None

    @property
    def m(self) -> int | None:
        return None if self.nys_active is None else len(self.nys_active)

    @property
    def param0(self) -> Hyperparameters:
        """Hyperparameters at their fixed/initial values."""
        return self.layout.fixed

    @property
    def methods(self) -> tuple:
        if self.nystrom:
            return ("direct", "fixed")
        return ("direct", "em", "mixed", "fixed")

    def hyperparameter_names(self) -> list[str]:
        return self.layout.names(transformed=False)

    def term_labels(self) -> list[str]:
        labels = [str(k) for k in self.kernels]
        labels += [f"{self.kernels[a]} x {self.kernels[b]}" for a, b in self.interactions]
        return labels

    def size(self) -> int:
        """Bytes held by stored Gram matrices."""
        return sum(g.nbytes for g in self._grams.values()) + sum(
            h.nbytes for h in self._hadamard.values())

    def kernel_at(self, k: int, param: Hyperparameters) -> KernelSpec:
        return self.kernels[k].with_param(param.kernel_params[k])

    # -- Gram matrices -----------------------------------------------------

    def _compute_base(self, k, kparam):
        """Centred Gram (or, for poly, centred inner product) of covariate ``k``."""
        ker = self.kernels[k].with_param(kparam)
        col = self.columns[k]
        if ker.kind == "poly":
            ker = KernelSpec("linear")
        if self.nys_active is None:
            g = ker.gram(col, centre=True)
        else:
            g = ker.gram(col, col.take(self.nys_active), centre=True)
            return np.ascontiguousarray(g.values.T), g.stats
        return g.values, g.stats

    def base_gram(self, k: int, param: Hyperparameters) -> np.ndarray:
        if k in self._grams:
            return self._grams[k]
        return self._compute_base(k, param.kernel_params[k])[0]

    def centring_stats(self, k: int, param: Hyperparameters) -> K.CentringStats:
        if k in self._stats:
            return self._stats[k]
        return self._compute_base(k, param.kernel_params[k])[1]

    def _poly(self, k, G, param, lam):
        ker = self.kernels[k]
        return (lam * G + param.kernel_params[k]) ** ker.degree

    def term(self, k: int, param: Hyperparameters, gram=None) -> np.ndarray:
        """Scaled main-effect term of covariate ``k``."""
        G = self.base_gram(k, param) if gram is None else gram
        if self.kernels[k].kind == "poly":
            return self._poly(k, G, param, param.lam[k])
        return param.lam[k] * G

    def _assemble(self, T, param):
        H = np.sum(T, axis=0)
        for a, b in self.interactions:
            if (a, b) in self._hadamard:
                H = H + (param.lam[a] * param.lam[b]) * self._hadamard[(a, b)]
            else:
                H = H + T[a] * T[b]
        return H

    def build_H(self, param: Hyperparameters) -> np.ndarray:
        """Kernel matrix ``H_eta`` (``m x n`` active rows under Nyström)."""
        self._check_param(param)
        T = [self.term(k, param) for k in range(self.p)]
        return self._assemble(T, param)

    def _check_param(self, param):
        if len(param.lam) != self.p or len(param.kernel_params) != self.p:
            raise DataError(f"parameter vector does not match a {self.p}-covariate model")

    def dH(self, param: Hyperparameters, slot: Slot) -> np.ndarray:
        """Derivative of ``H_eta`` with respect to one natural-scale parameter."""
        k = slot.index
        T = [self.term(j, param) for j in range(self.p)]
        G = self.base_gram(k, param)
        ker = self.kernels[k]
        if slot.name == "lambda":
            if ker.kind == "poly":
                dT = ker.degree * G * (param.lam[k] * G + param.kernel_params[k]) ** (ker.degree - 1)
            else:
                dT = G
        elif slot.name == "offset":
            dT = ker.degree * (param.lam[k] * G + param.kernel_params[k]) ** (ker.degree - 1)
        else:
            v = param.kernel_params[k]
            h = _FD_STEP * max(1.0, abs(v))
            if slot.name == "hurst":
                h = min(h, v / 2, (1 - v) / 2)
            plus = self._compute_base(k, v + h)[0]
            minus = self._compute_base(k, v - h)[0]
            dT = param.lam[k] * (plus - minus) / (2 * h)
        D = dT.copy()
        for a, b in self.interactions:
            if a == k:
                D += dT * T[b]
            elif b == k:
                D += T[a] * dT
        return D

    # -- eigen factors -----------------------------------------------------

    @property
    def scalable(self) -> bool:
        """True when ``H_eta = lambda * H_1`` for a single fixed Gram ``H_1``."""
        return (self.p == 1 and not self.interactions and not self._varying[0]
                and self.kernels[0].kind != "poly")

    @cached_property
    def _base_factor(self) -> EigenFactor:
        unit = Hyperparameters((1.0,), self.layout.fixed.kernel_params, 1.0)
        return self._factorise(unit)

    def _factorise(self, param) -> EigenFactor:
        H = self.build_H(param)
        if self.nys_active is None:
            return sym_eigen(H)
        rest = self.nys_order[self.m:]
        fac = nystrom_eigen(H[:, self.nys_active], H[:, rest])
        V = np.empty_like(fac.vectors)
        V[self.nys_order] = fac.vectors
        return NystromFactor(vectors=V, values=fac.values, m=self.m, active=self.nys_active)

    def eigen(self, param: Hyperparameters) -> EigenFactor:
        """Eigen factor of ``H_eta``; the last result is memoised per thread."""
        self._check_param(param)
        if self.scalable:
            return self._base_factor.scaled(param.lam[0])
        key = param.key()
        last = getattr(self._memo, "last", None)
        if last is not None and last[0] == key:
            return last[1]
        fac = self._factorise(param)
        self._memo.last = (key, fac)
        return fac

    # -- new data ----------------------------------------------------------

    def new_columns(self, data) -> list:
        """Covariate columns for new data, validated against the training ones."""
        out = []
        for cov, train in zip(self.spec.covariates, self.columns):
            col, _ = resolve_covariate(
                replace(cov, type=_type_of(train), columns=cov.columns), data)
            if col.dim != train.dim:
                raise DataError(f"covariate {cov.name!r} has dimension {col.dim}, "
                                f"expected {train.dim}")
            out.append(col)
        return out

    def cross_H(self, columns, param: Hyperparameters) -> np.ndarray:
        """Centred kernel matrix between new points (rows) and training points."""
        T = []
        for k in range(self.p):
            ker = self.kernel_at(k, param)
            stats = self.centring_stats(k, param)
            base = KernelSpec("linear") if ker.kind == "poly" else ker
            G = base.gram(self.columns[k], columns[k], centre=True, stats=stats).values.T
            T.append(self.term(k, param, gram=G))
        H = np.sum(T, axis=0)
        for a, b in self.interactions:
            H = H + T[a] * T[b]
        return H

    def __repr__(self):
        return f"<LoadedModel n={self.n} covariates={list(self.names)}>"

    def __str__(self):
        lines = [f"Sample size: {self.n}", f"No. of covariates: {self.p}",
                 f"Object size: {self.size() / 1000:.1f} kB", "", "Kernel matrices:"]
        Hs = [self.base_gram(k, self.param0) for k in range(self.p)]
        Hs += [Hs[a] * Hs[b] for a, b in self.interactions]
        for i, (lab, H) in enumerate(zip(self.term_labels(), Hs), start=1):
            head = " ".join(f"{v:.6g}" for v in H.ravel(order="F")[:5])
            lines.append(f" {i} {lab} [1:{H.shape[0]}, 1:{H.shape[1]}] {head} ... ")
        names = self.hyperparameter_names()
        lines += ["", "Hyperparameters to estimate:", ", ".join(names) if names else "none",
                  "", "Estimation methods available:"]
        if self.nystrom:
            lines.append(", ".join(f"{m} (Nystrom)" for m in self.methods))
        else:
            lines.append(", ".join(self.methods))
        return "\n".join(lines)


def _type_of(column) -> str:
    if isinstance(column, K.Categorical):
        return "categorical"
    if isinstance(column, K.Functional):
        return "functional"
    return "continuous"


def load_model(spec: ModelSpec, data) -> LoadedModel:
    """Ready an I-prior model for estimation."""
    yraw = _column(data, spec.response)
    if not _is_numeric(yraw):
        raise DataError(f"response {spec.response!r} is not numeric")
    y = np.asarray(yraw, dtype=float)
    if y.ndim != 1 or not np.all(np.isfinite(y)):
        raise DataError("response must be a finite vector")
    columns, kernels = [], []
    for cov in spec.covariates:
        col, ker = resolve_covariate(cov, data)
        columns.append(col)
        kernels.append(ker)
    n = y.shape[0]
    active = None
    if spec.nystrom not in (None, False):
        m = math.ceil(0.1 * n) if spec.nystrom is True else int(spec.nystrom)
        if m < 2 or m >= n:
            raise DataError(f"Nystrom sample size must satisfy 2 <= m < n, got m={m}, n={n}")
        rng = np.random.default_rng(spec.nys_seed)
        active = rng.choice(n, size=m, replace=False)
    return LoadedModel(spec, y, columns, kernels, nys_active=active)


def build_H(model: LoadedModel, param: Hyperparameters) -> np.ndarray:
    return model.build_H(param)


def check_theta(model: LoadedModel) -> str:
    """Ordered, transform-annotated names of the entries of ``theta``."""
    return ", ".join(model.layout.names(transformed=True))


def to_gpr_kernel(model: LoadedModel, param: Hyperparameters) -> np.ndarray:
    """Equivalent Gaussian-process prior covariance ``psi * H_eta^2``.

    With ``H_eta = lambda * H`` this is ``(psi * lambda^2) * H^2``, i.e. a GP
    with the squared kernel and scale ``psi * lambda^2``.
    """
    if model.nystrom:
        H = model.eigen(param).matrix()
    else:
        H = model.build_H(param)
    return param.psi * (H @ H)
