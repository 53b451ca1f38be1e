"""Command-line interface: ``iprior {fit,predict,simulate,kernel,check-theta}``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import posterior
from .errors import DataError, IpriorError, NumericalError
from .estimation import ControlOptions, FitResult, _result, _with_se, iprior
from .model import (KernelSpec, LoadedModel, ModelSpec, _functional_columns, check_theta,
                    load_model)
from .simulate import SimConfig, gen_smooth

ARTIFACT_VERSION = "1"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


class UsageError(IpriorError):
    pass


# ---------------------------------------------------------------------------
# I/O helpers
# ---------------------------------------------------------------------------


def _categorical_names(spec: ModelSpec) -> list[str]:
    out = []
    for c in spec.covariates:
        if c.type == "categorical" or (c.kernel is not None and c.kernel.kind == "pearson"):
            out.extend(c.columns or (c.name,))
    return out


def read_csv(path, categorical=()) -> pd.DataFrame:
    try:
        return pd.read_csv(path, dtype={c: str for c in categorical} or None)
    except FileNotFoundError:
        raise DataError(f"no such file: {path}") from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read CSV {path}: {exc}") from None


def read_spec(path) -> ModelSpec:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"no such file: {path}") from None
    return ModelSpec.from_toml(text)


def _used_columns(spec: ModelSpec, data: pd.DataFrame) -> list[str]:
    cols = [spec.response]
    for c in spec.covariates:
        if c.columns:
            cols.extend(c.columns)
        elif c.type == "functional":
            cols.extend(_functional_columns(data, c.name))
        else:
            cols.append(c.name)
    return list(dict.fromkeys(cols))


def _json_column(series: pd.Series) -> list:
    if series.dtype.kind in "biuf":
        return [v.item() for v in series.to_numpy()]
    return [str(v) for v in series]


def _hash(data: dict) -> str:
    blob = json.dumps(data, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _floats(a) -> list | None:
    return None if a is None else [float(v) for v in np.asarray(a, dtype=float)]


# ---------------------------------------------------------------------------
# Fit artifacts
# ---------------------------------------------------------------------------


def artifact_from_fit(fit: FitResult, data: pd.DataFrame) -> dict:
    """Self-contained JSON document for a fit (wall time is left out)."""
    model = fit.model
    spec = model.spec
    cols = _used_columns(spec, data)
    training = {c: _json_column(data[c]) for c in cols}
    se = fit.se
    return {
        "version": ARTIFACT_VERSION,
        "spec": spec.to_dict(),
        "method": fit.method,
        "theta_names": model.layout.names(transformed=True),
        "theta": _floats(fit.theta),
        "hyperparameters": {k: (None if v is None else float(v))
                            for k, v in posterior.get_hyp(fit).items()},
        "se": None if se is None else {
            "available": se.available, "message": se.message,
            "se": _floats(se.se), "z": _floats(se.z), "p": _floats(se.p),
            "se_theta": _floats(se.se_theta)},
        "loglik": float(fit.loglik),
        "trace": _floats(fit.trace),
        "niter": int(fit.niter),
        "converged": bool(fit.converged),
        "message": fit.message,
        "control": {"maxit": fit.control.maxit, "em_maxit": fit.control.em_maxit,
                    "stop_crit": fit.control.stop_crit, "seed": fit.control.seed},
        "intercept": float(model.y_mean),
        "train_rmse": float(posterior.get_prederror(fit)),
        "centring": [{"means": _floats(s.means), "grand": float(s.grand)}
                     for s in (model.centring_stats(k, fit.param) for k in range(model.p))],
        "nystrom_active": None if model.nys_active is None else
        [int(i) for i in model.nys_active],
        "w": _floats(fit.w),
        "data_sha256": _hash(training),
        "data": training,
    }


def fit_from_artifact(doc: dict) -> FitResult:
    """Rebuild a :class:`FitResult` from an artifact; the posterior is recomputed."""
    if not isinstance(doc, dict) or "version" not in doc:
        raise DataError("not a fit artifact: version field missing")
    if doc["version"] != ARTIFACT_VERSION:
        raise DataError(f"unsupported artifact version {doc['version']!r}")
    try:
        spec = ModelSpec.from_dict(doc["spec"])
        data = doc["data"]
        if _hash(data) != doc["data_sha256"]:
            raise DataError("artifact training data does not match its hash")
        frame = pd.DataFrame(data)
        model = load_model(spec, frame)
        if doc["nystrom_active"] is not None:
            active = np.asarray(doc["nystrom_active"], dtype=int)
            model = LoadedModel(spec, model.y, model.columns, model.kernels, nys_active=active)
        ctl = doc["control"]
        control = ControlOptions(maxit=ctl["maxit"], em_maxit=ctl["em_maxit"],
                                 stop_crit=ctl["stop_crit"], seed=ctl["seed"],
                                 par_maxit=min(5, ctl["maxit"]), silent=True)
        fit = _result(model, doc["method"], np.asarray(doc["theta"], dtype=float),
                      doc["trace"], doc["niter"], doc["converged"], doc["message"], 0.0,
                      control)
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed artifact: {exc}") from None
    fit.time = 0.0
    return _with_se(fit) if doc["se"] is not None else fit


def save_artifact(fit: FitResult, data: pd.DataFrame, path) -> None:
    text = json.dumps(artifact_from_fit(fit, data), indent=1)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_artifact(path) -> FitResult:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"artifact is not valid JSON: {exc}") from None
    return fit_from_artifact(doc)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"expected a list of numbers, got {text!r}") from None


def cmd_fit(args) -> int:
    spec = read_spec(args.config)
    data = read_csv(args.data, _categorical_names(spec))
    model = load_model(spec, data)
    if args.method == "fixed":
        if args.theta is None and len(model.layout):
            raise UsageError("--method fixed requires --theta")
        theta = _parse_floats(args.theta or "")
        fit = iprior(model, method="fixed", theta=theta)
        fit = _with_se(fit)
    else:
        control = ControlOptions(
            maxit=args.maxit, em_maxit=args.em_maxit, stop_crit=args.stop_crit,
            theta0=None if args.theta is None else _parse_floats(args.theta),
            restarts=args.restarts, no_cores=args.cores,
            par_maxit=min(args.par_maxit, args.maxit), silent=args.silent, seed=args.seed)
        fit = iprior(model, method=args.method, control=control)
    print(posterior.summary(fit))
    if args.out:
        save_artifact(fit, data, args.out)
    return EXIT_OK


def cmd_predict(args) -> int:
    fit = load_artifact(args.artifact)
    spec = fit.model.spec
    newdata = read_csv(args.newdata, _categorical_names(spec))
    truth = None
    if args.truth is not None:
        if args.truth not in newdata.columns:
            raise DataError(f"truth column {args.truth!r} not in {args.newdata}")
        truth = newdata[args.truth].to_numpy(dtype=float)
    pred = posterior.predict(fit, newdata, intervals=not args.no_intervals, alpha=args.alpha,
                             y_test=False if truth is None else truth, noise=not args.f_only)
    frame = pred.to_frame()
    if args.out:
        frame.to_csv(args.out, index=False)
        if pred.rmse is not None:
            print(f"Test RMSE: {pred.rmse:.10g}")
    else:
        frame.to_csv(sys.stdout, index=False)
        if pred.rmse is not None:
            print(f"Test RMSE: {pred.rmse:.10g}", file=sys.stderr)
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = SimConfig(n=args.n, xlim=tuple(args.xlim), seed=args.seed, const=args.const,
                    noise_sd=args.noise_sd)
    df = gen_smooth(cfg)
    df.to_csv(args.out if args.out else sys.stdout, index=False)
    return EXIT_OK


def cmd_kernel(args) -> int:
    try:
        ker = KernelSpec.parse(args.spec)
    except DataError as exc:
        raise UsageError(str(exc)) from None
    cat = [args.covariate] if ker.kind == "pearson" or args.type == "categorical" else []
    data = read_csv(args.data, cat)
    if args.covariate not in data.columns:
        raise DataError(f"no column {args.covariate!r} in {args.data}")
    x = data[args.covariate].to_numpy()
    if cat:
        x = x.astype(str)
    gram = ker.gram(x, centre=args.centre)
    np.savetxt(args.out if args.out else sys.stdout, gram.values, delimiter=",", fmt="%.17g")
    return EXIT_OK


def cmd_check_theta(args) -> int:
    spec = read_spec(args.config)
    data = read_csv(args.data, _categorical_names(spec))
    print(check_theta(load_model(spec, data)))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iprior", description="I-prior regression")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="estimate a model and write a fit artifact")
    f.add_argument("data", help="training CSV with a header row")
    f.add_argument("--config", required=True, help="TOML model configuration")
    f.add_argument("--method", choices=("direct", "em", "mixed", "fixed"), default="direct")
    f.add_argument("--theta", help="theta values (fixed) or starting values, comma-separated")
    f.add_argument("--maxit", type=int, default=100)
    f.add_argument("--em-maxit", type=int, default=5)
    f.add_argument("--stop-crit", type=float, default=1e-8)
    f.add_argument("--restarts", type=int, default=0)
    f.add_argument("--par-maxit", type=int, default=5)
    f.add_argument("--cores", type=int, default=None,
                   help="worker threads for restarts (default: $IPRIOR_NUM_CORES or all)")
    f.add_argument("--seed", type=int, default=None)
    f.add_argument("--silent", action="store_true", help="suppress progress messages")
    f.add_argument("--out", help="path of the JSON fit artifact")
    f.set_defaults(func=cmd_fit)

    pr = sub.add_parser("predict", help="predict from a fit artifact")
    pr.add_argument("artifact")
    pr.add_argument("newdata", help="CSV with the training covariate columns")
    pr.add_argument("--alpha", type=float, default=0.05)
    pr.add_argument("--truth", help="response column for the test RMSE")
    pr.add_argument("--no-intervals", action="store_true")
    pr.add_argument("--f-only", action="store_true",
                    help="intervals for the regression function, without the error variance")
    pr.add_argument("--out", help="output CSV (default: stdout)")
    pr.set_defaults(func=cmd_predict)

    s = sub.add_parser("simulate", help="draw from the smooth benchmark generator")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--xlim", type=float, nargs=2, default=(-1.0, 6.0), metavar=("LO", "HI"))
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--const", type=float, default=1.0)
    s.add_argument("--noise-sd", type=float, default=0.9)
    s.add_argument("--out", help="output CSV (default: stdout)")
    s.set_defaults(func=cmd_simulate)

    k = sub.add_parser("kernel", help="dump a Gram matrix as CSV")
    k.add_argument("data")
    k.add_argument("covariate")
    k.add_argument("spec", help='kernel string such as "fbm,0.7" or "poly3,1"')
    k.add_argument("--centre", action="store_true")
    k.add_argument("--type", choices=("auto", "continuous", "categorical"), default="auto")
    k.add_argument("--out")
    k.set_defaults(func=cmd_kernel)

    c = sub.add_parser("check-theta", help="print the layout of theta")
    c.add_argument("data")
    c.add_argument("--config", required=True)
    c.set_defaults(func=cmd_check_theta)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"iprior: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"iprior: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, ValueError) as exc:
        print(f"iprior: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
