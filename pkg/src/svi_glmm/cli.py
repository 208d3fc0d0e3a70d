"""Command line front end: CSV ingestion, fitting, diagnostics, simulation.

    svi-glmm fit --data d.csv --config model.json --out fit.json
    svi-glmm diagnose --data d.csv --config model.json --fit fit.json --out report
    svi-glmm simulate --data d.csv --config model.json --fit fit.json --replicates 20 --out sim.csv
    svi-glmm trace --fit fit.json --out trace.csv

The config file is JSON.  Flags override it.  Exit codes: 0 converged,
2 not converged, 64 usage or configuration error, 65 data error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import platform
import sys
import warnings
from dataclasses import asdict, dataclass, field
from importlib import metadata

import numpy as np
import pandas as pd

from .data_model import (
    ClusterData,
    ConvergenceWarning,
    DataError,
    Dataset,
    Family,
    ParametrizationKind,
    PriorSpec,
    build_parametrization,
    validate_dataset,
)
from .diagnostics import ConflictReport, StaleLocalsError, diagnose_all
from .ncvmp import FitConfig, FitResult, GlobalState, GLMMProblem, LocalState, fit_ncvmp, lower_bound
from .quadrature import hermite_rule
from .stochastic import CheckpointError, fit_svi

EXIT_OK = 0
EXIT_NOT_CONVERGED = 2
EXIT_USAGE = 64
EXIT_DATA = 65

INTERCEPT = "(Intercept)"
OUTPUT_VERSION = 1


class UsageError(ValueError):
    pass


# --------------------------------------------------------------------------
# model configuration and ingestion
# --------------------------------------------------------------------------


@dataclass
class ModelConfig:
    """What to read from the CSV and how to fit it.

    ``derived`` maps new column names to pandas expressions evaluated in
    order (e.g. ``{"Base": "log(base / 4)"}``).  Terms in ``fixed`` and
    ``random`` may be interactions written ``"A:B"``.  An intercept is
    added first to both unless ``intercept`` is False.
    """

    response: str
    cluster: str
    fixed: list[str] = field(default_factory=list)
    random: list[str] = field(default_factory=list)
    offset: str | None = None
    family: str = "poisson"
    intercept: bool = True
    derived: dict[str, str] = field(default_factory=dict)
    center: list[str] = field(default_factory=list)
    standardize: list[str] = field(default_factory=list)
    fit: dict = field(default_factory=dict)

    def __post_init__(self):
        try:
            self.family = Family.coerce(self.family).value
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        self.fixed = list(self.fixed)
        self.random = list(self.random)
        missing = [t for t in self.random if t not in self.fixed]
        if missing:
            raise UsageError(f"random terms {missing} must also appear in fixed")
        if self.offset is not None and self.family != Family.POISSON.value:
            raise UsageError("an offset column is only allowed for Poisson models")

    @property
    def x_names(self) -> list[str]:
        return ([INTERCEPT] if self.intercept else []) + self.fixed

    @property
    def z_names(self) -> list[str]:
        return ([INTERCEPT] if self.intercept else []) + self.random

    def fit_config(self) -> FitConfig:
        try:
            return FitConfig.from_dict(self.fit)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid fit settings: {exc}") from None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise UsageError(f"unknown config keys: {sorted(extra)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise UsageError(f"invalid config: {exc}") from None


def load_config(path) -> ModelConfig:
    try:
        with open(path) as fh:
            return ModelConfig.from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None


def _term(df: pd.DataFrame, term: str) -> np.ndarray:
    cols = term.split(":")
    for c in cols:
        if c not in df.columns:
            raise DataError(f"column {c!r} not found in data")
    out = np.ones(len(df))
    for c in cols:
        vals = pd.to_numeric(df[c], errors="coerce")
        if vals.isna().any():
            bad = df.loc[vals.isna(), c].iloc[0]
            raise DataError(f"column {c!r} has a non-numeric or missing value {bad!r}")
        out = out * vals.to_numpy(dtype=float)
    return out


def prepare_frame(df: pd.DataFrame, config: ModelConfig) -> pd.DataFrame:
    """Apply derived columns, centering and standardization."""
    df = df.copy()
    for name, expr in config.derived.items():
        try:
            df[name] = df.eval(expr)
        except Exception as exc:
            raise DataError(f"cannot evaluate derived column {name!r} = {expr!r}: {exc}") from None
    for c in config.center:
        v = _term(df, c)
        df[c] = v - v.mean()
    for c in config.standardize:
        v = _term(df, c)
        sd = v.std()
        if not sd > 0:
            raise DataError(f"column {c!r} is constant and cannot be standardized")
        df[c] = (v - v.mean()) / sd
    return df


def frame_to_dataset(df: pd.DataFrame, config: ModelConfig) -> Dataset:
    for c in (config.response, config.cluster):
        if c not in df.columns:
            raise DataError(f"column {c!r} not found in data")
    df = prepare_frame(df, config)
    y = _term(df, config.response)
    X = np.column_stack([np.ones(len(df))] * config.intercept + [_term(df, t) for t in config.fixed])
    z_idx = [config.x_names.index(t) for t in config.z_names]
    offset = _term(df, config.offset) if config.offset else None
    ids, first = pd.factorize(df[config.cluster], sort=False)
    clusters = []
    for k in range(len(first)):
        rows = np.flatnonzero(ids == k)
        clusters.append(ClusterData(y[rows], X[rows], X[rows][:, z_idx],
                                    None if offset is None else offset[rows]))
    if not clusters:
        raise DataError("no rows in data")
    ds = Dataset(clusters, ids=[_plain(v) for v in first], x_names=config.x_names, z_names=config.z_names,
                 z_columns=tuple(z_idx))
    return validate_dataset(ds, config.family)


def ingest_csv(path, config: ModelConfig) -> Dataset:
    """Read a comma separated file with a header row into a validated
    :class:`Dataset`, clusters in order of first appearance."""
    try:
        df = pd.read_csv(path, sep=",", decimal=".", encoding="utf-8", float_precision="round_trip")
    except (OSError, UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    return frame_to_dataset(df, config)


def _plain(v):
    return v.item() if isinstance(v, np.generic) else v


def export_csv(dataset: Dataset, path, family="poisson") -> ModelConfig:
    """Write a dataset as CSV and return the config that reads it back.

    Floats are written with full precision so ``ingest_csv`` reproduces the
    dataset exactly.
    """
    xn = list(dataset.x_names)
    has_icpt = xn[0] == INTERCEPT and all(np.all(c.X[:, 0] == 1.0) for c in dataset.clusters)
    fixed = xn[1:] if has_icpt else xn
    zc = dataset.z_columns or tuple(range(dataset.r))
    random = [xn[j] for j in zc if not (has_icpt and j == 0)]
    rows = []
    for lab, c in zip(dataset.ids, dataset.clusters):
        d = {"cluster": [lab] * c.n_obs, "y": c.y}
        for j, name in enumerate(xn):
            if not (has_icpt and j == 0):
                d[name] = c.X[:, j]
        if c.offset is not None:
            d["offset"] = c.offset
        rows.append(pd.DataFrame(d))
    pd.concat(rows, ignore_index=True).to_csv(path, index=False, float_format="%.17g")
    has_off = any(c.offset is not None for c in dataset.clusters)
    return ModelConfig(response="y", cluster="cluster", fixed=fixed, random=random,
                       offset="offset" if has_off else None, family=Family.coerce(family).value,
                       intercept=has_icpt)


# --------------------------------------------------------------------------
# run output
# --------------------------------------------------------------------------


def _versions() -> dict:
    out = {"python": platform.python_version(), "numpy": np.__version__}
    try:
        out["svi_glmm"] = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        out["svi_glmm"] = "unknown"
    return out


def random_effect_means(fit: FitResult) -> np.ndarray:
    """``E[u_i] = mu_alpha_i - W_tilde_i mu_beta`` for every cluster."""
    prob = fit.problem
    return fit.local_state.mu_alpha - prob.W_tilde @ fit.global_state.mu_beta


def build_run_output(fit: FitResult, config: ModelConfig, fit_cfg: FitConfig,
                     report: ConflictReport | None = None) -> dict:
    """JSON-ready record of a fit, including the full variational state so
    later commands never refit."""
    prob, g = fit.problem, fit.global_state
    ds = prob.dataset
    sd = np.sqrt(np.diag(g.Sigma_beta_q))
    r = prob.r
    D_mean = g.D_mean.tolist() if g.nu_D > r + 1 else None
    u = random_effect_means(fit)
    doc = {
        "version": OUTPUT_VERSION,
        "converged": bool(fit.converged),
        "lower_bound": fit.lower_bound,
        "initial_lower_bound": fit.initial_lower_bound,
        "summary": {
            "beta": [{"name": n, "mean": float(m), "sd": float(s)} for n, m, s in zip(ds.x_names, g.mu_beta, sd)],
            "D_mean": D_mean,
            "random_effects": [{"cluster": lab, "mean": row.tolist()} for lab, row in zip(ds.ids, u)],
        },
        "state": {
            "mu_beta": g.mu_beta.tolist(),
            "Sigma_beta_q": g.Sigma_beta_q.tolist(),
            "nu_D": g.nu_D,
            "S_D": g.S_D.tolist(),
            "mu_alpha": fit.local_state.mu_alpha.tolist(),
            "Sigma_alpha": fit.local_state.Sigma_alpha.tolist(),
            "W": prob.W.tolist(),
            "subject_specific": list(prob.designs[0].partition.s_cols),
        },
        "prior": {"Sigma_beta": prob.prior.Sigma_beta.tolist(), "nu": prob.prior.nu, "S": prob.prior.S.tolist(),
                  "c": prob.prior.c},
        "trace": [{k: v for k, v in t.items() if k != "wall_time"} for t in fit.trace],
        "n_cycles": fit.n_cycles,
        "n_sweeps": fit.n_sweeps,
        "switched_at": fit.switched_at,
        "decreases": fit.decreases,
        "metadata": {"seed": fit_cfg.seed, "model": config.to_dict(), "fit": fit_cfg.to_dict(), "versions": _versions()},
        "timing": {"wall_time": fit.wall_time, "trace_wall_time": [t["wall_time"] for t in fit.trace]},
    }
    if report is not None:
        doc["conflict"] = json.loads(report.to_json())
    return doc


def dump_json(doc: dict, path):
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1, default=_plain)
        fh.write("\n")


def load_run_output(path) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read fit output {path}: {exc}") from None
    if doc.get("version") != OUTPUT_VERSION or "state" not in doc:
        raise UsageError(f"{path} is not a fit output of version {OUTPUT_VERSION}")
    return doc


def fit_from_output(doc: dict, dataset: Dataset, family, quadrature_order: int = 20) -> FitResult:
    """Rebuild a :class:`FitResult` from a saved run without refitting."""
    st, pr = doc["state"], doc["prior"]
    n = len(st["mu_alpha"])
    if n != dataset.n:
        raise DataError(f"fit has {n} clusters but the data has {dataset.n}")
    prior = PriorSpec(np.array(pr["Sigma_beta"]), pr["nu"], np.array(pr["S"]), pr["c"])
    designs = build_parametrization(dataset, ParametrizationKind.PARTIAL, None, np.zeros(dataset.p), family,
                                    subject_specific=st["subject_specific"], W=[np.array(w) for w in st["W"]])
    prob = GLMMProblem(dataset, designs, family, prior, hermite_rule(quadrature_order))
    glob = GlobalState(np.array(st["mu_beta"]), np.array(st["Sigma_beta_q"]), float(st["nu_D"]), np.array(st["S_D"]))
    loc = LocalState(np.array(st["mu_alpha"], dtype=float).reshape(n, -1),
                     np.array(st["Sigma_alpha"], dtype=float).reshape(n, dataset.r, dataset.r))
    trace = [dict(t, wall_time=0.0) for t in doc.get("trace", [])]
    return FitResult(glob, loc, trace, doc.get("initial_lower_bound", lower_bound(prob, glob, loc)),
                     doc["converged"], n_cycles=doc.get("n_cycles", 0), n_sweeps=doc.get("n_sweeps", 0),
                     switched_at=doc.get("switched_at"), problem=prob)


# --------------------------------------------------------------------------
# operations
# --------------------------------------------------------------------------


@contextlib.contextmanager
def thread_limit():
    """Honor ``SVI_GLMM_THREADS`` for BLAS threads."""
    val = os.environ.get("SVI_GLMM_THREADS")
    if not val:
        yield
        return
    try:
        limit = int(val)
        if limit < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"SVI_GLMM_THREADS must be a positive integer, got {val!r}") from None
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=limit):
        yield


def run_fit(config: ModelConfig, dataset: Dataset, fit_cfg: FitConfig | None = None,
            checkpoint_path=None, resume=None) -> tuple[FitResult, dict]:
    """Fit with full-data cycles, or the stochastic variant followed by the
    switch when ``fit_cfg.stochastic`` is set."""
    fit_cfg = fit_cfg or config.fit_config()
    with thread_limit():
        if fit_cfg.stochastic:
            fit = fit_svi(dataset, config.family, fit_cfg, checkpoint_path=checkpoint_path, resume=resume)
        else:
            fit = fit_ncvmp(dataset, config.family, fit_cfg)
    return fit, build_run_output(fit, config, fit_cfg)


def run_diagnose(fit: FitResult, out_prefix=None, level: float = 0.05, side: str = "two_sided") -> ConflictReport:
    """Conflict report; written to ``<prefix>.csv`` and ``<prefix>.json``
    when a prefix is given."""
    report = diagnose_all(fit, level=level, side=side)
    if out_prefix is not None:
        report.write_csv(f"{out_prefix}.csv")
        report.write_json(f"{out_prefix}.json")
    return report


def simulate_from_fit(fit: FitResult, m: int, seed: int, family=None) -> Dataset:
    """Replicate every cluster's design ``m`` times and draw fresh responses
    with ``beta = mu_beta`` and ``u_i ~ N(0, E[D])``.

    Replicate ``k`` of cluster ``i`` gets id ``(i, k)``, ordered cluster
    major.
    """
    if m < 1:
        raise ValueError("replication count must be >= 1")
    prob, g = fit.problem, fit.global_state
    family = Family.coerce(family or prob.family)
    r = prob.r
    if g.nu_D <= r + 1:
        raise ValueError("posterior mean of D undefined for nu_D <= r + 1")
    D = g.D_mean
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[1])
    L = np.linalg.cholesky(D)
    clusters, ids = [], []
    for lab, c in zip(prob.dataset.ids, prob.dataset.clusters):
        for k in range(m):
            u = L @ rng.standard_normal(r)
            eta = c.X @ g.mu_beta + c.Z @ u
            mu = family.mean(eta, c.log_offset)
            y = rng.poisson(mu) if family is Family.POISSON else rng.binomial(1, mu)
            clusters.append(ClusterData(y.astype(float), c.X.copy(), c.Z.copy(),
                                        None if c.offset is None else c.offset.copy()))
            ids.append((lab, k) if m > 1 else lab)
    ds = Dataset(clusters, ids=ids, x_names=list(prob.dataset.x_names), z_names=list(prob.dataset.z_names),
                 z_columns=prob.dataset.z_columns)
    return validate_dataset(ds, family)


TRACE_COLUMNS = ["phase", "index", "lower_bound", "step_size", "local_iterations", "wall_time"]


def export_trace(run_output: dict, path, parameters: list[str] | None = None):
    """One row per sweep or cycle: phase, index, lower bound, step size,
    local iterations, wall time."""
    trace = run_output["trace"]
    times = run_output.get("timing", {}).get("trace_wall_time", [np.nan] * len(trace))
    rows = []
    for t, w in zip(trace, times):
        row = {k: t.get(k) for k in TRACE_COLUMNS}
        row["wall_time"] = w
        rows.append(row)
    df = pd.DataFrame(rows, columns=TRACE_COLUMNS)
    if parameters:
        names = [b["name"] for b in run_output["summary"]["beta"]]
        means = {b["name"]: b["mean"] for b in run_output["summary"]["beta"]}
        for p in parameters:
            if p not in names:
                raise UsageError(f"unknown parameter {p!r}")
            df[f"final_{p}"] = means[p]
    df.to_csv(path, index=False, float_format="%.17g")
    return df


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="svi-glmm", description="Variational Bayes for Poisson and logistic GLMMs.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, need_fit=False):
        sp.add_argument("--data", required=True, help="CSV file, one row per observation")
        sp.add_argument("--config", required=True, help="JSON model configuration")
        sp.add_argument("--out", required=True)
        if need_fit:
            sp.add_argument("--fit", required=True, help="output of the fit command")

    f = sub.add_parser("fit", help="fit a model")
    common(f)
    f.add_argument("--seed", type=int)
    f.add_argument("--stochastic", action="store_true", default=None)
    f.add_argument("--batch-size", type=int)
    f.add_argument("--step-A", type=float, dest="step_A")
    f.add_argument("--step-alpha", type=float)
    f.add_argument("--parametrization", choices=[k.value for k in ParametrizationKind])
    f.add_argument("--quadrature-order", type=int)
    f.add_argument("--deterministic", action="store_true", default=None)
    f.add_argument("--checkpoint")
    f.add_argument("--resume")
    f.add_argument("--diagnose", action="store_true", help="include the conflict report")

    d = sub.add_parser("diagnose", help="conflict p-values from a saved fit")
    common(d, need_fit=True)
    d.add_argument("--level", type=float, default=0.05)
    d.add_argument("--side", choices=["lower", "upper", "two_sided"], default="two_sided")

    s = sub.add_parser("simulate", help="simulate data from a saved fit")
    common(s, need_fit=True)
    s.add_argument("--replicates", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("trace", help="export the lower-bound trace as CSV")
    t.add_argument("--fit", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--parameters", nargs="*")
    return p


_FLAG_KEYS = ("seed", "stochastic", "batch_size", "step_A", "step_alpha", "parametrization",
              "quadrature_order", "deterministic")


def _merged_fit_config(config: ModelConfig, args) -> FitConfig:
    d = dict(config.fit)
    for k in _FLAG_KEYS:
        v = getattr(args, k, None)
        if v is not None:
            d[k] = v
    try:
        return FitConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid fit settings: {exc}") from None


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "trace":
            export_trace(load_run_output(args.fit), args.out, args.parameters)
            return EXIT_OK
        config = load_config(args.config)
        dataset = ingest_csv(args.data, config)
        if args.command == "fit":
            fit_cfg = _merged_fit_config(config, args)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ConvergenceWarning)
                fit, doc = run_fit(config, dataset, fit_cfg, args.checkpoint, args.resume)
            if args.diagnose and fit.converged:
                doc["conflict"] = json.loads(diagnose_all(fit).to_json())
            dump_json(doc, args.out)
            print(f"lower bound {fit.lower_bound:.4f}; converged={fit.converged}"
                  + (f"; switched at sweep {fit.switched_at}" if fit.switched_at is not None else ""))
            return EXIT_OK if fit.converged else EXIT_NOT_CONVERGED
        fit = fit_from_output(load_run_output(args.fit), dataset, config.family,
                              config.fit.get("quadrature_order", 20))
        if args.command == "diagnose":
            report = run_diagnose(fit, args.out, args.level, args.side)
            print(f"{len(report.flagged)} of {len(report.entries)} clusters flagged at level {args.level}")
            return EXIT_OK
        sim = simulate_from_fit(fit, args.replicates, args.seed)
        export_csv(sim, args.out, config.family)
        return EXIT_OK
    except (UsageError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except StaleLocalsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED


if __name__ == "__main__":
    sys.exit(main())
