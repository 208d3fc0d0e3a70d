"""Stochastic natural-gradient updates of the global factors.

Each iteration draws a mini-batch of clusters (without replacement within a
sweep), optimizes their local factors at the current global state and moves
the global natural parameters a step ``a_t`` towards the batch estimate

    lambda <- (1 - a_t) lambda + a_t lambda_hat.

For ``q(beta)`` the natural parameters are the precision and the
precision-weighted mean; for ``q(D)`` it is the scale matrix (the degrees
of freedom stay at ``nu + n``).  After the relative lower-bound gain over a
sweep drops below ``switch_tol`` the fit continues with full-data cycles.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .data_model import ConvergenceWarning, Dataset, warn
from .ncvmp import (
    FitConfig,
    FitResult,
    GlobalState,
    GLMMProblem,
    LocalState,
    _global_sums,
    _sym,
    check_state,
    initialize,
    lower_bound,
    optimize_locals,
    run_cycles,
    spd_inverse,
)

CHECKPOINT_VERSION = 1


# --------------------------------------------------------------------------
# step sizes and batches
# --------------------------------------------------------------------------


@dataclass
class StepSchedule:
    """``a_t = a / (t + A)^alpha`` with ``t = s_w + m / M``.

    With ``constant=True`` every step equals ``a``.
    """

    a: float = 1.0
    A: float = 1.0
    alpha: float = 1.0
    M: int = 1
    constant: bool = False

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError("step scale a must be positive")
        if self.A < 0:
            raise ValueError("stability constant A must be nonnegative")
        if not self.constant and not 0.5 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0.5, 1]")
        if self.M < 1:
            raise ValueError("M must be >= 1")


def step_size(schedule: StepSchedule, s_w: int, m: int) -> float:
    """Step size after ``m`` batches of sweep ``s_w``.

    ``A = 0`` makes the very first step singular; ``t`` is then floored at
    ``1/M``.
    """
    if not 0 <= m <= schedule.M - 1:
        raise ValueError(f"m must lie in [0, {schedule.M - 1}]")
    if schedule.constant:
        return float(schedule.a)
    t = s_w + m / schedule.M
    if schedule.A == 0:
        t = max(t, 1.0 / schedule.M)
    return float(schedule.a / (t + schedule.A) ** schedule.alpha)


def default_batch_size(n: int) -> int:
    return max(1, int(round(0.01 * n)))


def default_stability_constant(batch_size: int, n: int) -> float:
    """Larger constants for smaller batches: 16 at 1% of the data, scaled
    inversely with the batch fraction and kept within [1, 64]."""
    frac = batch_size / n
    if frac >= 1:
        return 1.0
    return float(min(64.0, max(1.0, 0.16 / frac)))


class SweepSampler:
    """Seeded source of batch permutations, independent of every other
    random stream."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed).spawn(1)[0]))

    def get_state(self) -> dict:
        return self.rng.bit_generator.state

    def set_state(self, state: dict):
        self.rng.bit_generator.state = state


def plan_sweep(n: int, batch_size: int, sampler: SweepSampler) -> list[np.ndarray]:
    """Partition a fresh random permutation of ``range(n)`` into
    ``ceil(n / batch_size)`` blocks whose sizes differ by at most one.

    Indices inside each block are sorted so reductions run in a fixed order.
    """
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch_size must lie in [1, {n}], got {batch_size}")
    M = math.ceil(n / batch_size)
    perm = sampler.rng.permutation(n)
    return [np.sort(b) for b in np.array_split(perm, M)]


# --------------------------------------------------------------------------
# natural-parameter estimates
# --------------------------------------------------------------------------


@dataclass
class NaturalParams:
    """``beta``: precision and precision-mean; ``D``: scale and dof."""

    precision: np.ndarray
    precision_mean: np.ndarray
    S: np.ndarray
    nu: float


def _batch_arrays(prob: GLMMProblem, batch):
    if batch is None:
        batch = prob.batch()
    elif not isinstance(batch, tuple):
        batch = prob.batch(np.sort(np.asarray(batch, dtype=np.int64)))
    clusters, rows, seg, owner = batch
    return batch, clusters, rows, owner


def _estimate(prob: GLMMProblem, glob: GlobalState, loc: LocalState, batch, need_beta=True, need_D=True):
    batch, clusters, rows, owner = _batch_arrays(prob, batch)
    # an empty batch leaves only the prior terms
    scale = prob.n / clusters.size if clusters.size else 0.0
    prec, grad, scatter = _global_sums(
        prob.family, prob.rule, prob.y[rows], prob.log_offset[rows], prob.V[rows], prob.Z[rows],
        prob.W_tilde[clusters], owner, glob, loc.mu_alpha[clusters], loc.Sigma_alpha[clusters],
        need_beta=need_beta, need_D=need_D,
    )
    Sb_inv = prob.Sigma_beta_prior_inv
    P_hat = grad_hat = S_hat = None
    if need_beta:
        P_hat = Sb_inv + scale * prec
        grad_hat = scale * grad - Sb_inv @ glob.mu_beta
    if need_D:
        S_hat = prob.prior.S + scale * scatter
    return P_hat, grad_hat, S_hat


def natural_param_estimate(prob: GLMMProblem, glob: GlobalState, loc: LocalState, batch=None) -> NaturalParams:
    """Unbiased batch estimate of the full-data update of the global
    natural parameters (batch sums inflated by ``n / |B|``), evaluated at
    ``glob``.

    ``batch`` is an array of cluster indices; ``None`` means all clusters.
    """
    P_hat, grad_hat, S_hat = _estimate(prob, glob, loc, batch)
    return NaturalParams(P_hat, P_hat @ glob.mu_beta + grad_hat, S_hat, prob.prior.nu + prob.n)


def stochastic_global_update(prob: GLMMProblem, glob: GlobalState, loc: LocalState, batch, a_t: float) -> GlobalState:
    """Move the global natural parameters a step ``a_t`` towards the batch
    estimate.

    ``q(beta)`` is updated first; the scale of ``q(D)`` is then estimated at
    the updated ``q(beta)``.
    """
    if not 0 <= a_t <= 1:
        raise ValueError(f"step size must lie in [0, 1], got {a_t}")
    if a_t == 0:
        return glob.copy()
    P_hat, grad_hat, _ = _estimate(prob, glob, loc, batch, need_D=False)
    if a_t == 1:
        P_new = P_hat
    else:
        P_old = spd_inverse(glob.Sigma_beta_q, "Sigma_beta_q")
        P_new = (1.0 - a_t) * P_old + a_t * P_hat
    Sigma_new = _sym(spd_inverse(P_new, "precision of q(beta)"))
    mu_new = glob.mu_beta + a_t * (Sigma_new @ grad_hat)
    mid = GlobalState(mu_new, Sigma_new, glob.nu_D, glob.S_D)
    _, _, S_hat = _estimate(prob, mid, loc, batch, need_beta=False)
    S_new = S_hat if a_t == 1 else (1.0 - a_t) * glob.S_D + a_t * S_hat
    return GlobalState(mu_new, Sigma_new, glob.nu_D, _sym(S_new))


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def config_hash(config: FitConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    global_state: GlobalState
    local_state: LocalState
    s_w: int
    m: int
    sweep_plan: list[np.ndarray]
    rng_state: dict
    trace: list[dict]
    initial_lower_bound: float
    previous_lower_bound: float
    n_iterations: int
    config_hash: str
    version: int = CHECKPOINT_VERSION

    def to_json(self) -> str:
        g, l = self.global_state, self.local_state
        doc = {
            "version": self.version,
            "config_hash": self.config_hash,
            "global": {"mu_beta": g.mu_beta.tolist(), "Sigma_beta_q": g.Sigma_beta_q.tolist(),
                       "nu_D": g.nu_D, "S_D": g.S_D.tolist()},
            "local": {"mu_alpha": l.mu_alpha.tolist(), "Sigma_alpha": l.Sigma_alpha.tolist()},
            "s_w": self.s_w,
            "m": self.m,
            "sweep_plan": [b.tolist() for b in self.sweep_plan],
            "rng_state": self.rng_state,
            "trace": self.trace,
            "initial_lower_bound": self.initial_lower_bound,
            "previous_lower_bound": self.previous_lower_bound,
            "n_iterations": self.n_iterations,
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Checkpoint":
        d = json.loads(text)
        g, l = d["global"], d["local"]
        return cls(
            GlobalState(np.array(g["mu_beta"]), np.array(g["Sigma_beta_q"]), float(g["nu_D"]), np.array(g["S_D"])),
            LocalState(np.array(l["mu_alpha"]), np.array(l["Sigma_alpha"])),
            d["s_w"], d["m"], [np.array(b, dtype=np.int64) for b in d["sweep_plan"]], d["rng_state"],
            d["trace"], d["initial_lower_bound"], d["previous_lower_bound"], d["n_iterations"],
            d["config_hash"], d["version"],
        )


def save_checkpoint(state: Checkpoint, path):
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "w") as fh:
            fh.write(state.to_json())
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"could not write checkpoint {path}: {exc}") from exc


def load_checkpoint(path, config: FitConfig | None = None) -> Checkpoint:
    """Read a checkpoint; if ``config`` is given its hash must match."""
    try:
        with open(path) as fh:
            ck = Checkpoint.from_json(fh.read())
    except OSError as exc:
        raise CheckpointError(f"could not read checkpoint {path}: {exc}") from exc
    if ck.version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {ck.version} != supported {CHECKPOINT_VERSION}")
    if config is not None and ck.config_hash != config_hash(config):
        raise CheckpointError("checkpoint was written with a different configuration")
    return ck


# --------------------------------------------------------------------------
# stochastic sweeps with the switch to full-data cycles
# --------------------------------------------------------------------------


def make_schedule(config: FitConfig, n: int) -> tuple[int, StepSchedule]:
    bs = config.batch_size or default_batch_size(n)
    bs = min(bs, n)
    A = config.step_A if config.step_A is not None else default_stability_constant(bs, n)
    M = math.ceil(n / bs)
    return bs, StepSchedule(a=config.step_a, A=A, alpha=config.step_alpha, M=M, constant=config.constant_step)


def fit_svi(dataset: Dataset, family, config: FitConfig | None = None, *, switch: bool = True,
            checkpoint_path=None, checkpoint_every: str = "sweep", resume=None,
            max_iterations: int | None = None, state=None) -> FitResult:
    """Stochastic nonconjugate message passing, then full-data cycles.

    Parameters
    ----------
    switch : bool
        Hand over to full-data cycles once the relative lower-bound gain of a
        sweep is below ``config.switch_tol`` (or ``max_sweeps`` is reached).
        With ``switch=False`` only the stochastic phase runs.
    checkpoint_path : path, optional
        Where to write checkpoints, at every sweep boundary or, with
        ``checkpoint_every="iteration"``, after every batch.
    resume : path or Checkpoint, optional
        Continue an interrupted run.
    max_iterations : int, optional
        Stop after this many batch iterations (an interrupted run).
    """
    config = config or FitConfig()
    t0 = time.perf_counter()
    if state is None:
        prob, glob, loc = initialize(dataset, family, config)
    else:
        prob, glob, loc = state
        glob, loc = glob.copy(), loc.copy()
    n = prob.n
    bs, schedule = make_schedule(config, n)
    sampler = SweepSampler(config.seed)
    chash = config_hash(config)

    trace: list[dict] = []
    s_w, m_start, plan = 0, 0, None
    n_iter = 0
    if resume is not None:
        ck = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume, config)
        if ck.config_hash != chash:
            raise CheckpointError("checkpoint was written with a different configuration")
        glob, loc = ck.global_state.copy(), ck.local_state.copy()
        sampler.set_state(ck.rng_state)
        trace = list(ck.trace)
        lb0, prev = ck.initial_lower_bound, ck.previous_lower_bound
        s_w, m_start, n_iter = ck.s_w, ck.m, ck.n_iterations
        plan = ck.sweep_plan if ck.m > 0 else None
    else:
        lb0 = lower_bound(prob, glob, loc)
        prev = lb0

    def checkpoint(s, m, pl):
        if checkpoint_path is not None:
            save_checkpoint(Checkpoint(glob, loc, s, m, pl, sampler.get_state(), trace, lb0, prev, n_iter, chash),
                            checkpoint_path)

    switched_at = None
    stochastic_sweeps = sum(1 for t in trace if t["phase"] == "svi")
    interrupted = False
    while s_w < config.max_sweeps:
        if plan is None:
            plan = plan_sweep(n, bs, sampler)
            m_start = 0
        local_its = []
        a_t = None
        for m in range(m_start, len(plan)):
            a_t = min(1.0, step_size(schedule, s_w, m))
            batch = prob.batch(plan[m])
            local_its.append(optimize_locals(prob, glob, loc, batch, config.local_tol, config.max_local_iter))
            glob = stochastic_global_update(prob, glob, loc, batch, a_t)
            n_iter += 1
            if max_iterations is not None and n_iter >= max_iterations:
                interrupted = True
                if m + 1 < len(plan):
                    checkpoint(s_w, m + 1, plan)
                else:
                    break
                break
            if checkpoint_every == "iteration" and m + 1 < len(plan):
                checkpoint(s_w, m + 1, plan)
        if interrupted and m + 1 < len(plan):
            break
        lb = lower_bound(prob, glob, loc)
        s_w += 1
        stochastic_sweeps += 1
        trace.append({"phase": "svi", "index": s_w, "lower_bound": lb, "step_size": a_t,
                      "local_iterations": float(np.mean(local_its)) if local_its else 0.0,
                      "wall_time": time.perf_counter() - t0})
        gain = (lb - prev) / abs(prev)
        prev = lb
        plan = None
        checkpoint(s_w, 0, [])
        if interrupted:
            break
        if switch and gain < config.switch_tol:
            switched_at = s_w
            break
    check_state(glob, loc)

    converged = False
    n_cycles = 0
    decreases: list[int] = []
    if switch and not interrupted:
        if switched_at is None:
            switched_at = s_w
            warn(f"stochastic phase used all {config.max_sweeps} sweeps before switching", ConvergenceWarning)
        glob, converged, n_cycles, decreases = run_cycles(prob, glob, loc, config, prev, trace, t0)
        if not converged:
            warn(f"NCVMP did not converge within {config.max_cycles} cycles after switching", ConvergenceWarning)
    return FitResult(glob, loc, trace, lb0, converged, n_cycles=n_cycles, n_sweeps=stochastic_sweeps,
                     n_iterations=n_iter, switched_at=switched_at, wall_time=time.perf_counter() - t0,
                     decreases=decreases, problem=prob)
