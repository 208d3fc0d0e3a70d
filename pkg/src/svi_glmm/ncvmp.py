"""Variational state, nonconjugate message passing updates and the
evidence lower bound.

The variational family is

    q(beta) q(D) prod_i q(alpha_tilde_i)

with ``q(beta) = N(mu_beta, Sigma_beta_q)``, ``q(D) = IW(nu_D, S_D)`` and
``q(alpha_tilde_i) = N(mu_alpha_i, Sigma_alpha_i)``.

All cluster-level computations run on a packed, row-stacked copy of the
data (:class:`GLMMProblem`) so a batch of clusters is handled with a few
vectorized numpy calls.  Per-cluster convenience functions
(:func:`compute_g_F`, :func:`update_local_once`, :func:`optimize_local`)
wrap the same kernels.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np
from scipy.special import digamma, gammaln, multigammaln

from .data_model import (
    ETA_CLIP,
    ClusterData,
    ClusterDesign,
    ConvergenceWarning,
    Dataset,
    Family,
    ParametrizationKind,
    PriorSpec,
    build_parametrization,
    default_prior,
    fit_pooled_glm,
    kass_prior_guess,
    validate_dataset,
    warn,
)
from .quadrature import QuadratureRule, b_integral_vec, hermite_rule, logistic_moments

LOG2PI = np.log(2.0 * np.pi)
REL_FLOOR = 1e-10
FINAL_LOCAL_TOL = 1e-9
FINAL_LOCAL_ITER = 200


class NumericalError(ArithmeticError):
    """A covariance or scale matrix lost positive definiteness."""


# --------------------------------------------------------------------------
# state containers
# --------------------------------------------------------------------------


@dataclass
class GlobalState:
    mu_beta: np.ndarray
    Sigma_beta_q: np.ndarray
    nu_D: float
    S_D: np.ndarray

    def copy(self) -> "GlobalState":
        return GlobalState(self.mu_beta.copy(), self.Sigma_beta_q.copy(), float(self.nu_D), self.S_D.copy())

    @property
    def D_mean(self) -> np.ndarray:
        r = self.S_D.shape[0]
        if self.nu_D <= r + 1:
            raise ValueError("posterior mean of D undefined for nu_D <= r + 1")
        return self.S_D / (self.nu_D - r - 1)


@dataclass
class LocalState:
    """Per-cluster Gaussian parameters, stacked: ``mu_alpha`` is ``(n, r)``
    and ``Sigma_alpha`` is ``(n, r, r)``."""

    mu_alpha: np.ndarray
    Sigma_alpha: np.ndarray

    def copy(self) -> "LocalState":
        return LocalState(self.mu_alpha.copy(), self.Sigma_alpha.copy())

    def entry(self, i: int):
        return self.mu_alpha[i].copy(), self.Sigma_alpha[i].copy()

    def __len__(self):
        return self.mu_alpha.shape[0]


@dataclass
class FitConfig:
    """Settings for :func:`fit_ncvmp` and :func:`svi_glmm.stochastic.fit_svi`.

    ``prior=None`` selects the default prior (``N(0, sigma_beta I)`` on
    ``beta`` and the data-based inverse-Wishart prior on ``D``).
    ``step_A=None`` picks the stability constant from the batch size.
    """

    parametrization: ParametrizationKind = ParametrizationKind.PARTIAL
    prior: PriorSpec | None = None
    sigma_beta: float = 1000.0
    c: float = 1.0
    quadrature_order: int = 20
    local_tol: float = 0.05
    stop_tol: float = 1e-6
    switch_tol: float = 1e-3
    max_cycles: int = 1000
    max_sweeps: int = 200
    max_local_iter: int = 50
    damping: float = 1.0
    seed: int = 0
    stochastic: bool = False
    batch_size: int | None = None
    step_a: float = 1.0
    step_A: float | None = None
    step_alpha: float = 1.0
    constant_step: bool = False
    deterministic: bool = True
    subject_specific: Sequence[int] | None = None
    tuning_init: str = "kass"

    def __post_init__(self):
        self.parametrization = ParametrizationKind.coerce(self.parametrization)
        if self.tuning_init not in ("kass", "pilot"):
            raise ValueError("tuning_init must be 'kass' or 'pilot'")
        for name in ("local_tol", "stop_tol", "switch_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if not 0.5 < self.step_alpha <= 1 and not self.constant_step:
            raise ValueError("step_alpha must lie in (0.5, 1]")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["parametrization"] = self.parametrization.value
        if self.prior is not None:
            d["prior"] = {
                "Sigma_beta": self.prior.Sigma_beta.tolist(),
                "nu": self.prior.nu,
                "S": self.prior.S.tolist(),
                "c": self.prior.c,
            }
        if self.subject_specific is not None:
            d["subject_specific"] = [int(j) for j in self.subject_specific]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        d = dict(d)
        if d.get("prior") is not None:
            d["prior"] = PriorSpec(**d["prior"])
        return cls(**d)


@dataclass
class FitResult:
    global_state: GlobalState
    local_state: LocalState
    trace: list[dict]
    initial_lower_bound: float
    converged: bool
    n_cycles: int = 0
    n_sweeps: int = 0
    n_iterations: int = 0
    switched_at: int | None = None
    wall_time: float = 0.0
    decreases: list[int] = field(default_factory=list)
    problem: "GLMMProblem | None" = field(default=None, repr=False)

    @property
    def lower_bound(self) -> float:
        return self.trace[-1]["lower_bound"] if self.trace else self.initial_lower_bound

    @property
    def lower_bound_trace(self) -> np.ndarray:
        return np.array([t["lower_bound"] for t in self.trace])


# --------------------------------------------------------------------------
# small linear algebra helpers
# --------------------------------------------------------------------------


def _sym(A):
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def spd_inverse(A, what: str = "matrix", labels=None):
    """Inverse of a (stack of) symmetric positive definite matrices via
    Cholesky; raises :class:`NumericalError` naming the offending entry."""
    A = np.asarray(A, dtype=float)
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        bad = ""
        if A.ndim == 3:
            for k in range(A.shape[0]):
                try:
                    np.linalg.cholesky(A[k])
                except np.linalg.LinAlgError:
                    bad = f" (cluster {labels[k] if labels is not None else k})"
                    break
        raise NumericalError(f"{what} is not positive definite{bad}") from None
    eye = np.broadcast_to(np.eye(A.shape[-1]), A.shape)
    Linv = np.linalg.solve(L, eye)
    return np.swapaxes(Linv, -1, -2) @ Linv


def _logdet_spd(A):
    L = np.linalg.cholesky(A)
    return 2.0 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(-1)


# --------------------------------------------------------------------------
# packed problem
# --------------------------------------------------------------------------


class GLMMProblem:
    """Row-stacked data and designs plus the prior, ready for batched updates."""

    def __init__(self, dataset: Dataset, designs: Sequence[ClusterDesign], family, prior: PriorSpec,
                 rule: QuadratureRule):
        self.family = Family.coerce(family)
        self.dataset = dataset
        self.designs = list(designs)
        self.prior = prior
        self.rule = rule
        self.n, self.p, self.r = dataset.n, dataset.p, dataset.r
        pk = dataset.packed()
        self.sizes = pk.sizes
        self.starts = np.concatenate([pk.starts, [pk.y.size]])
        self.y, self.log_offset, self.X, self.Z = pk.y, pk.log_offset, pk.X, pk.Z
        self.V = np.vstack([d.V for d in designs])
        self.W_tilde = np.stack([d.W_tilde for d in designs])
        self.W = np.stack([d.W for d in designs])
        self.Sigma_beta_prior_inv = spd_inverse(prior.Sigma_beta, "prior covariance of beta")
        self.nu_D = prior.nu + self.n
        if self.family is Family.POISSON:
            self.log_y_factorial = float(gammaln(self.y + 1.0).sum())
        else:
            self.log_y_factorial = 0.0
        self._all = self._rows(np.arange(self.n))

    def _rows(self, clusters):
        clusters = np.asarray(clusters, dtype=np.int64)
        sizes = self.sizes[clusters]
        seg = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        total = int(sizes.sum())
        rows = np.repeat(self.starts[clusters] - seg, sizes) + np.arange(total)
        owner = np.repeat(np.arange(clusters.size), sizes)
        return clusters, rows, seg, owner

    def batch(self, clusters=None):
        if clusters is None:
            return self._all
        return self._rows(clusters)


# --------------------------------------------------------------------------
# kernels
# --------------------------------------------------------------------------


def _eta_moments(V, Z, owner, glob: GlobalState, mu_a, Sig_a):
    """Mean and variance of each linear predictor under q."""
    m = V @ glob.mu_beta + np.einsum("ij,ij->i", Z, mu_a[owner])
    v = np.einsum("ij,ij->i", V @ glob.Sigma_beta_q, V) + np.einsum("ij,ijk,ik->i", Z, Sig_a[owner], Z)
    return m, np.maximum(v, 0.0)


def _g_F(family: Family, rule, log_offset, m, v):
    if family is Family.POISSON:
        g = np.exp(log_offset + np.clip(m + 0.5 * v, -ETA_CLIP, ETA_CLIP))
        return g, g
    return logistic_moments(m, np.sqrt(v), rule)


def _local_step(family, rule, y, lo, V, Z, Wt, seg, owner, glob, mu_a, Sig_a, labels=None):
    """One NCVMP update of the local factors of a batch.

    ``g`` and ``F`` are evaluated once at the incoming state; the covariance
    is updated first and the mean update reuses the same ``g``.
    """
    m, v = _eta_moments(V, Z, owner, glob, mu_a, Sig_a)
    g, F = _g_F(family, rule, lo, m, v)
    ZtFZ = np.add.reduceat(Z[:, :, None] * Z[:, None, :] * F[:, None, None], seg, axis=0)
    Ztr = np.add.reduceat(Z * (y - g)[:, None], seg, axis=0)
    P = glob.nu_D * spd_inverse(glob.S_D, "S_D")
    Sig_new = _sym(spd_inverse(P + ZtFZ, "local precision", labels))
    resid = mu_a - Wt @ glob.mu_beta
    step = Ztr - resid @ P
    mu_new = mu_a + np.einsum("kij,kj->ki", Sig_new, step)
    return mu_new, Sig_new


def _global_sums(family, rule, y, lo, V, Z, Wt, owner, glob, mu_a, Sig_a, need_beta=True, need_D=True):
    """Batch sums entering the natural-parameter estimates.

    Returns ``(prec_sum, grad_sum, scatter_sum)`` where
    ``prec_sum = sum_i nu_D Wt_i^T S_D^{-1} Wt_i + V_i^T F_i V_i``,
    ``grad_sum = sum_i nu_D Wt_i^T S_D^{-1} (mu_i - Wt_i mu_beta) + V_i^T (y_i - g_i)`` and
    ``scatter_sum = sum_i (mu_i - Wt_i mu_beta)(...)^T + Sigma_i + Wt_i Sigma_beta Wt_i^T``.
    """
    resid = mu_a - Wt @ glob.mu_beta
    prec = grad = scatter = None
    if need_beta:
        m, v = _eta_moments(V, Z, owner, glob, mu_a, Sig_a)
        g, F = _g_F(family, rule, lo, m, v)
        Sinv = glob.nu_D * spd_inverse(glob.S_D, "S_D")
        SW = np.einsum("rs,ksp->krp", Sinv, Wt)
        prec = np.einsum("krp,krq->pq", Wt, SW) + (V * F[:, None]).T @ V
        grad = np.einsum("krp,kr->p", SW, resid) + V.T @ (y - g)
    if need_D:
        WSW = Wt @ glob.Sigma_beta_q @ np.swapaxes(Wt, 1, 2)
        scatter = resid.T @ resid + Sig_a.sum(0) + WSW.sum(0)
    return prec, grad, scatter


def _gather(prob: GLMMProblem, batch):
    clusters, rows, seg, owner = batch
    return (prob.y[rows], prob.log_offset[rows], prob.V[rows], prob.Z[rows], prob.W_tilde[clusters], seg, owner)


def local_update_batch(prob: GLMMProblem, glob: GlobalState, loc: LocalState, batch):
    """Return updated ``(mu, Sigma)`` for the clusters of ``batch`` (no mutation)."""
    clusters = batch[0]
    y, lo, V, Z, Wt, seg, owner = _gather(prob, batch)
    labels = [prob.dataset.ids[c] for c in clusters]
    return _local_step(prob.family, prob.rule, y, lo, V, Z, Wt, seg, owner, glob,
                       loc.mu_alpha[clusters], loc.Sigma_alpha[clusters], labels)


def _rel_change(new, old) -> float:
    """``||new - old|| / ||new||`` with the denominator floored at
    ``REL_FLOOR`` so means sitting at zero do not read as large changes."""
    return float(np.linalg.norm(new - old) / max(np.linalg.norm(new), REL_FLOOR))


def optimize_locals(prob: GLMMProblem, glob: GlobalState, loc: LocalState, batch, tol: float,
                    max_iter: int = 50) -> int:
    """Repeat local updates for a batch (in place) until the relative change
    of the concatenated batch means drops below ``tol``.

    Returns the number of updates performed.
    """
    clusters = batch[0]
    for it in range(1, max_iter + 1):
        old = loc.mu_alpha[clusters]
        mu, Sig = local_update_batch(prob, glob, loc, batch)
        loc.mu_alpha[clusters] = mu
        loc.Sigma_alpha[clusters] = Sig
        if not np.isfinite(tol):
            return it
        if _rel_change(mu, old) < tol:
            return it
    warn(f"local optimization hit {max_iter} repetitions without reaching tol={tol}", ConvergenceWarning)
    return max_iter


# --------------------------------------------------------------------------
# per-cluster public operations
# --------------------------------------------------------------------------


def _single(cluster: ClusterData, design: ClusterDesign):
    n = cluster.n_obs
    return (cluster.y, cluster.log_offset, design.V, cluster.Z, design.W_tilde[None],
            np.array([0]), np.zeros(n, dtype=np.int64))


def compute_g_F(cluster: ClusterData, design: ClusterDesign, glob: GlobalState, local_i, family,
                rule: QuadratureRule | None = None):
    """``g_i`` and the diagonal of ``F_i`` at the current variational state.

    ``local_i`` is a ``(mu_alpha_i, Sigma_alpha_i)`` pair.
    """
    family = Family.coerce(family)
    rule = rule or hermite_rule(20)
    mu, Sig = local_i
    y, lo, V, Z, Wt, seg, owner = _single(cluster, design)
    m, v = _eta_moments(V, Z, owner, glob, np.atleast_2d(mu), np.asarray(Sig).reshape(1, *np.shape(Sig)))
    return _g_F(family, rule, lo, m, v)


def update_local_once(cluster: ClusterData, design: ClusterDesign, glob: GlobalState, local_i, family,
                      rule: QuadratureRule | None = None):
    """One NCVMP update of ``q(alpha_tilde_i)``; returns ``(mu, Sigma)``."""
    family = Family.coerce(family)
    rule = rule or hermite_rule(20)
    mu, Sig = local_i
    y, lo, V, Z, Wt, seg, owner = _single(cluster, design)
    r = Z.shape[1]
    mu_new, Sig_new = _local_step(family, rule, y, lo, V, Z, Wt, seg, owner, glob,
                                  np.asarray(mu, dtype=float).reshape(1, r),
                                  np.asarray(Sig, dtype=float).reshape(1, r, r))
    return mu_new[0], Sig_new[0]


def optimize_local(cluster: ClusterData, design: ClusterDesign, glob: GlobalState, local_i, family,
                   rule: QuadratureRule | None = None, tol: float = 0.05, max_iter: int = 50):
    """Repeat :func:`update_local_once` until
    ``||mu_new - mu_old|| / ||mu_new|| < tol``.

    Returns ``(mu, Sigma, n_updates)``.
    """
    mu, Sig = (np.asarray(a, dtype=float) for a in local_i)
    for it in range(1, max_iter + 1):
        new_mu, Sig = update_local_once(cluster, design, glob, (mu, Sig), family, rule)
        rel = _rel_change(new_mu, mu)
        mu = new_mu
        if not np.isfinite(tol) or rel < tol:
            return mu, Sig, it
    warn(f"local optimization hit {max_iter} repetitions without reaching tol={tol}", ConvergenceWarning)
    return mu, Sig, max_iter


# --------------------------------------------------------------------------
# global update and lower bound
# --------------------------------------------------------------------------


def update_global_full(prob: GLMMProblem, glob: GlobalState, loc: LocalState) -> GlobalState:
    """Full-data global update (step size one, batch = all clusters)."""
    from .stochastic import stochastic_global_update

    return stochastic_global_update(prob, glob, loc, None, 1.0)


def expected_log_det_D(nu_D: float, S_D: np.ndarray) -> float:
    r = S_D.shape[0]
    j = np.arange(1, r + 1)
    return float(_logdet_spd(S_D) - r * np.log(2.0) - digamma((nu_D - j + 1) / 2.0).sum())


def lower_bound(prob: GLMMProblem, glob: GlobalState, loc: LocalState) -> float:
    """Evidence lower bound ``E_q log p(y, theta) - E_q log q(theta)``."""
    fam, p, r, n = prob.family, prob.p, prob.r, prob.n
    _, rows, seg, owner = prob.batch()
    y, lo = prob.y, prob.log_offset
    m, v = _eta_moments(prob.V, prob.Z, owner, glob, loc.mu_alpha, loc.Sigma_alpha)
    if fam is Family.POISSON:
        g = np.exp(lo + np.clip(m + 0.5 * v, -ETA_CLIP, ETA_CLIP))
        loglik = float(y @ (lo + m) - g.sum()) - prob.log_y_factorial
    else:
        loglik = float(y @ m - b_integral_vec(0, m, np.sqrt(v), prob.rule).sum())
    terms = {"loglik": loglik}

    nu_q, S_q = glob.nu_D, glob.S_D
    E_Dinv = nu_q * spd_inverse(S_q, "S_D")
    E_logdetD = expected_log_det_D(nu_q, S_q)
    _, _, scatter = _global_sums(fam, prob.rule, y, lo, prob.V, prob.Z, prob.W_tilde, owner, glob,
                                 loc.mu_alpha, loc.Sigma_alpha, need_beta=False)
    terms["random_effects"] = -0.5 * n * r * LOG2PI - 0.5 * n * E_logdetD - 0.5 * np.trace(E_Dinv @ scatter)

    Sb = prob.prior.Sigma_beta
    Sb_inv = prob.Sigma_beta_prior_inv
    mb, Sq = glob.mu_beta, glob.Sigma_beta_q
    terms["beta_prior"] = -0.5 * p * LOG2PI - 0.5 * _logdet_spd(Sb) - 0.5 * (mb @ Sb_inv @ mb + np.trace(Sb_inv @ Sq))

    nu0, S0 = prob.prior.nu, prob.prior.S
    terms["D_prior"] = (0.5 * nu0 * _logdet_spd(S0) - 0.5 * nu0 * r * np.log(2.0) - multigammaln(0.5 * nu0, r)
                        - 0.5 * (nu0 + r + 1) * E_logdetD - 0.5 * np.trace(S0 @ E_Dinv))

    terms["entropy_beta"] = 0.5 * p * (1.0 + LOG2PI) + 0.5 * _logdet_spd(Sq)
    terms["entropy_alpha"] = 0.5 * n * r * (1.0 + LOG2PI) + 0.5 * float(_logdet_spd(loc.Sigma_alpha).sum())
    terms["entropy_D"] = (-0.5 * nu_q * _logdet_spd(S_q) + 0.5 * nu_q * r * np.log(2.0) + multigammaln(0.5 * nu_q, r)
                          + 0.5 * (nu_q + r + 1) * E_logdetD + 0.5 * nu_q * r)
    bad = [k for k, val in terms.items() if not np.isfinite(val)]
    if bad:
        raise NumericalError(f"non-finite lower bound term(s): {', '.join(bad)}")
    return float(sum(terms.values()))


def check_state(glob: GlobalState, loc: LocalState):
    """Assert every covariance/scale matrix is symmetric positive definite."""
    for what, A in (("Sigma_beta_q", glob.Sigma_beta_q), ("S_D", glob.S_D), ("Sigma_alpha", loc.Sigma_alpha)):
        try:
            np.linalg.cholesky(A)
        except np.linalg.LinAlgError:
            raise NumericalError(f"{what} lost positive definiteness") from None


# --------------------------------------------------------------------------
# initialization and full-data cycles
# --------------------------------------------------------------------------


def initialize(dataset: Dataset, family, config: FitConfig):
    """Build the packed problem and the initial variational state from a
    pooled GLM fit.

    ``mu_beta, Sigma_beta_q`` take the GLM estimate and its covariance,
    ``S_D = (nu_D - r - 1) R_hat``, ``mu_alpha_i = W_tilde_i mu_beta`` and
    ``Sigma_alpha_i = R_hat``.

    Tuning matrices use ``D = R_hat`` and ``eta_i = X_i beta_hat``.  With
    ``config.tuning_init == "pilot"`` they instead use the posterior mean of
    ``D`` and ``mu_beta`` from a loosely converged centered fit, a stand-in
    for a penalized quasi-likelihood start when ``R_hat`` is a poor guess.
    """
    family = Family.coerce(family)
    dataset = validate_dataset(dataset, family)
    beta_hat, cov_hat = fit_pooled_glm(dataset, family)
    R_hat = kass_prior_guess(dataset, family, beta_hat, config.c)
    prior = config.prior or default_prior(dataset, family, beta_hat, config.c, config.sigma_beta)
    D_tune, beta_tune = R_hat, beta_hat
    if config.tuning_init == "pilot" and config.parametrization is ParametrizationKind.PARTIAL:
        D_tune, beta_tune = _pilot_tuning(dataset, family, config, prior)
    designs = build_parametrization(dataset, config.parametrization, D_tune, beta_tune, family,
                                    subject_specific=config.subject_specific)
    rule = hermite_rule(config.quadrature_order)
    prob = GLMMProblem(dataset, designs, family, prior, rule)
    glob, loc = initial_state(prob, beta_hat, cov_hat, R_hat)
    return prob, glob, loc


def _pilot_tuning(dataset, family, config: FitConfig, prior: PriorSpec):
    import warnings

    pilot_cfg = FitConfig(parametrization="centered", prior=prior, quadrature_order=config.quadrature_order,
                          stop_tol=1e-4, max_cycles=200, subject_specific=config.subject_specific)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pilot = fit_ncvmp(dataset, family, pilot_cfg)
    g = pilot.global_state
    r = g.S_D.shape[0]
    D = g.S_D / (g.nu_D - r - 1) if g.nu_D > r + 1 else g.S_D / g.nu_D
    return D, g.mu_beta


def initial_state(prob: GLMMProblem, beta_hat, cov_hat, R_hat):
    r, n = prob.r, prob.n
    nu_D = prob.nu_D
    if nu_D - r - 1 > 0:
        S_D = (nu_D - r - 1) * R_hat
    else:
        warn("nu_D <= r + 1: initializing S_D = R_hat")
        S_D = R_hat.copy()
    glob = GlobalState(np.array(beta_hat, dtype=float), np.array(cov_hat, dtype=float), float(nu_D), S_D)
    loc = LocalState(prob.W_tilde @ glob.mu_beta, np.repeat(R_hat[None], n, axis=0))
    return glob, loc


def run_cycles(prob: GLMMProblem, glob: GlobalState, loc: LocalState, config: FitConfig,
               previous_lb: float, trace: list, t0: float, phase: str = "ncvmp"):
    """Full-data cycles from a given state (mutates ``loc``).

    Each cycle performs one local update for every cluster followed by the
    full-data global update, then evaluates the lower bound.  Stops when the
    relative change of the bound falls below ``config.stop_tol``.
    """
    from .stochastic import stochastic_global_update

    batch = prob.batch()
    step = 1.0
    prev = previous_lb
    decreases = []
    converged = False
    n_cycles = 0
    for cycle in range(1, config.max_cycles + 1):
        optimize_locals(prob, glob, loc, batch, np.inf)
        glob = stochastic_global_update(prob, glob, loc, batch, step)
        lb = lower_bound(prob, glob, loc)
        n_cycles = cycle
        trace.append({"phase": phase, "index": cycle, "lower_bound": lb, "step_size": step,
                      "local_iterations": 1, "wall_time": time.perf_counter() - t0})
        if lb < prev - 10.0 and config.damping < 1.0:
            step = config.damping
        if lb < prev:
            decreases.append(len(trace) - 1)
        if abs(lb - prev) / abs(lb) < config.stop_tol:
            converged = True
            # leave the locals optimized at the final global state
            optimize_locals(prob, glob, loc, batch, FINAL_LOCAL_TOL, FINAL_LOCAL_ITER)
            break
        prev = lb
    check_state(glob, loc)
    return glob, converged, n_cycles, decreases


def fit_ncvmp(dataset: Dataset, family, config: FitConfig | None = None, state=None) -> FitResult:
    """Fit a GLMM by nonconjugate variational message passing.

    Parameters
    ----------
    dataset : Dataset
    family : Family or str
    config : FitConfig, optional
    state : tuple, optional
        ``(problem, GlobalState, LocalState)`` to start from instead of the
        GLM-based initialization.

    Returns
    -------
    FitResult
        ``converged`` is False if the stopping rule was not met within
        ``config.max_cycles`` cycles.
    """
    config = config or FitConfig()
    t0 = time.perf_counter()
    if state is None:
        prob, glob, loc = initialize(dataset, family, config)
    else:
        prob, glob, loc = state
        glob, loc = glob.copy(), loc.copy()
    lb0 = lower_bound(prob, glob, loc)
    trace: list[dict] = []
    glob, converged, n_cycles, decreases = run_cycles(prob, glob, loc, config, lb0, trace, t0)
    if not converged:
        warn(f"NCVMP did not converge within {config.max_cycles} cycles", ConvergenceWarning)
    return FitResult(glob, loc, trace, lb0, converged, n_cycles=n_cycles, wall_time=time.perf_counter() - t0,
                     decreases=decreases, problem=prob)
