"""Prior-likelihood conflict diagnostics from a converged fit.

At a fixed point of the local update the natural parameters of
``q(alpha_tilde_i)`` split into a prior message (the predictive
distribution of a replicate ``alpha_tilde_i^rep`` given the other clusters)
and a likelihood message (a Gaussian summary of cluster ``i``'s own data).
Comparing the two gives conflict p-values that screen for divergent units.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2, norm

from .data_model import ClusterData, ClusterDesign, Family
from .ncvmp import (
    FitResult,
    GlobalState,
    LocalState,
    _eta_moments,
    _g_F,
    _single,
    local_update_batch,
    spd_inverse,
)
from .quadrature import QuadratureRule, hermite_rule

SIDES = ("lower", "upper", "two_sided")
STALE_TOL = 1e-4
P_CLIP = 1e-10


class StaleLocalsError(RuntimeError):
    """Local factors are not optimized at the current global state."""


@dataclass
class MessagePair:
    """Prior and likelihood messages for one cluster.

    The likelihood message is kept on the precision scale; ``mu_lik`` is
    ``None`` when ``Sigma_lik_precision`` is singular, in which case only
    ``lik_natural = Sigma_lik_precision @ mu_lik`` is available.
    """

    mu_rep: np.ndarray
    Sigma_rep: np.ndarray
    mu_lik: np.ndarray | None
    Sigma_lik_precision: np.ndarray
    lik_natural: np.ndarray

    @property
    def singular(self) -> bool:
        return self.mu_lik is None

    def diff(self):
        """Mean and covariance of ``alpha_rep - alpha_lik``."""
        if self.singular:
            raise ValueError("likelihood precision is singular; the conflict statistic is undefined")
        cov = self.Sigma_rep + np.linalg.inv(self.Sigma_lik_precision)
        return self.mu_rep - self.mu_lik, 0.5 * (cov + cov.T)


def prior_message(design: ClusterDesign, glob: GlobalState):
    """``(W_tilde_i mu_beta, S_D / nu_D)``."""
    return design.W_tilde @ glob.mu_beta, glob.S_D / glob.nu_D


def likelihood_message(cluster: ClusterData, design: ClusterDesign, glob: GlobalState, local_i, family,
                       rule: QuadratureRule | None = None):
    """Likelihood message ``(mu_lik, precision, natural)``.

    ``precision = Z^T F Z`` and ``natural = precision @ mu + Z^T (y - g)``;
    ``mu_lik`` solves ``precision @ mu_lik = natural`` and is ``None`` when
    the precision is numerically singular.
    """
    family = Family.coerce(family)
    rule = rule or hermite_rule(20)
    mu, Sig = (np.asarray(a, dtype=float) for a in local_i)
    y, lo, V, Z, Wt, seg, owner = _single(cluster, design)
    r = Z.shape[1]
    m, v = _eta_moments(V, Z, owner, glob, mu.reshape(1, r), Sig.reshape(1, r, r))
    g, F = _g_F(family, rule, lo, m, v)
    prec = (Z * F[:, None]).T @ Z
    prec = 0.5 * (prec + prec.T)
    natural = prec @ mu + Z.T @ (y - g)
    mu_lik = None
    if np.linalg.matrix_rank(prec) == r and np.linalg.cond(prec) < 1e12:
        mu_lik = np.linalg.solve(prec, natural)
    return mu_lik, prec, natural


def message_pair(cluster, design, glob, local_i, family, rule=None) -> MessagePair:
    mu_rep, Sig_rep = prior_message(design, glob)
    mu_lik, prec, nat = likelihood_message(cluster, design, glob, local_i, family, rule)
    return MessagePair(mu_rep, Sig_rep, mu_lik, prec, nat)


def conflict_pvalue_scalar(pair: MessagePair, side: str = "two_sided") -> float:
    """Normal-approximation conflict p-value for a scalar random effect.

    ``lower = P(diff <= 0) = Phi(-d / s)``, ``upper = Phi(d / s)`` and
    ``two_sided = 2 Phi(-|d| / s)``.  Each tail is evaluated directly so
    small p-values keep full relative accuracy.
    """
    if side not in SIDES:
        raise ValueError(f"side must be one of {SIDES}")
    if pair.mu_rep.size != 1:
        raise ValueError("scalar conflict p-values need r = 1")
    d, cov = pair.diff()
    z = d[0] / np.sqrt(cov[0, 0])
    if side == "lower":
        return float(norm.cdf(-z))
    if side == "upper":
        return float(norm.cdf(z))
    return float(min(1.0, 2.0 * norm.cdf(-abs(z))))


def conflict_pvalue_multivariate(pair: MessagePair) -> tuple[float, float]:
    """``Delta = d^T Cov^{-1} d`` and ``P(chi2_r > Delta)``."""
    d, cov = pair.diff()
    Delta = float(d @ np.linalg.solve(cov, d))
    Delta = max(Delta, 0.0)
    return Delta, float(chi2.sf(Delta, d.size))


def zscore_discrepancy(p_ref, p_method) -> float:
    """Mean absolute difference of normal scores ``Phi^{-1}(p)``."""
    p_ref = np.asarray(p_ref, dtype=float)
    p_method = np.asarray(p_method, dtype=float)
    if p_ref.shape != p_method.shape:
        raise ValueError(f"length mismatch: {p_ref.shape} vs {p_method.shape}")
    both = np.concatenate([p_ref.ravel(), p_method.ravel()])
    if np.any((both < P_CLIP) | (both > 1 - P_CLIP)):
        warnings.warn(f"p-values clipped to [{P_CLIP}, {1 - P_CLIP}]", RuntimeWarning, stacklevel=2)
    p_ref = np.clip(p_ref, P_CLIP, 1 - P_CLIP)
    p_method = np.clip(p_method, P_CLIP, 1 - P_CLIP)
    return float(np.mean(np.abs(norm.ppf(p_ref) - norm.ppf(p_method))))


@dataclass
class ClusterConflict:
    cluster_id: object
    pair: MessagePair
    delta: float | None
    p_chi2: float | None
    p_lower: float | None = None
    p_upper: float | None = None
    p_two_sided: float | None = None
    p: float | None = None
    divergent: bool = False

    def to_dict(self) -> dict:
        out = {"cluster": self.cluster_id, "delta": self.delta, "p": self.p, "p_chi2": self.p_chi2,
               "p_lower": self.p_lower, "p_upper": self.p_upper, "p_two_sided": self.p_two_sided,
               "divergent": self.divergent, "undefined": self.pair.singular}
        return out


@dataclass
class ConflictReport:
    """Per-cluster conflict results sorted by ascending p-value (undefined
    values last)."""

    entries: list[ClusterConflict]
    level: float
    side: str
    r: int
    meta: dict = field(default_factory=dict)

    @property
    def flagged(self) -> list:
        return [e.cluster_id for e in self.entries if e.divergent]

    def pvalues(self, order=None) -> np.ndarray:
        """p-values, optionally in the order of the given cluster ids."""
        if order is None:
            return np.array([np.nan if e.p is None else e.p for e in self.entries])
        lookup = {e.cluster_id: e.p for e in self.entries}
        return np.array([np.nan if lookup[c] is None else lookup[c] for c in order])

    def to_records(self) -> list[dict]:
        return [e.to_dict() for e in self.entries]

    def to_json(self) -> str:
        doc = {"level": self.level, "side": self.side, "r": self.r, "meta": self.meta,
               "clusters": self.to_records()}
        return json.dumps(doc, sort_keys=True, default=_jsonable)

    def write_csv(self, path):
        recs = self.to_records()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(recs[0]) if recs else ["cluster"])
            w.writeheader()
            w.writerows(recs)

    def write_json(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


def _rel_change(a, b) -> float:
    den = np.linalg.norm(b)
    num = np.linalg.norm(b - a)
    return num / den if den > 0 else (0.0 if num == 0 else np.inf)


def finalize_locals(fit: FitResult, tol: float = 1e-13, max_iter: int = 500,
                    stale_tol: float | None = STALE_TOL) -> LocalState:
    """Locals re-optimized at the fitted global state (the fit is not
    modified).

    Raises
    ------
    StaleLocalsError
        If ``stale_tol`` is given and a single extra update moves the means
        by more than ``stale_tol`` relative.
    """
    prob, glob = fit.problem, fit.global_state
    if prob is None:
        raise ValueError("fit carries no problem data")
    loc = fit.local_state.copy()
    batch = prob.batch()
    for it in range(max_iter):
        mu, Sig = local_update_batch(prob, glob, loc, batch)
        rel = _rel_change(loc.mu_alpha, mu)
        if it == 0 and stale_tol is not None and rel > stale_tol:
            raise StaleLocalsError(
                f"local factors are stale (one update moves them by {rel:.2e} relative > {stale_tol}); "
                "re-optimize the locals (run full-data cycles) before diagnosing")
        loc.mu_alpha[:], loc.Sigma_alpha[:] = mu, Sig
        if rel < tol:
            break
    return loc


def diagnose_all(fit: FitResult, level: float = 0.05, side: str = "two_sided",
                 stale_tol: float | None = STALE_TOL) -> ConflictReport:
    """Conflict p-values for every cluster of a converged fit.

    For ``r = 1`` the flag uses the scalar p-value on ``side``; for
    ``r > 1`` it uses the chi-square p-value.  Clusters with a singular
    likelihood precision get undefined p-values and are never flagged.
    """
    if side not in SIDES:
        raise ValueError(f"side must be one of {SIDES}")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    prob, glob = fit.problem, fit.global_state
    loc = finalize_locals(fit, stale_tol=stale_tol)
    entries = []
    for i, cl in enumerate(prob.dataset.clusters):
        pair = message_pair(cl, prob.designs[i], glob, loc.entry(i), prob.family, prob.rule)
        e = ClusterConflict(prob.dataset.ids[i], pair, None, None)
        if not pair.singular:
            e.delta, e.p_chi2 = conflict_pvalue_multivariate(pair)
            if prob.r == 1:
                e.p_lower = conflict_pvalue_scalar(pair, "lower")
                e.p_upper = conflict_pvalue_scalar(pair, "upper")
                e.p_two_sided = conflict_pvalue_scalar(pair, "two_sided")
                e.p = {"lower": e.p_lower, "upper": e.p_upper, "two_sided": e.p_two_sided}[side]
            else:
                e.p = e.p_chi2
            e.divergent = e.p < level
        entries.append(e)
    entries.sort(key=lambda e: (e.p is None, np.inf if e.p is None else e.p))
    return ConflictReport(entries, level, side, prob.r)
