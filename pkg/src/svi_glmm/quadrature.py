"""Gauss-Hermite evaluation of Gaussian expectations of the logistic cumulant.

``b_integral(r, mu, sigma)`` returns ``E[b^(r)(mu + sigma * Z)]`` with
``Z ~ N(0, 1)`` and ``b(x) = log(1 + exp(x))``.  These are the only
intractable expectations in the Bernoulli lower bound and its updates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from functools import lru_cache

from numpy.polynomial.hermite import hermgauss
from scipy.special import expit, roots_hermite

SQRT_PI = np.sqrt(np.pi)
MAX_ORDER = 100
# the integrands have poles at distance pi / (sigma sqrt 2) from the real
# axis in the rule's variable, so a fixed rule loses accuracy as sigma grows;
# about REFINE_FACTOR * sigma**2 nodes keep the error near 1e-10
REFINE_FACTOR = 18.0
MAX_REFINED_ORDER = 4096


@dataclass(frozen=True)
class QuadratureRule:
    """Physicists' Gauss-Hermite rule (weight function ``exp(-x**2)``)."""

    order: int
    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.nodes.setflags(write=False)
        self.weights.setflags(write=False)


def hermite_rule(order: int = 20) -> QuadratureRule:
    """Build the ``order``-point Gauss-Hermite rule.

    Nodes are the roots of the Hermite polynomial ``H_order`` and the
    weights sum to ``sqrt(pi)``.
    """
    if not isinstance(order, (int, np.integer)) or not 1 <= order <= MAX_ORDER:
        raise ValueError(f"quadrature order must be an integer in [1, {MAX_ORDER}], got {order!r}")
    nodes, weights = hermgauss(int(order))
    # enforce exact symmetry of the node set
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    return QuadratureRule(int(order), nodes, weights)


def b_derivative(r: int, x):
    """r-th derivative of ``log(1 + exp(x))``, r in {0, 1, 2, 3}."""
    x = np.asarray(x, dtype=float)
    if r == 0:
        return np.logaddexp(0.0, x)
    s = expit(x)
    if r == 1:
        return s
    sc = expit(-x)
    if r == 2:
        return s * sc
    if r == 3:
        return s * sc * (sc - s)
    raise ValueError(f"derivative order must be 0..3, got {r}")


_DEFAULT_RULE: QuadratureRule | None = None


def default_rule() -> QuadratureRule:
    global _DEFAULT_RULE
    if _DEFAULT_RULE is None:
        _DEFAULT_RULE = hermite_rule(20)
    return _DEFAULT_RULE


@lru_cache(maxsize=None)
def _refined_rule(order: int):
    nodes, weights = roots_hermite(order)
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def _levels(sigma, order):
    """Node count per element: ``order * 2**k``, the smallest such count
    covering ``REFINE_FACTOR * sigma**2`` (capped)."""
    need = REFINE_FACTOR * sigma**2 / order
    k = np.ceil(np.log2(np.maximum(need, 1.0))).astype(int)
    return np.minimum(order * 2**k, max(order, MAX_REFINED_ORDER))


def _gauss_expect(fns, mu, sigma, rule):
    """``E[fn(mu + sigma Z)]`` for each ``fn`` in ``fns`` (flat arrays)."""
    levels = _levels(sigma, rule.order)
    outs = [np.empty(mu.shape) for _ in fns]
    for lv in np.unique(levels):
        nodes, weights = (rule.nodes, rule.weights) if lv == rule.order else _refined_rule(int(lv))
        sel = levels == lv
        pts = mu[sel, None] + (np.sqrt(2.0) * sigma[sel])[:, None] * nodes
        w = weights / SQRT_PI
        for out, fn in zip(outs, fns):
            # fixed-order reduction so scalar and vector calls agree bitwise
            out[sel] = (fn(pts) * w).sum(axis=-1)
    return outs


def b_integral_vec(r: int, mu, sigma, rule: QuadratureRule | None = None) -> np.ndarray:
    """Elementwise ``E[b^(r)(mu + sigma * Z)]`` for arrays ``mu`` and ``sigma``.

    Uses the change of variables ``x = mu + sqrt(2) * sigma * t`` on a
    Gauss-Hermite rule.  Elements with large ``sigma`` switch to a finer
    rule (``rule.order * 2**k`` nodes) so the accuracy does not degrade.
    Entries with ``sigma == 0`` return ``b^(r)(mu)`` exactly.
    """
    if rule is None:
        rule = default_rule()
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if mu.shape != sigma.shape:
        raise ValueError(f"mu and sigma must have equal shapes, got {mu.shape} and {sigma.shape}")
    if np.any(sigma < 0):
        raise ValueError("sigma must be nonnegative")
    if r not in (0, 1, 2, 3):
        raise ValueError(f"derivative order must be 0..3, got {r}")
    (out,) = _gauss_expect([lambda x: b_derivative(r, x)], mu.ravel(), sigma.ravel(), rule)
    out = out.reshape(mu.shape)
    zero = sigma == 0
    if np.any(zero):
        out = np.where(zero, b_derivative(r, mu), out)
    if r == 2:
        # rounding can push the average a hair above the pointwise maximum
        out = np.minimum(out, 0.25)
    return out


def b_integral(r: int, mu: float, sigma: float, rule: QuadratureRule | None = None) -> float:
    """Scalar version of :func:`b_integral_vec`."""
    return float(b_integral_vec(r, np.asarray(mu, dtype=float), np.asarray(sigma, dtype=float), rule))


def logistic_moments(mu, sigma, rule: QuadratureRule | None = None):
    """``(E[b'(eta)], E[b''(eta)])`` for ``eta ~ N(mu, sigma^2)`` sharing
    one pass over the quadrature points."""
    if rule is None:
        rule = default_rule()
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    g, F = _gauss_expect([expit, lambda x: b_derivative(2, x)], mu.ravel(), sigma.ravel(), rule)
    return g.reshape(mu.shape), np.minimum(F, 0.25).reshape(mu.shape)
