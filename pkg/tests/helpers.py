"""Shared data builders for the test suite."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from svi_glmm.cli import ModelConfig, ingest_csv
from svi_glmm.data_model import ClusterData, Dataset

DATA = Path(__file__).parent / "data"


def epilepsy(model: int) -> Dataset:
    cfg = ModelConfig.from_dict(json.loads((DATA / f"epilepsy_model{model}.json").read_text()))
    return ingest_csv(DATA / "epil.csv", cfg)


def epilepsy_config(model: int) -> ModelConfig:
    return ModelConfig.from_dict(json.loads((DATA / f"epilepsy_model{model}.json").read_text()))


def poisson_ri(n=20, k=5, seed=0, beta=(0.5, 0.3), sd=0.5, offset=False) -> Dataset:
    """Poisson random-intercept data with one general covariate."""
    rng = np.random.default_rng(seed)
    clusters = []
    for _ in range(n):
        X = np.column_stack([np.ones(k), rng.normal(size=k)])
        E = rng.uniform(0.5, 2.0, size=k) if offset else None
        eta = X @ np.asarray(beta) + sd * rng.normal()
        mu = np.exp(eta) * (E if offset else 1.0)
        clusters.append(ClusterData(rng.poisson(mu).astype(float), X, X[:, [0]], E))
    return Dataset(clusters)


def bernoulli_ri(n=5, k=6, seed=0, beta=(-0.3, 0.8, 0.5), sd=1.0) -> Dataset:
    """Logistic random-intercept data with a general and a subject-level
    covariate."""
    rng = np.random.default_rng(seed)
    clusters = []
    for _ in range(n):
        X = np.column_stack([np.ones(k), rng.normal(size=k), np.full(k, rng.normal())])
        eta = X @ np.asarray(beta) + sd * rng.normal()
        y = rng.binomial(1, 1.0 / (1.0 + np.exp(-eta))).astype(float)
        clusters.append(ClusterData(y, X, X[:, [0]]))
    return Dataset(clusters)


def bernoulli_slope(n=30, k=8, seed=0) -> Dataset:
    """Logistic random intercept and slope data (r = 2)."""
    rng = np.random.default_rng(seed)
    L = np.linalg.cholesky(np.array([[1.0, 0.2], [0.2, 0.5]]))
    clusters = []
    for _ in range(n):
        t = np.linspace(-1, 1, k)
        X = np.column_stack([np.ones(k), t, np.full(k, rng.binomial(1, 0.5))])
        u = L @ rng.normal(size=2)
        eta = X @ np.array([0.2, 0.7, -0.5]) + X[:, :2] @ u
        y = rng.binomial(1, 1.0 / (1.0 + np.exp(-eta))).astype(float)
        clusters.append(ClusterData(y, X, X[:, :2]))
    return Dataset(clusters)


def polypharmacy_like(n=500, k=7, seed=2024) -> Dataset:
    """Logistic random-intercept data shaped like a 500 subject x 7 year
    panel: subject-level gender and race, yearly age, three visit-count
    dummies and an inpatient indicator."""
    rng = np.random.default_rng(seed)
    beta = np.array([-4.0, 0.6, -0.7, 0.05, 0.4, 0.9, 1.1, 0.8])
    clusters = []
    for _ in range(n):
        g, race = rng.binomial(1, 0.4), rng.binomial(1, 0.2)
        age = rng.integers(2, 14) + np.arange(k)
        mhv = rng.choice(4, size=k, p=[0.35, 0.35, 0.2, 0.1])
        inpt = rng.binomial(1, 0.15, size=k)
        X = np.column_stack([np.ones(k), np.full(k, g), np.full(k, race), age,
                             mhv == 1, mhv == 2, mhv == 3, inpt]).astype(float)
        eta = X @ beta + 2.4 * rng.normal()
        clusters.append(ClusterData(rng.binomial(1, 1.0 / (1.0 + np.exp(-eta))).astype(float), X, X[:, [0]]))
    names = ["(Intercept)", "Gender", "Race", "Age", "MHV_1", "MHV_2", "MHV_3", "INPTMHV"]
    return Dataset(clusters, x_names=names, z_names=names[:1])
