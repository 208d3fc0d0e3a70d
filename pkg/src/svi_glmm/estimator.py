"""scikit-learn style wrapper around the fitting routines."""

from __future__ import annotations

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data_model import ClusterData, Dataset, Family, validate_dataset
from .diagnostics import ConflictReport, diagnose_all
from .ncvmp import FitConfig, fit_ncvmp
from .stochastic import fit_svi


class VariationalGLMM(RegressorMixin, BaseEstimator):
    """Poisson or logistic GLMM fitted by nonconjugate variational message
    passing.

    Parameters
    ----------
    family : {"poisson", "bernoulli"}
    random_features : list of int, optional
        Columns of ``X`` that also get random slopes.  A random intercept is
        always included.
    fit_intercept : bool
        Prepend a column of ones to ``X``.  Must be True unless ``X``
        already starts with one.
    parametrization : {"partial", "centered", "noncentered"}
    stochastic : bool
        Start with stochastic sweeps and switch to full-data cycles.
    batch_size, step_A, step_alpha, seed, quadrature_order, tuning_init,
    stop_tol, max_cycles : see :class:`svi_glmm.ncvmp.FitConfig`.

    Attributes
    ----------
    coef_ : ndarray of shape (p,)
        Posterior mean of the fixed effects (intercept first when fitted).
    coef_sd_ : ndarray of shape (p,)
        Variational posterior standard deviations (typically too small).
    D_ : ndarray of shape (r, r)
        Posterior mean of the random-effects covariance.
    random_effects_ : dict
        Group label to posterior mean of ``u_i``.
    lower_bound_ : float
    converged_ : bool
    fit_result_ : FitResult
    """

    def __init__(self, family="poisson", random_features=None, fit_intercept=True, parametrization="partial",
                 stochastic=False, batch_size=None, step_A=None, step_alpha=1.0, seed=0, quadrature_order=20,
                 tuning_init="kass", stop_tol=1e-6, max_cycles=1000):
        self.family = family
        self.random_features = random_features
        self.fit_intercept = fit_intercept
        self.parametrization = parametrization
        self.stochastic = stochastic
        self.batch_size = batch_size
        self.step_A = step_A
        self.step_alpha = step_alpha
        self.seed = seed
        self.quadrature_order = quadrature_order
        self.tuning_init = tuning_init
        self.stop_tol = stop_tol
        self.max_cycles = max_cycles

    def _design(self, X):
        if self.fit_intercept:
            X = np.column_stack([np.ones(X.shape[0]), X])
        extra = [j + int(self.fit_intercept) for j in (self.random_features or [])]
        return X, [0] + extra

    def _config(self) -> FitConfig:
        return FitConfig(parametrization=self.parametrization, seed=self.seed, stochastic=self.stochastic,
                         batch_size=self.batch_size, step_A=self.step_A, step_alpha=self.step_alpha,
                         quadrature_order=self.quadrature_order, tuning_init=self.tuning_init,
                         stop_tol=self.stop_tol, max_cycles=self.max_cycles)

    def fit(self, X, y, groups, offset=None):
        """Fit to observations ``(X, y)`` with cluster labels ``groups``."""
        X, y = check_X_y(X, y, y_numeric=True)
        groups = np.asarray(groups)
        if groups.shape != y.shape:
            raise ValueError("groups must have one label per observation")
        family = Family.coerce(self.family)
        Xd, z_idx = self._design(X)
        if offset is not None:
            offset = check_array(np.asarray(offset, dtype=float).reshape(-1, 1)).ravel()
        codes, labels = pd.factorize(groups, sort=False)
        clusters = []
        for k in range(len(labels)):
            rows = np.flatnonzero(codes == k)
            clusters.append(ClusterData(y[rows], Xd[rows], Xd[rows][:, z_idx],
                                        None if offset is None else offset[rows]))
        names = (["(Intercept)"] if self.fit_intercept else []) + [f"x{j}" for j in range(X.shape[1])]
        ds = validate_dataset(Dataset(clusters, ids=list(labels), x_names=names,
                                      z_names=[names[j] for j in z_idx], z_columns=tuple(z_idx)), family)
        cfg = self._config()
        fit = fit_svi(ds, family, cfg) if self.stochastic else fit_ncvmp(ds, family, cfg)

        g = fit.global_state
        self.fit_result_ = fit
        self.coef_ = g.mu_beta.copy()
        self.coef_sd_ = np.sqrt(np.diag(g.Sigma_beta_q))
        self.D_ = g.D_mean if g.nu_D > ds.r + 1 else g.S_D / g.nu_D
        u = fit.local_state.mu_alpha - fit.problem.W_tilde @ g.mu_beta
        self.random_effects_ = dict(zip(labels, u))
        self.lower_bound_ = fit.lower_bound
        self.converged_ = fit.converged
        self.n_iter_ = fit.n_cycles
        self.n_features_in_ = X.shape[1]
        self._z_idx = z_idx
        return self

    def predict(self, X, groups=None, offset=None):
        """Plug-in mean response ``g^{-1}(x^T beta + z^T E[u_i])``.

        Unknown or missing groups use ``u = 0``.
        """
        check_is_fitted(self, "coef_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        Xd, z_idx = self._design(X)
        eta = Xd @ self.coef_
        if groups is not None:
            r = len(z_idx)
            U = np.array([self.random_effects_.get(gr, np.zeros(r)) for gr in np.asarray(groups)])
            eta = eta + np.einsum("ij,ij->i", Xd[:, z_idx], U)
        lo = 0.0 if offset is None else np.log(np.asarray(offset, dtype=float))
        return Family.coerce(self.family).mean(eta, lo)

    def diagnose(self, level: float = 0.05, side: str = "two_sided") -> ConflictReport:
        """Conflict p-values for every group."""
        check_is_fitted(self, "coef_")
        return diagnose_all(self.fit_result_, level=level, side=side)
