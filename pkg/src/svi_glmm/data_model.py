"""GLMM data containers, priors, pooled-GLM initialization and the
partially noncentered parametrization.

Each cluster ``i`` has responses ``y_i``, a fixed-effects design ``X_i``
(``n_i x p``), a random-effects design ``Z_i`` (``n_i x r``) whose columns
are a subset of the columns of ``X_i`` (the first one being the intercept)
and, for Poisson responses, positive exposures ``E_i``.

The columns of ``X`` are split into three groups:

* Z-columns, which also appear in ``Z``;
* subject-specific columns, constant within every cluster;
* general columns, everything else.

With ``beta_c`` the coefficients of the first two groups, the random
effects are written ``alpha_i = C_i beta_c + u_i`` and reparametrized as
``alpha_tilde_i = alpha_i - W_i C_i beta_c``.  The linear predictor becomes
``eta_i = V_i beta + Z_i alpha_tilde_i`` with
``alpha_tilde_i ~ N(W_tilde_i beta, D)``.

``W_tilde_i`` and ``V_i`` are stored in the original column order of
``X`` (the partitioned block form is a column permutation of it).
"""

from __future__ import annotations

import enum
import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

ETA_CLIP = 30.0


class DataError(ValueError):
    """Input data violate the model's structural assumptions."""


class ConvergenceWarning(UserWarning):
    pass


class ConvergenceError(RuntimeError):
    pass


class Family(str, enum.Enum):
    BERNOULLI = "bernoulli"
    POISSON = "poisson"

    @classmethod
    def coerce(cls, value) -> "Family":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown family {value!r}; expected 'bernoulli' or 'poisson'") from None

    def mean(self, eta, log_offset=0.0):
        """Conditional mean ``g^{-1}(eta)``, offset included for Poisson."""
        eta = np.clip(eta, -ETA_CLIP, ETA_CLIP)
        if self is Family.POISSON:
            return np.exp(log_offset + eta)
        return 1.0 / (1.0 + np.exp(-eta))

    def weight(self, mu):
        """GLM working weight ``1 / (v(mu) g'(mu)^2)`` for the canonical link."""
        if self is Family.POISSON:
            return mu
        return mu * (1.0 - mu)


class ParametrizationKind(str, enum.Enum):
    CENTERED = "centered"
    NONCENTERED = "noncentered"
    PARTIAL = "partial"

    @classmethod
    def coerce(cls, value) -> "ParametrizationKind":
        if isinstance(value, cls):
            return value
        v = str(value).lower().replace("-", "").replace("_", "")
        aliases = {"partiallynoncentered": "partial", "pnc": "partial", "nc": "noncentered", "c": "centered"}
        v = aliases.get(v, v)
        try:
            return cls(v)
        except ValueError:
            raise ValueError(f"unknown parametrization {value!r}") from None


@dataclass
class ClusterData:
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    offset: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        if self.X.shape[0] != self.y.size and self.y.size == 1:
            self.X = self.X.reshape(1, -1)
        if self.Z.shape[0] != self.y.size and self.y.size == 1:
            self.Z = self.Z.reshape(1, -1)
        if self.offset is not None:
            self.offset = np.asarray(self.offset, dtype=float).reshape(-1)

    @property
    def n_obs(self) -> int:
        return self.y.size

    @property
    def log_offset(self) -> np.ndarray:
        if self.offset is None:
            return np.zeros(self.n_obs)
        # invalid offsets are reported by validate_dataset, not here
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.log(self.offset)


@dataclass
class Dataset:
    """Ordered clusters sharing the same fixed and random effect dimensions.

    ``z_columns[k]`` is the index of the ``X`` column equal to the k-th
    column of ``Z``; it is filled in by :func:`validate_dataset`.
    """

    clusters: list[ClusterData]
    ids: list = field(default_factory=list)
    x_names: list[str] = field(default_factory=list)
    z_names: list[str] = field(default_factory=list)
    z_columns: tuple[int, ...] | None = None

    def __post_init__(self):
        if not self.ids:
            self.ids = list(range(1, len(self.clusters) + 1))
        if self.clusters and not self.x_names:
            self.x_names = [f"x{j}" for j in range(self.p)]
        if self.clusters and not self.z_names:
            self.z_names = [f"z{j}" for j in range(self.r)]

    @property
    def n(self) -> int:
        return len(self.clusters)

    @property
    def p(self) -> int:
        return self.clusters[0].X.shape[1]

    @property
    def r(self) -> int:
        return self.clusters[0].Z.shape[1]

    @property
    def n_obs(self) -> int:
        return sum(c.n_obs for c in self.clusters)

    def stacked(self):
        """Pooled ``(y, X, log_offset)`` over all clusters."""
        pk = self.packed()
        return pk.y, pk.X, pk.log_offset

    def packed(self) -> "PackedData":
        """Row-stacked arrays (computed once and cached)."""
        if getattr(self, "_packed", None) is None:
            self._packed = PackedData.from_clusters(self.clusters)
        return self._packed


@dataclass
class PackedData:
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    log_offset: np.ndarray
    sizes: np.ndarray
    starts: np.ndarray
    owner: np.ndarray
    has_offset: np.ndarray

    @classmethod
    def from_clusters(cls, clusters):
        sizes = np.array([c.n_obs for c in clusters], dtype=np.int64)
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        return cls(
            y=np.concatenate([c.y for c in clusters]),
            X=np.vstack([c.X for c in clusters]),
            Z=np.vstack([c.Z for c in clusters]),
            log_offset=np.concatenate([c.log_offset for c in clusters]),
            sizes=sizes,
            starts=starts,
            owner=np.repeat(np.arange(len(clusters)), sizes),
            has_offset=np.array([c.offset is not None for c in clusters]),
        )

    def cluster_sums(self, values):
        """Sum ``values`` (rows first) within each cluster."""
        return np.add.reduceat(values, self.starts, axis=0)


@dataclass
class PriorSpec:
    """``beta ~ N(0, Sigma_beta)`` and ``D ~ IW(nu, S)``."""

    Sigma_beta: np.ndarray
    nu: float
    S: np.ndarray
    c: float = 1.0

    def __post_init__(self):
        self.Sigma_beta = np.atleast_2d(np.asarray(self.Sigma_beta, dtype=float))
        self.S = np.atleast_2d(np.asarray(self.S, dtype=float))
        self.nu = float(self.nu)
        r = self.S.shape[0]
        for name, M in (("Sigma_beta", self.Sigma_beta), ("S", self.S)):
            if M.shape[0] != M.shape[1] or not np.allclose(M, M.T):
                raise ValueError(f"{name} must be a symmetric matrix")
            try:
                np.linalg.cholesky(M)
            except np.linalg.LinAlgError:
                raise ValueError(f"{name} must be positive definite") from None
        if self.nu < r:
            raise ValueError(f"inverse-Wishart degrees of freedom nu={self.nu} must be >= r={r}")


@dataclass(frozen=True)
class ColumnPartition:
    z_cols: tuple[int, ...]
    s_cols: tuple[int, ...]
    g_cols: tuple[int, ...]

    @property
    def c_cols(self) -> tuple[int, ...]:
        return self.z_cols + self.s_cols


@dataclass
class ClusterDesign:
    """Parametrization artifacts of one cluster.

    ``C`` is ``r x (r + s)`` and maps ``beta_c`` (Z-column then
    subject-specific coefficients) into the random-effects space.
    ``W_tilde`` (``r x p``) and ``V`` (``n_i x p``) act on ``beta`` in the
    original column order of ``X``.
    """

    C: np.ndarray
    W: np.ndarray
    W_tilde: np.ndarray
    V: np.ndarray
    partition: ColumnPartition

    @property
    def C_full(self) -> np.ndarray:
        """``C`` embedded as an ``r x p`` matrix acting on the full ``beta``."""
        r = self.C.shape[0]
        p = self.V.shape[1]
        out = np.zeros((r, p))
        out[:, list(self.partition.c_cols)] = self.C
        return out


# --------------------------------------------------------------------------
# validation
# --------------------------------------------------------------------------


def validate_dataset(raw: Dataset, family) -> Dataset:
    """Check the structural assumptions of the GLMM and resolve which
    column of ``X`` each column of ``Z`` duplicates.

    Raises
    ------
    DataError
        On any violated invariant.
    """
    family = Family.coerce(family)
    if raw.n < 1:
        raise DataError("dataset has no clusters")
    p, r = raw.p, raw.r
    if r < 1:
        raise DataError("at least one random effect (the intercept) is required")
    for i, cl in enumerate(raw.clusters):
        if cl.n_obs == 0:
            raise DataError(f"cluster {raw.ids[i]} is empty")
        if cl.X.shape != (cl.n_obs, p) or cl.Z.shape != (cl.n_obs, r):
            raise DataError(f"cluster {raw.ids[i]}: design shapes {cl.X.shape}, {cl.Z.shape} "
                            f"inconsistent with p={p}, r={r}")
    pk = PackedData.from_clusters(raw.clusters)

    def fail(bad_rows, msg):
        if np.any(bad_rows):
            lab = raw.ids[pk.owner[np.argmax(bad_rows)]]
            raise DataError(f"cluster {lab}: {msg}")

    fail(~(np.isfinite(pk.y) & np.isfinite(pk.X).all(1) & np.isfinite(pk.Z).all(1)), "non-finite values")
    fail(pk.Z[:, 0] != 1.0, "first column of Z must be all ones")
    if family is Family.BERNOULLI:
        fail((pk.y != 0.0) & (pk.y != 1.0), "Bernoulli responses must be 0 or 1")
        if pk.has_offset.any():
            raise DataError("offsets are only allowed for Poisson responses")
    else:
        fail((pk.y < 0) | (pk.y != np.round(pk.y)), "Poisson responses must be nonnegative integers")
        if pk.has_offset.any():
            for i in np.flatnonzero(pk.has_offset):
                cl = raw.clusters[i]
                if cl.offset.shape != cl.y.shape:
                    raise DataError(f"cluster {raw.ids[i]}: offset length mismatch")
                if np.any(~(cl.offset > 0)):
                    raise DataError(f"cluster {raw.ids[i]}: offsets must be strictly positive")
    # resolve Z-in-X correspondence; must hold in every cluster
    candidates = []
    for k in range(r):
        ok = [j for j in range(p) if np.array_equal(pk.Z[:, k], pk.X[:, j])]
        if raw.z_columns is not None:
            j = raw.z_columns[k]
            if j not in ok:
                raise DataError(f"Z column {k} does not equal declared X column {j}")
            ok = [j]
        if not ok:
            raise DataError(f"Z column {k} ({raw.z_names[k]}) does not match any column of X")
        candidates.append(ok)
    z_columns = []
    for ok in candidates:
        free = [j for j in ok if j not in z_columns]
        if not free:
            raise DataError("two Z columns map to the same X column")
        z_columns.append(free[0])
    out = Dataset(
        clusters=raw.clusters,
        ids=list(raw.ids),
        x_names=list(raw.x_names),
        z_names=list(raw.z_names),
        z_columns=tuple(z_columns),
    )
    out._packed = pk
    return out


def _constant_within(pk: "PackedData", j: int) -> np.ndarray:
    """Per-cluster flag: column ``j`` of ``X`` is constant in the cluster."""
    col = pk.X[:, j]
    same = col == col[pk.starts[pk.owner]]
    return np.logical_and.reduceat(same, pk.starts)


def resolve_partition(dataset: Dataset, subject_specific: Sequence[int] | None = None) -> ColumnPartition:
    """Classify the columns of ``X``.

    Subject-specific columns are auto-detected (constant within every
    cluster and not a Z column) unless given explicitly.
    """
    if dataset.z_columns is None:
        raise ValueError("dataset must be validated first")
    z_cols = tuple(dataset.z_columns)
    rest = [j for j in range(dataset.p) if j not in z_cols]
    if subject_specific is None:
        pk = dataset.packed()
        s_cols = tuple(j for j in rest if _constant_within(pk, j).all())
    else:
        s_cols = tuple(int(j) for j in subject_specific)
        for j in s_cols:
            if j in z_cols:
                raise DataError(f"column {j} is a Z column and cannot be subject specific")
            const = _constant_within(dataset.packed(), j)
            if not const.all():
                lab = dataset.ids[int(np.argmin(const))]
                raise DataError(f"column {j} declared subject specific but varies within cluster {lab}")
    g_cols = tuple(j for j in rest if j not in s_cols)
    return ColumnPartition(z_cols, s_cols, g_cols)


# --------------------------------------------------------------------------
# pooled GLM
# --------------------------------------------------------------------------


def _glm_loglik_parts(family: Family, y, X, log_offset, beta):
    eta = np.clip(X @ beta, -ETA_CLIP, ETA_CLIP)
    mu = family.mean(eta, log_offset)
    w = family.weight(mu)
    grad = X.T @ (y - mu)
    info = (X * w[:, None]).T @ X
    return mu, grad, info


def fit_pooled_glm(dataset: Dataset, family, tol: float = 1e-8, max_iter: int = 50):
    """Maximum likelihood fit of the pooled GLM (random effects set to zero).

    Iteratively reweighted least squares, stopping when the relative change
    of the coefficient vector drops below ``tol``.

    Returns
    -------
    beta_hat : ndarray (p,)
    cov_hat : ndarray (p, p)
        Inverse observed Fisher information at ``beta_hat``.
    """
    family = Family.coerce(family)
    y, X, lo = dataset.stacked()
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise DataError("pooled fixed-effects design is rank deficient")
    # start from the intercept-style solution used by standard GLM software
    mu = (y + y.mean()) / 2.0 if family is Family.POISSON else (y + 0.5) / 2.0
    if family is Family.POISSON:
        z = np.log(np.maximum(mu, 1e-8)) - lo
        w = mu
    else:
        z = np.log(mu / (1 - mu))
        w = mu * (1 - mu)
    beta = np.linalg.lstsq(X * np.sqrt(w)[:, None], z * np.sqrt(w), rcond=None)[0]
    converged = False
    for _ in range(max_iter):
        mu, grad, info = _glm_loglik_parts(family, y, X, lo, beta)
        step = np.linalg.solve(info, grad)
        new = beta + step
        change = np.linalg.norm(new - beta) / max(np.linalg.norm(new), 1e-12)
        beta = new
        if not np.all(np.isfinite(beta)):
            break
        if change < tol:
            converged = True
            break
    if not converged:
        raise ConvergenceError("pooled GLM (IRLS) did not converge")
    _, _, info = _glm_loglik_parts(family, y, X, lo, beta)
    cov = np.linalg.inv(info)
    return beta, 0.5 * (cov + cov.T)


def glm_weight_matrix(cluster: ClusterData, family, beta_hat) -> np.ndarray:
    """Diagonal of the GLM weight matrix at ``beta_hat`` with ``u_i = 0``."""
    family = Family.coerce(family)
    mu = family.mean(cluster.X @ np.asarray(beta_hat, dtype=float), cluster.log_offset)
    return family.weight(mu)


def kass_prior_guess(dataset: Dataset, family, beta_hat, c: float = 1.0) -> np.ndarray:
    """Prior guess ``R_hat = c * (mean_i Z_i^T M_i Z_i)^{-1}`` for ``D``."""
    family = Family.coerce(family)
    pk = dataset.packed()
    w = family.weight(family.mean(pk.X @ np.asarray(beta_hat, dtype=float), pk.log_offset))
    acc = (pk.Z * w[:, None]).T @ pk.Z / dataset.n
    try:
        L = np.linalg.cholesky(acc)
    except np.linalg.LinAlgError:
        raise DataError("averaged Z^T M Z is singular; check the rank of the random-effects design") from None
    Linv = np.linalg.inv(L)
    R = c * (Linv.T @ Linv)
    return 0.5 * (R + R.T)


def default_prior(dataset: Dataset, family, beta_hat, c: float = 1.0, sigma_beta: float = 1000.0) -> PriorSpec:
    """Vague Gaussian prior on ``beta`` and the default conjugate
    inverse-Wishart prior ``IW(r, r * R_hat)`` on ``D``."""
    r = dataset.r
    R = kass_prior_guess(dataset, family, beta_hat, c)
    return PriorSpec(Sigma_beta=sigma_beta * np.eye(dataset.p), nu=float(r), S=r * R, c=c)


# --------------------------------------------------------------------------
# partial noncentering
# --------------------------------------------------------------------------


def tuning_matrix(cluster: ClusterData, family, D, eta_i=None) -> np.ndarray:
    """``W_i = (Z_i^T Q_i Z_i + D^{-1})^{-1} D^{-1}``.

    ``Q_i = diag(y_i)`` for Poisson and
    ``diag(exp(eta_i) / (1 + exp(eta_i))^2)`` for Bernoulli.
    """
    family = Family.coerce(family)
    D = np.atleast_2d(np.asarray(D, dtype=float))
    if family is Family.POISSON:
        q = cluster.y
    else:
        if eta_i is None:
            raise ValueError("Bernoulli tuning matrix needs the linear predictor")
        e = np.clip(np.asarray(eta_i, dtype=float), -ETA_CLIP, ETA_CLIP)
        s = 1.0 / (1.0 + np.exp(-e))
        q = s * (1.0 - s)
    ZQZ = (cluster.Z * q[:, None]).T @ cluster.Z
    try:
        np.linalg.cholesky(D)
    except np.linalg.LinAlgError:
        raise ValueError("D must be positive definite") from None
    # (ZQZ + D^-1)^-1 D^-1 == (D ZQZ + I)^-1
    r = D.shape[0]
    return np.linalg.solve(D @ ZQZ + np.eye(r), np.eye(r))


def build_C(cluster: ClusterData, partition: ColumnPartition) -> np.ndarray:
    r = len(partition.z_cols)
    s = len(partition.s_cols)
    C = np.zeros((r, r + s))
    C[:, :r] = np.eye(r)
    if s:
        C[0, r:] = cluster.X[0, list(partition.s_cols)]
    return C


def tuning_matrices(dataset: Dataset, family, D, beta_hat) -> np.ndarray:
    """:func:`tuning_matrix` for every cluster at once, shape ``(n, r, r)``."""
    family = Family.coerce(family)
    D = np.atleast_2d(np.asarray(D, dtype=float))
    try:
        np.linalg.cholesky(D)
    except np.linalg.LinAlgError:
        raise ValueError("D must be positive definite") from None
    pk = dataset.packed()
    if family is Family.POISSON:
        q = pk.y
    else:
        e = np.clip(pk.X @ np.asarray(beta_hat, dtype=float), -ETA_CLIP, ETA_CLIP)
        sg = 1.0 / (1.0 + np.exp(-e))
        q = sg * (1.0 - sg)
    ZQZ = pk.cluster_sums(pk.Z[:, :, None] * pk.Z[:, None, :] * q[:, None, None])
    r = D.shape[0]
    eye = np.broadcast_to(np.eye(r), ZQZ.shape)
    return np.linalg.solve(D @ ZQZ + eye, eye)


def build_parametrization(
    dataset: Dataset,
    kind,
    D_guess,
    beta_hat,
    family,
    subject_specific: Sequence[int] | None = None,
    W: Sequence[np.ndarray] | None = None,
) -> list[ClusterDesign]:
    """Construct ``C_i, W_i, W_tilde_i, V_i`` for every cluster.

    For the partially noncentered kind ``W_i`` comes from
    :func:`tuning_matrix` with ``D = D_guess`` and ``eta_i = X_i beta_hat``
    unless explicit matrices ``W`` are supplied (e.g. from a saved fit).
    """
    kind = ParametrizationKind.coerce(kind)
    family = Family.coerce(family)
    partition = resolve_partition(dataset, subject_specific)
    n, r, p = dataset.n, dataset.r, dataset.p
    pk = dataset.packed()
    if W is not None:
        Ws = np.asarray(W, dtype=float).reshape(n, r, r)
    elif kind is ParametrizationKind.CENTERED:
        Ws = np.zeros((n, r, r))
    elif kind is ParametrizationKind.NONCENTERED:
        Ws = np.broadcast_to(np.eye(r), (n, r, r)).copy()
    else:
        Ws = tuning_matrices(dataset, family, D_guess, beta_hat)
    s_cols, g_cols = list(partition.s_cols), list(partition.g_cols)
    # C_i in the original column order: identity on the Z columns and the
    # cluster's subject-specific values in the intercept row
    C_full = np.zeros((n, r, p))
    C_full[:, np.arange(r), list(partition.z_cols)] = 1.0
    if s_cols:
        C_full[:, 0, s_cols] = pk.X[pk.starts][:, s_cols]
    W_tilde = (np.eye(r) - Ws) @ C_full
    V = np.einsum("nr,nrp->np", pk.Z, (Ws @ C_full)[pk.owner])
    V[:, g_cols] = pk.X[:, g_cols]
    c_cols = list(partition.c_cols)
    designs = []
    for i in range(n):
        a = pk.starts[i]
        designs.append(ClusterDesign(C=C_full[i][:, c_cols], W=Ws[i], W_tilde=W_tilde[i],
                                     V=V[a:a + pk.sizes[i]], partition=partition))
    return designs


def warn(msg: str, category=UserWarning):
    warnings.warn(msg, category, stacklevel=3)
    logger.warning(msg)
