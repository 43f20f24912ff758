"""Weighted exponential-family likelihoods with conjugate priors.

Three conjugate pairs are covered:

* categorical / Dirichlet
* Gaussian / normal-Wishart (precision parameterization)
* linear-Gaussian / matrix-normal-Wishart (precision parameterization)

Posteriors are formed by adding weighted sufficient statistics to the prior
natural parameters. Only MAP modes and log-densities are provided.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln, multigammaln

from .errors import DegenerateMode, DimensionMismatch, DomainError, NonSPD

LOG2PI = np.log(2.0 * np.pi)


# ---------------------------------------------------------------------------
# SPD helpers
# ---------------------------------------------------------------------------

def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def spd_repair(a: np.ndarray) -> np.ndarray:
    """Return a symmetric matrix that admits a Cholesky factorization.

    Jitter starts at ``1e-8 * trace / d`` and grows by 10x up to ``1e-2``
    relative before giving up with :class:`NonSPD`.
    """
    a = symmetrize(np.asarray(a, dtype=float))
    d = a.shape[-1]
    if d == 0:
        return a
    try:
        np.linalg.cholesky(a)
        return a
    except np.linalg.LinAlgError:
        pass
    scale = np.trace(a) / d
    if not np.isfinite(scale) or scale <= 0.0:
        raise NonSPD("matrix has non-positive trace; cannot repair")
    rel = 1e-8
    eye = np.eye(d)
    while rel <= 1e-2 * (1 + 1e-12):
        b = a + rel * scale * eye
        try:
            np.linalg.cholesky(b)
            return b
        except np.linalg.LinAlgError:
            rel *= 10.0
    raise NonSPD("matrix is not positive definite beyond jitter repair")


def spd_inverse(a: np.ndarray) -> np.ndarray:
    a = spd_repair(a)
    if a.shape[-1] == 0:
        return a.copy()
    chol = np.linalg.cholesky(a)
    inv_chol = np.linalg.inv(chol)
    return symmetrize(inv_chol.T @ inv_chol)


def logdet_spd(a: np.ndarray) -> float:
    """log-determinant of an SPD matrix; raises DomainError otherwise."""
    if a.shape[-1] == 0:
        return 0.0
    try:
        chol = np.linalg.cholesky(symmetrize(a))
    except np.linalg.LinAlgError as exc:
        raise DomainError("matrix is not symmetric positive definite") from exc
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


def is_spd(a: np.ndarray) -> bool:
    if a.shape[-1] == 0:
        return True
    try:
        np.linalg.cholesky(symmetrize(a))
        return True
    except np.linalg.LinAlgError:
        return False


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DirichletParams:
    tau: np.ndarray

    def __post_init__(self):
        tau = np.asarray(self.tau, dtype=float)
        if tau.ndim != 1 or np.any(tau <= 0.0):
            raise DomainError("Dirichlet pseudo-counts must be a positive vector")
        object.__setattr__(self, "tau", tau)


@dataclass(frozen=True)
class NormalWishartParams:
    """N(mu | m, (kappa * Lambda)^-1) W(Lambda | Psi, nu)."""

    m: np.ndarray
    kappa: float
    Psi: np.ndarray
    nu: float

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float)
        Psi = np.atleast_2d(np.asarray(self.Psi, dtype=float))
        d = m.shape[0]
        if Psi.shape != (d, d):
            raise DimensionMismatch(f"Psi must be {d}x{d}, got {Psi.shape}")
        if self.kappa <= 0.0:
            raise DomainError("kappa must be positive")
        if self.nu <= d - 1:
            raise DomainError(f"nu must exceed d - 1 = {d - 1}")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "Psi", Psi)
        object.__setattr__(self, "kappa", float(self.kappa))
        object.__setattr__(self, "nu", float(self.nu))

    @property
    def dim(self) -> int:
        return self.m.shape[0]


@dataclass(frozen=True)
class MatrixNormalWishartParams:
    """MN(A | M, V^-1, Kcol^-1) W(V | Psi, nu) with A of shape (m, q)."""

    M: np.ndarray
    Kcol: np.ndarray
    Psi: np.ndarray
    nu: float

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.M, dtype=float))
        Kcol = np.atleast_2d(np.asarray(self.Kcol, dtype=float))
        Psi = np.atleast_2d(np.asarray(self.Psi, dtype=float))
        m, q = M.shape
        if Kcol.shape != (q, q) or Psi.shape != (m, m):
            raise DimensionMismatch("inconsistent matrix-normal-Wishart shapes")
        if self.nu <= m - 1:
            raise DomainError(f"nu must exceed m - 1 = {m - 1}")
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "Kcol", Kcol)
        object.__setattr__(self, "Psi", Psi)
        object.__setattr__(self, "nu", float(self.nu))

    @property
    def out_dim(self) -> int:
        return self.M.shape[0]

    @property
    def in_dim(self) -> int:
        return self.M.shape[1]


# ---------------------------------------------------------------------------
# Weighted sufficient statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CategoricalStats:
    counts: np.ndarray

    @classmethod
    def from_weights(cls, w: np.ndarray) -> "CategoricalStats":
        """``w`` has shape (N, K): soft one-hot weights per observation."""
        return cls(np.sum(np.atleast_2d(w), axis=0))

    def __add__(self, other: "CategoricalStats") -> "CategoricalStats":
        return CategoricalStats(self.counts + other.counts)


@dataclass(frozen=True)
class GaussianStats:
    sx: np.ndarray   # sum_n w_n x_n
    sxx: np.ndarray  # sum_n w_n x_n x_n^T
    n: float         # sum_n w_n

    @classmethod
    def from_data(cls, x: np.ndarray, w: np.ndarray | None = None) -> "GaussianStats":
        x = np.atleast_2d(np.asarray(x, dtype=float))
        w = np.ones(x.shape[0]) if w is None else np.asarray(w, dtype=float)
        return cls(w @ x, (x * w[:, None]).T @ x, float(np.sum(w)))

    @classmethod
    def zeros(cls, d: int) -> "GaussianStats":
        return cls(np.zeros(d), np.zeros((d, d)), 0.0)

    def __add__(self, other: "GaussianStats") -> "GaussianStats":
        return GaussianStats(self.sx + other.sx, self.sxx + other.sxx, self.n + other.n)


@dataclass(frozen=True)
class LinearGaussianStats:
    """Statistics of y = A x + noise, stored as (Y W X^T, X W X^T, Y W Y^T, sum w)."""

    yx: np.ndarray
    xx: np.ndarray
    yy: np.ndarray
    n: float

    @classmethod
    def from_data(cls, x: np.ndarray, y: np.ndarray,
                  w: np.ndarray | None = None) -> "LinearGaussianStats":
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if y.ndim == 1:
            y = y[:, None]
        if x.shape[0] != y.shape[0]:
            raise DimensionMismatch("x and y must have the same number of rows")
        w = np.ones(x.shape[0]) if w is None else np.asarray(w, dtype=float)
        yw = y * w[:, None]
        return cls(yw.T @ x, (x * w[:, None]).T @ x, yw.T @ y, float(np.sum(w)))

    @classmethod
    def zeros(cls, m: int, q: int) -> "LinearGaussianStats":
        return cls(np.zeros((m, q)), np.zeros((q, q)), np.zeros((m, m)), 0.0)

    def __add__(self, other: "LinearGaussianStats") -> "LinearGaussianStats":
        return LinearGaussianStats(self.yx + other.yx, self.xx + other.xx,
                                   self.yy + other.yy, self.n + other.n)


# ---------------------------------------------------------------------------
# Posteriors (natural parameters add)
# ---------------------------------------------------------------------------

def dirichlet_posterior(prior: DirichletParams, stats: CategoricalStats) -> DirichletParams:
    return DirichletParams(prior.tau + np.asarray(stats.counts, dtype=float))


def nw_posterior(prior: NormalWishartParams, stats: GaussianStats) -> NormalWishartParams:
    kappa = prior.kappa + stats.n
    eta1 = prior.kappa * prior.m + stats.sx
    m = eta1 / kappa
    scatter = (spd_inverse(prior.Psi) + prior.kappa * np.outer(prior.m, prior.m)
               + stats.sxx - kappa * np.outer(m, m))
    return NormalWishartParams(m, kappa, spd_inverse(scatter), prior.nu + stats.n)


def mnw_posterior(prior: MatrixNormalWishartParams,
                  stats: LinearGaussianStats) -> MatrixNormalWishartParams:
    if stats.yx.shape != prior.M.shape:
        raise DimensionMismatch(
            f"statistics shape {stats.yx.shape} does not match prior {prior.M.shape}")
    Kcol = spd_repair(prior.Kcol + stats.xx)
    MK = prior.M @ prior.Kcol + stats.yx
    M = np.linalg.solve(Kcol, MK.T).T
    scatter = (spd_inverse(prior.Psi) + prior.M @ prior.Kcol @ prior.M.T
               + stats.yy - M @ Kcol @ M.T)
    return MatrixNormalWishartParams(M, Kcol, spd_inverse(scatter), prior.nu + stats.n)


# ---------------------------------------------------------------------------
# Modes
# ---------------------------------------------------------------------------

def dirichlet_mode(params: DirichletParams) -> np.ndarray:
    tau = params.tau
    if np.any(tau <= 1.0):
        raise DegenerateMode("Dirichlet mode requires all pseudo-counts > 1")
    return (tau - 1.0) / (np.sum(tau) - tau.shape[0])


def dirichlet_mean(params: DirichletParams) -> np.ndarray:
    return params.tau / np.sum(params.tau)


def dirichlet_posterior_mode(prior: DirichletParams, counts: CategoricalStats) -> np.ndarray:
    """Mode of the Dirichlet posterior; raises DegenerateMode when undefined."""
    return dirichlet_mode(dirichlet_posterior(prior, counts))


def dirichlet_map(prior: DirichletParams, counts: CategoricalStats) -> np.ndarray:
    """Posterior mode, falling back to the posterior mean when the mode is undefined."""
    post = dirichlet_posterior(prior, counts)
    try:
        return dirichlet_mode(post)
    except DegenerateMode:
        return dirichlet_mean(post)


def nw_mode(params: NormalWishartParams) -> tuple[np.ndarray, np.ndarray]:
    """Joint mode (mu, Lambda) = (m, (nu - d) Psi)."""
    d = params.dim
    if params.nu <= d:
        raise DegenerateMode("normal-Wishart mode requires nu > d")
    return params.m.copy(), spd_repair((params.nu - d) * params.Psi)


def mnw_mode(params: MatrixNormalWishartParams) -> tuple[np.ndarray, np.ndarray]:
    """Joint mode (A, V) = (M, (nu - m - 1 + q) Psi) for A of shape (m, q)."""
    m, q = params.M.shape
    dof = params.nu - m - 1 + q
    if dof <= 0:
        raise DegenerateMode("matrix-normal-Wishart mode requires nu > m + 1 - q")
    return params.M.copy(), spd_repair(dof * params.Psi)


def nw_posterior_mode(prior: NormalWishartParams,
                      stats: GaussianStats) -> tuple[np.ndarray, np.ndarray]:
    return nw_mode(nw_posterior(prior, stats))


def mnw_posterior_mode(prior: MatrixNormalWishartParams,
                       stats: LinearGaussianStats) -> tuple[np.ndarray, np.ndarray]:
    return mnw_mode(mnw_posterior(prior, stats))


# ---------------------------------------------------------------------------
# Log densities
# ---------------------------------------------------------------------------

def log_dirichlet(phi: np.ndarray, params: DirichletParams) -> float:
    tau = params.tau
    phi = np.asarray(phi, dtype=float)
    with np.errstate(divide="ignore"):
        logphi = np.log(phi)
    body = np.where(tau == 1.0, 0.0, (tau - 1.0) * logphi)
    return float(gammaln(np.sum(tau)) - np.sum(gammaln(tau)) + np.sum(body))


def log_wishart(Lam: np.ndarray, Psi: np.ndarray, nu: float) -> float:
    p = Lam.shape[-1]
    if p == 0:
        return 0.0
    ld_lam = logdet_spd(Lam)
    ld_psi = logdet_spd(Psi)
    psi_inv = spd_inverse(Psi)
    return float(0.5 * (nu - p - 1) * ld_lam - 0.5 * np.sum(psi_inv * Lam)
                 - 0.5 * nu * p * np.log(2.0) - 0.5 * nu * ld_psi
                 - multigammaln(0.5 * nu, p))


def log_gaussian_prec(x: np.ndarray, mean: np.ndarray, prec: np.ndarray) -> float:
    d = x.shape[-1]
    r = x - mean
    return float(-0.5 * d * LOG2PI + 0.5 * logdet_spd(prec) - 0.5 * r @ prec @ r)


def log_nw(mu: np.ndarray, Lam: np.ndarray, params: NormalWishartParams) -> float:
    d = params.dim
    r = mu - params.m
    return float(-0.5 * d * LOG2PI + 0.5 * d * np.log(params.kappa) + 0.5 * logdet_spd(Lam)
                 - 0.5 * params.kappa * r @ Lam @ r
                 + log_wishart(Lam, params.Psi, params.nu))


def log_matrix_normal(A: np.ndarray, M: np.ndarray, row_prec: np.ndarray,
                      col_prec: np.ndarray) -> float:
    m, q = A.shape
    if m == 0 or q == 0:
        return 0.0
    R = A - M
    return float(-0.5 * m * q * LOG2PI + 0.5 * q * logdet_spd(row_prec)
                 + 0.5 * m * logdet_spd(col_prec)
                 - 0.5 * np.sum((row_prec @ R @ col_prec) * R))


def log_mnw(A: np.ndarray, V: np.ndarray, params: MatrixNormalWishartParams) -> float:
    return (log_matrix_normal(A, params.M, V, params.Kcol)
            + log_wishart(V, params.Psi, params.nu))


def log_iso_gaussian(w: np.ndarray, alpha: float) -> float:
    """log N(w | 0, alpha^-1 I)."""
    if alpha <= 0.0:
        raise DomainError("precision alpha must be positive")
    w = np.ravel(w)
    n = w.shape[0]
    return float(0.5 * n * (np.log(alpha) - LOG2PI) - 0.5 * alpha * (w @ w))


# ---------------------------------------------------------------------------
# Gradients of the log densities with respect to prior parameters.
# These feed the empirical-Bayes step; see ``hyper.py``.
# ---------------------------------------------------------------------------

def _mvdigamma(a: float, p: int) -> float:
    return float(np.sum(digamma(a + 0.5 * (1.0 - np.arange(1, p + 1)))))


def grad_log_dirichlet_tau(phi: np.ndarray, tau: np.ndarray) -> np.ndarray:
    return digamma(np.sum(tau)) - digamma(tau) + np.log(phi)


def grad_log_wishart(Lam: np.ndarray, Psi: np.ndarray, nu: float) -> tuple[np.ndarray, float]:
    """Returns (d/dPsi as a symmetric matrix, d/dnu)."""
    p = Lam.shape[-1]
    psi_inv = spd_inverse(Psi)
    g_psi = 0.5 * psi_inv @ Lam @ psi_inv - 0.5 * nu * psi_inv
    g_nu = 0.5 * logdet_spd(Lam) - 0.5 * p * np.log(2.0) - 0.5 * logdet_spd(Psi) \
        - 0.5 * _mvdigamma(0.5 * nu, p)
    return symmetrize(g_psi), float(g_nu)


def grad_log_matrix_normal_colprec(A: np.ndarray, row_prec: np.ndarray,
                                   col_prec: np.ndarray) -> np.ndarray:
    """d/d(col_prec) of log MN(A | 0, row_prec^-1, col_prec^-1)."""
    m = A.shape[0]
    return symmetrize(0.5 * m * spd_inverse(col_prec) - 0.5 * A.T @ row_prec @ A)
