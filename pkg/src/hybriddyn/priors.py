"""Factorized parameter prior p(theta | h), its hyperparameter gradient and the
empirical-Bayes ascent step.

Hyperparameters are moved in an unconstrained space: positive scalars through
``log``, degrees of freedom through ``log(nu - (p - 1))`` and SPD matrices through
their Cholesky factor with log-diagonal.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from . import expfam as ef
from .errors import DomainError, NonSPD
from .rarhmm import ModelParams

BLOCKS = ("tau0", "kappa0", "Psi0", "nu0", "R0", "Phi0", "rho0", "alpha", "S0", "Gamma0", "eps0")
_SPD = {"Psi0", "R0", "Phi0", "S0", "Gamma0"}
_DOF = {"nu0": "Psi0", "rho0": "Phi0", "eps0": "Gamma0"}


@dataclass
class HyperParams:
    tau0: np.ndarray       # Dirichlet on phi
    kappa0: float          # normal-Wishart on (mu_k, Omega_k)
    Psi0: np.ndarray
    nu0: float
    R0: np.ndarray         # matrix-normal-Wishart on ([A B c]_k, Lambda_k)
    Phi0: np.ndarray
    rho0: float
    alpha: float           # isotropic Gaussian precision on the link weights
    S0: np.ndarray | None = None      # matrix-normal-Wishart on (K_k, Delta_k)
    Gamma0: np.ndarray | None = None
    eps0: float | None = None
    tied_noise: bool = False

    def __post_init__(self):
        self.tau0 = np.asarray(self.tau0, dtype=float)
        for name in _SPD:
            val = getattr(self, name)
            if val is not None:
                val = np.atleast_2d(np.asarray(val, dtype=float))
                if not ef.is_spd(val):
                    raise DomainError(f"{name} must be symmetric positive definite")
                setattr(self, name, val)
        for dof, mat in _DOF.items():
            if getattr(self, mat) is not None and getattr(self, dof) <= getattr(self, mat).shape[0] - 1:
                raise DomainError(f"{dof} must exceed dim - 1")
        if np.any(self.tau0 <= 0) or self.kappa0 <= 0 or self.alpha <= 0:
            raise DomainError("tau0, kappa0 and alpha must be positive")

    @property
    def has_controller(self) -> bool:
        return self.S0 is not None

    def copy(self, **changes) -> "HyperParams":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals = {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in vals.items()}
        vals.update(changes)
        return HyperParams(**vals)

    @classmethod
    def default(cls, K: int, d: int, m: int, p: int | None = None,
                x_var=None, noise_var=None, u_var=None, alpha: float = 1e-2,
                tied_noise: bool = False) -> "HyperParams":
        """Weakly informative defaults.

        ``x_var`` sets the prior mode of the initial-state precision, ``noise_var``
        that of the dynamics noise precision and ``u_var`` that of the action noise.
        """
        x_var = np.ones(d) if x_var is None else np.broadcast_to(x_var, (d,))
        noise_var = 1e-2 * x_var if noise_var is None else np.broadcast_to(noise_var, (d,))
        q = d + m + 1
        nu0 = d + 2.0
        rho0 = d + 2.0
        out = dict(tau0=np.full(K, 2.0), kappa0=1e-2,
                   Psi0=np.diag(1.0 / x_var) / (nu0 - d), nu0=nu0,
                   R0=1e-6 * np.eye(q),
                   Phi0=np.diag(1.0 / noise_var) / (rho0 - d - 1 + q), rho0=rho0,
                   alpha=alpha, tied_noise=tied_noise)
        if p is not None and m > 0:
            u_var = np.ones(m) if u_var is None else np.broadcast_to(u_var, (m,))
            eps0 = m + 2.0
            out.update(S0=1e-6 * np.eye(p), Gamma0=np.diag(1.0 / u_var) / (eps0 - m - 1 + p),
                       eps0=eps0)
        return cls(**out)

    def nw_prior(self) -> ef.NormalWishartParams:
        return ef.NormalWishartParams(np.zeros(self.Psi0.shape[0]), self.kappa0, self.Psi0, self.nu0)

    def dynamics_prior(self) -> ef.MatrixNormalWishartParams:
        d, q = self.Phi0.shape[0], self.R0.shape[0]
        return ef.MatrixNormalWishartParams(np.zeros((d, q)), self.R0, self.Phi0, self.rho0)

    def controller_prior(self) -> ef.MatrixNormalWishartParams:
        m, p = self.Gamma0.shape[0], self.S0.shape[0]
        return ef.MatrixNormalWishartParams(np.zeros((m, p)), self.S0, self.Gamma0, self.eps0)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "HyperParams":
        vals = {k: (np.asarray(v, dtype=float) if isinstance(v, list) else v)
                for k, v in data.items()}
        return cls(**vals)


def dynamics_weights(model: ModelParams) -> np.ndarray:
    """Stacked regression matrices [A_k B_k c_k], shape (K, d, d + m + 1)."""
    return np.concatenate([model.A, model.B, model.c[:, :, None]], axis=2)


# ---------------------------------------------------------------------------
# log p(theta | h)
# ---------------------------------------------------------------------------

def prior_terms(model: ModelParams, hyper: HyperParams) -> dict[str, float]:
    """Per-component log prior densities; they sum to log p(theta | h)."""
    terms = {"phi": ef.log_dirichlet(model.phi, ef.DirichletParams(hyper.tau0))}
    nw = hyper.nw_prior()
    terms["init"] = sum(ef.log_nw(model.mu[k], model.Omega[k], nw) for k in range(model.K))
    W = dynamics_weights(model)
    if hyper.tied_noise:
        terms["dynamics"] = sum(ef.log_matrix_normal(W[k], np.zeros_like(W[k]), model.Lam[0],
                                                     hyper.R0) for k in range(model.K)) \
            + ef.log_wishart(model.Lam[0], hyper.Phi0, hyper.rho0)
    else:
        dp = hyper.dynamics_prior()
        terms["dynamics"] = sum(ef.log_mnw(W[k], model.Lam[k], dp) for k in range(model.K))
    if model.closed_loop and hyper.has_controller:
        cp = hyper.controller_prior()
        terms["controller"] = sum(ef.log_mnw(model.Kc[k], model.Delta[k], cp)
                                  for k in range(model.K))
    terms["link"] = ef.log_iso_gaussian(model.link.params, hyper.alpha)
    return terms


def log_prior(model: ModelParams, hyper: HyperParams) -> float:
    return float(sum(prior_terms(model, hyper).values()))


def log_prior_density(kind: str, component, hyper: HyperParams) -> float:
    """Log prior of a single parameter block.

    ``kind`` is one of ``"dirichlet"`` (phi), ``"nw"`` ((mu, Omega)),
    ``"mnw_dynamics"`` ((W, Lambda)), ``"mnw_controller"`` ((K, Delta)) or
    ``"link"`` (omega).
    """
    if kind == "dirichlet":
        return ef.log_dirichlet(component, ef.DirichletParams(hyper.tau0))
    if kind == "nw":
        return ef.log_nw(component[0], component[1], hyper.nw_prior())
    if kind == "mnw_dynamics":
        return ef.log_mnw(component[0], component[1], hyper.dynamics_prior())
    if kind == "mnw_controller":
        return ef.log_mnw(component[0], component[1], hyper.controller_prior())
    if kind == "link":
        return ef.log_iso_gaussian(component, hyper.alpha)
    raise DomainError(f"unknown prior component {kind!r}")


# ---------------------------------------------------------------------------
# Unconstrained reparameterization
# ---------------------------------------------------------------------------

def _active_blocks(hyper: HyperParams) -> list[str]:
    return [b for b in BLOCKS if getattr(hyper, b) is not None]


def _chol_pack(S: np.ndarray) -> np.ndarray:
    L = np.linalg.cholesky(ef.symmetrize(S))
    L[np.diag_indices_from(L)] = np.log(np.diag(L))
    return L[np.tril_indices_from(L)]


def _chol_unpack(v: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    L = np.zeros((n, n))
    L[np.tril_indices(n)] = v
    L[np.diag_indices(n)] = np.exp(np.diag(L))
    return L @ L.T, L


def hyper_to_vector(hyper: HyperParams) -> tuple[np.ndarray, list[tuple[str, slice]]]:
    parts, layout, o = [], [], 0
    for name in _active_blocks(hyper):
        val = getattr(hyper, name)
        if name in _SPD:
            v = _chol_pack(val)
        elif name in _DOF:
            v = np.array([np.log(val - (getattr(hyper, _DOF[name]).shape[0] - 1))])
        else:
            v = np.log(np.atleast_1d(np.asarray(val, dtype=float)))
        parts.append(v)
        layout.append((name, slice(o, o + v.size)))
        o += v.size
    return np.concatenate(parts), layout


def hyper_from_vector(vec: np.ndarray, template: HyperParams) -> HyperParams:
    _, layout = hyper_to_vector(template)
    changes = {}
    for name, sl in layout:
        v = vec[sl]
        if name in _SPD:
            changes[name] = _chol_unpack(v, getattr(template, name).shape[0])[0]
        elif name in _DOF:
            changes[name] = float(np.exp(v[0]) + getattr(template, _DOF[name]).shape[0] - 1)
        elif name == "tau0":
            changes[name] = np.exp(v)
        else:
            changes[name] = float(np.exp(v[0]))
    return template.copy(**changes)


def _natural_grads(model: ModelParams, hyper: HyperParams) -> dict[str, np.ndarray | float]:
    """Gradient of log p(theta | h) with respect to each constrained hyperparameter."""
    g: dict[str, np.ndarray | float] = {}
    K = model.K
    g["tau0"] = ef.grad_log_dirichlet_tau(model.phi, hyper.tau0)
    d = model.d
    gk, gPsi, gnu = 0.0, np.zeros_like(hyper.Psi0), 0.0
    for k in range(K):
        gk += 0.5 * d / hyper.kappa0 - 0.5 * model.mu[k] @ model.Omega[k] @ model.mu[k]
        gp, gn = ef.grad_log_wishart(model.Omega[k], hyper.Psi0, hyper.nu0)
        gPsi += gp
        gnu += gn
    g["kappa0"], g["Psi0"], g["nu0"] = gk, gPsi, gnu

    W = dynamics_weights(model)
    gR = np.zeros_like(hyper.R0)
    if hyper.tied_noise:
        for k in range(K):
            gR += ef.grad_log_matrix_normal_colprec(W[k], model.Lam[0], hyper.R0)
        g["Phi0"], g["rho0"] = ef.grad_log_wishart(model.Lam[0], hyper.Phi0, hyper.rho0)
    else:
        gPhi, grho = np.zeros_like(hyper.Phi0), 0.0
        for k in range(K):
            gR += ef.grad_log_matrix_normal_colprec(W[k], model.Lam[k], hyper.R0)
            gp, gn = ef.grad_log_wishart(model.Lam[k], hyper.Phi0, hyper.rho0)
            gPhi += gp
            grho += gn
        g["Phi0"], g["rho0"] = gPhi, grho
    g["R0"] = gR

    w = model.link.params
    g["alpha"] = 0.5 * w.size / hyper.alpha - 0.5 * w @ w

    if hyper.has_controller:
        gS, gG, ge = np.zeros_like(hyper.S0), np.zeros_like(hyper.Gamma0), 0.0
        if model.closed_loop:
            for k in range(K):
                gS += ef.grad_log_matrix_normal_colprec(model.Kc[k], model.Delta[k], hyper.S0)
                gp, gn = ef.grad_log_wishart(model.Delta[k], hyper.Gamma0, hyper.eps0)
                gG += gp
                ge += gn
        g["S0"], g["Gamma0"], g["eps0"] = gS, gG, ge
    return g


def hyperparam_log_prior_gradient(model: ModelParams, hyper: HyperParams) -> np.ndarray:
    """Gradient of log p(theta | h) in the unconstrained hyperparameter space."""
    nat = _natural_grads(model, hyper)
    _, layout = hyper_to_vector(hyper)
    out = []
    for name, _ in layout:
        gval = nat[name]
        val = getattr(hyper, name)
        if name in _SPD:
            L = np.linalg.cholesky(ef.symmetrize(val))
            gL = 2.0 * gval @ L
            gL[np.diag_indices_from(gL)] *= np.diag(L)
            out.append(gL[np.tril_indices_from(gL)])
        elif name in _DOF:
            out.append(np.array([gval * (val - (getattr(hyper, _DOF[name]).shape[0] - 1))]))
        elif name == "tau0":
            out.append(gval * val)
        else:
            out.append(np.array([gval * val]))
    return np.concatenate(out)


def block_mask(hyper: HyperParams, enabled=None) -> np.ndarray:
    """Boolean mask over the unconstrained vector; ``enabled`` lists adapted blocks."""
    vec, layout = hyper_to_vector(hyper)
    mask = np.zeros(vec.size, dtype=bool)
    for name, sl in layout:
        if enabled is None or name in enabled:
            mask[sl] = True
    return mask


def eb_step(model: ModelParams, hyper: HyperParams, rho: float, enabled=None,
            max_halvings: int = 10) -> HyperParams:
    """One empirical-Bayes ascent step on log p(theta | h) with backtracking.

    The step is halved up to ``max_halvings`` times until log p(theta | h) does
    not decrease; if no such step is found ``hyper`` is returned unchanged.
    """
    if rho <= 0:
        raise DomainError("EB step size must be positive")
    vec, _ = hyper_to_vector(hyper)
    grad = hyperparam_log_prior_gradient(model, hyper) * block_mask(hyper, enabled)
    if not np.all(np.isfinite(grad)) or not np.any(grad):
        return hyper
    base = log_prior(model, hyper)
    step = rho
    for _ in range(max_halvings + 1):
        try:
            # oversized trial steps may overflow; they are rejected below
            with np.errstate(over="ignore", invalid="ignore"):
                cand = hyper_from_vector(vec + step * grad, hyper)
            if enabled is not None:
                # masked blocks keep their exact values, not a round trip through the vector
                cand = cand.copy(**{b: getattr(hyper, b) for b in _active_blocks(hyper)
                                    if b not in enabled})
            val = log_prior(model, cand)
        except (DomainError, NonSPD, FloatingPointError):
            val = -np.inf
        if np.isfinite(val) and val >= base:
            return cand
        step *= 0.5
    return hyper
