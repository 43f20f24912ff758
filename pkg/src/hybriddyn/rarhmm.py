"""Recurrent autoregressive HMM with affine-Gaussian regimes.

Generative model (all Gaussians parameterized by precision)::

    z_1 ~ Cat(phi),            x_1 ~ N(mu_z, Omega_z)
    u_t ~ N(K_z phi(x_t), Delta_z)                       (closed loop only)
    z_{t+1} | z_t = i ~ softmax_j f(x_t, u_t; omega_ij)
    x_{t+1} ~ N(A_z x_t + B_z u_t + c_z, Lambda_z)       with z = z_{t+1}
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .data import Trajectory
from .errors import DimensionMismatch, DomainError
from .expfam import LOG2PI, symmetrize
from .features import FeatureMap

FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Logit link
# ---------------------------------------------------------------------------

@dataclass
class LogitLink:
    """State-action dependent transition logits.

    ``kind="linear"``: logits[i, j] = w_ij . [s, 1]
    ``kind="neural"``: logits[i, j] = v_ij . tanh(W s + b) + b_ij, hidden layer shared by rows.

    ``s`` is the concatenation (x, u) standardized by ``shift`` and ``scale``.
    """

    kind: str
    K: int
    in_dim: int
    params: np.ndarray
    shift: np.ndarray
    scale: np.ndarray
    width: int = 0

    def __post_init__(self):
        if self.kind not in ("linear", "neural"):
            raise DomainError(f"unknown link kind {self.kind!r}")
        self.params = np.asarray(self.params, dtype=float).ravel()
        self.shift = np.asarray(self.shift, dtype=float).reshape(self.in_dim)
        self.scale = np.asarray(self.scale, dtype=float).reshape(self.in_dim)
        if self.params.size != self.size:
            raise DimensionMismatch(f"link expects {self.size} parameters, got {self.params.size}")

    @classmethod
    def create(cls, kind: str, K: int, in_dim: int, width: int = 0, rng=None,
               std: float = 0.01, shift=None, scale=None) -> "LogitLink":
        rng = np.random.default_rng(rng)
        n = link_size(kind, K, in_dim, width)
        shift = np.zeros(in_dim) if shift is None else shift
        scale = np.ones(in_dim) if scale is None else scale
        return cls(kind, K, in_dim, std * rng.normal(size=n), shift, scale, width)

    @property
    def size(self) -> int:
        return link_size(self.kind, self.K, self.in_dim, self.width)

    def with_params(self, params: np.ndarray) -> "LogitLink":
        return replace(self, params=np.array(params, dtype=float))

    def unpack(self, params: np.ndarray | None = None):
        p = self.params if params is None else params
        K, n, H = self.K, self.in_dim, self.width
        if self.kind == "linear":
            return (p.reshape(K, K, n + 1),)
        o = 0
        W1 = p[o:o + H * n].reshape(H, n); o += H * n
        b1 = p[o:o + H]; o += H
        W2 = p[o:o + K * K * H].reshape(K, K, H); o += K * K * H
        b2 = p[o:o + K * K].reshape(K, K)
        return W1, b1, W2, b2

    def standardize(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        s = np.concatenate([np.atleast_2d(x), np.atleast_2d(u)], axis=-1)
        return (s - self.shift) / self.scale

    def logits(self, x: np.ndarray, u: np.ndarray, params=None) -> np.ndarray:
        """Logits of shape (T, K, K) for inputs x (T, d), u (T, m)."""
        s = self.standardize(x, u)
        if self.kind == "linear":
            (W,) = self.unpack(params)
            return np.einsum("ijn,tn->tij", W[:, :, :-1], s) + W[:, :, -1]
        W1, b1, W2, b2 = self.unpack(params)
        h = np.tanh(s @ W1.T + b1)
        return np.einsum("ijh,th->tij", W2, h) + b2

    def log_probs(self, x: np.ndarray, u: np.ndarray, params=None) -> np.ndarray:
        lg = self.logits(x, u, params)
        return lg - logsumexp(lg, axis=-1, keepdims=True)

    def objective_and_grad(self, x: np.ndarray, u: np.ndarray, xi: np.ndarray,
                           params=None) -> tuple[float, np.ndarray]:
        """sum_t sum_ij xi[t, i, j] log chi_ij(x_t, u_t) and its gradient."""
        s = self.standardize(x, u)
        if self.kind == "linear":
            (W,) = self.unpack(params)
            lg = np.einsum("ijn,tn->tij", W[:, :, :-1], s) + W[:, :, -1]
        else:
            W1, b1, W2, b2 = self.unpack(params)
            h = np.tanh(s @ W1.T + b1)
            lg = np.einsum("ijh,th->tij", W2, h) + b2
        lp = lg - logsumexp(lg, axis=-1, keepdims=True)
        value = float(np.sum(xi * lp))
        G = xi - xi.sum(axis=-1, keepdims=True) * np.exp(lp)
        if self.kind == "linear":
            gW = np.empty_like(W)
            gW[:, :, :-1] = np.einsum("tij,tn->ijn", G, s)
            gW[:, :, -1] = G.sum(axis=0)
            return value, gW.ravel()
        gW2 = np.einsum("tij,th->ijh", G, h)
        gb2 = G.sum(axis=0)
        gpre = np.einsum("tij,ijh->th", G, W2) * (1.0 - h ** 2)
        gW1 = gpre.T @ s
        gb1 = gpre.sum(axis=0)
        return value, np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2.ravel()])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "K": self.K, "in_dim": self.in_dim, "width": self.width,
                "params": self.params.tolist(), "shift": self.shift.tolist(),
                "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "LogitLink":
        return cls(d["kind"], d["K"], d["in_dim"], np.asarray(d["params"]),
                   np.asarray(d["shift"]), np.asarray(d["scale"]), d.get("width", 0))


def link_size(kind: str, K: int, in_dim: int, width: int = 0) -> int:
    if kind == "linear":
        return K * K * (in_dim + 1)
    return width * in_dim + width + K * K * width + K * K


# ---------------------------------------------------------------------------
# Model parameters
# ---------------------------------------------------------------------------

@dataclass
class ModelParams:
    phi: np.ndarray
    mu: np.ndarray        # (K, d)
    Omega: np.ndarray     # (K, d, d)
    A: np.ndarray         # (K, d, d)
    B: np.ndarray         # (K, d, m)
    c: np.ndarray         # (K, d)
    Lam: np.ndarray       # (K, d, d)
    link: LogitLink
    ctl_features: FeatureMap | None = None
    Kc: np.ndarray | None = None      # (K, m, p)
    Delta: np.ndarray | None = None   # (K, m, m)

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=float)
        K, d = self.mu.shape
        m = self.B.shape[2]
        if self.A.shape != (K, d, d) or self.Lam.shape != (K, d, d) or self.c.shape != (K, d):
            raise DimensionMismatch("inconsistent dynamics shapes")
        if self.link.K != K or self.link.in_dim != d + m:
            raise DimensionMismatch("link does not match model dimensions")
        if self.closed_loop:
            p = self.ctl_features.size
            if self.Kc.shape != (K, m, p) or self.Delta.shape != (K, m, m):
                raise DimensionMismatch("inconsistent controller shapes")

    @property
    def K(self) -> int:
        return self.mu.shape[0]

    @property
    def d(self) -> int:
        return self.mu.shape[1]

    @property
    def m(self) -> int:
        return self.B.shape[2]

    @property
    def closed_loop(self) -> bool:
        return self.Kc is not None

    def copy(self, **changes) -> "ModelParams":
        fields = dict(phi=self.phi.copy(), mu=self.mu.copy(), Omega=self.Omega.copy(),
                      A=self.A.copy(), B=self.B.copy(), c=self.c.copy(), Lam=self.Lam.copy(),
                      link=replace(self.link, params=self.link.params.copy()),
                      ctl_features=self.ctl_features,
                      Kc=None if self.Kc is None else self.Kc.copy(),
                      Delta=None if self.Delta is None else self.Delta.copy())
        fields.update(changes)
        return ModelParams(**fields)

    def chol(self, name: str) -> np.ndarray:
        """Lower Cholesky factors of the stacked precision ``name``."""
        return np.linalg.cholesky(symmetrize(getattr(self, name)))

    def permute(self, perm) -> "ModelParams":
        """Relabel regimes: new regime k is old regime perm[k]."""
        perm = np.asarray(perm)
        link = self.link
        if link.kind == "linear":
            (W,) = link.unpack()
            params = W[perm][:, perm].ravel()
        else:
            W1, b1, W2, b2 = link.unpack()
            params = np.concatenate([W1.ravel(), b1, W2[perm][:, perm].ravel(),
                                     b2[perm][:, perm].ravel()])
        return ModelParams(self.phi[perm], self.mu[perm], self.Omega[perm], self.A[perm],
                           self.B[perm], self.c[perm], self.Lam[perm], link.with_params(params),
                           self.ctl_features,
                           None if self.Kc is None else self.Kc[perm],
                           None if self.Delta is None else self.Delta[perm])

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        out = {"K": self.K, "d": self.d, "m": self.m, "phi": self.phi.tolist(),
               "mu": self.mu.tolist(), "Omega": self.Omega.tolist(), "A": self.A.tolist(),
               "B": self.B.tolist(), "c": self.c.tolist(), "Lambda": self.Lam.tolist(),
               "link": self.link.to_dict(), "controller": None}
        if self.closed_loop:
            out["controller"] = {"features": self.ctl_features.to_dict(),
                                 "K": self.Kc.tolist(), "Delta": self.Delta.tolist()}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelParams":
        K, d, m = data["K"], data["d"], data["m"]
        arr = lambda key, shape: np.asarray(data[key], dtype=float).reshape(shape)
        ctl = data.get("controller")
        feats = Kc = Delta = None
        if ctl is not None:
            feats = FeatureMap.from_dict(ctl["features"])
            Kc = np.asarray(ctl["K"], dtype=float).reshape(K, m, feats.size)
            Delta = np.asarray(ctl["Delta"], dtype=float).reshape(K, m, m)
        return cls(arr("phi", (K,)), arr("mu", (K, d)), arr("Omega", (K, d, d)),
                   arr("A", (K, d, d)), arr("B", (K, d, m)), arr("c", (K, d)),
                   arr("Lambda", (K, d, d)), LogitLink.from_dict(data["link"]), feats, Kc, Delta)


# ---------------------------------------------------------------------------
# Densities
# ---------------------------------------------------------------------------

def gauss_loglik(resid: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """log N(r | 0, L L^T as precision) for resid (K, T, d) and chol (K, d, d)."""
    d = resid.shape[-1]
    if d == 0:
        return np.zeros(resid.shape[:-1])
    y = np.einsum("kij,kti->ktj", chol, resid)
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
    return -0.5 * d * LOG2PI + 0.5 * logdet[:, None] - 0.5 * np.sum(y * y, axis=-1)


def dynamics_mean(model: ModelParams, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Per-regime predicted next state, shape (K, T, d), for x (T, d), u (T, m)."""
    return (np.einsum("kij,tj->kti", model.A, x) + np.einsum("kij,tj->kti", model.B, u)
            + model.c[:, None, :])


def controller_mean(model: ModelParams, x: np.ndarray) -> np.ndarray:
    """Per-regime mean action, shape (K, T, m)."""
    feats = model.ctl_features(np.atleast_2d(x))
    return np.einsum("kmp,tp->ktm", model.Kc, feats)


def controller_loglik(model: ModelParams, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """log N(u_t | K_k phi(x_t), Delta_k), shape (T, K)."""
    r = u[None] - controller_mean(model, x)
    return gauss_loglik(r, model.chol("Delta")).T


def log_likelihoods(model: ModelParams, traj: Trajectory,
                    include_controller: bool | None = None) -> np.ndarray:
    """Per-step, per-regime log evidence of shape (T, K).

    Row 0 holds log phi_k + log N(x_1 | mu_k, Omega_k); later rows hold the
    dynamics term. Controller terms are added when the model is closed loop.
    """
    x, u = traj.x, traj.u
    if x.shape[1] != model.d or u.shape[1] != model.m:
        raise DimensionMismatch(
            f"trajectory dims ({x.shape[1]}, {u.shape[1]}) vs model ({model.d}, {model.m})")
    T, K = x.shape[0], model.K
    ll = np.empty((T, K))
    with np.errstate(divide="ignore"):
        logphi = np.log(model.phi)
    r0 = x[0][None, None, :] - model.mu[:, None, :]
    ll[0] = logphi + gauss_loglik(r0, model.chol("Omega"))[:, 0]
    if T > 1:
        r = x[1:][None] - dynamics_mean(model, x[:-1], u[:-1])
        ll[1:] = gauss_loglik(r, model.chol("Lam")).T
    if include_controller is None:
        include_controller = model.closed_loop
    if include_controller and model.closed_loop:
        ll += controller_loglik(model, x, u)
    return ll


def transition_log_matrices(model: ModelParams, traj: Trajectory) -> np.ndarray:
    """log chi for steps 1..T-1 as an array (T-1, K, K)."""
    if len(traj) < 2:
        return np.zeros((0, model.K, model.K))
    return model.link.log_probs(traj.x[:-1], traj.u[:-1])


def transition_row(model: ModelParams, i: int, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    if not 0 <= i < model.K:
        raise DomainError(f"regime index {i} out of range")
    x = np.asarray(x, dtype=float).reshape(1, -1)
    u = np.asarray(u, dtype=float).reshape(1, -1)
    if x.shape[1] != model.d or u.shape[1] != model.m:
        raise DimensionMismatch("state/action dims do not match the model")
    lg = model.link.logits(x, u)[0, i]
    e = np.exp(lg - lg.max())
    return e / e.sum()


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def _sample_prec(mean: np.ndarray, chol: np.ndarray, rng) -> np.ndarray:
    if mean.shape[-1] == 0:
        return mean.copy()
    eps = rng.standard_normal(mean.shape[-1])
    return mean + solve_triangular(chol, eps, lower=True, trans="T")


def sample_step(model: ModelParams, z: int, x, u, rng) -> tuple[int, np.ndarray]:
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float).reshape(model.m)
    row = transition_row(model, z, x, u)
    z_next = int(rng.choice(model.K, p=row))
    mean = model.A[z_next] @ x + model.B[z_next] @ u + model.c[z_next]
    return z_next, _sample_prec(mean, model.chol("Lam")[z_next], rng)


def sample_action(model: ModelParams, z: int, x, rng) -> np.ndarray:
    if not model.closed_loop:
        raise DomainError("model has no controller block")
    mean = model.Kc[z] @ model.ctl_features(np.asarray(x, dtype=float))
    return _sample_prec(mean, model.chol("Delta")[z], rng)


def sample_initial(model: ModelParams, rng) -> tuple[int, np.ndarray]:
    z = int(rng.choice(model.K, p=model.phi))
    return z, _sample_prec(model.mu[z], model.chol("Omega")[z], rng)


def sample_trajectory(model: ModelParams, T: int, rng, u: np.ndarray | None = None,
                      x0: np.ndarray | None = None, z0: int | None = None):
    """Draw (z, x, u). Open-loop models need the input sequence ``u`` (T, m)."""
    rng = np.random.default_rng(rng)
    zs = np.zeros(T, dtype=int)
    xs = np.zeros((T, model.d))
    us = np.zeros((T, model.m)) if u is None else np.asarray(u, dtype=float).reshape(T, model.m)
    z, x = sample_initial(model, rng)
    if z0 is not None:
        z = z0
    if x0 is not None:
        x = np.asarray(x0, dtype=float)
    zs[0], xs[0] = z, x
    for t in range(T):
        if model.closed_loop and u is None:
            us[t] = sample_action(model, zs[t], xs[t], rng)
        if t + 1 < T:
            zs[t + 1], xs[t + 1] = sample_step(model, zs[t], xs[t], us[t], rng)
    return zs, xs, us


# ---------------------------------------------------------------------------
# Forecasting and scoring
# ---------------------------------------------------------------------------

def forecast(model: ModelParams, history: Trajectory, controls: np.ndarray, horizon: int,
             sample: bool = False, rng=None) -> np.ndarray:
    """Mean h-step forecast after filtering the regime belief over ``history``.

    ``controls`` holds the inputs applied from the last history step onward,
    shape (horizon, m); its first row replaces the last action of the history.
    """
    from .em import forward_messages

    if len(history) < 1:
        raise DomainError("history must contain at least one step")
    controls = np.asarray(controls, dtype=float).reshape(-1, model.m)
    if controls.shape[0] < horizon:
        raise DimensionMismatch("need one control per forecast step")
    alpha, _ = forward_messages(history, model)
    return propagate_belief(model, alpha[-1], history.x[-1], controls[:horizon], sample, rng)


def propagate_belief(model: ModelParams, belief: np.ndarray, x: np.ndarray,
                     controls: np.ndarray, sample: bool = False, rng=None) -> np.ndarray:
    rng = np.random.default_rng(rng)
    horizon = controls.shape[0]
    out = np.empty((horizon, model.d))
    b = np.asarray(belief, dtype=float)
    x = np.asarray(x, dtype=float)
    for h in range(horizon):
        u = controls[h]
        P = np.exp(model.link.log_probs(x[None], u[None])[0])
        b = b @ P
        means = model.A @ x + model.B @ u + model.c
        if sample:
            z = int(rng.choice(model.K, p=b / b.sum()))
            x = _sample_prec(means[z], model.chol("Lam")[z], rng)
            b = np.eye(model.K)[z]
        else:
            x = b @ means
        out[h] = x
    return out


def forecast_sweep(model: ModelParams, traj: Trajectory, horizons) -> dict[int, np.ndarray]:
    """Forecast from every admissible start point of ``traj``.

    Returns {h: squared errors of shape (n_starts, d)} where the forecast
    from step t is compared to x[t + h].
    """
    from .em import forward_messages

    horizons = sorted(set(int(h) for h in horizons))
    hmax = max(horizons)
    T = len(traj)
    alpha, _ = forward_messages(traj, model)
    errs = {h: [] for h in horizons}
    for t in range(T - min(horizons)):
        steps = min(hmax, T - 1 - t)
        pred = propagate_belief(model, alpha[t], traj.x[t], traj.u[t:t + steps])
        for h in horizons:
            if h <= steps:
                errs[h].append((pred[h - 1] - traj.x[t + h]) ** 2)
    return {h: np.array(v).reshape(-1, model.d) for h, v in errs.items()}


def log_posterior(dataset, model: ModelParams, hyper) -> float:
    """sum_n w_n log p(D_n | theta) + log p(theta | h)."""
    from .em import forward_messages
    from .priors import log_prior

    total = 0.0
    for traj in dataset:
        if traj.weight == 0.0:
            continue
        _, lognorm = forward_messages(traj, model)
        total += traj.weight * float(np.sum(lognorm))
    return total + log_prior(model, hyper)


def count_parameters(model: ModelParams) -> int:
    K, d, m = model.K, model.d, model.m
    sym = lambda n: n * (n + 1) // 2
    n = (K - 1) + K * (d + sym(d)) + K * (d * d + d * m + d + sym(d)) + model.link.size
    if model.closed_loop:
        n += K * (m * model.ctl_features.size + sym(m))
    return n


class HybridPolicy:
    """Closed-loop controller read from a fitted model.

    The regime belief is filtered online from the observed states through the
    transition law and the dynamics likelihood. ``mode`` selects the action:
    ``"mean"`` mixes the regime means by the belief, ``"map"`` uses the most
    likely regime and ``"sample"`` draws a regime and Gaussian action noise
    (with a lower bound ``min_std`` on the noise standard deviation).
    """

    def __init__(self, model: ModelParams, mode: str = "mean", min_std: float = 0.0,
                 action_limit: float | None = None, use_actions: bool | None = None):
        if not model.closed_loop:
            raise DomainError("model has no controller block")
        if mode not in ("mean", "map", "sample"):
            raise DomainError(f"unknown policy mode {mode!r}")
        self.model, self.mode, self.min_std = model, mode, min_std
        self.action_limit = action_limit
        # past actions are informative about the regime only when they were drawn from it
        self.use_actions = (mode == "sample") if use_actions is None else use_actions
        self._chol_omega = model.chol("Omega")
        self._chol_lam = model.chol("Lam")
        cov = np.linalg.inv(symmetrize(model.Delta))
        if min_std > 0:
            w, V = np.linalg.eigh(cov)
            cov = np.einsum("kij,kj,klj->kil", V, np.maximum(w, min_std ** 2), V)
        self._chol_cov = np.linalg.cholesky(symmetrize(cov))
        self.reset()

    def reset(self) -> None:
        self.log_belief = None
        self._prev = None

    @property
    def belief(self) -> np.ndarray:
        b = np.exp(self.log_belief - self.log_belief.max())
        return b / b.sum()

    def observe(self, x: np.ndarray) -> np.ndarray:
        model = self.model
        x = np.asarray(x, dtype=float)
        if self._prev is None:
            with np.errstate(divide="ignore"):
                lb = np.log(model.phi)
            lb = lb + gauss_loglik(x[None, None, :] - model.mu[:, None, :], self._chol_omega)[:, 0]
        else:
            xp, up = self._prev
            prev = self.log_belief
            if self.use_actions:
                prev = prev + controller_loglik(model, xp[None], up[None])[0]
            logP = model.link.log_probs(xp[None], up[None])[0]
            lb = logsumexp(prev[:, None] + logP, axis=0)
            r = x[None, None, :] - dynamics_mean(model, xp[None], up[None])
            lb = lb + gauss_loglik(r, self._chol_lam)[:, 0]
        if not np.isfinite(lb.max()):
            lb = np.zeros(model.K)
        self.log_belief = lb - logsumexp(lb)
        return self.belief

    def act(self, x, rng=None) -> np.ndarray:
        model = self.model
        x = np.asarray(x, dtype=float)
        b = self.observe(x)
        means = controller_mean(model, x[None])[:, 0, :]
        if self.mode == "mean":
            u = b @ means
        elif self.mode == "map":
            u = means[int(np.argmax(b))]
        else:
            rng = np.random.default_rng(rng)
            z = int(rng.choice(model.K, p=b))
            u = means[z] + self._chol_cov[z] @ rng.standard_normal(model.m)
        if self.action_limit is not None:
            u = np.clip(u, -self.action_limit, self.action_limit)
        self._prev = (x, u)
        return u

    __call__ = act
