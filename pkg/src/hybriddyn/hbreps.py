"""Hybrid relative entropy policy search on a learned rARHMM.

Each iteration collects interactions under the current stochastic hybrid
policy, minimizes the REPS dual over the temperature and a piecewise value
function, and refits the per-regime controllers by weighted MAP-EM.
Flat REPS (one regime) and Hi-REPS (Fourier value, piecewise policy) are
obtained by configuration.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from itertools import product

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.optimize import minimize

from . import expfam as ef
from .data import Trajectory
from .em import EmOptions, e_step, m_step_closed_form, m_step_transition_sgd
from .envs import EnvSpec, default_init, env_step, hanging_init, swing_up_success
from .errors import DegenerateWeights, DomainError
from .features import FeatureMap, fourier, polynomial
from .priors import HyperParams
from .rarhmm import HybridPolicy, ModelParams, dynamics_mean, gauss_loglik


# ---------------------------------------------------------------------------
# Gaussian expectations of features
# ---------------------------------------------------------------------------

def hermite_rule(d: int, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss-Hermite rule for E[f(z)], z ~ N(0, I_d): nodes (order^d, d), weights."""
    if order < 1:
        raise DomainError("cubature order must be positive")
    x, w = hermgauss(order)
    nodes = np.array(list(product(np.sqrt(2.0) * x, repeat=d))).reshape(-1, d)
    weights = np.prod(np.array(list(product(w / np.sqrt(np.pi), repeat=d))).reshape(-1, d), axis=1)
    return nodes, weights


def min_order(fmap: FeatureMap) -> int:
    """Fewest nodes per dimension that integrate the features exactly."""
    return max(1, int(np.ceil((fmap.degree + 1) / 2))) if fmap.kind == "polynomial" else 1


def expected_features(fmap: FeatureMap, means: np.ndarray, cov_chol: np.ndarray,
                      order: int | None = None) -> np.ndarray:
    """E[psi(x)] for x ~ N(means[i], L L^T), shape (N, P).

    Polynomial features use tensor Gauss-Hermite cubature (exact for
    ``order >= min_order``); Fourier features use the closed form
    E[cos(w.x + b)] = exp(-w.S.w / 2) cos(w.mu + b).
    """
    means = np.atleast_2d(means)
    if fmap.kind == "fourier":
        S = cov_chol @ cov_chol.T
        damp = np.exp(-0.5 * np.einsum("fi,ij,fj->f", fmap.frequencies, S, fmap.frequencies))
        return damp * np.cos(means @ fmap.frequencies.T + fmap.phases)
    order = min_order(fmap) if order is None else order
    nodes, weights = hermite_rule(means.shape[1], order)
    pts = means[:, None, :] + nodes @ cov_chol.T
    return np.einsum("n,inp->ip", weights, fmap(pts))


# ---------------------------------------------------------------------------
# Value function and initial-state mixture
# ---------------------------------------------------------------------------

@dataclass
class ValueFunction:
    features: FeatureMap
    tau: np.ndarray  # (K, P)

    @classmethod
    def zeros(cls, features: FeatureMap, K: int) -> "ValueFunction":
        return cls(features, np.zeros((K, features.size)))

    @property
    def K(self) -> int:
        return self.tau.shape[0]

    def __call__(self, x, z=None) -> np.ndarray:
        """V(x, z) for one regime, or all regimes (..., K) when ``z`` is None."""
        psi = self.features(np.asarray(x, dtype=float))
        vals = psi @ self.tau.T
        return vals if z is None else vals[..., z]


@dataclass
class GaussianMixture:
    weights: np.ndarray   # (K,)
    means: np.ndarray     # (K, d)
    covs: np.ndarray      # (K, d, d)


def initial_mixture(model: ModelParams, x0: np.ndarray, reg: float = 1e-6) -> GaussianMixture:
    """Per-regime Gaussian mixture of initial states with model responsibilities."""
    x0 = np.atleast_2d(x0)
    with np.errstate(divide="ignore"):
        lw = np.log(model.phi)[:, None] + gauss_loglik(
            x0[None] - model.mu[:, None, :], model.chol("Omega"))
    lw -= lw.max(axis=0)
    r = np.exp(lw)
    r /= r.sum(axis=0)
    weights = r.mean(axis=1)
    d = x0.shape[1]
    means = np.zeros((model.K, d))
    covs = np.tile(np.eye(d), (model.K, 1, 1))
    for k in range(model.K):
        if r[k].sum() > 1e-12:
            w = r[k] / r[k].sum()
            means[k] = w @ x0
            diff = x0 - means[k]
            covs[k] = (diff * w[:, None]).T @ diff + reg * np.eye(d)
    return GaussianMixture(weights, means, covs)


def initial_value_features(mix: GaussianMixture, fmap: FeatureMap, order=None) -> np.ndarray:
    """Coefficient matrix M (K, P) with E_mu1[V] = sum_z M[z] . tau_z."""
    out = np.zeros((mix.weights.size, fmap.size))
    for k, wk in enumerate(mix.weights):
        if wk > 0:
            L = np.linalg.cholesky(ef.symmetrize(mix.covs[k]))
            out[k] = wk * expected_features(fmap, mix.means[k][None], L, order)[0]
    return out


def next_value_features(x, u, q, model: ModelParams, fmap: FeatureMap, order=None) -> np.ndarray:
    """Coefficient tensor (N, K, P) with E_{x',z'}[V] = sum_z' F[:, z'] . tau_z'.

    The next regime is distributed as sum_z q(z) chi_{z z'}(x, u).
    """
    x, u, q = np.atleast_2d(x), np.atleast_2d(u), np.atleast_2d(q)
    pz = np.einsum("nz,nzk->nk", q, np.exp(model.link.log_probs(x, u)))
    means = dynamics_mean(model, x, u)
    covL = np.linalg.cholesky(ef.symmetrize(np.linalg.inv(ef.symmetrize(model.Lam))))
    F = np.stack([expected_features(fmap, means[k], covL[k], order) for k in range(model.K)], axis=1)
    return pz[:, :, None] * F


def expected_next_value(x, u, model: ModelParams, value: ValueFunction,
                        cubature_order: int | None = None, zpost=None) -> float:
    """E_{x', z'}[V(x', z')] given (x, u) and a belief ``zpost`` over the current regime."""
    q = np.full(model.K, 1.0 / model.K) if zpost is None else np.asarray(zpost, dtype=float)
    x = np.asarray(x, dtype=float).reshape(1, -1)
    u = np.asarray(u, dtype=float).reshape(1, -1)
    F = next_value_features(x, u, q[None], model, value.features, cubature_order)[0]
    return float(np.sum(F * value.tau))


# ---------------------------------------------------------------------------
# Dual
# ---------------------------------------------------------------------------

@dataclass
class DualProblem:
    """Advantages affine in the value parameters: A = r + D @ vec(tau)."""

    r: np.ndarray   # (N,)
    D: np.ndarray   # (N, K * P)
    epsilon: float
    eta_floor: float = 1e-8
    value_reg: float = 0.0   # optional ridge penalty on tau; keeps the dual bounded

    def advantages(self, tau) -> np.ndarray:
        return self.r + self.D @ np.ravel(tau)


def advantage_matrix(x, u, q, model: ModelParams, fmap: FeatureMap, mu1_feats: np.ndarray,
                     theta: float, order=None) -> np.ndarray:
    """D with A = r + (1 - theta) E_mu1[V] + theta E[V(x', z')] - sum_z q(z) V(x, z)."""
    nxt = next_value_features(x, u, q, model, fmap, order)
    cur = np.asarray(q)[:, :, None] * fmap(np.atleast_2d(x))[:, None, :]
    D = (1.0 - theta) * mu1_feats[None] + theta * nxt - cur
    return D.reshape(D.shape[0], -1)


def advantage(x, u, r: float, q, value: ValueFunction, model: ModelParams,
              mu1_feats: np.ndarray, theta_reset: float, order=None) -> float:
    D = advantage_matrix(np.reshape(x, (1, -1)), np.reshape(u, (1, -1)),
                         np.reshape(q, (1, -1)), model, value.features, mu1_feats,
                         theta_reset, order)
    return float(r + D[0] @ value.tau.ravel())


def effective_sample_size(w: np.ndarray) -> float:
    return float(w.sum() ** 2 / np.sum(w * w))


def empirical_kl(w: np.ndarray) -> float:
    """KL(p || uniform) for the normalized weights p."""
    p = w / w.sum()
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] * p.size)))


def dual_value_grad(problem: DualProblem, tau, eta: float,
                    check_ess: bool = False) -> tuple[float, float, np.ndarray]:
    """G(eta, tau) = eta eps + eta log mean exp(A / eta), with d/d eta and d/d tau."""
    if eta < problem.eta_floor:
        raise DomainError("eta below its floor")
    A = problem.advantages(tau)
    a = A / eta
    mx = a.max()
    e = np.exp(a - mx)
    s = e.sum()
    p = e / s
    lme = mx + np.log(s / A.size)
    tau = np.ravel(tau)
    G = eta * problem.epsilon + eta * lme + 0.5 * problem.value_reg * tau @ tau
    g_eta = problem.epsilon + lme - p @ A / eta
    g_tau = p @ problem.D + problem.value_reg * tau
    if check_ess and effective_sample_size(e) < 3.0:
        raise DegenerateWeights(f"effective sample size {effective_sample_size(e):.2f} < 3")
    return float(G), float(g_eta), g_tau


@dataclass
class DualSolution:
    eta: float
    tau: np.ndarray
    weights: np.ndarray
    dual: float
    kl: float
    ess: float
    history: list = field(default_factory=list)
    converged: bool = True


def minimize_dual(problem: DualProblem, tau0=None, eta0: float = 1.0,
                  max_evals: int = 500, gtol: float = 1e-6) -> DualSolution:
    """Quasi-Newton minimization over (log(eta - floor), tau)."""
    n = problem.r.size
    if n < 10:
        raise DomainError("the dual needs at least 10 samples")
    nt = problem.D.shape[1]
    tau0 = np.zeros(nt) if tau0 is None else np.ravel(tau0).astype(float)
    floor = problem.eta_floor

    def fun(v):
        eta = floor + np.exp(v[0])
        G, ge, gt = dual_value_grad(problem, v[1:], eta)
        return G, np.concatenate([[ge * (eta - floor)], gt])

    v0 = np.concatenate([[np.log(max(eta0 - floor, 1e-12))], tau0])
    history = [fun(v0)[0]]
    res = minimize(fun, v0, jac=True, method="L-BFGS-B",
                   bounds=[(np.log(1e-12), 50.0)] + [(None, None)] * nt,
                   callback=lambda v: history.append(fun(v)[0]),
                   options={"maxfun": max_evals, "maxiter": max_evals, "gtol": gtol,
                            "ftol": 1e-15, "maxcor": 20})
    v = res.x
    eta = floor + np.exp(v[0])
    tau = v[1:]
    A = problem.advantages(tau)
    w = np.exp((A - A.max()) / eta)
    ess = effective_sample_size(w)
    if ess < 3.0:
        raise DegenerateWeights(f"effective sample size {ess:.2f} < 3")
    return DualSolution(eta, tau, w, float(res.fun), empirical_kl(w), ess, history,
                        bool(np.linalg.norm(res.jac) < gtol * 10 or res.success))


# ---------------------------------------------------------------------------
# Policy improvement
# ---------------------------------------------------------------------------

def weighted_baum_welch(dataset, weights, model: ModelParams, hyper: HyperParams,
                        options: EmOptions | None = None, update_dynamics: bool = False,
                        update_transitions: bool = False, rng=None) -> ModelParams:
    """Weighted MAP refit of the controller blocks (and optionally the dynamics).

    The E-step is unchanged; responsibilities are scaled by the per-step
    weights normalized by their maximum.
    """
    options = options or EmOptions()
    flat = np.concatenate([np.ravel(w) for w in weights])
    if np.any(flat < 0) or not np.all(np.isfinite(flat)) or flat.max() <= 0:
        raise DomainError("weights must be non-negative, finite and not all zero")
    scaled = [np.ravel(w) / flat.max() for w in weights]
    keep = [n for n, w in enumerate(scaled) if np.any(w > 0)]
    data = [dataset[n] for n in keep]
    sw = [scaled[n] for n in keep]
    posts = e_step(data, model)
    opts = EmOptions(**{**options.__dict__, "update_dynamics": update_dynamics,
                        "update_controller": True})
    new = m_step_closed_form(data, posts, model, hyper, opts, step_weights=sw)
    if update_transitions and model.K > 1:
        new.link = m_step_transition_sgd(data, posts, new.link, hyper.alpha, opts, rng,
                                         step_weights=sw)
    return new


# ---------------------------------------------------------------------------
# Main loop
# ---------------------------------------------------------------------------

@dataclass
class RepsConfig:
    epsilon: float = 1.0
    theta_reset: float = 0.98
    samples_per_iter: int = 5000
    iters: int = 30
    value_degree: int = 3
    policy_degree: int = 3
    cubature_order: int | None = None
    eta_floor: float = 1e-8
    dual_gtol: float = 1e-6
    value_reg: float = 1e-2
    mode: str = "hbreps"
    fourier_policy: int = 50
    fourier_value: int = 75
    fourier_bandwidth: float = 1.0
    init_std: float | None = None       # initial exploration std; default half the limit
    min_std_frac: float = 0.05
    max_segment: int = 500
    eval_rollouts: int = 20
    eval_steps: int = 500
    smoothed_q: bool = False
    reset_init: str = "hanging"         # reset distribution for samples: hanging or broad
    refresh_dynamics: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.epsilon <= 0 or not 0.0 <= self.theta_reset < 1.0:
            raise DomainError("need epsilon > 0 and theta_reset in [0, 1)")
        if self.mode not in ("hbreps", "hireps", "flat_reps"):
            raise DomainError(f"unknown mode {self.mode!r}")
        if self.reset_init not in ("hanging", "broad"):
            raise DomainError(f"unknown reset_init {self.reset_init!r}")


@dataclass
class Samples:
    segments: list          # list[Trajectory], one per reset segment
    x: np.ndarray
    u: np.ndarray
    r: np.ndarray
    q: np.ndarray           # filtered regime belief at each step
    lengths: list

    def split(self, values: np.ndarray) -> list[np.ndarray]:
        return np.split(np.asarray(values), np.cumsum(self.lengths)[:-1])


def collect_samples(spec: EnvSpec, policy: HybridPolicy, n: int, theta: float, init,
                    max_segment: int, rng) -> Samples:
    """``n`` interactions; each step resets to the initial distribution with prob 1 - theta."""
    xs, us, rs, qs, xn, lengths, segs = [], [], [], [], [], [], []
    total = 0
    while total < n:
        policy.reset()
        x = init(rng)
        sx, su, sr, sq = [], [], [], []
        while True:
            u = policy(x, rng)
            step = env_step(spec, x, u, rng)
            sx.append(x)
            su.append(np.clip(u, -spec.action_limit, spec.action_limit))
            sr.append(step.reward)
            sq.append(policy.belief)
            x = step.next_state
            total += 1
            if total >= n or len(sx) >= max_segment or rng.random() > theta:
                break
        segs.append(Trajectory(np.array(sx), np.array(su).reshape(len(sx), -1), spec.dt,
                               id=str(len(segs)), env=spec.id))
        xs += sx; us += su; rs += sr; qs += sq; lengths.append(len(sx))
    return Samples(segs, np.array(xs), np.array(us).reshape(len(xs), -1), np.array(rs),
                   np.array(qs), lengths)


@dataclass
class HbRepsResult:
    model: ModelParams
    value: ValueFunction
    curve: list[dict]
    success: list[float]
    # last iteration's inputs and dual solution, kept for diagnostics
    samples: Samples | None = None
    solution: DualSolution | None = None
    initial_states: np.ndarray | None = None


def attach_policy(model: ModelParams, features: FeatureMap, std: float) -> ModelParams:
    """Fresh controller blocks: zero gains and isotropic exploration noise."""
    K, m = model.K, model.m
    return model.copy(ctl_features=features, Kc=np.zeros((K, m, features.size)),
                      Delta=np.tile(np.eye(m) / std ** 2, (K, 1, 1)))


def evaluate_policy(spec: EnvSpec, model: ModelParams, n: int, T: int, init, rng,
                    mode: str = "mean"):
    """Mean-action rollouts; returns (returns per rollout, success flags)."""
    from .envs import rollout

    pol = HybridPolicy(model, mode, action_limit=spec.action_limit)
    rets, succ = [], []
    for _ in range(n):
        traj, r = rollout(spec, pol, T, init(rng), rng)
        rets.append(r.mean())
        succ.append(swing_up_success(spec, traj) if spec.is_pendulum or spec.is_cartpole
                    else False)
    return np.array(rets), np.array(succ)


def policy_features(config: RepsConfig, d: int) -> tuple[FeatureMap, FeatureMap]:
    """(policy features, value features) for the configured variant."""
    bw = config.fourier_bandwidth
    if config.mode == "flat_reps":
        return (fourier(d, config.fourier_policy, bw, config.seed),
                fourier(d, config.fourier_value, bw, config.seed + 1))
    vf = (fourier(d, config.fourier_value, bw, config.seed + 1) if config.mode == "hireps"
          else polynomial(d, config.value_degree))
    return polynomial(d, config.policy_degree), vf


def hbreps_iterate(spec: EnvSpec, model: ModelParams, config: RepsConfig,
                   hyper: HyperParams | None = None, rng=None, init=None,
                   callback=None) -> HbRepsResult:
    """Run ``config.iters`` iterations of hybrid REPS from a pre-trained model."""
    rng = np.random.default_rng(config.seed if rng is None else rng)
    if config.mode == "flat_reps" and model.K != 1:
        raise DomainError("flat REPS needs a single-regime model")
    init = init or hanging_init(spec)
    reset = default_init(spec) if config.reset_init == "broad" else init
    d, m = model.d, model.m
    pf, vf = policy_features(config, d)
    std0 = config.init_std or 0.5 * spec.action_limit
    if model.closed_loop:
        pf = model.ctl_features
    else:
        model = attach_policy(model, pf, std0)
    if hyper is None:
        hyper = HyperParams.default(model.K, d, m, pf.size, u_var=np.full(m, std0 ** 2))
    x0 = np.array([reset(rng) for _ in range(1000)])
    mu1 = initial_value_features(initial_mixture(model, x0), vf, config.cubature_order)
    value = ValueFunction.zeros(vf, model.K)
    eta = 1.0
    curve, success = [], []
    smp = sol = None
    min_std = config.min_std_frac * spec.action_limit
    t0 = time.perf_counter()
    for it in range(config.iters):
        pol = HybridPolicy(model, "sample", min_std=min_std, action_limit=spec.action_limit)
        smp = collect_samples(spec, pol, config.samples_per_iter, config.theta_reset, reset,
                              config.max_segment, rng)
        q = smp.q
        if config.smoothed_q:
            q = np.concatenate([p.gamma for p in e_step(smp.segments, model)])
        D = advantage_matrix(smp.x, smp.u, q, model, vf, mu1, config.theta_reset,
                             config.cubature_order)
        problem = DualProblem(smp.r, D, config.epsilon, config.eta_floor, config.value_reg)
        sol = minimize_dual(problem, value.tau.ravel(), eta, gtol=config.dual_gtol)
        eta, value = sol.eta, ValueFunction(vf, sol.tau.reshape(model.K, vf.size))
        model = weighted_baum_welch(smp.segments, smp.split(sol.weights), model, hyper,
                                    update_dynamics=config.refresh_dynamics,
                                    update_transitions=config.refresh_dynamics, rng=rng)
        rets, succ = evaluate_policy(spec, model, config.eval_rollouts, config.eval_steps,
                                     init, rng)
        row = {"iter": it, "mean_reward": float(rets.mean()), "std_reward": float(rets.std()),
               "eta": eta, "dual": sol.dual, "kl_empirical": sol.kl, "ess": sol.ess,
               "success": float(succ.mean()), "sample_reward": float(smp.r.mean()),
               "seconds": time.perf_counter() - t0}
        curve.append(row)
        success.append(float(succ.mean()))
        if callback is not None:
            callback(row)
    return HbRepsResult(model, value, curve, success, smp, sol, x0)
