"""MAP expectation-maximization for rARHMM models.

The E-step is a scaled forward-backward pass in log space. The M-step updates
the conjugate blocks in closed form, the logit link by gradient ascent, and
optionally takes an empirical-Bayes step on the hyperparameters.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.optimize import minimize

from . import expfam as ef
from .data import Trajectory, dims
from .errors import AllRegimesCollapsed, FilterUnderflow
from .features import FeatureMap
from .priors import HyperParams, eb_step, log_prior
from .rarhmm import LogitLink, ModelParams, log_likelihoods, transition_log_matrices


@dataclass
class SmoothedPosteriors:
    gamma: np.ndarray   # (T, K)
    xi: np.ndarray      # (T-1, K, K)
    loglik: float


@dataclass
class EmOptions:
    max_iters: int = 100
    tol: float = 1e-6
    # transition update: "sgd" (scheduled stochastic ascent) or "lbfgs" (full batch)
    transition_solver: str = "sgd"
    sgd_batch: int = 256
    sgd_step: float = 1e-2
    sgd_decay: float = 100.0
    sgd_epochs: int = 5
    lbfgs_iters: int = 100
    eb: bool = True
    eb_step: float = 1e-2
    eb_enabled: tuple | None = None   # None adapts every hyperparameter block
    eb_burnin: int = 3
    update_dynamics: bool = True
    update_controller: bool = True
    update_transitions: bool = True
    link_kind: str = "linear"
    link_width: int = 16
    init_iters: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.tol <= 0 or self.sgd_step <= 0 or self.eb_step <= 0:
            raise ValueError("tolerances and step sizes must be positive")
        if self.transition_solver not in ("sgd", "lbfgs"):
            raise ValueError(f"unknown transition solver {self.transition_solver!r}")


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------

def _lse0(a: np.ndarray) -> np.ndarray:
    mx = a.max(axis=0)
    safe = np.where(np.isfinite(mx), mx, 0.0)
    return safe + np.log(np.sum(np.exp(a - safe), axis=0))


def _forward(ll: np.ndarray, logP: np.ndarray, traj_id: str = ""):
    T, K = ll.shape
    log_alpha = np.empty((T, K))
    lognorm = np.empty(T)
    a = ll[0]
    for t in range(T):
        if t > 0:
            a = _lse0(log_alpha[t - 1][:, None] + logP[t - 1]) + ll[t]
        mx = a.max()
        if not np.isfinite(mx):
            raise FilterUnderflow(f"trajectory {traj_id!r}: zero likelihood at step {t}")
        c = mx + np.log(np.sum(np.exp(a - mx)))
        lognorm[t] = c
        log_alpha[t] = a - c
    return log_alpha, lognorm


def _backward(ll: np.ndarray, logP: np.ndarray, lognorm: np.ndarray) -> np.ndarray:
    T, K = ll.shape
    log_beta = np.zeros((T, K))
    for t in range(T - 2, -1, -1):
        b = ll[t + 1] + log_beta[t + 1] - lognorm[t + 1]
        a = logP[t] + b[None, :]
        mx = a.max(axis=1)
        safe = np.where(np.isfinite(mx), mx, 0.0)
        log_beta[t] = safe + np.log(np.sum(np.exp(a - safe[:, None]), axis=1))
    return log_beta


def _scaled_pass(ll: np.ndarray, logP: np.ndarray):
    """Linear-space scaled forward-backward; None when a step underflows."""
    T, K = ll.shape
    mx = ll.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(mx)):
        return None
    E = np.exp(ll - mx)
    P = np.exp(logP)
    alpha = np.empty((T, K))
    s = np.empty(T)
    a = E[0]
    for t in range(T):
        if t > 0:
            a = (alpha[t - 1] @ P[t - 1]) * E[t]
        s[t] = a.sum()
        if not s[t] > 1e-280:
            return None
        alpha[t] = a / s[t]
    beta = np.ones((T, K))
    for t in range(T - 2, -1, -1):
        beta[t] = P[t] @ (E[t + 1] * beta[t + 1]) / s[t + 1]
    with np.errstate(divide="ignore"):
        return np.log(alpha), np.log(beta), np.log(s) + mx[:, 0]


def _messages(traj: Trajectory, model: ModelParams, need_beta: bool = True):
    ll = log_likelihoods(model, traj)
    logP = transition_log_matrices(model, traj)
    fast = _scaled_pass(ll, logP)
    if fast is not None and np.all(np.isfinite(fast[1])):
        return ll, logP, *fast
    log_alpha, lognorm = _forward(ll, logP, traj.id)
    log_beta = _backward(ll, logP, lognorm) if need_beta else None
    return ll, logP, log_alpha, log_beta, lognorm


def forward_messages(traj: Trajectory, model: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Filtered regime marginals (T, K) and per-step log normalizers (T,)."""
    _, _, log_alpha, _, lognorm = _messages(traj, model, need_beta=False)
    return np.exp(log_alpha), lognorm


def backward_messages(traj: Trajectory, model: ModelParams,
                      log_normalizers: np.ndarray) -> np.ndarray:
    """Scaled backward messages; the last row is all ones."""
    ll = log_likelihoods(model, traj)
    return np.exp(_backward(ll, transition_log_matrices(model, traj), log_normalizers))


def smoothed_posteriors(traj: Trajectory, model: ModelParams) -> SmoothedPosteriors:
    ll, logP, log_alpha, log_beta, lognorm = _messages(traj, model)
    lg = log_alpha + log_beta
    gamma = np.exp(lg - lg.max(axis=1, keepdims=True))
    gamma /= gamma.sum(axis=1, keepdims=True)
    if len(traj) > 1:
        lx = (log_alpha[:-1, :, None] + logP + (ll[1:] + log_beta[1:])[:, None, :]
              - lognorm[1:, None, None])
        xi = np.exp(lx - lx.max(axis=(1, 2), keepdims=True))
        xi /= xi.sum(axis=(1, 2), keepdims=True)
    else:
        xi = np.zeros((0, model.K, model.K))
    return SmoothedPosteriors(gamma, xi, float(np.sum(lognorm)))


def e_step(dataset, model: ModelParams) -> list[SmoothedPosteriors]:
    return [smoothed_posteriors(traj, model) for traj in dataset]


def gamma_entropy(posteriors) -> float:
    g = np.concatenate([p.gamma for p in posteriors])
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(g > 0, g * np.log(g), 0.0).sum(axis=1)
    return float(h.mean())


# ---------------------------------------------------------------------------
# M-step
# ---------------------------------------------------------------------------

def _regressors(traj: Trajectory) -> np.ndarray:
    x, u = traj.x[:-1], traj.u[:-1]
    return np.hstack([x, u, np.ones((x.shape[0], 1))])


def _weighted(dataset, posteriors, step_weights=None):
    """Yield (traj, gamma, xi) with trajectory and per-step weights folded in."""
    for n, (traj, post) in enumerate(zip(dataset, posteriors)):
        w = np.full(len(traj), float(traj.weight))
        if step_weights is not None:
            w = w * np.asarray(step_weights[n], dtype=float)
        yield traj, post.gamma * w[:, None], post.xi * w[:-1, None, None]


def sufficient_stats(dataset, posteriors, model: ModelParams, step_weights=None) -> dict:
    """Per-regime weighted statistics for every conjugate block."""
    K, d, m = model.K, model.d, model.m
    q = d + m + 1
    init = [ef.GaussianStats.zeros(d) for _ in range(K)]
    dyn = [ef.LinearGaussianStats.zeros(d, q) for _ in range(K)]
    ctl = None
    if model.closed_loop:
        p = model.ctl_features.size
        ctl = [ef.LinearGaussianStats.zeros(m, p) for _ in range(K)]
    counts = np.zeros(K)
    for traj, g, _ in _weighted(dataset, posteriors, step_weights):
        counts += g[0]
        X = _regressors(traj) if len(traj) > 1 else np.zeros((0, q))
        feats = model.ctl_features(traj.x) if ctl is not None else None
        for k in range(K):
            init[k] = init[k] + ef.GaussianStats.from_data(traj.x[:1], g[:1, k])
            if len(traj) > 1:
                dyn[k] = dyn[k] + ef.LinearGaussianStats.from_data(X, traj.x[1:], g[1:, k])
            if ctl is not None:
                ctl[k] = ctl[k] + ef.LinearGaussianStats.from_data(feats, traj.u, g[:, k])
    return {"counts": counts, "init": init, "dyn": dyn, "ctl": ctl}


def m_step_closed_form(dataset, posteriors, model: ModelParams, hyper: HyperParams,
                       options: EmOptions | None = None, step_weights=None) -> ModelParams:
    """Closed-form MAP updates of phi, initial Gaussians, dynamics and controllers."""
    options = options or EmOptions()
    st = sufficient_stats(dataset, posteriors, model, step_weights)
    K, d, m = model.K, model.d, model.m
    new = model.copy()
    if options.update_dynamics:
        new.phi = ef.dirichlet_map(ef.DirichletParams(hyper.tau0), ef.CategoricalStats(st["counts"]))
        nw = hyper.nw_prior()
        for k in range(K):
            new.mu[k], new.Omega[k] = ef.nw_posterior_mode(nw, st["init"][k])
        dp = hyper.dynamics_prior()
        posts = [ef.mnw_posterior(dp, st["dyn"][k]) for k in range(K)]
        for k in range(K):
            W = posts[k].M
            new.A[k], new.B[k], new.c[k] = W[:, :d], W[:, d:d + m], W[:, -1]
        if hyper.tied_noise:
            q = d + m + 1
            scatter = ef.spd_inverse(hyper.Phi0) + sum(
                ef.spd_inverse(p.Psi) - ef.spd_inverse(hyper.Phi0) for p in posts)
            dof = hyper.rho0 + sum(s.n for s in st["dyn"]) + K * q - d - 1
            Lam = ef.spd_repair(dof * ef.spd_inverse(ef.symmetrize(scatter)))
            new.Lam[:] = Lam
        else:
            for k in range(K):
                new.Lam[k] = ef.mnw_mode(posts[k])[1]
    if options.update_controller and model.closed_loop and hyper.has_controller:
        cp = hyper.controller_prior()
        for k in range(K):
            new.Kc[k], new.Delta[k] = ef.mnw_posterior_mode(cp, st["ctl"][k])
    return new


def _transition_data(dataset, posteriors, step_weights=None):
    xs, us, xis = [], [], []
    for traj, _, xi in _weighted(dataset, posteriors, step_weights):
        if len(traj) > 1:
            xs.append(traj.x[:-1])
            us.append(traj.u[:-1])
            xis.append(xi)
    if not xs:
        return None
    return np.concatenate(xs), np.concatenate(us), np.concatenate(xis)


def transition_objective(link: LogitLink, params: np.ndarray, x, u, xi,
                         alpha: float) -> tuple[float, np.ndarray]:
    """sum xi log chi + log N(omega | 0, alpha^-1 I) (up to a constant) and gradient."""
    val, grad = link.objective_and_grad(x, u, xi, params)
    return val - 0.5 * alpha * params @ params, grad - alpha * params


def m_step_transition_sgd(dataset, posteriors, link: LogitLink, alpha: float,
                          options: EmOptions | None = None, rng=None,
                          step_weights=None) -> LogitLink:
    """Update the logit-link weights on the expected transition log-likelihood."""
    options = options or EmOptions()
    data = _transition_data(dataset, posteriors, step_weights)
    if data is None:
        return link
    x, u, xi = data
    w0 = link.params.copy()
    f0, _ = transition_objective(link, w0, x, u, xi, alpha)

    if options.transition_solver == "lbfgs":
        res = minimize(lambda w: tuple(-v for v in transition_objective(link, w, x, u, xi, alpha)),
                       w0, jac=True, method="L-BFGS-B",
                       options={"maxiter": options.lbfgs_iters, "gtol": 1e-9, "ftol": 1e-15})
        w = res.x if -res.fun >= f0 else w0
        return link.with_params(w)

    rng = np.random.default_rng(rng)
    n = x.shape[0]
    batch = min(options.sgd_batch, n)
    scale = n / batch
    w = w0.copy()
    best_w, best_f = w0, f0
    step = 0
    for _ in range(options.sgd_epochs):
        order = rng.permutation(n)
        for s in range(0, n - batch + 1, batch):
            idx = order[s:s + batch]
            _, g = link.objective_and_grad(x[idx], u[idx], xi[idx], w)
            g = scale * g - alpha * w
            gn = np.linalg.norm(g)
            if not np.isfinite(gn):
                continue
            if gn > 100.0:
                g *= 100.0 / gn
            w = w + options.sgd_step / (1.0 + step / options.sgd_decay) * g
            step += 1
        f, _ = transition_objective(link, w, x, u, xi, alpha)
        if f > best_f:
            best_w, best_f = w.copy(), f
    return link.with_params(best_w)


def expected_log_joint(dataset, posteriors, model: ModelParams, hyper: HyperParams,
                       step_weights=None) -> float:
    """Q(theta): expected complete-data log-probability plus log prior."""
    total = 0.0
    for traj, g, xi in _weighted(dataset, posteriors, step_weights):
        total += float(np.sum(g * log_likelihoods(model, traj)))
        if len(traj) > 1:
            total += float(np.sum(xi * transition_log_matrices(model, traj)))
    return total + log_prior(model, hyper)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def default_hyper(dataset, K: int, ctl_features: FeatureMap | None = None,
                  tied_noise: bool = False) -> HyperParams:
    """Weak priors scaled to the data."""
    d, m = dims(dataset)
    x = np.concatenate([t.x for t in dataset])
    x_var = np.maximum(x.var(axis=0), 1e-6)
    dx = np.concatenate([np.diff(t.x, axis=0) for t in dataset if len(t) > 1] or [np.zeros((1, d))])
    noise_var = np.maximum(1e-2 * dx.var(axis=0), 1e-8)
    u_var = None
    if m > 0:
        u_var = np.maximum(np.concatenate([t.u for t in dataset]).var(axis=0), 1e-6)
    p = ctl_features.size if ctl_features is not None else None
    return HyperParams.default(K, d, m, p, x_var=x_var, noise_var=noise_var,
                               u_var=u_var, tied_noise=tied_noise)


def initialize(dataset, hyper: HyperParams, K: int, options: EmOptions, rng,
               ctl_features: FeatureMap | None = None) -> ModelParams:
    """Prior draw for the link, then residual-based regime seeding.

    Steps are clustered by k-means on standardized (x, u, x' - x); the
    clusters are then refined by alternating per-regime regressions and
    reassignment to the regime with the smallest residual.
    """
    rng = np.random.default_rng(rng)
    d, m = dims(dataset)
    s = np.concatenate([np.hstack([t.x, t.u]) for t in dataset])
    shift, scale = s.mean(axis=0), np.maximum(s.std(axis=0), 1e-8)
    link = LogitLink.create(options.link_kind, K, d + m, options.link_width, rng,
                            shift=shift, scale=scale)
    phi = rng.dirichlet(hyper.tau0)
    Kc = Delta = None
    if ctl_features is not None:
        Kc = np.zeros((K, m, ctl_features.size))
        Delta = np.tile(np.eye(m), (K, 1, 1))
    model = ModelParams(phi, np.zeros((K, d)), np.tile(np.eye(d), (K, 1, 1)),
                        np.tile(np.eye(d), (K, 1, 1)), np.zeros((K, d, m)), np.zeros((K, d)),
                        np.tile(np.eye(d), (K, 1, 1)), link, ctl_features, Kc, Delta)

    feats = []
    for t in dataset:
        dx = np.vstack([np.diff(t.x, axis=0), np.zeros((1, d))]) if len(t) > 1 else np.zeros((1, d))
        feats.append(np.hstack([t.x, t.u, dx]))
    F = np.concatenate(feats)
    F = (F - F.mean(axis=0)) / np.maximum(F.std(axis=0), 1e-8)
    if K == 1:
        flat = np.zeros(F.shape[0], dtype=int)
    else:
        _, flat = kmeans2(F, K, minit="++", seed=rng, iter=20)
    lengths = np.cumsum([len(t) for t in dataset])[:-1]
    labels = np.split(flat, lengths)

    opts = EmOptions(update_controller=True, update_dynamics=True)
    for _ in range(options.init_iters):
        model = m_step_closed_form(dataset, _hard_posteriors_k(labels, K), model, hyper, opts)
        new_labels = []
        for traj, lab in zip(dataset, labels):
            ll = log_likelihoods(model, traj)
            new = np.argmax(ll, axis=1)
            new[0] = lab[1] if len(traj) > 1 else lab[0]
            new_labels.append(new)
        counts = np.bincount(np.concatenate(new_labels), minlength=K)
        if np.any(counts == 0):
            break
        if all(np.array_equal(a, b) for a, b in zip(labels, new_labels)):
            labels = new_labels
            break
        labels = new_labels
    hard = _hard_posteriors_k(labels, K)
    model = m_step_closed_form(dataset, hard, model, hyper, opts)
    if options.update_transitions and K > 1:
        lb = EmOptions(transition_solver="lbfgs", lbfgs_iters=50)
        model.link = m_step_transition_sgd(dataset, hard, model.link, hyper.alpha, lb)
    return model


def _hard_posteriors_k(labels, K: int) -> list[SmoothedPosteriors]:
    out = []
    for lab in labels:
        g = np.eye(K)[lab]
        out.append(SmoothedPosteriors(g, g[:-1, :, None] * g[1:, None, :], 0.0))
    return out


# ---------------------------------------------------------------------------
# Main loop
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    model: ModelParams
    hyper: HyperParams
    diagnostics: list[dict] = field(default_factory=list)
    posteriors: list[SmoothedPosteriors] | None = None

    def __iter__(self):
        return iter((self.model, self.diagnostics))


def _log_posterior_from(posteriors, dataset, model, hyper) -> tuple[float, float]:
    ll = sum(traj.weight * p.loglik for traj, p in zip(dataset, posteriors))
    return ll + log_prior(model, hyper), ll


def _reseed_regime(model: ModelParams, k: int, dataset, posteriors, rng) -> ModelParams:
    """Move a collapsed regime onto the worst-explained steps."""
    scores, locs = [], []
    for n, (traj, post) in enumerate(zip(dataset, posteriors)):
        ll = log_likelihoods(model, traj)
        scores.append(np.sum(post.gamma * ll, axis=1))
        locs.extend((n, t) for t in range(len(traj)))
    scores = np.concatenate(scores)
    worst = np.argsort(scores)[:max(10, scores.size // (4 * model.K))]
    new_post = []
    for n, (traj, post) in enumerate(zip(dataset, posteriors)):
        g = post.gamma.copy()
        new_post.append(SmoothedPosteriors(g, post.xi.copy(), post.loglik))
    for i in worst:
        n, t = locs[i]
        new_post[n].gamma[t] = np.eye(model.K)[k]
    return new_post


def fit_em(dataset, hyper: HyperParams | None = None, K: int = 2,
           options: EmOptions | None = None, rng=None,
           ctl_features: FeatureMap | None = None, init_model: ModelParams | None = None,
           callback=None) -> FitResult:
    """MAP-EM with optional empirical-Bayes hyperparameter adaptation."""
    if not dataset:
        raise ValueError("dataset is empty")
    if K < 1:
        raise ValueError("K must be at least 1")
    options = options or EmOptions()
    rng = np.random.default_rng(options.seed if rng is None else rng)
    if hyper is None:
        hyper = default_hyper(dataset, K, ctl_features)
    model = init_model if init_model is not None else initialize(
        dataset, hyper, K, options, rng, ctl_features)

    total_steps = sum(len(t) for t in dataset)
    collapse_run = np.zeros(K, dtype=int)
    reseeded = np.zeros(K, dtype=bool)
    diagnostics: list[dict] = []
    best = (-np.inf, model, hyper, None)
    prev = None
    t0 = time.perf_counter()
    for it in range(options.max_iters + 1):
        posteriors = e_step(dataset, model)
        lp, ll = _log_posterior_from(posteriors, dataset, model, hyper)
        diagnostics.append({"iter": it, "log_posterior": lp, "loglik": ll,
                            "dQ": 0.0 if prev is None else lp - prev,
                            "gamma_entropy": gamma_entropy(posteriors),
                            "seconds": time.perf_counter() - t0})
        if callback is not None:
            callback(it, model, diagnostics[-1])
        if lp > best[0]:
            best = (lp, model, hyper, posteriors)
        if prev is not None and abs(lp - prev) <= options.tol * max(abs(prev), 1.0):
            break
        if it == options.max_iters:
            break
        prev = lp

        resp = sum(p.gamma.sum(axis=0) for p in posteriors)
        collapsed = resp < 1e-6 * total_steps
        collapse_run = np.where(collapsed, collapse_run + 1, 0)
        for k in np.flatnonzero(collapse_run >= 5):
            if reseeded[k]:
                raise AllRegimesCollapsed(f"regime {k} collapsed after re-seeding")
            reseeded[k] = True
            collapse_run[k] = 0
            posteriors = _reseed_regime(model, k, dataset, posteriors, rng)

        model = m_step_closed_form(dataset, posteriors, model, hyper, options)
        if options.update_transitions and K > 1:
            model.link = m_step_transition_sgd(dataset, posteriors, model.link, hyper.alpha,
                                               options, rng)
        if options.eb and it + 1 > options.eb_burnin:
            hyper = eb_step(model, hyper, options.eb_step, options.eb_enabled)
    return FitResult(best[1], best[2], diagnostics, best[3])
