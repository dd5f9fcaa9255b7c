"""Convex-concave finite-sum saddle problems with exact oracles, stochastic
descent / block-coordinate ascent solvers, regret and duality-gap measurement.

Instance loss::

    l_i(theta, x_i) = theta' A_i x_i + w_i' theta + mu/2 |theta|^2 - lam/2 |x_i - x0_i|^2

theta lives in the L2 ball of radius ``D`` around the origin and each x_i in
the L-inf box of radius ``eps`` around ``x0_i``. ``phi`` is the mean over
instances. ``lam = mu = 0`` and ``w = 0`` is the bilinear case.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

PRECOND_FLOOR = 1e-12


class ReferenceSolveError(RuntimeError):
    pass


@dataclass
class SaddleProblem:
    A: np.ndarray            # (n, p, d)
    x0: np.ndarray           # (n, d)
    epsilon: float
    radius: float = 1.0      # theta ball
    w: np.ndarray | None = None   # (n, p)
    lam: float = 0.0
    mu: float = 0.0

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        if self.A.ndim != 3 or self.x0.shape != (self.A.shape[0], self.A.shape[2]):
            raise ValueError("A must be (n, p, d) and x0 (n, d)")
        if self.w is None:
            self.w = np.zeros(self.A.shape[:2])
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.w.shape != self.A.shape[:2]:
            raise ValueError("w must be (n, p)")
        if self.epsilon < 0 or self.radius <= 0 or self.lam < 0 or self.mu < 0:
            raise ValueError("need epsilon >= 0, radius > 0, lam >= 0, mu >= 0")
        self.w_mean = self.w.mean(axis=0)

    @property
    def kind(self):
        return "bilinear" if self.lam == 0 and self.mu == 0 and not self.w.any() else "quadratic"

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def p(self):
        return self.A.shape[1]

    @property
    def d(self):
        return self.A.shape[2]

    # pieces ------------------------------------------------------------------

    def coupling(self, x):
        """``m(x) = mean_i (A_i x_i + w_i)``, the theta-gradient of phi without the mu term."""
        return np.einsum("npd,nd->p", self.A, x) / self.n + self.w_mean

    def penalty(self, x):
        """``mean_i lam/2 |x_i - x0_i|^2``."""
        return 0.5 * self.lam * np.sum((x - self.x0) ** 2) / self.n

    def phi(self, theta, x):
        return float(theta @ self.coupling(x) + 0.5 * self.mu * theta @ theta - self.penalty(x))

    def grad_x(self, k, theta, xk):
        return self.A[k].T @ theta - self.lam * (xk - self.x0[k])

    def grad_theta(self, k, theta, xk):
        return self.A[k] @ xk + self.w[k] + self.mu * theta

    def project_theta(self, theta):
        nrm = np.linalg.norm(theta)
        return theta if nrm <= self.radius else theta * (self.radius / nrm)

    def project_x(self, k, xk):
        return np.clip(xk, self.x0[k] - self.epsilon, self.x0[k] + self.epsilon)

    # oracles -----------------------------------------------------------------

    def inner_max(self, theta):
        """Exact ``argmax_x phi(theta, x)`` over the boxes and its value."""
        theta = np.asarray(theta, dtype=np.float64)
        s = np.einsum("npd,p->nd", self.A, theta)
        if self.lam > 0:
            x = np.clip(self.x0 + s / self.lam, self.x0 - self.epsilon, self.x0 + self.epsilon)
        else:
            x = self.x0 + self.epsilon * np.sign(s)
        return x, self.phi(theta, x)

    def max_value(self, thetas):
        """``max_x phi(theta, x)`` for each row of ``thetas`` (vectorized)."""
        th = np.atleast_2d(thetas)
        out = np.empty(th.shape[0])
        base = th @ self.w_mean + 0.5 * self.mu * np.sum(th * th, axis=1)
        for s0 in range(0, th.shape[0], 2048):
            t = th[s0:s0 + 2048]
            s = np.einsum("npd,tp->tnd", self.A, t)
            lin = np.einsum("tnd,nd->t", s, self.x0)
            if self.lam > 0:
                u = np.clip(s / self.lam, -self.epsilon, self.epsilon)
                extra = np.sum(s * u - 0.5 * self.lam * u * u, axis=(1, 2))
            else:
                extra = self.epsilon * np.sum(np.abs(s), axis=(1, 2))
            out[s0:s0 + 2048] = (lin + extra) / self.n
        return out + base

    def theta_for(self, m):
        """Minimizer over the ball of ``theta' m + mu/2 |theta|^2``."""
        m = np.asarray(m, dtype=np.float64)
        nrm = np.linalg.norm(m)
        if self.mu > 0 and nrm <= self.mu * self.radius:
            return -m / self.mu
        return np.zeros_like(m) if nrm == 0 else -self.radius * m / nrm

    def min_value_from(self, m, pen):
        """``min_theta phi(theta, x)`` given ``m = coupling(x)`` and ``pen = penalty(x)``; rows vectorize."""
        m = np.atleast_2d(m)
        nrm = np.linalg.norm(m, axis=1)
        D = self.radius
        if self.mu > 0:
            inside = nrm <= self.mu * D
            val = np.where(inside, -nrm ** 2 / (2 * self.mu), -D * nrm + 0.5 * self.mu * D * D)
        else:
            val = -D * nrm
        return val - np.asarray(pen)

    def inner_min(self, x):
        """Exact ``argmin_theta phi(theta, x)`` over the ball and its value."""
        m = self.coupling(x)
        return self.theta_for(m), float(self.min_value_from(m, self.penalty(x))[0])


# ---------------------------------------------------------------------------
# problem families


def _normalize_spectral(A, target):
    s = np.linalg.norm(A, ord=2, axis=(1, 2))
    return A * (target / s)[:, None, None]


def make_bilinear(n=50, d=10, p=10, epsilon=0.05, radius=1.0, tail="pareto",
                  pareto_a=1.5, offset=1.0, seed=0) -> SaddleProblem:
    """Random bilinear problem.

    Every ``A_i`` is a Gaussian matrix rescaled to spectral norm ``s_i``, so the
    per-instance input-gradient bound is exactly ``radius * s_i``. ``s_i`` is
    classical Pareto(``pareto_a``) for ``tail="pareto"`` and 1 for
    ``tail="equal"``. Box centres ``x0_i`` have scale ``offset``; with the
    default budget this keeps zero away from the reachable couplings, so the
    saddle point is unique and sits on the ball's surface.
    """
    rng = np.random.default_rng(seed)
    if tail == "pareto":
        s = 1.0 + rng.pareto(pareto_a, size=n)
    elif tail == "equal":
        s = np.ones(n)
    else:
        raise ValueError(f"unknown tail {tail!r}")
    A = _normalize_spectral(rng.standard_normal((n, p, d)), s)
    x0 = offset * rng.standard_normal((n, d))
    return SaddleProblem(A, x0, epsilon, radius)


def make_quadratic(n=20, d=4, p=4, epsilon=0.1, radius=1.0, lam=1.0, mu=0.5, seed=0) -> SaddleProblem:
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, p, d)) / math.sqrt(d)
    x0 = rng.standard_normal((n, d))
    w = rng.standard_normal((n, p))
    return SaddleProblem(A, x0, epsilon, radius, w, lam, mu)


# ---------------------------------------------------------------------------
# constants and step sizes


@dataclass
class Constants:
    D_theta: float
    G_theta: float
    D_x: float
    G_xi: np.ndarray
    G_x: float
    L_x: float
    L_theta: float
    exact: dict = field(default_factory=dict)     # which entries are exact sups
    monte_carlo: dict = field(default_factory=dict)

    def to_json(self):
        return {"D_theta": self.D_theta, "G_theta": self.G_theta, "D_x": self.D_x,
                "G_x": self.G_x, "G_xi": [float(g) for g in self.G_xi], "L_x": self.L_x,
                "L_theta": self.L_theta, "exact": self.exact,
                "monte_carlo": {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                                for k, v in self.monte_carlo.items()}}


def estimate_constants(problem: SaddleProblem, samples: int = 256, rng=None) -> Constants:
    """Gradient and domain bounds for the regret theory.

    Input-gradient bounds are exact sups for bilinear problems (``D`` times the
    spectral norms). With ``lam > 0`` they, like the parameter-gradient bound,
    are valid upper bounds from the triangle inequality. ``monte_carlo`` holds
    sampled maxima, which are lower bounds on the true sups.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = rng or np.random.default_rng(0)
    P, D, eps = problem, problem.radius, problem.epsilon
    spec = np.linalg.norm(P.A, ord=2, axis=(1, 2))
    stacked = np.linalg.norm(P.A.transpose(0, 2, 1).reshape(-1, P.p), ord=2)
    box = eps * math.sqrt(P.d)
    G_xi = D * spec + P.lam * box
    G_x = D * stacked + P.lam * box * math.sqrt(P.n)
    # |A_i x_i + w_i + mu theta| <= |A_i x0_i + w_i| + eps * sum_j |A_i[:, j]| + mu D
    centre = np.linalg.norm(np.einsum("npd,nd->np", P.A, P.x0) + P.w, axis=1)
    spread = eps * np.linalg.norm(P.A, axis=1).sum(axis=1)
    G_theta = float(np.sqrt(np.mean((centre + spread + P.mu * D) ** 2)))
    exact = {"G_xi": P.lam == 0, "G_x": P.lam == 0, "G_theta": False}

    # sampled lower bounds: theta on the sphere, x at random box corners
    th = rng.standard_normal((samples, P.p))
    th *= D / np.linalg.norm(th, axis=1, keepdims=True)
    mc_xi = np.zeros(P.n)
    mc_theta = 0.0
    for t in th:
        xs = P.x0 + eps * rng.choice([-1.0, 1.0], size=P.x0.shape)
        gx = np.einsum("npd,p->nd", P.A, t) - P.lam * (xs - P.x0)
        mc_xi = np.maximum(mc_xi, np.linalg.norm(gx, axis=1))
        gt = np.einsum("npd,nd->np", P.A, xs) + P.w + P.mu * t
        mc_theta = max(mc_theta, float(np.sqrt(np.mean(np.sum(gt * gt, axis=1)))))
    return Constants(D, G_theta, 2 * eps, G_xi, float(G_x), P.lam, P.mu, exact,
                     {"G_xi": mc_xi, "G_theta": mc_theta})


def regret_bound_step_sizes(const: Constants, T: int, d: int, n: int, method: str, beta: float = 0.5):
    """(eta_theta, eta_x) prescribed by the regret bounds for horizon ``T``."""
    eta_theta = const.D_theta / (const.G_theta * math.sqrt(T))
    if method == "sgdbca":
        eta_x = math.sqrt(n * d) * const.D_x / (const.G_x * math.sqrt(T))
    elif method == "asgdbca":
        eta_x = math.sqrt(d) * const.D_x * (1 - beta) ** 0.25 / math.sqrt(T)
    else:
        raise ValueError(f"unknown method {method!r}")
    return eta_theta, eta_x


def gradient_norm_ratio(G, beta: float) -> float:
    """Predicted regret ratio of fixed-step over adaptive block ascent: ``(1-beta)^(-1/4) * rms(G) / mean(G)``."""
    G = np.asarray(G, dtype=np.float64)
    if G.size == 0:
        raise ValueError("empty list of gradient bounds")
    if np.any(G <= 0):
        raise ValueError("gradient bounds must be positive")
    if not 0.0 <= beta < 1.0:
        raise ValueError("beta must lie in [0, 1)")
    return float((1 - beta) ** -0.25 * math.sqrt(np.mean(G ** 2) / np.mean(G) ** 2))


# ---------------------------------------------------------------------------
# solvers


@dataclass
class SaddleRunConfig:
    T: int
    eta_theta: float
    eta_x: float
    beta: float = 0.5
    seed: int = 0
    checkpoints: tuple = ()
    theta_init: np.ndarray | None = None
    x_init: np.ndarray | None = None

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.eta_theta < 0 or self.eta_x < 0:
            raise ValueError("step sizes must be >= 0")
        if any(not 1 <= c <= self.T for c in self.checkpoints):
            raise ValueError("checkpoints must lie in [1, T]")


@dataclass
class SaddleTrajectory:
    method: str
    picks: np.ndarray          # (T,)
    thetas: np.ndarray         # (T + 1, p): theta^1 .. theta^{T+1}
    couplings: np.ndarray      # (T + 1, p): m(x^1) .. m(x^{T+1})
    penalties: np.ndarray      # (T + 1,)
    mean_v: np.ndarray         # (T,) mean preconditioner after each step
    x_final: np.ndarray
    v: np.ndarray | None = None
    v_hat: np.ndarray | None = None
    v_hat_min_increment: float = 0.0    # smallest v_hat change over the run (>= 0 when monotone)
    averages: dict = field(default_factory=dict)   # T -> (theta_bar, x_bar)

    @property
    def T(self):
        return len(self.picks)


def _run(problem: SaddleProblem, cfg: SaddleRunConfig, adaptive: bool) -> SaddleTrajectory:
    P = problem
    n, p = P.n, P.p
    rng = np.random.default_rng(cfg.seed)
    picks = rng.integers(0, n, size=cfg.T)
    theta = np.zeros(p) if cfg.theta_init is None else P.project_theta(np.array(cfg.theta_init, dtype=np.float64))
    x = P.x0.copy() if cfg.x_init is None else np.array(cfg.x_init, dtype=np.float64)
    if np.any(np.abs(x - P.x0) > P.epsilon):
        raise ValueError("x_init leaves the box")
    m = P.coupling(x)
    pen_sum = 0.5 * P.lam * np.sum((x - P.x0) ** 2)
    thetas = np.empty((cfg.T + 1, p))
    couplings = np.empty((cfg.T + 1, p))
    penalties = np.empty(cfg.T + 1)
    mean_v = np.empty(cfg.T)
    thetas[0], couplings[0], penalties[0] = theta, m, pen_sum / n
    v = np.zeros(n)
    v_hat = np.zeros(n)
    v_sum = 0.0
    min_inc = 0.0
    theta_sum = np.zeros(p)
    x_sum = np.zeros_like(x)
    marks = set(cfg.checkpoints)
    averages = {}
    A, lam, eps = P.A, P.lam, P.epsilon
    for t in range(cfg.T):
        k = picks[t]
        xk = x[k]
        g = A[k].T @ theta
        if lam:
            g = g - lam * (xk - P.x0[k])
        if adaptive:
            vk = cfg.beta * v[k] + (1 - cfg.beta) * float(g @ g)
            v_sum += vk - v[k]
            v[k] = vk
            new_hat = max(v_hat[k], vk)
            min_inc = min(min_inc, new_hat - v_hat[k])
            v_hat[k] = new_hat
            step = cfg.eta_x / max(math.sqrt(new_hat), PRECOND_FLOOR)
        else:
            step = cfg.eta_x
        xk_new = np.clip(xk + step * g, P.x0[k] - eps, P.x0[k] + eps)
        dx = xk_new - xk
        m = m + (A[k] @ dx) / n
        if lam:
            pen_sum += 0.5 * lam * (np.sum((xk_new - P.x0[k]) ** 2) - np.sum((xk - P.x0[k]) ** 2))
        x[k] = xk_new
        theta_sum += theta
        gt = A[k] @ xk_new + P.w[k] + P.mu * theta
        theta = theta - cfg.eta_theta * gt
        nrm = math.sqrt(float(theta @ theta))
        if nrm > P.radius:
            theta = theta * (P.radius / nrm)
        thetas[t + 1], couplings[t + 1], penalties[t + 1] = theta, m, pen_sum / n
        mean_v[t] = v_sum / n
        x_sum += x
        if t + 1 in marks:
            averages[t + 1] = (theta_sum / (t + 1), x_sum / (t + 1))
    return SaddleTrajectory("asgdbca" if adaptive else "sgdbca", picks, thetas, couplings,
                            penalties, mean_v, x, v if adaptive else None,
                            v_hat if adaptive else None, min_inc, averages)


def sgdbca_run(problem: SaddleProblem, cfg: SaddleRunConfig) -> SaddleTrajectory:
    """Stochastic descent on theta, fixed-step ascent on one random instance's x per step."""
    return _run(problem, cfg, adaptive=False)


def asgdbca_run(problem: SaddleProblem, cfg: SaddleRunConfig) -> SaddleTrajectory:
    """As :func:`sgdbca_run`, but the x step for instance k is ``eta_x / sqrt(v_hat_k)``,
    with ``v_hat`` the running max of an EMA of squared input-gradient norms."""
    if not 0.0 <= cfg.beta < 1.0:
        raise ValueError("beta must lie in [0, 1)")
    return _run(problem, cfg, adaptive=True)


def regret(traj: SaddleTrajectory, problem: SaddleProblem, pair_next: bool = True) -> np.ndarray:
    """Prefix sums ``R(1..T)`` of ``max_x phi(theta^t, x) - min_theta phi(theta, x^s)``.

    ``s = t + 1`` by default (the x iterate produced at step t); ``pair_next=False``
    pairs with ``x^t`` instead.
    """
    T = traj.T
    upper = problem.max_value(traj.thetas[:T])
    sl = slice(1, T + 1) if pair_next else slice(0, T)
    lower = problem.min_value_from(traj.couplings[sl], traj.penalties[sl])
    return np.cumsum(upper - lower)


@dataclass
class SaddleReference:
    value: float
    theta: np.ndarray
    x: np.ndarray
    certificate: float      # primal minus dual bound, >= 0


def solve_reference(problem: SaddleProblem, tol: float = 1e-9) -> SaddleReference:
    """Saddle value ``min_theta max_x phi`` with a primal-dual certificate.

    The dual side maximizes the concave ``x -> min_theta phi(theta, x)`` over
    the boxes: a bounded least-squares problem in the bilinear case and
    L-BFGS-B otherwise. The primal side evaluates the exact inner max at the
    induced theta. Raises :class:`ReferenceSolveError` if they disagree by more
    than ``tol`` (relative to the value's scale).
    """
    P = problem
    lo, hi = (P.x0 - P.epsilon).ravel(), (P.x0 + P.epsilon).ravel()
    M = P.A.transpose(1, 0, 2).reshape(P.p, -1) / P.n      # m(x) = M x + w_mean
    if P.lam == 0 and P.mu == 0:
        res = optimize.lsq_linear(M, -P.w_mean, bounds=(lo, hi), method="bvls", tol=1e-14,
                                  max_iter=10000)
        xf = res.x
    else:
        def neg_dual(z):
            x = z.reshape(P.x0.shape)
            m = M @ z + P.w_mean
            th = P.theta_for(m)
            val = th @ m + 0.5 * P.mu * th @ th - P.penalty(x)
            # Danskin: d/dm of min_theta is theta*(m)
            grad = M.T @ th - P.lam * (z - P.x0.ravel()) / P.n
            return -val, -grad
        res = optimize.minimize(neg_dual, P.x0.ravel(), jac=True, method="L-BFGS-B",
                                bounds=list(zip(lo, hi)),
                                options={"ftol": 1e-16, "gtol": 1e-13, "maxiter": 20000})
        xf = res.x
    x = np.clip(xf.reshape(P.x0.shape), P.x0 - P.epsilon, P.x0 + P.epsilon)
    theta, dual = P.inner_min(x)
    primal = float(P.max_value(theta)[0])
    cert = primal - dual
    if cert > tol * max(1.0, abs(dual)) or cert < -1e-12:
        raise ReferenceSolveError(f"reference solve not converged: primal {primal!r}, dual {dual!r}")
    return SaddleReference(dual, theta, x, max(cert, 0.0))


def duality_gap(problem: SaddleProblem, theta_bar, x_bar=None, reference: SaddleReference | None = None) -> float:
    """``max_x phi(theta_bar, x)`` minus the saddle value.

    The saddle value is the certified dual bound from :func:`solve_reference`,
    so the result over-states the true gap by at most the certificate width.
    ``x_bar`` is accepted for symmetry with averaged runs and checked for
    feasibility only.
    """
    if x_bar is not None and np.any(np.abs(np.asarray(x_bar) - problem.x0) > problem.epsilon + 1e-12):
        raise ValueError("x_bar leaves the box")
    ref = reference or solve_reference(problem)
    return float(problem.max_value(np.asarray(theta_bar))[0] - ref.value)


# ---------------------------------------------------------------------------
# outputs


def regret_csv(traj: SaddleTrajectory, R, gaps: dict | None = None, rows=None) -> str:
    """Rows ``t, regret_prefix, gap, mean_v`` at ``rows`` (default: checkpoints and T)."""
    gaps = gaps or {}
    rows = sorted(set(rows or list(traj.averages) + [traj.T]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "regret_prefix", "gap", "mean_v"])
    for t in rows:
        g = gaps.get(t)
        w.writerow([t, repr(float(R[t - 1])), "" if g is None else repr(float(g)),
                    repr(float(traj.mean_v[t - 1]))])
    return buf.getvalue()


def summary_json(problem, const: Constants, traj: SaddleTrajectory, R, beta, extra=None) -> str:
    out = {"method": traj.method, "kind": problem.kind, "n": problem.n, "d": problem.d,
           "p": problem.p, "T": traj.T, "epsilon": problem.epsilon, "radius": problem.radius,
           "constants": const.to_json(), "ratio": gradient_norm_ratio(const.G_xi, beta),
           "final_regret": float(R[-1])}
    out.update(extra or {})
    return json.dumps(out, indent=2, sort_keys=True) + "\n"
