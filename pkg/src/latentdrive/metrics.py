"""Evaluation metrics and tabular maximum-entropy RL oracles.

``pixel_diff`` scores decoded masks against ground truth. The tabular
routines solve small MDPs exactly so the function-approximation code can be
checked against a known fixed point.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax, xlogy

from .errors import ContractError


# -- pixel difference ---------------------------------------------------------

@dataclass
class PixelDiffReport:
    e: float
    per_frame: np.ndarray
    N: int
    H: int
    W: int
    C: int


def pixel_diff(decoded, truth, check_range=True):
    """Mean over frames of ``sum(|m_hat - m|) / (W * H * C)``.

    Both inputs are ``N x H x W x C`` (a single ``H x W x C`` frame is
    accepted) with values in [0, 1].
    """
    a = np.asarray(decoded, dtype=np.float64)
    b = np.asarray(truth, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a[None], b[None]
    if a.ndim != 4:
        raise ContractError("expected N x H x W x C arrays")
    if check_range and (a.min() < 0 or a.max() > 1 or b.min() < 0 or b.max() > 1):
        raise ContractError("pixel values must lie in [0, 1]")
    n, h, w, c = a.shape
    per_frame = np.abs(a - b).reshape(n, -1).sum(axis=1) / (w * h * c)
    return PixelDiffReport(float(per_frame.mean()), per_frame, n, h, w, c)


# -- tabular oracles ----------------------------------------------------------

@dataclass
class TabularMDP:
    """``P[s, a, s']`` transition probabilities and ``R[s, a]`` rewards."""

    P: np.ndarray
    R: np.ndarray
    gamma: float

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        s, a = self.R.shape
        if self.P.shape != (s, a, s):
            raise ContractError(f"P must be {(s, a, s)}, got {self.P.shape}")
        if np.any(self.P < 0) or np.max(np.abs(self.P.sum(axis=2) - 1.0)) > 1e-12:
            raise ContractError("transition rows must be stochastic (sum to 1 within 1e-12)")

    @property
    def S(self):
        return self.R.shape[0]

    @property
    def A(self):
        return self.R.shape[1]


def random_mdp(rng, n_states=5, n_actions=2, gamma=0.9, reward_scale=1.0):
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    P /= P.sum(axis=2, keepdims=True)
    R = reward_scale * rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    return TabularMDP(P, R, gamma)


def soft_value(Q, alpha):
    """``alpha * logsumexp(Q / alpha)`` per state."""
    if alpha == 0:
        return Q.max(axis=1)
    return alpha * logsumexp(Q / alpha, axis=1)


def boltzmann(Q, alpha):
    if alpha == 0:
        pi = np.zeros_like(Q)
        pi[np.arange(Q.shape[0]), Q.argmax(axis=1)] = 1.0
        return pi
    return softmax(Q / alpha, axis=1)


def soft_policy_evaluation(mdp: TabularMDP, pi, alpha):
    """Exact soft Q of ``pi`` by a linear solve over state-action pairs."""
    s, a = mdp.S, mdp.A
    entropy_bonus = -alpha * xlogy(pi, pi).sum(axis=1)
    # Q = R + gamma P (Pi Q + h)
    Pi = np.zeros((s, s * a))
    for i in range(s):
        Pi[i, i * a:(i + 1) * a] = pi[i]
    Pm = mdp.P.reshape(s * a, s)
    lhs = np.eye(s * a) - mdp.gamma * Pm @ Pi
    rhs = mdp.R.reshape(-1) + mdp.gamma * Pm @ entropy_bonus
    return np.linalg.solve(lhs, rhs).reshape(s, a)


@dataclass
class SPIResult:
    Q: np.ndarray
    pi: np.ndarray
    V: np.ndarray
    iterations: int


def soft_policy_iteration(mdp: TabularMDP, alpha=1.0, q_init=None, tol=1e-10, max_iter=10_000):
    """Alternate exact soft evaluation and ``pi ∝ exp(Q / alpha)`` improvement.

    Stops once successive Q tables differ by less than ``tol`` everywhere.
    """
    if not 0.0 <= mdp.gamma < 1.0:
        raise ContractError("soft policy iteration needs gamma < 1")
    if q_init is None:
        pi = np.full((mdp.S, mdp.A), 1.0 / mdp.A)
    else:
        pi = boltzmann(np.asarray(q_init, dtype=np.float64), alpha)
    Q = soft_policy_evaluation(mdp, pi, alpha)
    for it in range(1, max_iter + 1):
        pi = boltzmann(Q, alpha)
        Q_new = soft_policy_evaluation(mdp, pi, alpha)
        delta = np.max(np.abs(Q_new - Q))
        Q = Q_new
        if delta < tol:
            break
    pi = boltzmann(Q, alpha)
    return SPIResult(Q, pi, soft_value(Q, alpha), it)


def soft_bellman_residual(mdp: TabularMDP, Q, alpha):
    target = mdp.R + mdp.gamma * mdp.P @ soft_value(Q, alpha)
    return float(np.max(np.abs(Q - target)))


def policy_value(mdp: TabularMDP, pi):
    """Discounted (entropy-free) state values of ``pi``."""
    r_pi = (pi * mdp.R).sum(axis=1)
    P_pi = np.einsum("sa,sat->st", pi, mdp.P)
    return np.linalg.solve(np.eye(mdp.S) - mdp.gamma * P_pi, r_pi)


@dataclass
class DiscountReport:
    analytic: float
    mc_mean: float
    mc_se: float
    gap: float
    mean_length: float
    absorb_rate: float
    absorb_rate_se: float
    n_rollouts: int
    lengths: np.ndarray = field(repr=False)

    @property
    def within_3se(self):
        return abs(self.gap) <= 3.0 * self.mc_se

    @property
    def absorb_within_3se(self):
        return abs(self.absorb_rate - self.gamma_complement) <= 3.0 * self.absorb_rate_se

    gamma_complement: float = 0.0


def discount_equivalence_check(mdp: TabularMDP, pi, n_rollouts, rng, start_state=0, max_steps=1_000_000):
    """Compare the discounted value of ``pi`` with undiscounted Monte-Carlo returns
    in the augmented MDP whose transitions are ``gamma * P`` plus a jump to a
    zero-reward absorbing state with probability ``1 - gamma``.
    """
    g = mdp.gamma
    if not 0.0 < g < 1.0:
        raise ContractError("the absorbing-state construction needs 0 < gamma < 1")
    pi = np.asarray(pi, dtype=np.float64)
    analytic = float(policy_value(mdp, pi)[start_state])

    n = int(n_rollouts)
    state = np.full(n, start_state, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    ret = np.zeros(n)
    length = np.zeros(n, dtype=np.int64)
    cum_pi = np.cumsum(pi, axis=1)
    cum_P = np.cumsum(mdp.P, axis=2)
    for _ in range(max_steps):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        s = state[idx]
        a = (rng.random(idx.size)[:, None] > cum_pi[s]).sum(axis=1)
        a = np.minimum(a, mdp.A - 1)
        ret[idx] += mdp.R[s, a]
        length[idx] += 1
        absorbed = rng.random(idx.size) >= g
        nxt = (rng.random(idx.size)[:, None] > cum_P[s, a]).sum(axis=1)
        state[idx] = np.minimum(nxt, mdp.S - 1)
        alive[idx[absorbed]] = False
    mc_mean = float(ret.mean())
    mc_se = float(ret.std(ddof=1) / np.sqrt(n)) if n > 1 else float("inf")
    steps = int(length.sum())
    rate = n / steps
    rate_se = float(np.sqrt(rate * (1.0 - rate) / steps))
    return DiscountReport(analytic, mc_mean, mc_se, mc_mean - analytic, float(length.mean()),
                          rate, rate_se, n, length, 1.0 - g)


# -- learning curves ----------------------------------------------------------

def read_log(path):
    """Read a trainer CSV log into a dict of float columns."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    cols = {}
    for key in rows[0]:
        vals = []
        for r in rows:
            try:
                vals.append(float(r[key]))
            except (TypeError, ValueError):
                vals.append(np.nan)
        cols[key] = np.asarray(vals)
    return cols


def aggregate_curves(tables, columns=("avg_return",), step_key="env_step"):
    """Mean and (population) standard deviation of each column across runs.

    Runs are linearly interpolated onto the union of their ``env_step`` grids.
    """
    tables = list(tables)
    if not tables:
        raise ContractError("aggregate_curves needs at least one run")
    grid = np.unique(np.concatenate([np.asarray(t[step_key], dtype=np.float64) for t in tables]))
    out = {step_key: grid}
    for col in columns:
        stack = []
        for t in tables:
            x = np.asarray(t[step_key], dtype=np.float64)
            y = np.asarray(t[col], dtype=np.float64)
            order = np.argsort(x)
            stack.append(np.interp(grid, x[order], y[order]))
        stack = np.stack(stack)
        out[f"{col}_mean"] = stack.mean(axis=0)
        out[f"{col}_std"] = stack.std(axis=0)
    return out


def write_curves_csv(curves, path):
    keys = list(curves)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for i in range(len(curves[keys[0]])):
            w.writerow([repr(float(curves[k][i])) for k in keys])


def plot_curves(curves, column, path, step_key="env_step"):
    """Line plot with a one-standard-deviation band; needs matplotlib."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    x = curves[step_key]
    m = curves[f"{column}_mean"]
    s = curves[f"{column}_std"]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(x, m)
    ax.fill_between(x, m - s, m + s, alpha=0.3)
    ax.set_xlabel(step_key)
    ax.set_ylabel(column)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
