"""Oracle suites behind ``latentdrive validate``.

Each check compares an implementation against an independent reference and
reports the measured discrepancy next to its tolerance. Functions under test
can be swapped through ``overrides`` so that fault injection is testable.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numpy as np
import torch

from . import latentmodel as lm
from . import metrics, policy
from .worldsim import (
    EnvConfig,
    RigidTransform,
    compute_reward,
    render_camera,
    render_lidar,
    render_mask,
    reset,
    step,
    transform_state,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    seconds: float = 0.0
    detail: str = ""

    def line(self):
        mark = "PASS" if self.passed else "FAIL"
        return (f"{mark}  {self.name:<28} measured={self.measured:.3e}  "
                f"tol={self.tolerance:.1e}  ({self.seconds:.2f}s){'  ' + self.detail if self.detail else ''}")


def _reference_reward(v, alpha, collision, out_of_lane):
    # straight transcription of the weighted reward, kept apart from worldsim.reward
    r_col = -1.0 if collision else 0.0
    r_fast = -1.0 if v > 8.0 else 0.0
    r_out = -1.0 if out_of_lane else 0.0
    r_lat = -abs(alpha) * v * v
    return 200.0 * r_col + v + 10.0 * r_fast + r_out - 5.0 * alpha * alpha + 0.2 * r_lat - 0.1


def check_reward(n=10_000, seed=0, reward_fn=compute_reward):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        v = float(rng.uniform(0.0, 15.0))
        a = float(rng.uniform(-0.3, 0.3))
        col, out = bool(rng.integers(2)), bool(rng.integers(2))
        r, _ = reward_fn(v, a, col, out)
        worst = max(worst, abs(r - _reference_reward(v, a, col, out)))
    for args, want in (((5.0, 0.0, True, False), -195.1), ((10.0, 0.0, False, False), -0.1),
                       ((5.0, 0.2, False, False), 3.7)):
        worst = max(worst, abs(reward_fn(*args)[0] - want))
    return worst


def kl_mc_zscores(pairs=100, samples=1_000_000, dims=8, seed=0, kl_fn=lm.kl_diag_gaussian):
    """|closed form - Monte-Carlo| / standard error for random Gaussian pairs."""
    rng = np.random.default_rng(seed)
    z = []
    for _ in range(pairs):
        d = int(rng.integers(1, dims + 1))
        mq, mp = rng.normal(size=d), rng.normal(size=d)
        sq, sp = np.exp(rng.uniform(-0.7, 0.7, size=d)), np.exp(rng.uniform(-0.7, 0.7, size=d))
        q = lm.DiagGaussian(torch.tensor(mq), torch.tensor(sq))
        p = lm.DiagGaussian(torch.tensor(mp), torch.tensor(sp))
        closed = float(kl_fn(q, p))
        eps = rng.standard_normal((samples, d))
        # log q(x) - log p(x) at x = mq + sq * eps, without materialising x
        u = (mq - mp) / sp + (sq / sp) * eps
        eps *= eps
        u *= u
        diff = 0.5 * (u - eps).sum(1) + float(np.log(sp / sq).sum())
        se = diff.std(ddof=1) / math.sqrt(samples)
        z.append(abs(diff.mean() - closed) / se)
    return np.asarray(z)


def check_kl_identities(kl_fn=lm.kl_diag_gaussian, seed=0):
    rng = np.random.default_rng(seed)
    worst_neg, worst_self = 0.0, 0.0
    for _ in range(200):
        d = int(rng.integers(1, 9))
        m1, m2 = torch.tensor(rng.normal(size=d)), torch.tensor(rng.normal(size=d))
        s1 = torch.tensor(np.exp(rng.uniform(-2, 2, size=d)))
        s2 = torch.tensor(np.exp(rng.uniform(-2, 2, size=d)))
        kl = float(kl_fn(lm.DiagGaussian(m1, s1), lm.DiagGaussian(m2, s2)))
        worst_neg = max(worst_neg, -kl)
        worst_self = max(worst_self, abs(float(kl_fn(lm.DiagGaussian(m1, s1), lm.DiagGaussian(m1, s1)))))
        if not kl > 0.0:
            # distinct pairs must be strictly positive
            worst_self = math.inf
    return worst_neg, worst_self


# -- finite differences ------------------------------------------------------

def directional_fd_error(loss_fn, params, rng, eps=1e-6, directions=2):
    """Worst relative gap between analytic and central-difference directional
    derivatives of ``loss_fn`` along random unit directions in ``params``.

    The gap is scaled by the gradient norm (the largest directional derivative
    a unit step can see), so directions nearly orthogonal to the gradient do not
    turn ordinary float cancellation into a large ratio.
    """
    params = [p for p in params if p.requires_grad]
    worst = 0.0
    for _ in range(directions):
        vec = [torch.from_numpy(rng.standard_normal(tuple(p.shape))).to(p.dtype) for p in params]
        norm = math.sqrt(sum(float((v * v).sum()) for v in vec))
        vec = [v / norm for v in vec]
        for p in params:
            p.grad = None
        loss = loss_fn()
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        analytic = sum(float((g * v).sum()) for g, v in zip(grads, vec) if g is not None)
        gnorm = math.sqrt(sum(float((g * g).sum()) for g in grads if g is not None))
        with torch.no_grad():
            for p, v in zip(params, vec):
                p.add_(eps * v)
            up = float(loss_fn().detach())
            for p, v in zip(params, vec):
                p.sub_(2 * eps * v)
            down = float(loss_fn().detach())
            for p, v in zip(params, vec):
                p.add_(eps * v)
        numeric = (up - down) / (2 * eps)
        scale = max(abs(analytic), abs(numeric), gnorm, 1e-8)
        worst = max(worst, abs(analytic - numeric) / scale)
    return worst


def tiny_model(mode="hierarchical", seed=0, image_size=8):
    torch.manual_seed(seed)
    cfg = lm.ModelConfig(image_size=image_size, d1=3, d2=4, hidden=8, feature_dim=8,
                         base_depth=2, mode=mode)
    return lm.LatentModel(cfg).double()


def tiny_batch(cfg, batch=2, tau=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    s = cfg.image_size

    def img():
        return torch.rand(batch, tau + 1, s, s, 3, generator=g, dtype=torch.float64)

    return lm.SequenceBatch(
        img(), img(), img(),
        torch.rand(batch, tau, cfg.action_dim, generator=g, dtype=torch.float64) * 2 - 1,
        torch.rand(batch, tau, generator=g, dtype=torch.float64),
        torch.zeros(batch, tau, dtype=torch.float64),
    )


def model_grad_errors(mode="hierarchical", seed=0, eps=1e-4):
    """Per parameter-group directional FD error of ``model_loss``.

    The loss is in the thousands (pixel sums), so the step is larger than the
    usual 1e-6 but small enough to rarely straddle a LeakyReLU kink.
    """
    model = tiny_model(mode, seed)
    batch = tiny_batch(model.config, seed=seed)
    noise = torch.randn(2, 3, model.config.latent_dim, dtype=torch.float64,
                        generator=torch.Generator().manual_seed(seed + 1))
    rng = np.random.default_rng(seed)
    out = {}
    for name, module in model.named_children():
        if isinstance(module, torch.nn.ModuleDict):
            groups = {f"{name}.{k}": m for k, m in module.items()}
        else:
            groups = {name: module}
        for gname, m in groups.items():
            out[gname] = directional_fd_error(lambda: model.model_loss(batch, noise).total,
                                              list(m.parameters()), rng, eps=eps)
    return out


def tiny_agent(seed=0, latent_dim=7, hidden=8):
    torch.manual_seed(seed)
    cfg = policy.PolicyConfig(latent_dim=latent_dim, hidden=hidden, gamma=0.9, alpha_ent=0.7)
    agent = policy.SACAgent(cfg).double()
    # perturb the targets so they differ from the online critics
    with torch.no_grad():
        for p in agent.critic_target.parameters():
            p.add_(0.1 * torch.randn_like(p))
    return agent


def sac_grad_errors(seed=0):
    agent = tiny_agent(seed)
    cfg = agent.config
    g = torch.Generator().manual_seed(seed)
    n, d = 6, cfg.latent_dim
    batch = policy.Transitions(
        torch.randn(n, d, generator=g, dtype=torch.float64),
        torch.rand(n, 2, generator=g, dtype=torch.float64) * 1.8 - 0.9,
        torch.randn(n, generator=g, dtype=torch.float64),
        torch.randn(n, d, generator=g, dtype=torch.float64),
        (torch.rand(n, generator=g) < 0.3).to(torch.float64),
    )
    nt = torch.randn(n, 2, generator=g, dtype=torch.float64)
    na = torch.randn(n, 2, generator=g, dtype=torch.float64)
    rng = np.random.default_rng(seed)
    crit = lambda: policy.critic_loss(agent.critic, agent.critic_target, agent.actor, batch,
                                      cfg.gamma, cfg.alpha_ent, nt)
    actl = lambda: policy.actor_loss(agent.actor, agent.critic, batch.z, cfg.alpha_ent, na)
    return {
        "critic_loss": directional_fd_error(crit, list(agent.critic.parameters()), rng),
        "actor_loss": directional_fd_error(actl, list(agent.actor.parameters()), rng),
    }


# -- simulator -------------------------------------------------------------

def random_states(n, seed=0, config=None, per_episode=50, max_gap=4):
    """Reachable states under random driving, each with a random perturbation
    of the ego pose so that box edges do not sit on pixel boundaries.
    """
    cfg = config or EnvConfig(npc_count=8)
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        state, _ = reset(cfg, int(rng.integers(1 << 30)))
        for _ in range(per_episode):
            if state.done or len(out) >= n:
                break
            for _ in range(int(rng.integers(1, max_gap + 1))):
                if state.done:
                    break
                # mild actions keep episodes alive long enough to reach traffic
                state, _ = step(state, rng.uniform([-0.3, -0.5], [1.0, 0.5]), render=False)
            snap = state.copy()
            ego = snap.ego
            snap.ego = replace(ego, x=ego.x + float(rng.uniform(-0.2, 0.2)),
                               y=ego.y + float(rng.uniform(-0.2, 0.2)),
                               heading=ego.heading + float(rng.uniform(-0.1, 0.1)))
            out.append(snap)
    return out


def frame_invariance_gap(states, seed=0):
    """Worst pixel difference between renders before and after moving the world."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for st in states:
        tf = RigidTransform(rng.uniform(-np.pi, np.pi), rng.uniform(-500, 500, size=2))
        moved = transform_state(st, tf)
        for fn in (render_mask, render_lidar, render_camera):
            worst = max(worst, float(np.abs(fn(st) - fn(moved)).max()))
    return worst


def expected_ego_pixels(config):
    """(inside, boundary) boolean masks for the ego box, from pixel-centre
    arithmetic alone. Boundary pixels sit exactly on a box edge.
    """
    size, res = config.image_size, config.obs_range / config.image_size
    centre = (0.5 * size - (np.arange(size) + 0.5)) * res
    f, l = np.abs(centre)[:, None], np.abs(centre)[None, :]
    hl, hw = 0.5 * config.vehicle_length, 0.5 * config.vehicle_width
    inside = (f < hl) & (l < hw)
    edge = (f <= hl) & (l <= hw) & ~inside
    return inside, edge


def render_contract_violations(states):
    """Count states whose images break a shape, range or ego-box contract."""
    bad = 0
    for st in states:
        cfg = st.config
        size = cfg.image_size
        inside, edge = expected_ego_pixels(cfg)
        mask = render_mask(st)
        imgs = (mask, render_lidar(st), render_camera(st))
        ok = all(im.shape == (size, size, 3) and im.min() >= 0.0 and im.max() <= 1.0
                 and np.isfinite(im).all() for im in imgs)
        red = (mask[..., 0] == 1.0) & (mask[..., 1] == 0.0) & (mask[..., 2] == 0.0)
        ok = ok and bool(red[inside].all()) and not bool((red & ~inside & ~edge).any())
        bad += not ok
    return bad


def determinism_gap(seed=7, steps=50):
    cfg = EnvConfig(npc_count=6)

    def run():
        st, res = reset(cfg, seed)
        rng = np.random.default_rng(seed)
        frames = [res.mask, res.observation.camera, res.observation.lidar]
        rewards = []
        for _ in range(steps):
            if st.done:
                break
            st, res = step(st, rng.uniform(-1, 1, size=2))
            frames += [res.mask, res.observation.camera, res.observation.lidar]
            rewards.append(res.reward)
        return frames, rewards

    (fa, ra), (fb, rb) = run(), run()
    if len(fa) != len(fb):
        return float("inf")
    gap = max(float(np.abs(a - b).max()) for a, b in zip(fa, fb))
    return max(gap, max((abs(a - b) for a, b in zip(ra, rb)), default=0.0))


# -- driver ------------------------------------------------------------------

def _timed(name, fn, tol, compare="le"):
    t = time.perf_counter()
    try:
        measured = float(fn())
        passed = measured <= tol if compare == "le" else measured >= tol
        detail = ""
    except Exception as exc:  # a crashing check is a failing check
        measured, passed, detail = float("nan"), False, f"{type(exc).__name__}: {exc}"
    return CheckResult(name, passed, measured, tol, time.perf_counter() - t, detail)


def run_checks(overrides=None, quick=False):
    """Run every suite; ``overrides`` may replace ``kl``, ``reward`` or ``pixel_diff``."""
    o = dict(overrides or {})
    kl_fn = o.get("kl", lm.kl_diag_gaussian)
    reward_fn = o.get("reward", compute_reward)
    pd_fn = o.get("pixel_diff", metrics.pixel_diff)
    mc_samples = 100_000 if quick else 1_000_000
    results = [
        _timed("reward.oracle", lambda: check_reward(reward_fn=reward_fn), 1e-12),
        _timed("kl.monte_carlo_zmax", lambda: kl_mc_zscores(pairs=100, samples=mc_samples,
                                                            kl_fn=kl_fn).max(), 3.0),
        _timed("kl.nonnegative", lambda: check_kl_identities(kl_fn)[0], 0.0),
        _timed("kl.zero_iff_equal", lambda: check_kl_identities(kl_fn)[1], 1e-12),
        _timed("grad.model_loss.hierarchical", lambda: max(model_grad_errors("hierarchical").values()), 1e-4),
        _timed("grad.model_loss.flat", lambda: max(model_grad_errors("flat").values()), 1e-4),
        _timed("grad.sac", lambda: max(sac_grad_errors().values()), 1e-4),
    ]

    def spi_fixture():
        mdp = metrics.TabularMDP(np.ones((1, 2, 1)), np.array([[1.0, 0.0]]), 0.0)
        res = metrics.soft_policy_iteration(mdp, 1.0)
        e = math.e
        return max(abs(res.pi[0, 0] - e / (e + 1)), abs(res.pi[0, 1] - 1 / (e + 1)),
                   abs(res.V[0] - math.log(1 + e)))

    def spi_residual():
        mdp = metrics.random_mdp(np.random.default_rng(3), 5, 2, 0.9)
        res = metrics.soft_policy_iteration(mdp, 1.0)
        return metrics.soft_bellman_residual(mdp, res.Q, 1.0)

    def discount_z():
        P = np.zeros((2, 1, 2))
        P[0, 0, 1] = P[1, 0, 0] = 1.0
        mdp = metrics.TabularMDP(P, np.ones((2, 1)), 0.5)
        rep = metrics.discount_equivalence_check(mdp, np.ones((2, 1)), 20_000,
                                                 np.random.default_rng(0))
        return abs(rep.gap) / rep.mc_se

    def pixel_fixtures():
        z = np.zeros((2, 4, 4, 3))
        one = np.ones((2, 4, 4, 3))
        half = z.copy()
        half[:, :2] = 0.5
        return max(abs(pd_fn(z, z).e), abs(pd_fn(z, one).e - 1.0), abs(pd_fn(half, z).e - 0.25))

    states = random_states(100 if quick else 1000)
    results += [
        _timed("spi.closed_form", spi_fixture, 1e-6),
        _timed("spi.bellman_residual", spi_residual, 1e-8),
        _timed("discount.absorbing_mc_z", discount_z, 3.0),
        _timed("pixel_diff.fixtures", pixel_fixtures, 0.0),
        _timed("sim.determinism", determinism_gap, 0.0),
        _timed("sim.frame_invariance", lambda: frame_invariance_gap(states), 0.0),
        _timed("sim.render_contracts", lambda: render_contract_violations(states), 0),
    ]
    return results


# -- tabular bridge ------------------------------------------------------------

def bridge_mdp(seed=0, n_states=5, gamma=0.5, reward_scale=0.25):
    """Small-gap MDP for the SAC bridge; see ``sac_tabular_bridge``."""
    return metrics.random_mdp(np.random.default_rng(seed), n_states, 2, gamma, reward_scale)


@dataclass
class BridgeResult:
    p_right: np.ndarray  # learned P(a > 0 | s)
    q: np.ndarray  # learned critic, averaged over each half of the action interval
    spi: metrics.SPIResult

    @property
    def tv(self):
        """Per-state total variation distance to the soft-optimal policy."""
        return np.abs(self.p_right - self.spi.pi[:, 1])

    @property
    def q_gap(self):
        return float(np.abs(self.q - self.spi.Q).max())


def sac_tabular_bridge(mdp, alpha=1.0, updates=3000, batch=256, hidden=64, lr=3e-3,
                       rho=0.05, seed=0):
    """Train the SAC losses on a discrete MDP with one-hot latents.

    The action is one dimensional and the discrete action is its sign. Each
    half of (-1, 1) has unit length, so the continuous soft-optimal policy puts
    mass softmax(Q / alpha) on the two halves and its soft values equal the
    discrete ones. The squashed Gaussian cannot be flat on each half, which
    leaves a small bias that grows with the Q gaps; the fixture keeps them small.
    """
    torch.manual_seed(seed)
    S = mdp.S
    cfg = policy.PolicyConfig(latent_dim=S, action_dim=1, hidden=hidden, gamma=mdp.gamma,
                              alpha_ent=alpha, rho=rho, lr=lr, batch_size=batch)
    agent = policy.SACAgent(cfg).double()
    actor_opt, critic_opt = agent.make_optimizers()
    # linear decay averages out the sampling noise in the targets
    decay = [torch.optim.lr_scheduler.LambdaLR(o, lambda i: 1.0 - i / updates)
             for o in (actor_opt, critic_opt)]
    rng = np.random.default_rng(seed)
    eye = torch.eye(S, dtype=torch.float64)
    cum = np.cumsum(mdp.P, axis=2)
    g = torch.Generator().manual_seed(seed)
    for _ in range(updates):
        s = rng.integers(S, size=batch)
        a = rng.uniform(-1.0, 1.0, size=batch)
        k = (a > 0).astype(int)
        nxt = (rng.random(batch)[:, None] > cum[s, k]).sum(axis=1)
        tb = policy.Transitions(eye[s], torch.from_numpy(a)[:, None], torch.from_numpy(mdp.R[s, k]),
                                eye[nxt], torch.zeros(batch, dtype=torch.float64))
        noise = lambda: torch.randn(batch, 1, generator=g, dtype=torch.float64)
        agent.update(tb, eye[s], noise(), noise(), actor_opt, critic_opt)
        for d in decay:
            d.step()
    with torch.no_grad():
        dist = agent.actor(eye)
        p_right = torch.special.ndtr(dist.mean / dist.stddev)[:, 0].numpy()
        grid = torch.linspace(-1, 1, 402, dtype=torch.float64)[1:-1]
        q = np.zeros((S, 2))
        for i in range(S):
            q1, q2 = agent.critic(eye[i].expand(len(grid), S), grid[:, None])
            qm = torch.min(q1, q2).numpy()
            q[i] = qm[grid.numpy() < 0].mean(), qm[grid.numpy() > 0].mean()
    return BridgeResult(p_right, q, metrics.soft_policy_iteration(mdp, alpha))
