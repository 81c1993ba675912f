"""Maximum-entropy actor-critic on latent states.

Tanh-squashed Gaussian actor, twin Q critics with min backup, and slowly
tracking target critics. Latent inputs are treated as constants; callers
detach them before building a batch.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .errors import ConfigurationError, ContractError, TrainingFault
from .latentmodel import DiagGaussian

LOG2 = math.log(2.0)


@dataclass(frozen=True)
class PolicyConfig:
    latent_dim: int = 288
    action_dim: int = 2
    hidden: int = 256
    gamma: float = 0.99
    alpha_ent: float = 1.0
    rho: float = 0.005
    lr: float = 3e-4
    batch_size: int = 256
    sigma_min: float = 1e-4

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError("gamma must lie in [0, 1]", key="gamma")
        if not 0.0 < self.rho <= 1.0:
            raise ConfigurationError("rho must lie in (0, 1]", key="rho")
        if self.alpha_ent < 0:
            raise ConfigurationError("alpha_ent must be >= 0", key="alpha_ent")
        for name in ("latent_dim", "action_dim", "hidden", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive", key=name)


@dataclass
class PolicySample:
    action: torch.Tensor
    log_prob: torch.Tensor
    pre_squash: torch.Tensor


@dataclass
class Transitions:
    """A batch of latent transitions ``(z, a, r, z', done)``."""

    z: torch.Tensor
    action: torch.Tensor
    reward: torch.Tensor
    z_next: torch.Tensor
    done: torch.Tensor


def log1m_tanh_sq(u):
    """``log(1 - tanh(u)^2)`` without cancellation for large ``|u|``."""
    return 2.0 * (LOG2 - u - F.softplus(-2.0 * u))


def squashed_log_prob(dist: DiagGaussian, u):
    """Log density of ``tanh(u)`` when ``u`` is drawn from ``dist``."""
    return dist.log_prob(u) - log1m_tanh_sq(u).sum(-1)


def _mlp(in_dim, out_dim, hidden):
    return nn.Sequential(
        nn.Linear(in_dim, hidden), nn.ReLU(),
        nn.Linear(hidden, hidden), nn.ReLU(),
        nn.Linear(hidden, out_dim),
    )


class Actor(nn.Module):
    def __init__(self, latent_dim, action_dim=2, hidden=256, sigma_min=1e-4):
        super().__init__()
        self.net = _mlp(latent_dim, 2 * action_dim, hidden)
        self.sigma_min = sigma_min

    def forward(self, z):
        mean, raw = self.net(z).chunk(2, dim=-1)
        return DiagGaussian.from_raw(mean, raw, self.sigma_min)


class QNetwork(nn.Module):
    def __init__(self, latent_dim, action_dim=2, hidden=256):
        super().__init__()
        self.net = _mlp(latent_dim + action_dim, 1, hidden)

    def forward(self, z, a):
        return self.net(torch.cat([z, a], dim=-1)).squeeze(-1)


class Critic(nn.Module):
    """Two independent Q networks."""

    def __init__(self, latent_dim, action_dim=2, hidden=256):
        super().__init__()
        self.q1 = QNetwork(latent_dim, action_dim, hidden)
        self.q2 = QNetwork(latent_dim, action_dim, hidden)

    def forward(self, z, a):
        return self.q1(z, a), self.q2(z, a)


def policy_sample(actor: Actor, z, noise):
    """Reparameterized squashed sample with its log density."""
    dist = actor(z)
    u = dist.mean + dist.stddev * noise
    return PolicySample(torch.tanh(u), squashed_log_prob(dist, u), u)


def act(actor: Actor, z, mode="stochastic", noise=None, generator=None):
    """Action for acting in the environment (no gradients)."""
    with torch.no_grad():
        dist = actor(z)
        if mode == "deterministic":
            return torch.tanh(dist.mean)
        if mode != "stochastic":
            raise ValueError(f"unknown acting mode {mode!r}")
        if noise is None:
            noise = torch.randn(dist.mean.shape, generator=generator, dtype=dist.mean.dtype)
        return torch.tanh(dist.mean + dist.stddev * noise)


def q_values(critic: Critic, z, a):
    return critic(z, a)


def q_target(reward, done, z_next, actor, target_critic, gamma, alpha_ent, noise):
    """Soft Bellman backup ``r + gamma (1 - done) (min Q' - alpha log pi)``, no gradients."""
    with torch.no_grad():
        nxt = policy_sample(actor, z_next, noise)
        q1, q2 = target_critic(z_next, nxt.action)
        soft = torch.min(q1, q2) - alpha_ent * nxt.log_prob
        return reward + gamma * (1.0 - done) * soft


def _check(name, value):
    if not torch.isfinite(value):
        raise TrainingFault(name, float(value.detach()))


def critic_loss(critic, target_critic, actor, batch: Transitions, gamma, alpha_ent, noise):
    """Half mean squared Bellman residual over the batch and both critics."""
    target = q_target(batch.reward, batch.done, batch.z_next, actor, target_critic,
                      gamma, alpha_ent, noise)
    q1, q2 = critic(batch.z, batch.action)
    loss = 0.5 * (((q1 - target) ** 2).mean() + ((q2 - target) ** 2).mean()) / 2.0
    _check("critic_loss", loss)
    return loss


def actor_loss(actor, critic, z, alpha_ent, noise):
    """``E[alpha log pi(a|z) - min_i Q_i(z, a)]`` with reparameterized ``a``.

    The critic is evaluated with detached weights so that only the actor
    receives gradients.
    """
    s = policy_sample(actor, z, noise)
    frozen = {k: v.detach() for k, v in critic.named_parameters()}
    q1, q2 = functional_call(critic, frozen, (z, s.action))
    loss = (alpha_ent * s.log_prob - torch.min(q1, q2)).mean()
    _check("actor_loss", loss)
    return loss


@torch.no_grad()
def soft_update(target: nn.Module, online: nn.Module, rho):
    """Polyak averaging ``target <- rho * online + (1 - rho) * target``."""
    if not 0.0 < rho <= 1.0:
        raise ContractError("rho must lie in (0, 1]")
    tp = list(target.parameters())
    op = list(online.parameters())
    if len(tp) != len(op) or any(a.shape != b.shape for a, b in zip(tp, op)):
        raise ContractError("target and online networks have different shapes")
    for t, o in zip(tp, op):
        t.mul_(1.0 - rho).add_(o, alpha=rho)


class SACAgent(nn.Module):
    """Actor, twin critics, target critics and their optimizers."""

    def __init__(self, config: PolicyConfig):
        super().__init__()
        self.config = cfg = config
        self.actor = Actor(cfg.latent_dim, cfg.action_dim, cfg.hidden, cfg.sigma_min)
        self.critic = Critic(cfg.latent_dim, cfg.action_dim, cfg.hidden)
        self.critic_target = copy.deepcopy(self.critic)
        for p in self.critic_target.parameters():
            p.requires_grad_(False)

    def make_optimizers(self):
        lr = self.config.lr
        return (
            torch.optim.Adam(self.actor.parameters(), lr=lr),
            torch.optim.Adam(self.critic.parameters(), lr=lr),
        )

    def losses(self, batch: Transitions, z_actor, noise_target, noise_actor):
        cfg = self.config
        lc = critic_loss(self.critic, self.critic_target, self.actor, batch,
                         cfg.gamma, cfg.alpha_ent, noise_target)
        la = actor_loss(self.actor, self.critic, z_actor, cfg.alpha_ent, noise_actor)
        return lc, la

    def update(self, batch, z_actor, noise_target, noise_actor, actor_opt, critic_opt,
               grad_clip=None):
        """One critic step, one actor step, then a target update."""
        cfg = self.config
        lc = critic_loss(self.critic, self.critic_target, self.actor, batch,
                         cfg.gamma, cfg.alpha_ent, noise_target)
        critic_opt.zero_grad(set_to_none=True)
        lc.backward()
        if grad_clip:
            nn.utils.clip_grad_norm_(self.critic.parameters(), grad_clip)
        critic_opt.step()

        la = actor_loss(self.actor, self.critic, z_actor, cfg.alpha_ent, noise_actor)
        actor_opt.zero_grad(set_to_none=True)
        la.backward()
        if grad_clip:
            nn.utils.clip_grad_norm_(self.actor.parameters(), grad_clip)
        actor_opt.step()

        soft_update(self.critic_target, self.critic, cfg.rho)
        return float(lc.detach()), float(la.detach())
