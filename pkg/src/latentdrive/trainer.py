"""Joint training loop: collection with online filtering, model and SAC updates,
periodic evaluation, CSV logging and checkpoints.

Everything runs sequentially from one seed, so two runs with the same config
produce byte-identical logs. Wall-clock timings go to a separate file.
"""

from __future__ import annotations

import csv
import dataclasses
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .checkpoint import load_into, read_checkpoint, save_checkpoint
from .config import RunConfig, from_dict
from .errors import TrainingFault
from .latentmodel import LatentModel
from .metrics import pixel_diff
from .policy import SACAgent, Transitions, act
from .replay import ReplayBuffer, to_uint8
from .worldsim import DrivingEnv

LOG_COLUMNS = (
    "env_step", "ticks", "episodes", "avg_return", "return_std", "undiscounted_return",
    "collision_rate", "pixel_error", "recon_x", "recon_m", "kl_first", "kl_steps",
    "model_loss", "critic_loss", "actor_loss", "model_steps", "rl_steps",
)


def episode_seed(base, index):
    return int(np.random.SeedSequence([int(base), int(index)]).generate_state(1)[0])


def discounted_return(rewards, gamma):
    """``sum_t gamma^t r_t`` accumulated front to back."""
    total, scale = 0.0, 1.0
    for r in rewards:
        total += scale * r
        scale *= gamma
    return total


def obs_tensors(result, dtype=torch.float32):
    """Batch-of-one image dict for the model, quantized like the replay buffer."""
    out = {
        "camera": result.observation.camera,
        "lidar": result.observation.lidar,
        "mask": result.mask,
    }
    return {k: torch.from_numpy(to_uint8(v)).to(dtype).div_(255.0)[None] for k, v in out.items()}


@dataclass
class EvalResult:
    mean_return: float
    return_std: float
    collision_rate: float
    pixel_error: float
    undiscounted_mean: float
    returns: list = field(default_factory=list)
    reasons: list = field(default_factory=list)


def _run_episode(env, seed, choose, gamma):
    result = env.reset(seed)
    rewards = []
    while True:
        action = choose(result)
        result = env.step(action)
        rewards.append(result.reward)
        if result.done:
            return rewards, result.done_reason


def evaluate_policy(model, agent, env_config, episodes, seed, gamma, mode="stochastic",
                    mask_stride=1):
    """Roll the current policy with per-tick filtering and no frame skip.

    Returns aggregate discounted returns, collision rate and the mask pixel
    error of decoded means against ground truth. Parameters are untouched.
    """
    env = DrivingEnv(env_config)
    gen = torch.Generator().manual_seed(int(seed) % (2 ** 63))
    dim = model.config.latent_dim
    returns, plain, reasons, decoded, truth = [], [], [], [], []
    has_mask = "mask" in model.decoders
    with torch.no_grad():
        for ep in range(episodes):
            state = {"z": None, "a": None, "t": 0}

            def choose(result):
                obs = obs_tensors(result)
                noise = torch.randn(1, dim, generator=gen)
                prev_a = None if state["a"] is None else torch.as_tensor(state["a"], dtype=torch.float32)[None]
                z = model.infer_online(state["z"], obs, prev_a, noise)
                if has_mask and state["t"] % mask_stride == 0:
                    decoded.append(model.decode_mask(z)[0].clamp(0.0, 1.0).numpy())
                    truth.append(obs["mask"][0].numpy())
                a = act(agent.actor, z, mode, noise=torch.randn(1, agent.config.action_dim, generator=gen))
                state.update(z=z, a=a[0].numpy(), t=state["t"] + 1)
                return state["a"].astype(np.float64)

            rewards, reason = _run_episode(env, episode_seed(seed, ep), choose, gamma)
            returns.append(discounted_return(rewards, gamma))
            plain.append(float(np.sum(rewards)))
            reasons.append(reason)
    e = pixel_diff(np.stack(decoded), np.stack(truth)).e if decoded else float("nan")
    return EvalResult(
        float(np.mean(returns)), float(np.std(returns)),
        float(np.mean([r == "collision" for r in reasons])), e, float(np.mean(plain)),
        returns, reasons,
    )


def evaluate_baseline(env_config, episodes, seed, gamma, kind="random"):
    """Discounted returns of a uniform-random or a standing-still controller."""
    env = DrivingEnv(env_config)
    rng = np.random.default_rng(seed)
    returns, plain, reasons = [], [], []
    for ep in range(episodes):
        if kind == "random":
            choose = lambda _r: rng.uniform(-1.0, 1.0, size=2)
        elif kind == "standstill":
            choose = lambda _r: np.array([-1.0, 0.0])
        else:
            raise ValueError(f"unknown baseline {kind!r}")
        env.reset(episode_seed(seed, ep))
        rewards = []
        while True:
            result = env.step(choose(None), render=False)
            rewards.append(result.reward)
            if result.done:
                break
        returns.append(discounted_return(rewards, gamma))
        plain.append(float(np.sum(rewards)))
        reasons.append(result.done_reason)
    return EvalResult(float(np.mean(returns)), float(np.std(returns)),
                      float(np.mean([r == "collision" for r in reasons])), float("nan"),
                      float(np.mean(plain)), returns, reasons)


class Trainer:
    """Owns the environment, replay buffer, networks and optimizers of one run."""

    def __init__(self, config: RunConfig, out_dir=None):
        self.config = cfg = config
        self.out_dir = out_dir
        seed = cfg.train.seed
        torch.manual_seed(seed)
        self.gen = torch.Generator().manual_seed(seed)
        self.rng = np.random.default_rng(seed)
        self.env = DrivingEnv(cfg.env)
        self.model = LatentModel(cfg.model)
        self.agent = SACAgent(cfg.policy)
        self.model_opt = torch.optim.Adam(self.model.parameters(), lr=cfg.train.model_lr)
        self.actor_opt, self.critic_opt = self.agent.make_optimizers()
        self.replay = ReplayBuffer(cfg.replay.capacity_steps, cfg.replay.tau,
                                   cfg.env.image_size, cfg.policy.action_dim)
        self.agent_steps = 0
        self.ticks = 0
        self.episodes = 0
        self.model_steps = 0
        self.rl_steps = 0
        self._result = None
        self._z = None
        self._losses = []

    # -- collection ----------------------------------------------------------

    def _push(self, result, action, reward, terminal):
        self.replay.push_step(result.observation.camera, result.observation.lidar, result.mask,
                              action, reward, terminal)

    def _begin_episode(self):
        result = self.env.reset(episode_seed(self.config.train.seed, self.episodes))
        self.replay.start_episode()
        self._push(result, None, 0.0, False)
        self._result = result
        self._z = None

    def _filter(self, action):
        """Update the online belief with the newest stored frame."""
        noise = torch.randn(1, self.config.model.latent_dim, generator=self.gen)
        prev_a = None if action is None else torch.as_tensor(action, dtype=torch.float32)[None]
        with torch.no_grad():
            self._z = self.model.infer_online(self._z, obs_tensors(self._result), prev_a, noise)

    def collect_step(self, random_action=False):
        """One agent step: act, repeat the action ``frame_skip`` ticks, store.

        Returns a dict with the summed reward, ticks run, and termination info.
        """
        if self._result is None:
            self._begin_episode()
        if random_action:
            action = self.rng.uniform(-1.0, 1.0, size=self.config.policy.action_dim)
        else:
            if self._z is None:
                self._filter(None)
            noise = torch.randn(1, self.config.policy.action_dim, generator=self.gen)
            action = act(self.agent.actor, self._z, "stochastic", noise=noise)[0].numpy().astype(np.float64)
        total, ticks = 0.0, 0
        skip = self.config.train.frame_skip
        result = None
        for k in range(skip):
            last = k == skip - 1
            result = self.env.step(action, render=last)
            total += result.reward
            ticks += 1
            if result.done:
                break
        if result.observation is None:
            obs, mask = self.env.render()
            result = dataclasses.replace(result, observation=obs, mask=mask)
        terminal = result.done and result.done_reason != "timeout"
        self._result = result
        self._push(result, action.astype(np.float32), total, terminal)
        self.agent_steps += 1
        self.ticks += ticks
        if result.done:
            self.replay.end_episode()
            self.episodes += 1
            self._result = None
            self._z = None
        elif not random_action or self.agent_steps >= self.config.train.warmup_steps:
            self._filter(action)
        return {"reward": total, "ticks": ticks, "done": result.done, "reason": result.done_reason}

    # -- learning ------------------------------------------------------------

    def _noise(self, *shape):
        return torch.randn(*shape, generator=self.gen)

    def model_step(self):
        cfg = self.config
        batch = self.replay.sample(cfg.train.model_batch_size, self.rng)
        noise = self._noise(batch.batch_size, batch.horizon + 1, cfg.model.latent_dim)
        loss = self.model.model_loss(batch, noise)
        self.model_opt.zero_grad(set_to_none=True)
        loss.total.backward()
        torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.train.grad_clip)
        self.model_opt.step()
        self.model_steps += 1
        return loss.as_floats()

    def rl_step(self):
        cfg = self.config
        batch = self.replay.sample(cfg.policy.batch_size, self.rng)
        noise = self._noise(batch.batch_size, batch.horizon + 1, cfg.model.latent_dim)
        obs = {name: batch.images(name) for name in cfg.model.inputs}
        with torch.no_grad():
            z = self.model.filter_sequence(obs, batch.action, noise)[0]
        trans = Transitions(z[:, -2], batch.action[:, -1], batch.reward[:, -1], z[:, -1], batch.done[:, -1])
        a_dim = cfg.policy.action_dim
        lc, la = self.agent.update(
            trans, z[:, -1], self._noise(batch.batch_size, a_dim), self._noise(batch.batch_size, a_dim),
            self.actor_opt, self.critic_opt, cfg.train.grad_clip,
        )
        self.rl_steps += 1
        return lc, la

    def train_step(self):
        """Collect one agent step, then run the configured gradient steps."""
        warm = self.agent_steps < self.config.train.warmup_steps
        info = self.collect_step(random_action=warm)
        if not warm and self.replay.num_windows > 0:
            for _ in range(self.config.train.grad_steps_per_agent_step):
                m = self.model_step()
                lc, la = self.rl_step()
                self._losses.append((m["recon_x"], m["recon_m"], m["kl_first"], m["kl_steps"],
                                     m["total"], lc, la))
        return info

    # -- evaluation / persistence ------------------------------------------

    def evaluate(self, episodes=None):
        t = self.config.train
        return evaluate_policy(self.model, self.agent, self.config.env,
                               episodes or t.eval_episodes, t.eval_seed, self.config.policy.gamma)

    def groups(self):
        return {"model": self.model, "actor": self.agent.actor, "critic": self.agent.critic,
                "critic_target": self.agent.critic_target}

    def save(self, path):
        return save_checkpoint(path, self.groups(), self.config.to_dict(), self.agent_steps)

    def log_row(self, ev: EvalResult):
        if self._losses:
            means = np.mean(np.asarray(self._losses, dtype=np.float64), axis=0)
        else:
            means = np.full(7, np.nan)
        self._losses = []
        vals = {
            "env_step": self.agent_steps, "ticks": self.ticks, "episodes": self.episodes,
            "avg_return": ev.mean_return, "return_std": ev.return_std,
            "undiscounted_return": ev.undiscounted_mean, "collision_rate": ev.collision_rate,
            "pixel_error": ev.pixel_error,
            "recon_x": means[0], "recon_m": means[1], "kl_first": means[2], "kl_steps": means[3],
            "model_loss": means[4], "critic_loss": means[5], "actor_loss": means[6],
            "model_steps": self.model_steps, "rl_steps": self.rl_steps,
        }
        return vals


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


@dataclass
class TrainOutput:
    log_path: str
    checkpoints: list
    rows: list
    trainer: Trainer


def train(config: RunConfig, out_dir, progress=None):
    """Run a full training job, writing ``log.csv``, ``timing.csv`` and checkpoints.

    A non-finite loss writes a ``fault`` checkpoint and re-raises.
    """
    torch.use_deterministic_algorithms(True)
    os.makedirs(out_dir, exist_ok=True)
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    tr = Trainer(config, out_dir)
    t = config.train
    log_path = os.path.join(out_dir, "log.csv")
    timing_path = os.path.join(out_dir, "timing.csv")
    rows, ckpts = [], []
    start = time.perf_counter()
    with open(log_path, "w", newline="") as log_fh, open(timing_path, "w", newline="") as time_fh:
        log = csv.writer(log_fh, lineterminator="\n")
        timing = csv.writer(time_fh, lineterminator="\n")
        log.writerow(LOG_COLUMNS)
        timing.writerow(("env_step", "wall_seconds"))
        while tr.agent_steps < t.total_env_steps:
            try:
                tr.train_step()
            except TrainingFault:
                path = os.path.join(ckpt_dir, f"ckpt_{tr.agent_steps:08d}_fault.npz")
                tr.save(path)
                raise
            step = tr.agent_steps
            final = step == t.total_env_steps
            if step % t.eval_every == 0 or final:
                row = tr.log_row(tr.evaluate())
                rows.append(row)
                log.writerow([_fmt(row[c]) for c in LOG_COLUMNS])
                log_fh.flush()
                timing.writerow((step, f"{time.perf_counter() - start:.3f}"))
                time_fh.flush()
                if progress:
                    progress(row)
            if step % t.checkpoint_every == 0 or final:
                ckpts.append(tr.save(os.path.join(ckpt_dir, f"ckpt_{step:08d}.npz")))
    return TrainOutput(log_path, ckpts, rows, tr)


def load_run(path):
    """Rebuild ``(config, model, agent, step)`` from a checkpoint archive."""
    meta, arrays = read_checkpoint(path)
    cfg = from_dict(meta["config"])
    model = LatentModel(cfg.model)
    agent = SACAgent(cfg.policy)
    load_into(model, arrays, "model")
    load_into(agent.actor, arrays, "actor")
    load_into(agent.critic, arrays, "critic")
    load_into(agent.critic_target, arrays, "critic_target")
    model.eval()
    return cfg, model, agent, int(meta.get("step", 0))
