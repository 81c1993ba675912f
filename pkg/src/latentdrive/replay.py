"""Episode-structured replay buffer with uniform window sampling.

Step ``k`` of an episode stores the frames seen at ``k`` together with the
action and reward of the transition that led there (zeros for the first
step) and the termination flag of that transition. A window of ``tau + 1``
consecutive steps therefore carries ``tau`` aligned transitions, and an
episode of ``L`` steps offers ``L - tau`` windows.
"""

from __future__ import annotations

import json

import numpy as np
import torch

from .errors import CheckpointError, ConfigurationError, ContractError, NotReadyError, UsageError
from .latentmodel import SequenceBatch

STREAMS = ("camera", "lidar", "mask")
BUFFER_VERSION = 1


def to_uint8(img):
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


class Episode:
    def __init__(self, arrays):
        self.arrays = arrays

    def __len__(self):
        return self.arrays["reward"].shape[0]


class ReplayBuffer:
    def __init__(self, capacity_steps, tau=10, image_size=64, action_dim=2):
        if capacity_steps < tau + 1:
            raise ConfigurationError("capacity must hold at least one window (tau + 1 steps)",
                                     key="capacity_steps")
        if tau < 1:
            raise ConfigurationError("tau must be >= 1", key="tau")
        self.capacity = int(capacity_steps)
        self.tau = int(tau)
        self.image_size = int(image_size)
        self.action_dim = int(action_dim)
        self.episodes = []
        self._open = None
        self._sealed_steps = 0

    # -- writing -------------------------------------------------------------

    def start_episode(self):
        if self._open is not None:
            raise UsageError("an episode is already open; call end_episode() first")
        self._open = {k: [] for k in STREAMS + ("action", "reward", "done")}

    def push_step(self, camera, lidar, mask, action=None, reward=0.0, done=False):
        """Append one step; images are floats in [0, 1] or uint8."""
        if self._open is None:
            raise UsageError("push_step() without an open episode; call start_episode()")
        ep = self._open
        if ep["done"] and ep["done"][-1]:
            raise UsageError("the episode already terminated")
        s = self.image_size
        for name, img in zip(STREAMS, (camera, lidar, mask)):
            img = np.asarray(img)
            if img.shape != (s, s, 3):
                raise ContractError(f"{name} must be {s}x{s}x3, got {img.shape}")
            ep[name].append(img if img.dtype == np.uint8 else to_uint8(img))
        if action is None:
            action = np.zeros(self.action_dim)
        action = np.asarray(action, dtype=np.float32).reshape(self.action_dim)
        ep["action"].append(action)
        ep["reward"].append(np.float32(reward))
        ep["done"].append(bool(done))

    def end_episode(self):
        """Seal the open episode and evict the oldest ones beyond capacity."""
        if self._open is None:
            raise UsageError("end_episode() without an open episode")
        ep = self._open
        self._open = None
        if not ep["reward"]:
            return
        arrays = {k: np.stack(ep[k]) for k in STREAMS + ("action",)}
        arrays["reward"] = np.asarray(ep["reward"], dtype=np.float32)
        arrays["done"] = np.asarray(ep["done"], dtype=bool)
        self._add(Episode(arrays))

    def _add(self, episode):
        self.episodes.append(episode)
        self._sealed_steps += len(episode)
        while self._sealed_steps > self.capacity and len(self.episodes) > 1:
            old = self.episodes.pop(0)
            self._sealed_steps -= len(old)

    # -- reading -------------------------------------------------------------

    @property
    def num_steps(self):
        open_steps = len(self._open["reward"]) if self._open is not None else 0
        return self._sealed_steps + open_steps

    def _window_counts(self):
        return np.array([max(0, len(e) - self.tau) for e in self.episodes], dtype=np.int64)

    @property
    def num_windows(self):
        return int(self._window_counts().sum())

    def sample_indices(self, batch_size, rng):
        """``(episode, offset)`` pairs drawn uniformly over all valid windows."""
        counts = self._window_counts()
        total = int(counts.sum())
        if total == 0:
            raise NotReadyError("replay buffer holds no complete window yet")
        flat = rng.integers(0, total, size=batch_size)
        cum = np.cumsum(counts)
        ep = np.searchsorted(cum, flat, side="right")
        start = cum - counts
        return ep, flat - start[ep]

    def sample(self, batch_size, rng, dtype=torch.float32):
        ep, off = self.sample_indices(batch_size, rng)
        return self.gather(ep, off, dtype)

    def gather(self, ep, off, dtype=torch.float32):
        t1 = self.tau + 1
        out = {k: [] for k in STREAMS + ("action", "reward", "done")}
        for e, o in zip(ep, off):
            arr = self.episodes[int(e)].arrays
            for k in STREAMS:
                out[k].append(arr[k][o:o + t1])
            # transitions into steps o+1 .. o+tau
            for k in ("action", "reward", "done"):
                out[k].append(arr[k][o + 1:o + t1])
        imgs = {k: torch.from_numpy(np.stack(out[k])).to(dtype) / 255.0 for k in STREAMS}
        return SequenceBatch(
            camera=imgs["camera"],
            lidar=imgs["lidar"],
            mask=imgs["mask"],
            action=torch.from_numpy(np.stack(out["action"])).to(dtype),
            reward=torch.from_numpy(np.stack(out["reward"])).to(dtype),
            done=torch.from_numpy(np.stack(out["done"])).to(dtype),
        )

    # -- persistence ---------------------------------------------------------

    def save(self, path):
        """Dump sealed episodes to an ``.npz`` archive."""
        meta = {"version": BUFFER_VERSION, "capacity": self.capacity, "tau": self.tau,
                "image_size": self.image_size, "action_dim": self.action_dim}
        arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
        for i, e in enumerate(self.episodes):
            for k, v in e.arrays.items():
                arrays[f"episode_{i:06d}/{k}"] = v
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path):
        try:
            with np.load(path) as data:
                meta = json.loads(bytes(data["meta"]).decode())
                if meta.get("version") != BUFFER_VERSION:
                    raise CheckpointError(f"unsupported buffer version {meta.get('version')}")
                buf = cls(meta["capacity"], meta["tau"], meta["image_size"], meta["action_dim"])
                names = sorted({k.split("/")[0] for k in data.files if k.startswith("episode_")})
                for n in names:
                    arrays = {k: data[f"{n}/{k}"] for k in STREAMS + ("action", "reward", "done")}
                    buf._add(Episode(arrays))
        except (OSError, KeyError, ValueError) as exc:
            raise CheckpointError(f"cannot read replay archive {path}: {exc}") from exc
        return buf
