"""Sequential latent environment model.

A filtering posterior q(z_{t+1} | z_t, x_{t+1}, a_t), a learned prior
transition p(z_{t+1} | z_t, a_t), and Gaussian decoders for the sensor images
and the bird's-eye mask, trained on the negative ELBO.

Two latent layouts are supported. ``hierarchical`` splits z into (z1, z2):

    p(z1_1) = N(0, I)             p(z2_1 | z1_1)
    p(z1_{t+1} | z2_t, a_t)       p(z2_{t+1} | z1_{t+1}, z2_t, a_t)

and the posterior only replaces the z1 factors, sharing the z2 factors with
the prior, so the KL terms only involve z1. ``flat`` uses a single Gaussian z
of size d1 + d2 for every factor.

Latent states are plain tensors of width ``d1 + d2`` (z1 first). Images are
channel-last float tensors in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ContractError, TrainingFault, UsageError

SENSORS = ("camera", "lidar")

VARIANTS = {
    # name: (encoder inputs, reconstruction targets)
    "full": (("camera", "lidar"), ("camera", "lidar", "mask")),
    "sensor_only": (("camera", "lidar"), ("camera", "lidar")),
    "mask_only": (("mask",), ("mask",)),
}


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    d1: int = 32
    d2: int = 256
    action_dim: int = 2
    hidden: int = 256
    feature_dim: int = 256
    base_depth: int = 32
    mode: str = "hierarchical"
    variant: str = "full"
    sigma_dec: float = math.sqrt(0.1)
    sigma_min: float = 1e-4
    tie_posterior: bool = False

    def __post_init__(self):
        if self.mode not in ("hierarchical", "flat"):
            raise ConfigurationError(f"unknown latent mode {self.mode!r}", key="mode")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown model variant {self.variant!r}", key="variant")
        if self.tie_posterior and self.mode != "flat":
            raise ConfigurationError("tie_posterior is only defined for the flat mode",
                                     key="tie_posterior")
        size = self.image_size
        if size < 8 or size & (size - 1):
            raise ConfigurationError("image_size must be a power of two >= 8", key="image_size")
        for name in ("d1", "d2", "action_dim", "hidden", "feature_dim", "base_depth"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive", key=name)
        if self.sigma_dec <= 0 or self.sigma_min <= 0:
            raise ConfigurationError("sigma_dec and sigma_min must be positive", key="sigma_dec")

    @property
    def latent_dim(self):
        return self.d1 + self.d2

    @property
    def inputs(self):
        return VARIANTS[self.variant][0]

    @property
    def targets(self):
        return VARIANTS[self.variant][1]


class DiagGaussian:
    """Diagonal Gaussian with ``stddev`` already made positive."""

    def __init__(self, mean, stddev):
        self.mean = mean
        self.stddev = stddev

    @classmethod
    def from_raw(cls, mean, raw_std, sigma_min=1e-4):
        return cls(mean, F.softplus(raw_std) + sigma_min)

    def log_prob(self, x):
        z = (x - self.mean) / self.stddev
        return (-0.5 * z * z - torch.log(self.stddev) - 0.5 * math.log(2 * math.pi)).sum(-1)

    def detach(self):
        return DiagGaussian(self.mean.detach(), self.stddev.detach())


def sample(d: DiagGaussian, noise):
    """Reparameterized draw ``mean + stddev * noise``."""
    if noise.shape[-1] != d.mean.shape[-1]:
        raise ContractError(f"noise width {noise.shape[-1]} != distribution width {d.mean.shape[-1]}")
    return d.mean + d.stddev * noise


def kl_diag_gaussian(q: DiagGaussian, p: DiagGaussian):
    """Closed-form KL(q || p) summed over the last axis."""
    if q.mean.shape[-1] != p.mean.shape[-1]:
        raise ContractError("KL between Gaussians of different widths")
    ratio = q.stddev / p.stddev
    diff = (q.mean - p.mean) / p.stddev
    return (0.5 * (ratio * ratio + diff * diff - 1.0) - torch.log(ratio)).sum(-1)


def standard_normal(dim, like):
    zeros = like.new_zeros(like.shape[:-1] + (dim,))
    return DiagGaussian(zeros, torch.ones_like(zeros))


def gaussian_image_log_likelihood(target, mean, sigma):
    """Per-image log density of ``target`` under N(mean, sigma^2) per pixel."""
    z = (target - mean) / sigma
    per_pixel = -0.5 * z * z - math.log(sigma) - 0.5 * math.log(2 * math.pi)
    return per_pixel.flatten(-3).sum(-1)


def _final_kernel(size):
    return max(1, size // 16)


class ConvEncoder(nn.Module):
    """Five conv layers mapping an H x W x 3 image to a flat feature vector."""

    def __init__(self, image_size, base_depth=32):
        super().__init__()
        b = base_depth
        k = _final_kernel(image_size)
        self.net = nn.Sequential(
            nn.Conv2d(3, b, 5, 2, padding=2), nn.LeakyReLU(0.2),
            nn.Conv2d(b, 2 * b, 3, 2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * b, 4 * b, 3, 2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(4 * b, 8 * b, 3, 2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(8 * b, 8 * b, k, 1), nn.LeakyReLU(0.2),
        )
        self.out_dim = 8 * b

    def forward(self, images):
        x = images.permute(0, 3, 1, 2)
        return self.net(x).flatten(1)


class ConvDecoder(nn.Module):
    """Transposed-conv mirror of :class:`ConvEncoder` producing per-pixel means."""

    def __init__(self, latent_dim, image_size, base_depth=32):
        super().__init__()
        b = base_depth
        k = _final_kernel(image_size)
        # images smaller than 16 px need fewer doublings; the leading ones become stride 1
        doublings = int(math.log2(image_size // k))
        strides = [1] * (4 - doublings) + [2] * doublings
        layers = [nn.ConvTranspose2d(latent_dim, 8 * b, k, 1), nn.LeakyReLU(0.2)]
        chans = [8 * b, 4 * b, 2 * b, b]
        for i in range(3):
            s = strides[i]
            layers += [
                nn.ConvTranspose2d(chans[i], chans[i + 1], 3, s, padding=1, output_padding=s - 1),
                nn.LeakyReLU(0.2),
            ]
        s = strides[3]
        layers.append(nn.ConvTranspose2d(b, 3, 5, s, padding=2, output_padding=s - 1))
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        x = self.net(z.reshape(z.shape[0], -1, 1, 1))
        return x.permute(0, 2, 3, 1)


class GaussianMLP(nn.Module):
    """Two hidden layers followed by a Gaussian head (mean, softplus stddev)."""

    def __init__(self, in_dim, out_dim, hidden=256, sigma_min=1e-4):
        super().__init__()
        self.body = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, hidden), nn.LeakyReLU(0.2),
        )
        self.head = nn.Linear(hidden, 2 * out_dim)
        self.sigma_min = sigma_min

    def forward(self, *inputs):
        h = self.body(torch.cat(inputs, dim=-1))
        mean, raw = self.head(h).chunk(2, dim=-1)
        return DiagGaussian.from_raw(mean, raw, self.sigma_min)


@dataclass
class SequenceBatch:
    """Aligned training windows: ``T + 1`` images per stream and ``T`` transitions.

    Image streams are ``B x (T+1) x H x W x 3`` floats in [0, 1]; ``action``
    is ``B x T x A``; ``reward`` and ``done`` are ``B x T``.
    """

    camera: torch.Tensor
    lidar: torch.Tensor
    mask: torch.Tensor
    action: torch.Tensor
    reward: torch.Tensor
    done: torch.Tensor

    def __post_init__(self):
        b, t1 = self.mask.shape[:2]
        for name in ("camera", "lidar"):
            if getattr(self, name).shape[:2] != (b, t1):
                raise ContractError(f"{name} stream is not aligned with mask")
        if self.action.shape[:2] != (b, t1 - 1):
            raise ContractError("actions must cover exactly tau transitions")
        if self.reward.shape != (b, t1 - 1) or self.done.shape != (b, t1 - 1):
            raise ContractError("reward/done must be B x tau")

    @property
    def batch_size(self):
        return self.mask.shape[0]

    @property
    def horizon(self):
        return self.action.shape[1]

    def images(self, name):
        return getattr(self, name)

    def to(self, dtype=None, device=None):
        conv = {}
        for name in ("camera", "lidar", "mask", "action", "reward"):
            conv[name] = getattr(self, name).to(device=device, dtype=dtype)
        conv["done"] = self.done.to(device=device, dtype=dtype)
        return SequenceBatch(**conv)


@dataclass
class ModelLossBreakdown:
    recon_x: torch.Tensor
    recon_m: torch.Tensor
    kl_first: torch.Tensor
    kl_steps: torch.Tensor
    total: torch.Tensor

    def as_floats(self):
        return {k: float(getattr(self, k).detach()) for k in ("recon_x", "recon_m", "kl_first", "kl_steps", "total")}


class LatentModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = cfg = config
        self.encoders = nn.ModuleDict({m: ConvEncoder(cfg.image_size, cfg.base_depth) for m in cfg.inputs})
        self.fuse = nn.Linear(len(cfg.inputs) * 8 * cfg.base_depth, cfg.feature_dim)
        d1, d2, a, h = cfg.d1, cfg.d2, cfg.action_dim, cfg.hidden
        smin = cfg.sigma_min
        if cfg.mode == "hierarchical":
            self.filter_first_net = GaussianMLP(cfg.feature_dim, d1, h, smin)
            self.filter_step_net = GaussianMLP(cfg.feature_dim + d2 + a, d1, h, smin)
            self.prior_step_net = GaussianMLP(d2 + a, d1, h, smin)
            self.z2_first_net = GaussianMLP(d1, d2, h, smin)
            self.z2_step_net = GaussianMLP(d1 + d2 + a, d2, h, smin)
        else:
            d = cfg.latent_dim
            self.prior_step_net = GaussianMLP(d + a, d, h, smin)
            if not cfg.tie_posterior:
                self.filter_first_net = GaussianMLP(cfg.feature_dim, d, h, smin)
                self.filter_step_net = GaussianMLP(cfg.feature_dim + d + a, d, h, smin)
        self.decoders = nn.ModuleDict(
            {m: ConvDecoder(cfg.latent_dim, cfg.image_size, cfg.base_depth) for m in cfg.targets}
        )

    # -- helpers -------------------------------------------------------------

    @property
    def hierarchical(self):
        return self.config.mode == "hierarchical"

    @property
    def stochastic_dim(self):
        """Width of the factor that carries the KL (z1, or all of z when flat)."""
        return self.config.d1 if self.hierarchical else self.config.latent_dim

    def split(self, z):
        return z[..., : self.config.d1], z[..., self.config.d1 :]

    def _check_image(self, img):
        s = self.config.image_size
        if img.shape[-3:] != (s, s, 3):
            raise ContractError(f"expected images of shape ({s}, {s}, 3), got {tuple(img.shape[-3:])}")

    # -- model components -----------------------------------------------------

    def encode_features(self, obs):
        """Fused feature vector for a dict of images with any leading batch shape."""
        parts = []
        lead = None
        for name in self.config.inputs:
            if name not in obs:
                raise ContractError(f"missing input stream {name!r}")
            img = obs[name]
            self._check_image(img)
            lead = img.shape[:-3]
            parts.append(self.encoders[name](img.reshape((-1,) + tuple(img.shape[-3:]))))
        feat = self.fuse(torch.cat(parts, dim=-1))
        return feat.reshape(tuple(lead) + (feat.shape[-1],))

    def prior_first(self, like):
        return standard_normal(self.stochastic_dim, like)

    def filter_first(self, feat):
        if self.config.tie_posterior:
            return self.prior_first(feat)
        return self.filter_first_net(feat)

    def filter_step(self, z, feat, action):
        if self.config.tie_posterior:
            return self.prior_step(z, action)
        if self.hierarchical:
            return self.filter_step_net(feat, self.split(z)[1], action)
        return self.filter_step_net(feat, z, action)

    def prior_step(self, z, action):
        if self.hierarchical:
            return self.prior_step_net(self.split(z)[1], action)
        return self.prior_step_net(z, action)

    def _complete_first(self, z1, noise):
        if not self.hierarchical:
            return z1
        z2 = sample(self.z2_first_net(z1), noise[..., self.config.d1 :])
        return torch.cat([z1, z2], dim=-1)

    def _complete_step(self, z1, z_prev, action, noise):
        if not self.hierarchical:
            return z1
        z2 = sample(self.z2_step_net(z1, self.split(z_prev)[1], action), noise[..., self.config.d1 :])
        return torch.cat([z1, z2], dim=-1)

    def _head(self, noise):
        return noise[..., : self.stochastic_dim]

    def first_latent(self, feat, noise):
        """Sample z_1 from the posterior; returns ``(z, q, p)``."""
        q = self.filter_first(feat)
        z1 = sample(q, self._head(noise))
        return self._complete_first(z1, noise), q, self.prior_first(feat)

    def next_latent(self, z, feat, action, noise):
        """Sample z_{t+1} from the filtering posterior; returns ``(z', q, p)``."""
        q = self.filter_step(z, feat, action)
        p = self.prior_step(z, action)
        z1 = sample(q, self._head(noise))
        return self._complete_step(z1, z, action, noise), q, p

    def prior_next(self, z, action, noise):
        """Sample z_{t+1} from the learned transition alone."""
        p = self.prior_step(z, action)
        z1 = sample(p, self._head(noise))
        return self._complete_step(z1, z, action, noise)

    def decode(self, z, name):
        if name not in self.decoders:
            raise UsageError(f"this model variant has no {name!r} decoder")
        lead = z.shape[:-1]
        out = self.decoders[name](z.reshape(-1, z.shape[-1]))
        return out.reshape(tuple(lead) + tuple(out.shape[-3:]))

    def decode_obs(self, z):
        return {m: self.decode(z, m) for m in SENSORS if m in self.decoders}

    def decode_mask(self, z):
        return self.decode(z, "mask")

    # -- sequences -----------------------------------------------------------

    def filter_sequence(self, obs, actions, noise):
        """Run the filtering chain over ``T + 1`` frames.

        ``obs`` maps stream names to ``B x (T+1) x H x W x 3`` images,
        ``actions`` is ``B x T x A`` and ``noise`` is ``B x (T+1) x (d1+d2)``.
        Returns ``(z, posteriors, priors)`` with ``z`` of shape ``B x (T+1) x D``.
        """
        feats = self.encode_features(obs)
        steps = feats.shape[1]
        if noise.shape[:2] != feats.shape[:2] or noise.shape[-1] != self.config.latent_dim:
            raise ContractError("noise must be B x (T+1) x (d1 + d2)")
        if actions.shape[1] != steps - 1:
            raise ContractError("need exactly one action per transition")
        z, q, p = self.first_latent(feats[:, 0], noise[:, 0])
        zs, qs, ps = [z], [q], [p]
        for t in range(steps - 1):
            z, q, p = self.next_latent(z, feats[:, t + 1], actions[:, t], noise[:, t + 1])
            zs.append(z)
            qs.append(q)
            ps.append(p)
        return torch.stack(zs, dim=1), qs, ps

    def model_loss(self, batch: SequenceBatch, noise, check_finite=True):
        """Negative ELBO averaged over the batch, with its four terms.

        Reconstruction terms sum over time steps and pixels; ``kl_steps`` sums
        the per-transition KL over the ``T`` transitions of the window.
        """
        cfg = self.config
        obs = {name: batch.images(name) for name in cfg.inputs}
        z, qs, ps = self.filter_sequence(obs, batch.action, noise)
        recon_x = z.new_zeros(())
        recon_m = z.new_zeros(())
        for name in cfg.targets:
            mean = self.decode(z, name)
            ll = gaussian_image_log_likelihood(batch.images(name), mean, cfg.sigma_dec)
            term = ll.sum(1).mean()
            if name == "mask":
                recon_m = recon_m + term
            else:
                recon_x = recon_x + term
        kl_first = kl_diag_gaussian(qs[0], ps[0]).mean()
        kl_steps = z.new_zeros(())
        for q, p in zip(qs[1:], ps[1:]):
            kl_steps = kl_steps + kl_diag_gaussian(q, p).mean()
        total = -(recon_x + recon_m) + kl_first + kl_steps
        out = ModelLossBreakdown(recon_x, recon_m, kl_first, kl_steps, total)
        if check_finite:
            for name in ("recon_x", "recon_m", "kl_first", "kl_steps", "total"):
                v = getattr(out, name)
                if not torch.isfinite(v):
                    raise TrainingFault(name, float(v.detach()))
        return out

    def predict_rollout(self, z, actions, noise):
        """Roll the learned transition forward ``H`` steps from ``z``.

        ``actions`` is ``B x H x A`` and ``noise`` is ``B x H x (d1+d2)``.
        Returns ``(latents, masks)`` where masks are decoded means, or ``None``
        when the variant has no mask decoder.
        """
        horizon = actions.shape[1]
        if horizon < 1:
            raise ContractError("rollout horizon must be >= 1")
        out = []
        for t in range(horizon):
            z = self.prior_next(z, actions[:, t], noise[:, t])
            out.append(z)
        latents = torch.stack(out, dim=1)
        masks = self.decode_mask(latents) if "mask" in self.decoders else None
        return latents, masks

    def infer_online(self, prev_z, obs, prev_action, noise):
        """One filtering update for acting: ``filter_first`` on the first frame,
        ``filter_step`` afterwards. Returns a latent sample.
        """
        feat = self.encode_features(obs)
        if prev_z is None:
            return self.first_latent(feat, noise)[0]
        if prev_action is None:
            raise UsageError("infer_online needs the previous action after the first frame")
        return self.next_latent(prev_z, feat, prev_action, noise)[0]
