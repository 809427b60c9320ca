"""Pose-conditional VAE: view-invariant Gaussian scene beliefs from single images.

The encoder sees only the image; the decoder receives the sampled latent
concatenated with a one-hot camera pose and is supervised with the frame of
the same (scene, timestamp) from a randomly drawn pose.
"""

from __future__ import annotations

import base64
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import Checkpoint, load_checkpoint, load_state_dict_tensors, save_checkpoint, state_dict_tensors
from .errors import DatasetError, ShapeMismatchError

log = logging.getLogger(__name__)

LOGVAR_CLAMP = 10.0


@dataclass
class LatentGaussian:
    mu: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma2 = np.asarray(self.sigma2, dtype=np.float64)
        if self.mu.shape != self.sigma2.shape:
            raise ShapeMismatchError("mu and sigma2 must have the same shape")
        if not (np.all(np.isfinite(self.mu)) and np.all(np.isfinite(self.sigma2))):
            raise ValueError("latent parameters must be finite")
        if np.any(self.sigma2 <= 0):
            raise ValueError("latent variances must be positive")

    @property
    def dim(self):
        return self.mu.shape[-1]

    def to_dict(self):
        return {"mu": self.mu.tolist(), "sigma2": self.sigma2.tolist()}


@dataclass
class KLSchedule:
    w_start: float = 1e-6
    w_end: float = 1e-5
    epoch_start: int = 50
    epoch_end: int = 80

    def __post_init__(self):
        if not 0 < self.w_start <= self.w_end:
            raise ValueError("KL schedule needs 0 < w_start <= w_end")
        if not self.epoch_start < self.epoch_end:
            raise ValueError("KL schedule needs epoch_start < epoch_end")


def kl_weight(epoch, s: KLSchedule):
    """Flat at ``w_start``, linear ramp over [epoch_start, epoch_end], flat at ``w_end``."""
    if epoch < s.epoch_start:
        return s.w_start
    if epoch >= s.epoch_end:
        return s.w_end
    frac = (epoch - s.epoch_start) / (s.epoch_end - s.epoch_start)
    return s.w_start + frac * (s.w_end - s.w_start)


def kl_divergence(g: LatentGaussian):
    """KL(N(mu, sigma2) || N(0, I)), summed over dimensions."""
    return float(0.5 * np.sum(g.mu ** 2 + g.sigma2 - 1.0 - np.log(g.sigma2)))


def kl_divergence_t(mu, logvar):
    return 0.5 * torch.sum(mu ** 2 + logvar.exp() - 1.0 - logvar, dim=-1)


def reparameterize(g: LatentGaussian, rng: np.random.Generator | None = None, eps=None):
    if eps is None:
        eps = rng.standard_normal(g.mu.shape)
    return g.mu + np.sqrt(g.sigma2) * eps


def pcvae_loss(recon, target, mu, logvar, w_kl):
    """Returns (total, mse, kld): pixel-mean MSE plus weighted batch-mean KL."""
    if recon.shape != target.shape:
        raise ShapeMismatchError(f"recon {tuple(recon.shape)} vs target {tuple(target.shape)}")
    mse = F.mse_loss(recon, target)
    kld = kl_divergence_t(mu, logvar).mean()
    return mse + w_kl * kld, mse, kld


@dataclass
class PCVAEConfig:
    latent_dim: int = 8
    pose_count: int = 24
    width: int = 64
    height: int = 64
    channels: tuple = (32, 64, 64, 64)
    backbone: str = "small_conv"
    lr: float = 0.004
    batch_size: int = 32
    epochs: int = 200
    kl: KLSchedule = field(default_factory=KLSchedule)
    save_every: int = 50
    grad_clip: float = 1.0
    adam_beta2: float = 0.99
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["kl"] = KLSchedule(**d["kl"]) if isinstance(d.get("kl"), dict) else d.get("kl", KLSchedule())
        d["channels"] = tuple(d.get("channels", cls.channels))
        return cls(**d)


def _bound(logvar):
    # smooth clamp: keeps gradients alive near the limits
    return LOGVAR_CLAMP * torch.tanh(logvar / LOGVAR_CLAMP)


def _n_levels(size):
    levels = int(round(math.log2(size / 4)))
    if 4 * 2 ** levels != size:
        raise ValueError(f"image size {size} must be 4 * 2^k")
    return levels


class ConvEncoder(nn.Module):
    def __init__(self, cfg: PCVAEConfig):
        super().__init__()
        levels = _n_levels(cfg.width)
        chans = list(cfg.channels[:levels])
        while len(chans) < levels:
            chans.append(chans[-1])
        layers, c_in = [], 3
        for c in chans:
            layers += [nn.Conv2d(c_in, c, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            c_in = c
        self.conv = nn.Sequential(*layers)
        self.fc = nn.Sequential(nn.Linear(c_in * 16, 256), nn.LeakyReLU(0.2))
        self.mu = nn.Linear(256, cfg.latent_dim)
        self.logvar = nn.Linear(256, cfg.latent_dim)

    def forward(self, x):
        h = self.fc(self.conv(x - 0.5).flatten(1))
        return self.mu(h), _bound(self.logvar(h))


class ViTEncoder(nn.Module):
    """Patch-embedding conv followed by a small transformer; same heads as the conv encoder."""

    def __init__(self, cfg: PCVAEConfig, patch=8, dim=64, depth=2):
        super().__init__()
        self.embed = nn.Conv2d(3, dim, patch, stride=patch)
        n_tokens = (cfg.width // patch) * (cfg.height // patch)
        self.pos = nn.Parameter(torch.zeros(1, n_tokens, dim))
        layer = nn.TransformerEncoderLayer(dim, 4, 2 * dim, dropout=0.0, batch_first=True)
        self.blocks = nn.TransformerEncoder(layer, depth)
        self.proj = nn.Sequential(nn.Linear(dim, 1000), nn.LeakyReLU(0.2))
        self.mu = nn.Linear(1000, cfg.latent_dim)
        self.logvar = nn.Linear(1000, cfg.latent_dim)

    def forward(self, x):
        tokens = self.embed(x - 0.5).flatten(2).transpose(1, 2) + self.pos
        h = self.proj(self.blocks(tokens).mean(dim=1))
        return self.mu(h), _bound(self.logvar(h))


class PoseDecoder(nn.Module):
    def __init__(self, cfg: PCVAEConfig):
        super().__init__()
        levels = _n_levels(cfg.width)
        chans = list(reversed(cfg.channels[:levels]))
        while len(chans) < levels:
            chans.insert(0, chans[0])
        self.c0 = chans[0]
        self.fc = nn.Sequential(nn.Linear(cfg.latent_dim + cfg.pose_count, 256), nn.LeakyReLU(0.2),
                                nn.Linear(256, self.c0 * 16), nn.LeakyReLU(0.2))
        layers = []
        for k in range(levels):
            c_in = chans[k]
            c_out = chans[k + 1] if k + 1 < levels else 16
            layers += [nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        layers += [nn.Conv2d(16, 3, 3, padding=1)]
        self.deconv = nn.Sequential(*layers)

    def forward(self, z, pose_onehot):
        h = self.fc(torch.cat([z, pose_onehot], dim=-1)).view(-1, self.c0, 4, 4)
        return torch.sigmoid(self.deconv(h))


class PCVAE(nn.Module):
    def __init__(self, cfg: PCVAEConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.backbone == "small_conv":
            self.encoder = ConvEncoder(cfg)
        elif cfg.backbone == "vit_shaped":
            self.encoder = ViTEncoder(cfg)
        else:
            raise ValueError(f"unknown backbone {cfg.backbone}")
        self.decoder = PoseDecoder(cfg)

    def forward_encode(self, images):
        """images: (B, H, W, 3) in [0, 1] -> (mu, logvar)."""
        if images.shape[1:] != (self.cfg.height, self.cfg.width, 3):
            raise ShapeMismatchError(f"expected images of shape (H={self.cfg.height}, W={self.cfg.width}, 3), "
                                     f"got {tuple(images.shape[1:])}")
        return self.encoder(images.permute(0, 3, 1, 2))

    def forward_decode(self, z, pose_ids):
        pose_ids = torch.as_tensor(pose_ids, dtype=torch.long)
        if pose_ids.min() < 0 or pose_ids.max() >= self.cfg.pose_count:
            raise IndexError(f"pose id out of range [0, {self.cfg.pose_count})")
        onehot = F.one_hot(pose_ids, self.cfg.pose_count).to(z.dtype)
        return self.decoder(z, onehot).permute(0, 2, 3, 1)

    @torch.no_grad()
    def encode(self, image) -> LatentGaussian:
        """Posterior over the latent scene for one HxWx3 image (no pose input)."""
        x = torch.as_tensor(np.asarray(image, dtype=np.float32))[None]
        mu, logvar = self.forward_encode(x)
        return LatentGaussian(mu[0].double().numpy(), logvar[0].double().exp().numpy())

    @torch.no_grad()
    def encode_batch(self, images, batch_size=256):
        mus, s2 = [], []
        for i in range(0, len(images), batch_size):
            x = torch.as_tensor(np.asarray(images[i:i + batch_size], dtype=np.float32))
            mu, logvar = self.forward_encode(x)
            mus.append(mu.double().numpy())
            s2.append(logvar.double().exp().numpy())
        return np.concatenate(mus), np.concatenate(s2)

    @torch.no_grad()
    def decode(self, z, pose_id):
        """Decode one latent vector from camera ``pose_id``; returns HxWx3 in [0, 1]."""
        zt = torch.as_tensor(np.asarray(z, dtype=np.float32))[None]
        return self.forward_decode(zt, [pose_id])[0].numpy()


# ----------------------------------------------------------------------------
# training


def _psnr_t(a, b):
    mse = ((a - b) ** 2).flatten(1).mean(dim=1).clamp_min(1e-10)
    return -10.0 * torch.log10(mse)


def training_pairs(manifest):
    """Encoder-input frame indices with the (scene, timestamp) each belongs to."""
    enc = set(manifest.encoder_poses)
    return [(i, f.scene_id, f.timestamp) for i, f in enumerate(manifest.frames) if f.pose_id in enc]


def train_pcvae(dataset, cfg: PCVAEConfig, out_path=None, metrics_path=None, progress=None):
    """Train on every encoder-input frame; the target is the same state seen from a random pose.

    Returns ``(model, history)`` where history holds one dict per epoch.
    """
    manifest = dataset.manifest
    if cfg.pose_count != len(manifest.poses):
        raise DatasetError(f"config pose_count={cfg.pose_count} but dataset has {len(manifest.poses)} poses")
    if (cfg.height, cfg.width) != dataset.images.shape[1:3]:
        raise DatasetError("config resolution does not match dataset images")

    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model = PCVAE(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, cfg.adam_beta2))

    images = torch.from_numpy(dataset.images)
    pairs = training_pairs(manifest)
    src = torch.tensor([p[0] for p in pairs])
    # target frame lookup: (scene, t, pose) -> frame index
    n_pose = len(manifest.poses)
    lookup = torch.tensor([[manifest.frame_index(s, t, c) for c in range(n_pose)] for _, s, t in pairs])

    history = []
    for epoch in range(cfg.epochs):
        w_kl = kl_weight(epoch, cfg.kl)
        perm = torch.randperm(len(pairs), generator=gen)
        sums = np.zeros(4)
        for start in range(0, len(pairs), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            target_pose = torch.randint(0, n_pose, (len(idx),), generator=gen)
            x = images[src[idx]]
            y = images[lookup[idx, target_pose]]
            mu, logvar = model.forward_encode(x)
            eps = torch.randn(mu.shape, generator=gen)
            z = mu + torch.exp(0.5 * logvar) * eps
            recon = model.forward_decode(z, target_pose)
            total, mse, kld = pcvae_loss(recon, y, mu, logvar, w_kl)
            opt.zero_grad()
            total.backward()
            if cfg.grad_clip:
                nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            n = len(idx)
            sums += np.array([total.item(), mse.item(), kld.item(), _psnr_t(recon.detach(), y).sum().item() / n]) * n
        row = dict(epoch=epoch, loss=sums[0] / len(pairs), mse=sums[1] / len(pairs), kld=sums[2] / len(pairs),
                   w_kl=w_kl, train_psnr=sums[3] / len(pairs))
        history.append(row)
        if progress:
            progress(row)
        log.debug("pcvae epoch %d loss %.5f psnr %.2f", epoch, row["loss"], row["train_psnr"])
        if out_path and cfg.save_every and (epoch + 1) % cfg.save_every == 0:
            save_pcvae(out_path, model, epoch + 1, gen)
    if out_path:
        save_pcvae(out_path, model, cfg.epochs, gen)
    if metrics_path:
        write_metrics(metrics_path, history)
    return model, history


def write_metrics(path, history):
    cols = ["epoch", "loss", "mse", "kld", "w_kl", "train_psnr"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in cols[1:]])


@torch.no_grad()
def reconstruction_psnr(model, dataset, seed=0):
    """Mean PSNR of decode(posterior mean, random pose) against the ground-truth frame."""
    manifest = dataset.manifest
    rng = np.random.default_rng(seed)
    pairs = training_pairs(manifest)
    n_pose = len(manifest.poses)
    vals = []
    src = [p[0] for p in pairs]
    mu, _ = model.encode_batch(dataset.images[src])
    poses = rng.integers(0, n_pose, len(pairs))
    for k in range(0, len(pairs), 128):
        zt = torch.as_tensor(mu[k:k + 128], dtype=torch.float32)
        recon = model.forward_decode(zt, poses[k:k + 128])
        tgt = torch.as_tensor(np.stack([dataset.images[manifest.frame_index(s, t, c)]
                                        for (_, s, t), c in zip(pairs[k:k + 128], poses[k:k + 128])]))
        vals.append(_psnr_t(recon, tgt).numpy())
    return float(np.concatenate(vals).mean())


# ----------------------------------------------------------------------------
# persistence


def save_pcvae(path, model: PCVAE, epoch, gen=None):
    meta = {"epoch": int(epoch)}
    if gen is not None:
        meta["rng_state"] = base64.b64encode(gen.get_state().numpy().tobytes()).decode("ascii")
    ckpt = Checkpoint("pcvae", model.cfg.to_dict(), meta, state_dict_tensors(model, "pcvae"))
    return save_checkpoint(path, ckpt)


def load_pcvae(path, expect=None):
    ckpt = load_checkpoint(path, kind="pcvae", expect=expect)
    model = PCVAE(PCVAEConfig.from_dict(ckpt.config))
    load_state_dict_tensors(model, ckpt.tensors, "pcvae")
    model.eval()
    return model


