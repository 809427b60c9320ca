"""Mixture density forecasting over encoder beliefs, belief tables and density-probe localization."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import Checkpoint, load_checkpoint, load_state_dict_tensors, save_checkpoint, state_dict_tensors
from .errors import AmbiguousLocalizationError, OrderingError
from .nerf import density_probe
from .pcvae import LatentGaussian
from .scenegen import canonical_states, unambiguous_frames

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GaussianMixture:
    pi: np.ndarray
    mu: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        self.pi = np.asarray(self.pi, float)
        self.mu = np.atleast_2d(np.asarray(self.mu, float))
        self.sigma2 = np.atleast_2d(np.asarray(self.sigma2, float))
        if self.pi.ndim != 1 or self.mu.shape != self.sigma2.shape or self.mu.shape[0] != len(self.pi):
            raise ValueError("mixture needs pi (K,), mu and sigma2 (K, D)")
        if np.any(self.pi < 0) or abs(self.pi.sum() - 1.0) > 1e-6:
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if np.any(self.sigma2 <= 0):
            raise ValueError("component variances must be positive")

    @property
    def K(self):
        return len(self.pi)

    @property
    def dim(self):
        return self.mu.shape[1]

    def component(self, j) -> LatentGaussian:
        return LatentGaussian(self.mu[j], self.sigma2[j])

    def to_dict(self):
        return {"pi": self.pi.tolist(), "mu": self.mu.tolist(), "sigma2": self.sigma2.tolist()}


def _logsumexp(a, axis=-1):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def component_logpdf(m: GaussianMixture, y):
    """log pi_j + log N(y; mu_j, sigma2_j) for each component; y is (D,) or (N, D) -> (..., K)."""
    y = np.asarray(y, float)
    diff = y[..., None, :] - m.mu
    quad = np.sum(diff * diff / m.sigma2 + np.log(m.sigma2), axis=-1)
    with np.errstate(divide="ignore"):
        log_pi = np.log(m.pi)
    return log_pi - 0.5 * (quad + m.dim * LOG_2PI)


def mixture_logpdf(m: GaussianMixture, y):
    """log sum_j pi_j N(y; mu_j, sigma2_j), evaluated stably."""
    return _logsumexp(component_logpdf(m, y), axis=-1)


def mdn_nll(m: GaussianMixture, samples):
    samples = np.atleast_2d(np.asarray(samples, float))
    return float(-np.sum(mixture_logpdf(m, samples)))


def sample_mixture(m: GaussianMixture, rng: np.random.Generator, n=None):
    """Pick a component by its weight, then draw from that Gaussian. ``n`` gives (n, D) draws."""
    count = 1 if n is None else n
    j = rng.choice(m.K, size=count, p=m.pi / m.pi.sum())
    z = m.mu[j] + np.sqrt(m.sigma2[j]) * rng.standard_normal((count, m.dim))
    return z[0] if n is None else z


def mixture_logpdf_t(log_pi, mu, sigma2, y):
    """Batched torch version: log_pi (B,K), mu/sigma2 (B,K,D), y (B,N,D) -> (B,N)."""
    diff = y[:, :, None, :] - mu[:, None]
    quad = (diff * diff / sigma2[:, None] + torch.log(sigma2[:, None])).sum(-1)
    comp = log_pi[:, None, :] - 0.5 * (quad + mu.shape[-1] * LOG_2PI)
    return torch.logsumexp(comp, dim=-1)


# ----------------------------------------------------------------------------
# network


@dataclass
class MDNConfig:
    latent_dim: int = 8
    hidden: int = 512
    depth: int = 2
    head_depth: int = 2
    pi_depth: int = 3
    K: int = 2
    lr: float = 0.005
    lr_final_factor: float = 0.1
    batch_size: int = 128
    epochs: int = 3000
    nll_samples: int = 1000
    noise_min: float = 0.001
    noise_max: float = 0.01
    sigma2_floor: float = 1e-6
    neighbor_radius: int = 2
    seed: int = 0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k != "seed" and not v > 0:
                raise ValueError(f"MDNConfig.{k} must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _head(width, depth, out):
    layers = []
    for _ in range(depth - 1):
        layers += [nn.Linear(width, width), nn.ReLU()]
    layers.append(nn.Linear(width, out))
    return nn.Sequential(*layers)


class MDN(nn.Module):
    """(mu, sigma2) of the current belief -> K-component Gaussian mixture over the next latent."""

    def __init__(self, cfg: MDNConfig):
        super().__init__()
        self.cfg = cfg
        D, H = cfg.latent_dim, cfg.hidden
        layers, d_in = [], 2 * D
        for _ in range(cfg.depth):
            layers += [nn.Linear(d_in, H), nn.ReLU()]
            d_in = H
        self.backbone = nn.Sequential(*layers)
        self.mu_head = _head(H, cfg.head_depth, cfg.K * D)
        self.var_head = _head(H, cfg.head_depth, cfg.K * D)
        self.pi_head = _head(H, cfg.pi_depth, cfg.K)

    def forward(self, x):
        h = self.backbone(x)
        B, K, D = x.shape[0], self.cfg.K, self.cfg.latent_dim
        log_pi = torch.log_softmax(self.pi_head(h), dim=-1)
        mu = self.mu_head(h).view(B, K, D)
        sigma2 = torch.exp(self.var_head(h).clamp(-30.0, 30.0)).view(B, K, D) + self.cfg.sigma2_floor
        return log_pi, mu, sigma2

    @torch.no_grad()
    def mdn_forward(self, g: LatentGaussian) -> GaussianMixture:
        x = torch.as_tensor(np.concatenate([g.mu, g.sigma2]), dtype=torch.float32)[None]
        log_pi, mu, sigma2 = self(x)
        pi = torch.softmax(log_pi[0].double(), dim=-1).numpy()
        return GaussianMixture(pi / pi.sum(), mu[0].double().numpy(), sigma2[0].double().numpy())


def mdn_forward(model: MDN, g: LatentGaussian) -> GaussianMixture:
    return model.mdn_forward(g)


# ----------------------------------------------------------------------------
# transition data


@dataclass
class TransitionPair:
    input: LatentGaussian
    target: LatentGaussian
    scene_id: int
    timestamp: int
    pose_id: int
    target_pose_id: int


def neighbor_poses(manifest, pose_id, radius):
    """Encoder poses of the same group within cyclic index distance ``radius``."""
    group = next(p.group for p in manifest.poses if p.pose_id == pose_id)
    ids = manifest.poses_in_group(group)
    k = ids.index(pose_id)
    n = len(ids)
    return sorted({ids[(k + o) % n] for o in range(-radius, radius + 1)})


def build_transition_dataset(manifest, mu, sigma2, neighbor_radius=2, rng=None):
    """One pair per (scene, t-1 -> t, encoder pose); the target pose is a random neighbor."""
    rng = rng or np.random.default_rng(0)
    pairs = []
    for scene in manifest.scenes:
        for t in range(1, scene.timestamps):
            for c in manifest.encoder_poses:
                i = manifest.frame_index(scene.scene_id, t - 1, c)
                nb = neighbor_poses(manifest, c, neighbor_radius)
                c_nb = int(nb[rng.integers(len(nb))])
                j = manifest.frame_index(scene.scene_id, t, c_nb)
                pairs.append(TransitionPair(LatentGaussian(mu[i], sigma2[i]), LatentGaussian(mu[j], sigma2[j]),
                                            scene.scene_id, t - 1, c, c_nb))
    return pairs


def _stack(pairs):
    x = np.stack([np.concatenate([p.input.mu, p.input.sigma2]) for p in pairs])
    tm = np.stack([p.target.mu for p in pairs])
    ts = np.stack([p.target.sigma2 for p in pairs])
    return (torch.as_tensor(x, dtype=torch.float32), torch.as_tensor(tm, dtype=torch.float32),
            torch.as_tensor(ts, dtype=torch.float32))


def train_mdn(pairs, cfg: MDNConfig, progress=None):
    """Fit the MDN by sampled NLL with input-noise augmentation.

    ``pairs`` is a list of TransitionPair or a callable ``rng -> list`` re-drawn every epoch
    (so neighbor targets are re-sampled). Returns (model, history).
    """
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = MDN(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, cfg.lr_final_factor ** (1.0 / max(cfg.epochs, 1)))
    builder = pairs if callable(pairs) else None
    if builder is None and not pairs:
        raise ValueError("train_mdn needs at least one transition pair")
    history = []
    for epoch in range(cfg.epochs):
        x, tm, ts = _stack(builder(rng) if builder else pairs)
        perm = torch.randperm(len(x), generator=gen)
        nll_sum, noise_used = 0.0, []
        for b in range(0, len(x), cfg.batch_size):
            idx = perm[b:b + cfg.batch_size]
            sigma = float(cfg.noise_min + (cfg.noise_max - cfg.noise_min) * torch.rand((), generator=gen))
            noise_used.append(sigma)
            xb = x[idx] + sigma * torch.randn(x[idx].shape, generator=gen)
            D = cfg.latent_dim
            xb[:, D:] = xb[:, D:].clamp_min(cfg.sigma2_floor)
            y = tm[idx][:, None] + ts[idx].sqrt()[:, None] * torch.randn(len(idx), cfg.nll_samples, D, generator=gen)
            log_pi, mu, s2 = model(xb)
            # mean per-sample NLL; a constant rescaling of the summed objective
            loss = -mixture_logpdf_t(log_pi, mu, s2, y).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            nll_sum += loss.item() * len(idx)
        sched.step()
        row = dict(epoch=epoch, nll=nll_sum / len(x), noise_min=min(noise_used), noise_max=max(noise_used))
        history.append(row)
        if progress:
            progress(row)
    model.eval()
    return model, history


# ----------------------------------------------------------------------------
# belief table and localization


@dataclass
class BeliefTable:
    """Reference beliefs per state plus the probe hypotheses used to localize a latent."""

    states: list
    reference: dict
    slots: np.ndarray
    patterns: dict
    actor_present: dict
    canonical: dict
    hazard_scenes: list = field(default_factory=list)
    jitter: float = 0.04
    probe_seed: int = 0

    def probe_points(self):
        rng = np.random.default_rng(self.probe_seed)
        offsets = np.concatenate([np.zeros((1, 3)), rng.uniform(-self.jitter, self.jitter, size=(6, 3))])
        return (self.slots[:, None, :] + offsets[None]).reshape(-1, 3)

    def is_hazard(self, state):
        return state[0] in self.hazard_scenes

    def same_state(self, a, b):
        return self.canonical[tuple(a)] == self.canonical[tuple(b)]

    def to_meta(self):
        return {"states": [list(s) for s in self.states],
                "reference": {f"{s}_{t}": self.reference[(s, t)].to_dict() for s, t in self.states},
                "slots": self.slots.tolist(),
                "patterns": {f"{s}_{t}": [bool(v) for v in self.patterns[(s, t)]] for s, t in self.states},
                "actor_present": {f"{s}_{t}": bool(self.actor_present[(s, t)]) for s, t in self.states},
                "canonical": {f"{s}_{t}": list(self.canonical[(s, t)]) for s, t in self.states},
                "hazard_scenes": list(self.hazard_scenes), "jitter": self.jitter, "probe_seed": self.probe_seed}

    @classmethod
    def from_meta(cls, d):
        states = [tuple(s) for s in d["states"]]
        key = lambda st: f"{st[0]}_{st[1]}"  # noqa: E731
        ref = {st: LatentGaussian(np.asarray(d["reference"][key(st)]["mu"]),
                                  np.asarray(d["reference"][key(st)]["sigma2"])) for st in states}
        return cls(states, ref, np.asarray(d["slots"], float),
                   {st: np.asarray(d["patterns"][key(st)], bool) for st in states},
                   {st: d["actor_present"][key(st)] for st in states},
                   {st: tuple(d["canonical"][key(st)]) for st in states},
                   list(d["hazard_scenes"]), d["jitter"], d["probe_seed"])


def candidate_slots(manifest):
    """Unique centers of every moving object or actor across all states."""
    pts = []
    for scene in manifest.scenes:
        for obj in scene.objects:
            if obj.role != "actor" and obj.trajectory is None:
                continue
            for t in range(scene.timestamps):
                c = np.round(np.asarray(obj.center_at(t), float), 6)
                if not any(np.allclose(c, p) for p in pts):
                    pts.append(c)
    return np.asarray(pts)


def build_belief_table(manifest, images, mu, sigma2, jitter=0.04, probe_seed=0):
    """Reference belief per state: the posterior pooled over its unambiguous arc views.

    Pooling averages the means and the variances, so a single off-center view cannot drag
    the reference toward a neighbouring state. States without a clear arc view pool all of them.
    """
    clear = set(unambiguous_frames(manifest, images))
    arc = manifest.poses_in_group("arc") or manifest.encoder_poses
    slots = candidate_slots(manifest)
    states, ref, patterns, present = [], {}, {}, {}
    for st in manifest.states:
        cands = [manifest.frame_index(*st, c) for c in arc]
        idx = [j for j in cands if j in clear] or cands
        states.append(st)
        ref[st] = LatentGaussian(np.mean(mu[idx], 0), np.mean(sigma2[idx], 0))
        scene = manifest.scene(st[0])
        occ = np.zeros(len(slots), bool)
        for obj in scene.objects:
            occ |= obj.contains(st[1], slots)
        patterns[st] = occ
        present[st] = scene.actor is not None
    return BeliefTable(states, ref, slots, patterns, present, canonical_states(manifest),
                       list(manifest.hazard_scenes), jitter, probe_seed)


def probe_pattern(field, z, table: BeliefTable, tau):
    """Occupancy vote per slot (majority of 7 probes above tau) and the per-slot median density."""
    z = np.asarray(z, float)
    single = z.ndim == 1
    sig = density_probe(field, np.atleast_2d(z), table.probe_points())
    sig = sig.reshape(sig.shape[0], len(table.slots), -1)
    votes = (sig >= tau).sum(-1) > sig.shape[-1] // 2
    med = np.median(sig, axis=-1)
    return (votes[0], med[0]) if single else (votes, med)


def localize(field, z, table: BeliefTable, tau=None, max_mismatch=1):
    """(scene, t) whose slot occupancy matches the probe pattern of ``z``; ties go to the larger density margin."""
    return localize_batch(field, np.atleast_2d(z), table, tau, max_mismatch, strict=True)[0]


def localize_batch(field, zs, table: BeliefTable, tau=None, max_mismatch=1, strict=False):
    """Localize many latents at once. With ``strict=False`` unmatched latents give ``None``."""
    tau = field.tau if tau is None else tau
    votes, med = probe_pattern(field, np.atleast_2d(zs), table, tau)
    pats = np.stack([table.patterns[st] for st in table.states])  # (S, M)
    margin = np.log(np.maximum(med, 1e-12)) - np.log(tau)  # (B, M)
    out = []
    for v, mg in zip(votes, margin):
        dist = (pats != v[None]).sum(1)
        score = (np.where(pats, mg[None], -mg[None])).sum(1)
        best = min(range(len(table.states)), key=lambda k: (dist[k], -score[k], k))
        if dist[best] > max_mismatch:
            if strict:
                raise AmbiguousLocalizationError(
                    f"probe pattern is {int(dist[best])} slots from the nearest state (allowed {max_mismatch})")
            out.append(None)
        else:
            out.append(table.states[best])
    return out


@dataclass
class PredictionStep:
    mixture: GaussianMixture
    z: np.ndarray
    state: tuple


@dataclass
class Rollout:
    belief: LatentGaussian
    steps: list

    def to_dict(self):
        return {"belief": self.belief.to_dict(),
                "steps": [{"mixture": s.mixture.to_dict(), "z": np.asarray(s.z).tolist(), "state": list(s.state)}
                          for s in self.steps]}


def autoregressive_predict(image, steps, pcvae, mdn, field, table: BeliefTable, rng, belief=None, max_mismatch=1):
    """Encode, then repeatedly forecast, sample, localize and feed back the localized state's reference belief."""
    if pcvae is None or mdn is None or field is None:
        raise OrderingError("prediction needs the PC-VAE, NeRF and MDN checkpoints")
    g = belief if belief is not None else pcvae.encode(image)
    out = Rollout(g, [])
    cur = g
    for _ in range(steps):
        m = mdn.mdn_forward(cur)
        z = sample_mixture(m, rng)
        state = localize(field, z, table, max_mismatch=max_mismatch)
        out.steps.append(PredictionStep(m, z, state))
        cur = table.reference[state]
    return out


# ----------------------------------------------------------------------------
# persistence


def save_mdn(path, model: MDN, table: BeliefTable, pcvae_hash=None, nerf_hash=None, history=None, actions=()):
    meta = {"belief_table": table.to_meta(), "pcvae_sha256": pcvae_hash, "nerf_sha256": nerf_hash,
            "final_nll": history[-1]["nll"] if history else None, "actions": list(actions)}
    return save_checkpoint(path, Checkpoint("mdn", model.cfg.to_dict(), meta, state_dict_tensors(model, "mdn")))


def load_mdn(path, expect=None):
    ckpt = load_checkpoint(path, kind="mdn", expect=expect)
    model = MDN(MDNConfig.from_dict(ckpt.config))
    load_state_dict_tensors(model, ckpt.tensors, "mdn")
    model.eval()
    model.meta = ckpt.meta
    return model, BeliefTable.from_meta(ckpt.meta["belief_table"])
