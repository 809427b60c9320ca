"""Latent-conditioned radiance field, emission-absorption renderer and density probing."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .camera import CameraPose, camera_rays
from .checkpoint import Checkpoint, load_checkpoint, load_state_dict_tensors, save_checkpoint, state_dict_tensors
from .errors import OrderingError, ShapeMismatchError
from .scenegen import unambiguous_frames

log = logging.getLogger(__name__)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, float)
        self.direction = np.asarray(self.direction, float)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        if not 0 <= self.t_near < self.t_far:
            raise ValueError("ray bounds need 0 <= t_near < t_far")


@dataclass
class RenderConfig:
    samples_per_ray: int = 64
    stratified: bool = False
    background: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise ValueError("samples_per_ray must be >= 2")


@dataclass
class NeRFConfig:
    latent_dim: int = 8
    pos_freqs: int = 8
    dir_freqs: int = 4
    density_width: int = 128
    density_depth: int = 4
    color_width: int = 64
    color_depth: int = 2
    world_box: tuple = ((-2.5, -2.5, 0.0), (2.5, 2.5, 1.2))
    background: tuple = (0.5, 0.5, 0.5)
    samples_per_ray: int = 64
    rays_per_batch: int = 1024
    foreground_fraction: float = 0.5
    dynamic_fraction: float = 0.25
    lr: float = 0.002
    lr_final_factor: float = 0.1
    epochs: int = 30
    iters_per_epoch: int = 100
    anneal_epochs: int = 15
    p_min: float = 0.5
    tau_floor: float = 1.0
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["world_box"] = [list(self.world_box[0]), list(self.world_box[1])]
        d["background"] = list(self.background)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["world_box"] = (tuple(d["world_box"][0]), tuple(d["world_box"][1]))
        d["background"] = tuple(d["background"])
        return cls(**d)

    def render_config(self, stratified=False):
        return RenderConfig(self.samples_per_ray, stratified, self.background)


def positional_encoding(x, n_freqs):
    if n_freqs == 0:
        return x
    freqs = (2.0 ** torch.arange(n_freqs, dtype=x.dtype)) * np.pi
    xb = x[..., None, :] * freqs[:, None]
    return torch.cat([x, torch.sin(xb).flatten(-2), torch.cos(xb).flatten(-2)], dim=-1)


def _mlp(d_in, width, depth):
    layers = []
    for _ in range(depth):
        layers += [nn.Linear(d_in, width), nn.ReLU()]
        d_in = width
    return nn.Sequential(*layers)


class RadianceField(nn.Module):
    """(x, d, z) -> (rgb, sigma). The density branch never sees the view direction."""

    def __init__(self, cfg: NeRFConfig):
        super().__init__()
        self.cfg = cfg
        lo, hi = np.asarray(cfg.world_box[0], float), np.asarray(cfg.world_box[1], float)
        self.register_buffer("box_center", torch.tensor((lo + hi) / 2.0, dtype=torch.float32), persistent=False)
        self.register_buffer("box_half", torch.tensor((hi - lo) / 2.0, dtype=torch.float32), persistent=False)
        pos_dim = 3 + 6 * cfg.pos_freqs
        dir_dim = 3 + 6 * cfg.dir_freqs
        self.density_net = _mlp(pos_dim + cfg.latent_dim, cfg.density_width, cfg.density_depth)
        self.sigma_head = nn.Linear(cfg.density_width, 1)
        self.color_net = _mlp(cfg.density_width + dir_dim + cfg.latent_dim, cfg.color_width, cfg.color_depth)
        self.rgb_head = nn.Linear(cfg.color_width, 3)

    def _features(self, x, z):
        xn = (x - self.box_center.to(x.dtype)) / self.box_half.to(x.dtype)
        return self.density_net(torch.cat([positional_encoding(xn, self.cfg.pos_freqs), z], dim=-1))

    def density(self, x, z):
        return F.softplus(self.sigma_head(self._features(x, z)))[..., 0]

    def forward(self, x, d, z):
        h = self._features(x, z)
        sigma = F.softplus(self.sigma_head(h))[..., 0]
        c = self.color_net(torch.cat([h, positional_encoding(d, self.cfg.dir_freqs), z], dim=-1))
        return torch.sigmoid(self.rgb_head(c)), sigma


def field_eval(field, x, d, z):
    """Single-point evaluation; returns (rgb ndarray(3), sigma float)."""
    dtype = next(field.parameters()).dtype
    with torch.no_grad():
        rgb, sigma = field(torch.as_tensor(np.asarray(x), dtype=dtype)[None],
                           torch.as_tensor(np.asarray(d), dtype=dtype)[None],
                           torch.as_tensor(np.asarray(z), dtype=dtype)[None])
    return rgb[0].numpy(), float(sigma[0])


# ----------------------------------------------------------------------------
# volume rendering


def composite(sigmas, rgbs, deltas, background):
    """Emission-absorption quadrature.

    Returns (rgb, weights, residual transmittance); weights.sum(-1) + residual == 1.
    """
    tau = sigmas * deltas
    alpha = 1.0 - torch.exp(-tau)
    # exclusive cumulative sum: transmittance before each sample
    trans = torch.exp(-torch.cumsum(torch.cat([torch.zeros_like(tau[..., :1]), tau[..., :-1]], dim=-1), dim=-1))
    weights = trans * alpha
    residual = torch.exp(-tau.sum(dim=-1))
    bg = torch.as_tensor(background, dtype=rgbs.dtype)
    rgb = (weights[..., None] * rgbs).sum(dim=-2) + residual[..., None] * bg
    return rgb, weights, residual


def sample_depths(t_near, t_far, n, stratified=False, generator=None):
    """n samples per ray, one per equal-width bin; returns (depths, bin widths)."""
    u = torch.linspace(0.0, 1.0, n + 1, dtype=t_near.dtype)
    edges = t_near[:, None] + (t_far - t_near)[:, None] * u[None, :]
    lower, upper = edges[:, :-1], edges[:, 1:]
    if stratified:
        jitter = torch.rand(lower.shape, generator=generator, dtype=t_near.dtype)
    else:
        jitter = torch.full_like(lower, 0.5)
    return lower + (upper - lower) * jitter, upper - lower


def render_rays(field, origins, dirs, t_near, t_far, z, cfg: RenderConfig, generator=None):
    """Render a bundle of rays; ``z`` is (D,) or (R, D). Rays with t_far <= t_near return background."""
    R = origins.shape[0]
    dtype = origins.dtype
    out = torch.as_tensor(cfg.background, dtype=dtype).repeat(R, 1)
    live = t_far > t_near
    if not bool(live.any()):
        return out
    o, d, tn, tf = origins[live], dirs[live], t_near[live], t_far[live]
    zz = z[live] if z.dim() == 2 else z.expand(o.shape[0], -1)
    depths, deltas = sample_depths(tn, tf, cfg.samples_per_ray, cfg.stratified, generator)
    S = depths.shape[1]
    pts = o[:, None, :] + d[:, None, :] * depths[..., None]
    rgb, sigma = field(pts.reshape(-1, 3), d[:, None, :].expand(-1, S, -1).reshape(-1, 3),
                       zz[:, None, :].expand(-1, S, -1).reshape(-1, zz.shape[-1]))
    color, _, _ = composite(sigma.view(-1, S), rgb.view(-1, S, 3), deltas, cfg.background)
    out = out.clone()
    out[live] = color
    return out


def render_ray(field, ray: Ray, z, cfg: RenderConfig):
    dtype = next(field.parameters()).dtype if isinstance(field, nn.Module) and any(True for _ in field.parameters()) \
        else torch.float64
    t = lambda a: torch.as_tensor(np.asarray(a), dtype=dtype)  # noqa: E731
    with torch.no_grad():
        rgb = render_rays(field, t(ray.origin)[None], t(ray.direction)[None], t([ray.t_near]), t([ray.t_far]),
                          t(z), cfg)
    return rgb[0].numpy()


def box_bounds(origins, dirs, box):
    """Slab intersection of rays with an axis-aligned box; (t_near, t_far) with t_near >= 0."""
    lo = torch.as_tensor(box[0], dtype=origins.dtype)
    hi = torch.as_tensor(box[1], dtype=origins.dtype)
    safe = torch.where(dirs.abs() < 1e-12, torch.full_like(dirs, 1e-12), dirs)
    a = (lo - origins) / safe
    b = (hi - origins) / safe
    t_near = torch.minimum(a, b).max(dim=-1).values.clamp_min(0.0)
    t_far = torch.maximum(a, b).min(dim=-1).values
    return t_near, torch.where(t_far > t_near, t_far, t_near)


def camera_ray_bundle(cam: CameraPose, box):
    o, d = camera_rays(cam)
    o = torch.as_tensor(o, dtype=torch.float32)
    d = torch.as_tensor(d, dtype=torch.float32)
    tn, tf = box_bounds(o, d, box)
    return o, d, tn, tf


@torch.no_grad()
def render_image(field, cam: CameraPose, z, cfg: RenderConfig | None = None, box=None, chunk=4096):
    """Render an HxWx3 image of the belief ``z`` from ``cam`` (rays through pixel centers)."""
    if np.linalg.norm(np.subtract(cam.target, cam.position)) < 1e-9:
        from .errors import InvalidCameraError
        raise InvalidCameraError("camera position equals target")
    cfg = cfg or field.cfg.render_config()
    box = box or field.cfg.world_box
    o, d, tn, tf = camera_ray_bundle(cam, box)
    zt = torch.as_tensor(np.asarray(z), dtype=torch.float32)
    parts = [render_rays(field, o[i:i + chunk], d[i:i + chunk], tn[i:i + chunk], tf[i:i + chunk], zt, cfg)
             for i in range(0, len(o), chunk)]
    return torch.cat(parts).clamp(0.0, 1.0).reshape(cam.height, cam.width, 3).numpy()


def nerf_loss(rendered, target):
    if rendered.shape != target.shape:
        raise ShapeMismatchError(f"rendered {tuple(rendered.shape)} vs target {tuple(target.shape)}")
    return F.mse_loss(rendered, target)


@torch.no_grad()
def density_probe(field, z, points):
    """Direction-free density at each probe point for latent ``z`` (or a batch of latents)."""
    pts = torch.as_tensor(np.asarray(points), dtype=torch.float32)
    zt = torch.as_tensor(np.asarray(z), dtype=torch.float32)
    if zt.dim() == 1:
        return field.density(pts, zt.expand(len(pts), -1)).numpy()
    B, P = zt.shape[0], pts.shape[0]
    sig = field.density(pts[None].expand(B, -1, -1).reshape(-1, 3), zt[:, None, :].expand(-1, P, -1).reshape(-1, zt.shape[-1]))
    return sig.view(B, P).numpy()


# ----------------------------------------------------------------------------
# training


def resample_probability(epoch, cfg: NeRFConfig):
    """Probability of conditioning on the posterior mean rather than a re-sampled latent."""
    if cfg.anneal_epochs <= 0:
        return cfg.p_min
    frac = min(1.0, epoch / cfg.anneal_epochs)
    return 1.0 - (1.0 - cfg.p_min) * frac


def conditioning_sources(manifest, images):
    """For each frame, candidate frames whose posterior conditions its rendering."""
    enc = set(manifest.encoder_poses)
    clear = set(unambiguous_frames(manifest, images))
    sources = []
    for i, f in enumerate(manifest.frames):
        if f.pose_id in enc:
            sources.append([i])
        else:
            cand = [manifest.frame_index(f.scene_id, f.timestamp, c) for c in sorted(enc)]
            good = [c for c in cand if c in clear] or cand
            sources.append(good)
    return sources


def dynamic_pixel_mask(dataset, frame_idx, tol=1.5 / 255):
    """Pixels of a frame that differ in some other state seen from the same pose.

    These carry the latent-dependent content, so training draws a share of its rays from them.
    """
    f = dataset.manifest.frames[frame_idx]
    img = dataset.images[frame_idx]
    mask = np.zeros(img.shape[:2], bool)
    for st in dataset.manifest.states:
        mask |= np.abs(dataset.image(*st, f.pose_id) - img).max(axis=-1) > tol
    return mask


def train_nerf(dataset, pcvae, cfg: NeRFConfig, pcvae_hash=None, out_path=None, progress=None):
    """Fit the field over the frozen encoder's posteriors. Returns (field, history)."""
    if pcvae is None:
        raise OrderingError("train-nerf requires a trained PC-VAE checkpoint (stage one)")
    manifest = dataset.manifest
    if pcvae.cfg.latent_dim != cfg.latent_dim:
        from .errors import ConfigMismatchError
        raise ConfigMismatchError("latent_dim", pcvae.cfg.latent_dim, cfg.latent_dim)
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    field = RadianceField(cfg)

    for p in pcvae.parameters():
        p.requires_grad_(False)
    mu, s2 = pcvae.encode_batch(dataset.images)
    mu_t = torch.as_tensor(mu, dtype=torch.float32)
    sd_t = torch.as_tensor(np.sqrt(s2), dtype=torch.float32)

    sources = conditioning_sources(manifest, dataset.images)
    max_src = max(len(s) for s in sources)
    src_table = torch.tensor([s + [s[0]] * (max_src - len(s)) for s in sources])
    src_count = torch.tensor([len(s) for s in sources])

    poses = {p.pose_id: p for p in manifest.poses}
    all_o, all_d, all_tn, all_tf, all_rgb, all_frame, all_fg, all_dyn = [], [], [], [], [], [], [], []
    bg = np.asarray(manifest.background, np.float32)
    for i, f in enumerate(manifest.frames):
        o, d, tn, tf = camera_ray_bundle(poses[f.pose_id], cfg.world_box)
        img = dataset.images[i].reshape(-1, 3)
        hit = tf > tn
        fg = torch.as_tensor(np.abs(img - bg).max(axis=1) > 1.5 / 255)
        dyn = dynamic_pixel_mask(dataset, i).reshape(-1)
        all_o.append(o[hit]); all_d.append(d[hit]); all_tn.append(tn[hit]); all_tf.append(tf[hit])
        all_rgb.append(torch.as_tensor(img)[hit]); all_frame.append(torch.full((int(hit.sum()),), i))
        all_fg.append(fg[hit]); all_dyn.append(torch.as_tensor(dyn)[hit])
    O, D, TN, TF = map(torch.cat, (all_o, all_d, all_tn, all_tf))
    RGB, FRAME, FG, DYN = torch.cat(all_rgb), torch.cat(all_frame), torch.cat(all_fg), torch.cat(all_dyn)
    fg_idx = torch.nonzero(FG)[:, 0]
    dyn_idx = torch.nonzero(DYN)[:, 0]

    opt = torch.optim.Adam(field.parameters(), lr=cfg.lr)
    total_iters = cfg.epochs * cfg.iters_per_epoch
    gamma = cfg.lr_final_factor ** (1.0 / max(total_iters, 1))
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma)
    rcfg = cfg.render_config(stratified=True)
    n_fg = int(round(cfg.rays_per_batch * cfg.foreground_fraction)) if len(fg_idx) else 0
    n_dyn = int(round(cfg.rays_per_batch * cfg.dynamic_fraction)) if len(dyn_idx) else 0
    if n_fg + n_dyn > cfg.rays_per_batch:
        raise ValueError("foreground_fraction + dynamic_fraction must not exceed 1")
    n_frames = len(manifest.frames)

    history = []
    for epoch in range(cfg.epochs):
        p_mean = resample_probability(epoch, cfg)
        loss_sum = psnr_sum = 0.0
        for _ in range(cfg.iters_per_epoch):
            idx_u = torch.randint(0, len(O), (cfg.rays_per_batch - n_fg - n_dyn,), generator=gen)
            idx_f = fg_idx[torch.randint(0, len(fg_idx), (n_fg,), generator=gen)] if n_fg else idx_u[:0]
            idx_d = dyn_idx[torch.randint(0, len(dyn_idx), (n_dyn,), generator=gen)] if n_dyn else idx_u[:0]
            idx = torch.cat([idx_u, idx_f, idx_d])
            # one conditioning latent per frame per batch
            pick = (torch.rand(n_frames, generator=gen) * src_count).long()
            src = src_table[torch.arange(n_frames), pick]
            use_sample = (torch.rand(n_frames, generator=gen) >= p_mean).float()[:, None]
            eps = torch.randn(n_frames, cfg.latent_dim, generator=gen)
            z_frame = mu_t[src] + use_sample * sd_t[src] * eps
            pred = render_rays(field, O[idx], D[idx], TN[idx], TF[idx], z_frame[FRAME[idx]], rcfg, gen)
            loss = nerf_loss(pred, RGB[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            loss_sum += loss.item()
            psnr_sum += -10.0 * np.log10(max(loss.item(), 1e-10))
        row = dict(epoch=epoch, loss=loss_sum / cfg.iters_per_epoch, psnr=psnr_sum / cfg.iters_per_epoch,
                   p_mean=p_mean, lr=sched.get_last_lr()[0])
        history.append(row)
        if progress:
            progress(row)
    field.eval()
    tau = occupancy_threshold(field, manifest, mu, cfg.tau_floor, seed=cfg.seed)
    if out_path:
        save_nerf(out_path, field, tau, manifest, pcvae_hash, cfg.epochs)
    field.tau = tau
    return field, history


def empty_space_points(manifest, n=1000, seed=0, margin=0.05):
    """Uniform points in the world box that lie outside every object in every state."""
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(manifest.world_box[0]), np.asarray(manifest.world_box[1])
    out = []
    while sum(len(o) for o in out) < n:
        pts = rng.uniform(lo, hi, size=(4 * n, 3))
        keep = np.ones(len(pts), bool)
        for s in manifest.scenes:
            for t in range(s.timestamps):
                for obj in s.objects:
                    c = np.asarray(obj.center_at(t))
                    h = np.asarray(obj.half_extents()) + margin
                    keep &= ~np.all(np.abs(pts - c) <= h, axis=1)
        out.append(pts[keep])
    return np.concatenate(out)[:n]


def occupancy_threshold(field, manifest, latents, floor=1.0, seed=0):
    """10x the median density over random empty-space points (never below ``floor``)."""
    pts = empty_space_points(manifest, 1000, seed)
    rng = np.random.default_rng(seed)
    z = np.asarray(latents)[rng.integers(0, len(latents), len(pts))]
    with torch.no_grad():
        sig = field.density(torch.as_tensor(pts, dtype=torch.float32), torch.as_tensor(z, dtype=torch.float32))
    return float(max(10.0 * float(sig.median()), floor))


# ----------------------------------------------------------------------------
# persistence


def save_nerf(path, field, tau, manifest, pcvae_hash, epoch):
    meta = {"epoch": int(epoch), "tau": float(tau), "pcvae_sha256": pcvae_hash,
            "poses": [p.to_dict() for p in manifest.poses], "dataset": manifest.name}
    return save_checkpoint(path, Checkpoint("nerf", field.cfg.to_dict(), meta, state_dict_tensors(field, "nerf")))


def load_nerf(path, expect=None):
    ckpt = load_checkpoint(path, kind="nerf", expect=expect)
    field = RadianceField(NeRFConfig.from_dict(ckpt.config))
    load_state_dict_tensors(field, ckpt.tensors, "nerf")
    field.eval()
    field.tau = ckpt.meta["tau"]
    field.meta = ckpt.meta
    return field
