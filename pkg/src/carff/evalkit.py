"""Metrics and reports: PSNR, forecast PSNR tables, latent separability and reconstruction grids."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatchError
from .nerf import render_image
from .scenegen import canonical_states

PSNR_CAP = 100.0


def psnr(a, b):
    """10 log10(1 / MSE) for images in [0, 1]; identical images give the 100 dB cap."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return float(min(PSNR_CAP, -10.0 * np.log10(mse)))


# ----------------------------------------------------------------------------
# forecast fidelity


@dataclass
class PsnrReport:
    """PSNR of each row's rendered belief against every state's ground-truth overhead frame."""

    states: list
    matrix: np.ndarray
    matches: np.ndarray
    row_kind: list
    toggled: np.ndarray | None = None

    @property
    def matching_mean(self):
        return float(self.matrix[self.matches].mean())

    @property
    def unmatching_mean(self):
        return float(self.matrix[~self.matches].mean())

    @property
    def gap(self):
        return self.matching_mean - self.unmatching_mean

    def row_argmax_ok(self):
        """Per row: does the best-PSNR column belong to the row's match set."""
        return [bool(self.matches[r, int(np.argmax(self.matrix[r]))]) for r in range(len(self.states))]

    def diagonal_dominant(self):
        """Per row: every matching entry beats every non-matching entry."""
        out = []
        for r in range(len(self.states)):
            hit, miss = self.matrix[r][self.matches[r]], self.matrix[r][~self.matches[r]]
            out.append(bool(miss.size == 0 or hit.min() > miss.max()))
        return out

    def rows(self):
        out = []
        for r, st in enumerate(self.states):
            for c, gt in enumerate(self.states):
                out.append({"row_state": f"{st[0]}_{st[1]}", "row_kind": self.row_kind[r],
                            "gt_state": f"{gt[0]}_{gt[1]}", "psnr": round(float(self.matrix[r, c]), 4),
                            "match": bool(self.matches[r, c])})
        return out


def _predecessor_matches(manifest, states):
    """Match sets: a predicted state also matches any state reached from an identical predecessor."""
    canon = canonical_states(manifest)
    m = np.zeros((len(states), len(states)), bool)
    for r, (s, t) in enumerate(states):
        for c, (s2, t2) in enumerate(states):
            if canon[(s, t)] == canon[(s2, t2)]:
                m[r, c] = True
            elif t >= 1 and t2 == t and canon[(s, t - 1)] == canon[(s2, t - 1)]:
                m[r, c] = True
    return m


def predicted_latent(mdn, belief):
    """Mean of the highest-weight component of the forecast mixture."""
    mix = mdn.mdn_forward(belief)
    return mix.mu[int(np.argmax(mix.pi))]


def prediction_psnr_table(models, dataset, bird_eye_pose=None):
    """Rows: for t >= 1 the belief forecast from the state's predecessor, for t = 0 the toggled belief."""
    manifest = dataset.manifest
    pose_id = manifest.overhead_pose if bird_eye_pose is None else bird_eye_pose
    cam = next(p for p in manifest.poses if p.pose_id == pose_id)
    table = models.table
    states = list(manifest.states)
    gts = [dataset.image(s, t, pose_id) for s, t in states]
    toggled_imgs = {st: render_image(models.field, cam, table.reference[st].mu) for st in states}
    rows, kinds = [], []
    for s, t in states:
        if t == 0:
            rows.append(toggled_imgs[(s, t)])
            kinds.append("toggled")
        else:
            z = predicted_latent(models.mdn, table.reference[(s, t - 1)])
            rows.append(render_image(models.field, cam, z))
            kinds.append("predicted")
    matrix = np.array([[psnr(img, gt) for gt in gts] for img in rows])
    toggled = np.array([[psnr(toggled_imgs[st], gt) for gt in gts] for st in states])
    return PsnrReport(states, matrix, _predecessor_matches(manifest, states), kinds, toggled)


# ----------------------------------------------------------------------------
# latent separability


@dataclass
class SeparabilityReport:
    accuracy: float
    scheme: str
    fold_seed: int
    n_labels: int
    n_samples: int
    chance: float
    fold_scores: list = field(default_factory=list)

    def to_dict(self):
        return {"accuracy": self.accuracy, "scheme": self.scheme, "fold_seed": self.fold_seed,
                "n_labels": self.n_labels, "n_samples": self.n_samples, "chance": self.chance}


def svm_separability(samples, labels, folds=10, seed=0, C=1.0, scheme="custom"):
    """10-fold cross-validated accuracy of an RBF-kernel SVM; independent of sample order."""
    from sklearn.model_selection import StratifiedKFold, cross_val_score
    from sklearn.svm import SVC

    X = np.asarray(samples, float)
    y = np.asarray(labels)
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise ValueError("separability needs at least two labels")
    if counts.min() < folds:
        raise ValueError(f"every label needs at least {folds} samples (smallest has {counts.min()})")
    # canonical order so fold assignment does not depend on how samples were passed in
    order = np.lexsort(tuple(X.T[::-1]) + (y,))
    X, y = X[order], y[order]
    cv = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    scores = cross_val_score(SVC(kernel="rbf", C=C, gamma="scale"), X, y, cv=cv)
    return SeparabilityReport(float(scores.mean()), scheme, seed, len(classes), len(y),
                              float(counts.max() / counts.sum()), [float(s) for s in scores])


def latent_samples(pcvae, dataset, seed=0, use_means=False):
    """One reparameterized draw (or the mean) per encoder-input frame, with its frame records."""
    manifest = dataset.manifest
    enc = set(manifest.encoder_poses)
    idx = [i for i, f in enumerate(manifest.frames) if f.pose_id in enc]
    mu, s2 = pcvae.encode_batch(dataset.images[idx])
    if not use_means:
        rng = np.random.default_rng(seed)
        mu = mu + np.sqrt(s2) * rng.standard_normal(mu.shape)
    return mu, [manifest.frames[i] for i in idx]


def latent_separability(pcvae, dataset, scheme="scene_timestamp", seed=0, use_means=False):
    """Separability of encoder latents by timestamp or by (scene, timestamp); identical worlds share a label."""
    z, frames = latent_samples(pcvae, dataset, seed, use_means)
    canon = canonical_states(dataset.manifest)
    if scheme == "timestamp":
        labels = [f.timestamp for f in frames]
    elif scheme == "scene_timestamp":
        order = {st: k for k, st in enumerate(sorted(set(canon.values())))}
        labels = [order[canon[(f.scene_id, f.timestamp)]] for f in frames]
    else:
        raise ValueError(f"unknown label scheme {scheme!r}")
    return svm_separability(z, labels, seed=seed, scheme=scheme)


# ----------------------------------------------------------------------------
# reconstruction grid


@dataclass
class ReconstructionGrid:
    tiles: np.ndarray  # (rows, cols, H, W, 3)
    inputs: list
    poses: list
    timestamps: int

    @property
    def shape(self):
        return self.tiles.shape[:2]

    def image(self, pad=1):
        R, C, H, W, _ = self.tiles.shape
        out = np.ones((R * (H + pad) + pad, C * (W + pad) + pad, 3), np.float32)
        for r in range(R):
            for c in range(C):
                y, x = pad + r * (H + pad), pad + c * (W + pad)
                out[y:y + H, x:x + W] = self.tiles[r, c]
        return out


def reconstruction_grid(pcvae, dataset, inputs, poses):
    """Columns: the input, the input scene at every timestamp (input pose), then decodes at ``poses``."""
    manifest = dataset.manifest
    N = max(s.timestamps for s in manifest.scenes)
    H, W = manifest.height, manifest.width
    tiles = np.full((len(inputs), 1 + N + len(poses), H, W, 3), np.asarray(manifest.background, np.float32))
    for r, i in enumerate(inputs):
        f = manifest.frames[i]
        tiles[r, 0] = dataset.images[i]
        for t in range(manifest.scene(f.scene_id).timestamps):
            tiles[r, 1 + t] = dataset.image(f.scene_id, t, f.pose_id)
        mu = pcvae.encode(dataset.images[i]).mu
        for k, p in enumerate(poses):
            tiles[r, 1 + N + k] = pcvae.decode(mu, p)
    return ReconstructionGrid(tiles, list(inputs), list(poses), N)


def reconstruction_consistency(grid: ReconstructionGrid, dataset):
    """Share of decoded tiles whose best-PSNR ground truth (same pose, any timestamp) is the input's own.

    Timestamps whose ground truths are identical at that pose score equally, so a tie counts as a hit.
    """
    manifest = dataset.manifest
    hits = total = 0
    for r, i in enumerate(grid.inputs):
        f = manifest.frames[i]
        T = manifest.scene(f.scene_id).timestamps
        for k, p in enumerate(grid.poses):
            tile = grid.tiles[r, 1 + grid.timestamps + k]
            scores = [psnr(tile, dataset.image(f.scene_id, t, p)) for t in range(T)]
            hits += int(scores[f.timestamp] >= max(scores))
            total += 1
    return hits / max(total, 1)
