import hashlib
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
import torch

from carff.forecast import BeliefTable, GaussianMixture
from carff.pcvae import LatentGaussian

torch.set_num_threads(1)

TESTS = Path(__file__).parent
DESK_CONFIG = TESTS / "desk_config.json"
# bump when training code changes so cached models are rebuilt
MODEL_REV = "4"


def cache_root():
    return Path(os.environ.get("CARFF_CACHE", Path(tempfile.gettempdir()) / "carff-cache"))


def trained_dir(archetype):
    from carff.scenegen import DatasetConfig, build_manifest

    # the key covers the training config and the archetype's scene layout
    layout = build_manifest(DatasetConfig(archetype, "unused", poses=24, width=64, height=64)).dumps()
    key = hashlib.sha256(DESK_CONFIG.read_bytes() + layout.encode()).hexdigest()[:10]
    out = cache_root() / f"{archetype}-{key}-r{MODEL_REV}"
    done = Path(f"{out}.run.json")
    if not done.exists():
        from carff.cli import main

        code = main(["pipeline", "--archetype", archetype, "--out", str(out), "--config", str(DESK_CONFIG)])
        assert code == 0, f"pipeline for {archetype} failed"
    return out


@dataclass
class Trained:
    root: Path
    dataset: object
    models: object
    paths: dict


_LOADED = {}


def load_trained(archetype):
    if archetype not in _LOADED:
        from carff.forecast import load_mdn
        from carff.nerf import load_nerf
        from carff.pcvae import load_pcvae
        from carff.planner import Action, Models
        from carff.scenegen import Dataset

        root = trained_dir(archetype)
        paths = {s: root / f"{s}.ckpt" for s in ("pcvae", "nerf", "mdn")}
        mdn, table = load_mdn(paths["mdn"])
        actions = tuple(Action(a) for a in (mdn.meta.get("actions") or ["ADVANCE", "HALT"]))
        models = Models(load_pcvae(paths["pcvae"]), load_nerf(paths["nerf"]), mdn, table, actions)
        _LOADED[archetype] = Trained(root, Dataset.load(root / "data"), models, paths)
    return _LOADED[archetype]


@pytest.fixture(scope="session")
def multi():
    return load_trained("multi_scene_intersection")


@pytest.fixture(scope="session")
def single():
    return load_trained("single_scene_intersection")


@pytest.fixture(scope="session")
def two_lane():
    return load_trained("two_lane_merge")


@pytest.fixture(scope="session")
def blender():
    return load_trained("blender_toy")


# ----------------------------------------------------------------------------
# lightweight fakes for logic tests


class FakeField:
    """Density is high near slot i exactly when latent coordinate i is positive."""

    def __init__(self, slots, tau=1.0, radius=0.1):
        self.slots = torch.as_tensor(np.asarray(slots, float), dtype=torch.float32)
        self.tau = tau
        self.radius = radius

    def density(self, x, z):
        d = torch.cdist(x, self.slots)  # (P, M)
        near = d < self.radius
        on = z[:, : self.slots.shape[0]] > 0
        hit = (near & on).any(dim=1)
        return torch.where(hit, torch.tensor(10.0), torch.tensor(0.01))


def make_table(patterns, hazard_scenes=(0,), slots=None, sigma2=0.01):
    """Belief table whose reference latent for each state encodes its occupancy pattern as +/-1."""
    states = list(patterns)
    m = len(next(iter(patterns.values())))
    slots = np.asarray(slots if slots is not None else [[float(i), 0.0, 0.5] for i in range(m)])
    ref = {st: LatentGaussian(np.where(np.asarray(p, bool), 1.0, -1.0), np.full(m, sigma2)) for st, p in patterns.items()}
    return BeliefTable(states, ref, slots, {st: np.asarray(p, bool) for st, p in patterns.items()},
                       {st: bool(np.any(np.asarray(p)[1:])) for st, p in patterns.items()},
                       {st: st for st in states}, list(hazard_scenes))


class FakeMDN:
    """Returns a fixed mixture regardless of the input belief."""

    def __init__(self, mixture: GaussianMixture):
        self.mixture = mixture

    def mdn_forward(self, g):
        return self.mixture


class FakeEncoder:
    def __init__(self, dim):
        self.dim = dim

    def encode(self, image):
        v = float(np.mean(image))
        return LatentGaussian(np.full(self.dim, v), np.ones(self.dim))


def finite_difference_check(loss_fn, params, rel=1e-3, h=1e-6, stride=1):
    """Compare autograd gradients of ``loss_fn()`` with central differences; returns the worst relative error."""
    grads = torch.autograd.grad(loss_fn(), params)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.view(-1)
        for i in range(0, flat.numel(), stride):
            old = flat[i].item()
            flat[i] = old + h
            up = loss_fn().item()
            flat[i] = old - h
            down = loss_fn().item()
            flat[i] = old
            num = (up - down) / (2 * h)
            ana = g.reshape(-1)[i].item()
            err = abs(num - ana) / max(abs(num), abs(ana), 1e-6)
            assert abs(num - ana) <= rel * max(abs(num), abs(ana)) + 1e-9, (tuple(p.shape), i, num, ana)
            worst = max(worst, err)
    return worst
