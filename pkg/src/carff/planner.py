"""Sampling controller over forecast beliefs, baselines, and the trial and curve harnesses."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .forecast import BeliefTable, localize_batch, sample_mixture
from .pcvae import LatentGaussian
from .scenegen import canonical_states, plausible_next_states


class Action(str, Enum):
    ADVANCE = "ADVANCE"
    HALT = "HALT"
    MERGE_BEFORE = "MERGE_BEFORE"
    MERGE_AFTER = "MERGE_AFTER"


CONTROLLERS = ("carff", "overconfident", "underconfident")
_ALIASES = {"over": "overconfident", "under": "underconfident"}


@dataclass
class ControllerConfig:
    n: int = 10
    rho: float = 1.0
    kind: str = "carff"
    max_mismatch: int = 1

    def __post_init__(self):
        self.kind = _ALIASES.get(self.kind, self.kind)
        if self.kind not in CONTROLLERS:
            raise ValueError(f"unknown controller {self.kind!r}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not 0 < self.rho <= 1:
            raise ValueError("rho must lie in (0, 1]")


@dataclass
class Models:
    """Trained stages plus the scenario's action pair (progressive, cautious)."""

    pcvae: object
    field: object
    mdn: object
    table: BeliefTable
    actions: tuple = (Action.ADVANCE, Action.HALT)

    @property
    def progressive(self):
        return Action(self.actions[0])

    @property
    def cautious(self):
        return Action(self.actions[1])


@dataclass
class TrialResult:
    cell: str
    successes: int
    trials: int
    controller: str = "carff"
    n: int = 1
    hazard: bool = False
    frame: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not 0 <= self.successes <= self.trials:
            raise ValueError("successes must lie in [0, trials]")


def sample_stream(mixture, rng, n):
    """n draws taken one at a time, so a shorter stream is always a prefix of a longer one."""
    return np.stack([sample_mixture(mixture, rng) for _ in range(n)])


def safe_fraction(states, table: BeliefTable):
    """Fraction of localized samples in a hazard-free state (unlocalizable samples count as hazards)."""
    safe = [s is not None and not table.is_hazard(s) for s in states]
    return float(np.mean(safe))


def decide(image, cfg: ControllerConfig, models: Models, rng, belief: LatentGaussian | None = None) -> Action:
    if cfg.kind == "underconfident":
        return models.cautious
    if cfg.kind == "overconfident":
        return models.progressive
    g = belief if belief is not None else models.pcvae.encode(image)
    zs = sample_stream(models.mdn.mdn_forward(g), rng, cfg.n)
    states = localize_batch(models.field, zs, models.table, max_mismatch=cfg.max_mismatch)
    return models.progressive if safe_fraction(states, models.table) >= cfg.rho else models.cautious


def _prefer(frames, manifest, group="ego"):
    preferred = [i for i in frames if manifest.frames[i].pose_id in manifest.poses_in_group(group)]
    return (preferred or frames)[0] if frames else None


def scenario_inputs(manifest, images):
    """One fixed input frame per scene: ambiguous-future view for hazard scenes, a clear view otherwise."""
    enc = set(manifest.encoder_poses)
    cells = []
    for scene in manifest.scenes:
        hazard = scene.scene_id in manifest.hazard_scenes
        cands = []
        for t in range(scene.timestamps - 1):
            for c in sorted(enc):
                i = manifest.frame_index(scene.scene_id, t, c)
                k = len(plausible_next_states(manifest, images, i))
                if (hazard and k >= 2) or (not hazard and k == 1):
                    cands.append(i)
        i = _prefer(cands, manifest)
        if i is not None:
            cells.append((scene.label or f"scene-{scene.scene_id}", hazard, i))
    return cells


def trial_rng(seed, trial):
    return np.random.default_rng([seed, trial])


def run_trials(manifest, images, cfg: ControllerConfig, models: Models, trials=30, seed=0):
    """Per-cell success counts; success is the cautious action in hazard cells, progressive otherwise."""
    results = []
    for cell, hazard, i in scenario_inputs(manifest, images):
        want = models.cautious if hazard else models.progressive
        belief = models.pcvae.encode(images[i]) if cfg.kind == "carff" else None
        wins = sum(decide(images[i], cfg, models, trial_rng(seed, k), belief) == want for k in range(trials))
        f = manifest.frames[i]
        results.append(TrialResult(cell, wins, trials, cfg.kind, cfg.n, hazard, (f.scene_id, f.timestamp, f.pose_id)))
    return results


@dataclass
class Curves:
    n: np.ndarray
    accuracy: np.ndarray
    recall: np.ndarray
    seed: int = 0

    def rows(self):
        return [{"n": int(k), "accuracy": float(a), "recall": float(r)}
                for k, a, r in zip(self.n, self.accuracy, self.recall)]


def curve_inputs(manifest, images, count=3, seed=0):
    """Random subsets (preferring ego views) of fully observable and of occluded encoder inputs."""
    enc = set(manifest.encoder_poses)
    ego = set(manifest.poses_in_group("ego"))
    full, occl = [], []
    for i, f in enumerate(manifest.frames):
        if f.pose_id not in enc:
            continue
        k = len(plausible_next_states(manifest, images, i))
        if k == 1:
            full.append(i)
        elif k >= 2:
            occl.append(i)
    rng = np.random.default_rng(seed)

    def pick(pool):
        first = [i for i in pool if manifest.frames[i].pose_id in ego]
        rest = [i for i in pool if manifest.frames[i].pose_id not in ego]
        chosen = list(rng.permutation(first))[:count] if first else []
        if len(chosen) < count and rest:
            chosen += list(rng.permutation(rest))[:count - len(chosen)]
        return [int(i) for i in chosen]

    return pick(full), pick(occl)


def accuracy_recall_sweep(manifest, images, models: Models, n_range=range(1, 51), seed=0, repeats=10, count=3):
    """accuracy(n): share of n samples on the true next state over fully observable inputs;
    recall(n): share of plausible next states covered by n samples over occluded inputs.

    Samples are nested in n (one incremental stream per input and repeat), then averaged.
    """
    n_range = np.asarray(list(n_range))
    n_max = int(n_range.max())
    canon = canonical_states(manifest)
    full, occl = curve_inputs(manifest, images, count, seed)
    acc = np.zeros(len(n_range))
    rec = np.zeros(len(n_range))
    for inputs, kind in ((full, "acc"), (occl, "rec")):
        if not inputs:
            (acc if kind == "acc" else rec)[:] = np.nan
            continue
        total = np.zeros(len(n_range))
        for i in inputs:
            truth = plausible_next_states(manifest, images, i)
            m = models.mdn.mdn_forward(models.pcvae.encode(images[i]))
            for r in range(repeats):
                zs = sample_stream(m, trial_rng(seed, 1000 * r + i), n_max)
                states = [None if s is None else canon[s] for s in localize_batch(models.field, zs, models.table)]
                if kind == "acc":
                    good = np.cumsum([s == truth[0] for s in states])
                    total += good[n_range - 1] / n_range
                else:
                    seen, cov = set(), []
                    for s in states:
                        if s in truth:
                            seen.add(s)
                        cov.append(len(seen) / len(truth))
                    total += np.asarray(cov)[n_range - 1]
        (acc if kind == "acc" else rec)[:] = total / (len(inputs) * repeats)
    return Curves(n_range, acc, rec, seed)
