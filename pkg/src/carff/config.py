"""Run configuration (JSON file plus flag overrides) and per-command run manifests."""

from __future__ import annotations

import copy
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from .checkpoint import file_hash
from .forecast import MDNConfig
from .nerf import NeRFConfig
from .pcvae import PCVAEConfig
from .planner import ControllerConfig

_SKIP = {"pose_count", "width", "height", "latent_dim", "world_box", "background", "seed"}


def _stage_defaults(cfg):
    d = cfg.to_dict() if hasattr(cfg, "to_dict") else dict(vars(cfg))
    return {k: v for k, v in d.items() if k not in _SKIP}


def default_config():
    return {
        "archetype": "blender_toy",
        "seed": 0,
        "latent_dim": 8,
        "data": {"poses": 24, "width": 64, "height": 64},
        "pcvae": _stage_defaults(PCVAEConfig()),
        "nerf": _stage_defaults(NeRFConfig()),
        "mdn": _stage_defaults(MDNConfig()),
        "controller": {k: v for k, v in vars(ControllerConfig()).items()},
        "trials": {"trials": 30, "n_list": [2, 10, 35]},
        "curves": {"n_max": 50, "repeats": 10, "inputs": 3},
    }


def _merge(base, override, path=""):
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise KeyError(f"unknown config key '{where}'")
        if isinstance(base[key], dict) and not isinstance(value, dict):
            raise TypeError(f"config key '{where}' must be an object")
        if isinstance(base[key], dict):
            _merge(base[key], value, where + ".")
        else:
            base[key] = value
    return base


def resolve_config(path=None, overrides=None):
    """Defaults, then the config file, then flag overrides (``{"pcvae.epochs": 10}`` style keys)."""
    cfg = default_config()
    if path:
        _merge(cfg, json.loads(Path(path).read_text()))
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = {}
        cur = node
        parts = dotted.split(".")
        for p in parts[:-1]:
            cur = cur.setdefault(p, {})
        cur[parts[-1]] = value
        _merge(cfg, node)
    return cfg


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def pcvae_config(cfg, pose_count, width, height):
    d = copy.deepcopy(cfg["pcvae"])
    d.update(latent_dim=cfg["latent_dim"], pose_count=pose_count, width=width, height=height)
    d["seed"] = cfg["seed"]
    return PCVAEConfig.from_dict(d)


def nerf_config(cfg, manifest):
    d = copy.deepcopy(cfg["nerf"])
    d.update(latent_dim=cfg["latent_dim"], world_box=[list(manifest.world_box[0]), list(manifest.world_box[1])],
             background=list(manifest.background))
    d["seed"] = cfg["seed"]
    return NeRFConfig.from_dict(d)


def mdn_config(cfg):
    d = copy.deepcopy(cfg["mdn"])
    d["latent_dim"] = cfg["latent_dim"]
    d["seed"] = cfg["seed"]
    return MDNConfig.from_dict(d)


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    started: float = field(default_factory=time.time)
    wall_clock: float = 0.0
    status: str = "ok"

    def add_input(self, name, path):
        if path is not None and Path(path).is_file():
            self.inputs[name] = {"path": str(path), "sha256": file_hash(path)}

    def add_output(self, path):
        self.outputs.append(str(path))

    def write(self, path):
        self.wall_clock = round(time.time() - self.started, 3)
        doc = {"command": self.command, "config_hash": self.config_hash, "seed": self.seed, "inputs": self.inputs,
               "outputs": self.outputs, "wall_clock_s": self.wall_clock, "status": self.status}
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1))
