"""Command-line entry point: ``carff <subcommand> ...``.

Every command writes ``<out>.config.json`` (the resolved configuration) and
``<out>.run.json`` (a run manifest with input checkpoint hashes) next to its
primary output. Stage ordering is checked against the hashes recorded inside
each checkpoint, not against file names.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .camera import CameraPose
from .checkpoint import file_hash
from .errors import CarffError, DatasetError, OrderingError

log = logging.getLogger("carff")

STAGES = ("pcvae", "nerf", "mdn")


# ----------------------------------------------------------------------------
# helpers


def _write_csv(path, rows, cols=None):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    cols = cols or (list(rows[0].keys()) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in cols})
    return Path(path)


def _write_json(path, doc):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1, default=_jsonable))
    return Path(path)


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, tuple):
        return list(x)
    return str(x)


def _require(args, stage, command):
    path = getattr(args, stage, None)
    if not path:
        raise OrderingError(f"{command} needs the {stage} stage checkpoint (--{stage})")
    if not Path(path).is_file():
        raise OrderingError(f"{command}: {stage} checkpoint {path} does not exist; run train-{stage} first")
    return path


def _load_stages(args, command, need=STAGES):
    """Load the requested checkpoints and verify the recorded hash chain between them."""
    from .forecast import load_mdn
    from .nerf import load_nerf
    from .pcvae import load_pcvae

    paths = {s: _require(args, s, command) for s in need}
    out = {}
    if "pcvae" in paths:
        out["pcvae"] = load_pcvae(paths["pcvae"])
    if "nerf" in paths:
        out["nerf"] = load_nerf(paths["nerf"])
        if "pcvae" in paths and out["nerf"].meta.get("pcvae_sha256") != file_hash(paths["pcvae"]):
            raise OrderingError("NeRF checkpoint was not trained on this PC-VAE checkpoint")
    if "mdn" in paths:
        out["mdn"], out["table"] = load_mdn(paths["mdn"])
        meta = out["mdn"].meta
        for stage in ("pcvae", "nerf"):
            if stage in paths and meta.get(f"{stage}_sha256") != file_hash(paths[stage]):
                raise OrderingError(f"MDN checkpoint was not trained against this {stage} checkpoint")
    return out, paths


def _models(args, command):
    from .planner import Action, Models

    m, paths = _load_stages(args, command)
    actions = m["mdn"].meta.get("actions") or ["ADVANCE", "HALT"]
    return Models(m["pcvae"], m["nerf"], m["mdn"], m["table"], tuple(Action(a) for a in actions)), paths


def _load_image(path):
    from .scenegen import load_image

    if not Path(path).is_file():
        raise DatasetError(f"image {path} not found")
    return load_image(path)


def _parse_pose(spec, poses):
    """A pose id from the checkpoint's pose list, or a JSON file / string with camera extrinsics."""
    try:
        pid = int(spec)
    except ValueError:
        text = Path(spec).read_text() if Path(spec).is_file() else spec
        return CameraPose.from_dict(json.loads(text))
    for p in poses:
        if p["pose_id"] == pid:
            return CameraPose.from_dict(p)
    raise CarffError(f"pose {pid} is not in the checkpoint's pose list")


def _latent(spec, args, command):
    """Latent source: a PNG (encoded by --pcvae), a JSON vector or {"mu": [...]}, or ``state:S_T`` (needs --mdn)."""
    if spec.startswith("state:"):
        from .forecast import load_mdn

        _, table = load_mdn(_require(args, "mdn", command))
        s, t = (int(v) for v in spec[6:].split("_"))
        return table.reference[(s, t)].mu
    p = Path(spec)
    if p.suffix.lower() == ".png":
        from .pcvae import load_pcvae

        return load_pcvae(_require(args, "pcvae", command)).encode(_load_image(p)).mu
    doc = json.loads(p.read_text() if p.is_file() else spec)
    return np.asarray(doc["mu"] if isinstance(doc, dict) else doc, float)


# ----------------------------------------------------------------------------
# commands


def _parse_res(text):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    return w, h


def cmd_gen(args, cfg, run):
    from .scenegen import DatasetConfig, generate_dataset

    d = cfg["data"]
    if args.res:
        d["width"], d["height"] = args.res
    m = generate_dataset(DatasetConfig(cfg["archetype"], args.out, d["poses"], d["width"], d["height"], cfg["seed"]))
    run.add_output(args.out)
    print(f"wrote {len(m.frames)} frames ({len(m.scenes)} scenes x {len(m.poses)} poses) to {args.out}")


def cmd_train_pcvae(args, cfg, run):
    from .pcvae import reconstruction_psnr, train_pcvae
    from .plotting import plot_history
    from .scenegen import Dataset

    ds = Dataset.load(args.data)
    pc = cfgmod.pcvae_config(cfg, len(ds.manifest.poses), ds.manifest.width, ds.manifest.height)
    metrics = args.metrics or f"{args.out}.metrics.csv"
    model, hist = train_pcvae(ds, pc, out_path=args.out, metrics_path=metrics)
    plot_history(hist, ["loss", "train_psnr", "w_kl"], f"{args.out}.metrics.png", "PC-VAE")
    run.add_input("dataset_manifest", Path(args.data) / "manifest.json")
    for p in (args.out, metrics, f"{args.out}.metrics.png"):
        run.add_output(p)
    print(f"final train PSNR {hist[-1]['train_psnr']:.2f} dB; recon PSNR {reconstruction_psnr(model, ds):.2f} dB")


def cmd_train_nerf(args, cfg, run):
    from .nerf import train_nerf
    from .pcvae import load_pcvae
    from .plotting import plot_history
    from .scenegen import Dataset

    path = _require(args, "pcvae", "train-nerf")
    ds = Dataset.load(args.data)
    field, hist = train_nerf(ds, load_pcvae(path), cfgmod.nerf_config(cfg, ds.manifest), file_hash(path), args.out)
    _write_csv(f"{args.out}.metrics.csv", hist, ["epoch", "loss", "psnr", "p_mean", "lr"])
    plot_history(hist, ["loss", "psnr", "p_mean"], f"{args.out}.metrics.png", "NeRF")
    run.add_input("pcvae", path)
    for p in (args.out, f"{args.out}.metrics.csv", f"{args.out}.metrics.png"):
        run.add_output(p)
    print(f"final batch PSNR {hist[-1]['psnr']:.2f} dB; occupancy threshold {field.tau:.3f}")


def cmd_train_mdn(args, cfg, run):
    from .forecast import build_belief_table, build_transition_dataset, save_mdn, train_mdn
    from .plotting import plot_history
    from .scenegen import Dataset

    stages, paths = _load_stages(args, "train-mdn", ("pcvae", "nerf"))
    ds = Dataset.load(args.data)
    mc = cfgmod.mdn_config(cfg)
    mu, s2 = stages["pcvae"].encode_batch(ds.images)
    model, hist = train_mdn(lambda rng: build_transition_dataset(ds.manifest, mu, s2, mc.neighbor_radius, rng), mc)
    table = build_belief_table(ds.manifest, ds.images, mu, s2, probe_seed=cfg["seed"])
    save_mdn(args.out, model, table, file_hash(paths["pcvae"]), file_hash(paths["nerf"]), hist, ds.manifest.actions)
    _write_csv(f"{args.out}.metrics.csv", hist, ["epoch", "nll", "noise_min", "noise_max"])
    plot_history(hist, ["nll"], f"{args.out}.metrics.png", "MDN")
    for k, p in paths.items():
        run.add_input(k, p)
    for p in (args.out, f"{args.out}.metrics.csv", f"{args.out}.metrics.png"):
        run.add_output(p)
    print(f"final NLL {hist[-1]['nll']:.4f}")


def cmd_render(args, cfg, run):
    from .nerf import load_nerf, render_image
    from .scenegen import save_image

    path = _require(args, "nerf", "render")
    field = load_nerf(path)
    z = _latent(args.latent, args, "render")
    cam = _parse_pose(args.pose, field.meta["poses"])
    save_image(args.out, render_image(field, cam, z))
    run.add_input("nerf", path)
    run.add_output(args.out)


def cmd_probe(args, cfg, run):
    from .nerf import density_probe, load_nerf

    path = _require(args, "nerf", "probe")
    field = load_nerf(path)
    z = _latent(args.latent, args, "probe")
    pts = np.asarray(json.loads(Path(args.points).read_text()), float).reshape(-1, 3)
    sig = density_probe(field, z, pts)
    doc = {"tau": field.tau, "points": pts.tolist(), "sigma": sig.tolist(),
           "occupied": [bool(s >= field.tau) for s in sig]}
    out = args.out or f"{args.points}.probe.json"
    _write_json(out, doc)
    run.add_input("nerf", path)
    run.add_output(out)
    print(json.dumps({"sigma": [round(float(s), 4) for s in sig]}))


def cmd_predict(args, cfg, run):
    from .forecast import autoregressive_predict

    models, paths = _models(args, "predict")
    img = _load_image(args.image)
    rng = np.random.default_rng(cfg["seed"])
    roll = autoregressive_predict(img, args.steps, models.pcvae, models.mdn, models.field, models.table, rng)
    doc = {"image": str(args.image), "seed": cfg["seed"], **roll.to_dict()}
    _write_json(args.out, doc)
    for k, p in paths.items():
        run.add_input(k, p)
    run.add_output(args.out)
    print("localized:", " -> ".join(f"{s.state[0]}_{s.state[1]}" for s in roll.steps) or "(no steps)")


def cmd_probe_predict(args, cfg, run):
    from .forecast import localize_batch, probe_pattern, sample_mixture

    models, paths = _models(args, "probe-predict")
    img = _load_image(args.image)
    rng = np.random.default_rng(cfg["seed"])
    g = models.pcvae.encode(img)
    mix = models.mdn.mdn_forward(g)
    zs = np.stack([sample_mixture(mix, rng) for _ in range(args.samples)])
    votes, med = probe_pattern(models.field, zs, models.table, models.field.tau)
    states = localize_batch(models.field, zs, models.table)
    doc = {"image": str(args.image), "seed": cfg["seed"], "belief": g.to_dict(), "mixture": mix.to_dict(),
           "slots": models.table.slots.tolist(), "tau": models.field.tau,
           "samples": [{"z": z.tolist(), "slot_sigma": m.tolist(), "slot_occupied": v.tolist(),
                        "state": None if s is None else list(s),
                        "actor_present": None if s is None else bool(models.table.actor_present[s])}
                       for z, m, v, s in zip(zs, med, votes, states)]}
    _write_json(args.out, doc)
    for k, p in paths.items():
        run.add_input(k, p)
    run.add_output(args.out)
    present = [d["actor_present"] for d in doc["samples"]]
    print(f"actor present in {sum(bool(p) for p in present)}/{len(present)} predicted samples")


def cmd_toggle(args, cfg, run):
    from .nerf import render_image
    from .scenegen import save_image

    stages, paths = _load_stages(args, "toggle", ("pcvae", "nerf"))
    z = stages["pcvae"].encode(_load_image(args.image)).mu
    cam = _parse_pose(args.pose, stages["nerf"].meta["poses"])
    save_image(args.out, render_image(stages["nerf"], cam, z))
    for k, p in paths.items():
        run.add_input(k, p)
    run.add_output(args.out)


def _controller(cfg, n=None, kind=None):
    from .planner import ControllerConfig

    c = dict(cfg["controller"])
    if n is not None:
        c["n"] = n
    if kind is not None:
        c["kind"] = kind
    return ControllerConfig(**c)


def cmd_plan(args, cfg, run):
    from .planner import decide

    ctrl = _controller(cfg)
    if ctrl.kind == "carff":
        models, paths = _models(args, "plan")
        for k, p in paths.items():
            run.add_input(k, p)
    else:
        from .planner import Action, Models

        acts = args.actions.split(",")
        models = Models(None, None, None, None, tuple(Action(a) for a in acts))
    action = decide(_load_image(args.image), ctrl, models, np.random.default_rng(cfg["seed"]))
    if args.out:
        _write_json(args.out, {"action": action.value, "controller": ctrl.kind, "n": ctrl.n, "rho": ctrl.rho,
                               "seed": cfg["seed"]})
        run.add_output(args.out)
    print(action.value)


def cmd_trials(args, cfg, run):
    from .planner import run_trials
    from .plotting import plot_trials
    from .scenegen import Dataset

    models, paths = _models(args, "trials")
    ds = Dataset.load(args.data)
    trials = cfg["trials"]["trials"]
    results = []
    for kind in ("overconfident", "underconfident"):
        results += run_trials(ds.manifest, ds.images, _controller(cfg, 1, kind), models, trials, cfg["seed"])
    for n in cfg["trials"]["n_list"]:
        results += run_trials(ds.manifest, ds.images, _controller(cfg, n, "carff"), models, trials, cfg["seed"])
    rows = [{"controller": r.controller, "n": r.n, "cell": r.cell, "hazard": r.hazard, "successes": r.successes,
             "trials": r.trials, "input_frame": "_".join(map(str, r.frame)), "seed": cfg["seed"]} for r in results]
    _write_csv(args.out, rows)
    plot_trials(results, f"{args.out}.png")
    for k, p in paths.items():
        run.add_input(k, p)
    run.add_output(args.out)
    run.add_output(f"{args.out}.png")
    for r in rows:
        print(f"{r['controller']:>15} n={r['n']:<3} {r['cell']:<14} {r['successes']}/{r['trials']}")


def cmd_curves(args, cfg, run):
    from .planner import accuracy_recall_sweep
    from .plotting import plot_curves
    from .scenegen import Dataset

    models, paths = _models(args, "curves")
    ds = Dataset.load(args.data)
    c = cfg["curves"]
    curves = accuracy_recall_sweep(ds.manifest, ds.images, models, range(1, c["n_max"] + 1), cfg["seed"],
                                   c["repeats"], c["inputs"])
    rows = [dict(r, seed=cfg["seed"]) for r in curves.rows()]
    _write_csv(args.out, rows, ["n", "accuracy", "recall", "seed"])
    plot = args.plot or f"{args.out}.png"
    plot_curves(curves, plot)
    for k, p in paths.items():
        run.add_input(k, p)
    run.add_output(args.out)
    run.add_output(plot)


def cmd_eval(args, cfg, run):
    from .scenegen import Dataset

    ds = Dataset.load(args.data)
    run.add_input("dataset_manifest", Path(args.data) / "manifest.json")
    if args.what == "psnr-table":
        from .evalkit import prediction_psnr_table
        from .plotting import plot_psnr_table

        models, paths = _models(args, "eval psnr-table")
        rep = prediction_psnr_table(models, ds)
        _write_csv(args.out, [dict(r, seed=cfg["seed"]) for r in rep.rows()])
        plot_psnr_table(rep, f"{args.out}.png")
        run.add_output(f"{args.out}.png")
        print(f"matching {rep.matching_mean:.2f} dB, unmatching {rep.unmatching_mean:.2f} dB, "
              f"row argmax correct {sum(rep.row_argmax_ok())}/{len(rep.states)}")
    elif args.what == "svm":
        from .evalkit import latent_separability

        stages, paths = _load_stages(args, "eval svm", ("pcvae",))
        reps = [latent_separability(stages["pcvae"], ds, scheme, cfg["seed"], args.use_means)
                for scheme in ("timestamp", "scene_timestamp")]
        _write_csv(args.out, [r.to_dict() for r in reps])
        for r in reps:
            print(f"{r.scheme}: accuracy {r.accuracy:.3f} (chance {r.chance:.3f})")
    else:
        from .evalkit import reconstruction_consistency, reconstruction_grid
        from .scenegen import save_image

        stages, paths = _load_stages(args, "eval recon-grid", ("pcvae",))
        rng = np.random.default_rng(cfg["seed"])
        enc = ds.manifest.encoder_poses
        cand = [i for i, f in enumerate(ds.manifest.frames) if f.pose_id in enc]
        inputs = [int(i) for i in rng.choice(cand, size=min(args.inputs, len(cand)), replace=False)]
        poses = [int(p) for p in rng.choice(len(ds.manifest.poses), size=args.poses, replace=False)]
        grid = reconstruction_grid(stages["pcvae"], ds, inputs, poses)
        save_image(args.out, grid.image())
        _write_json(f"{args.out}.json", {"inputs": inputs, "poses": poses, "seed": cfg["seed"],
                                         "consistency": reconstruction_consistency(grid, ds)})
        run.add_output(f"{args.out}.json")
    for k, p in paths.items():
        run.add_input(k, p)
    run.add_output(args.out)


def cmd_pipeline(args, cfg, run):
    """gen -> train-pcvae -> train-nerf -> train-mdn -> trials -> curves -> eval, all under one directory."""
    out = Path(args.out)
    common = ["--seed", str(cfg["seed"])]
    if args.config:
        common += ["--config", args.config]
    ck = {s: str(out / f"{s}.ckpt") for s in STAGES}
    models = ["--pcvae", ck["pcvae"], "--nerf", ck["nerf"], "--mdn", ck["mdn"]]
    steps = [
        ["gen", "--archetype", cfg["archetype"], "--out", str(out / "data")],
        ["train-pcvae", "--data", str(out / "data"), "--out", ck["pcvae"]],
        ["train-nerf", "--data", str(out / "data"), "--pcvae", ck["pcvae"], "--out", ck["nerf"]],
        ["train-mdn", "--data", str(out / "data"), "--pcvae", ck["pcvae"], "--nerf", ck["nerf"], "--out", ck["mdn"]],
        ["trials", "--data", str(out / "data"), "--out", str(out / "reports" / "trials.csv")] + models,
        ["curves", "--data", str(out / "data"), "--out", str(out / "reports" / "curves.csv")] + models,
        ["eval", "psnr-table", "--data", str(out / "data"), "--out", str(out / "reports" / "psnr_table.csv")] + models,
        ["eval", "svm", "--data", str(out / "data"), "--pcvae", ck["pcvae"], "--out",
         str(out / "reports" / "svm.csv")],
        ["eval", "recon-grid", "--data", str(out / "data"), "--pcvae", ck["pcvae"], "--out",
         str(out / "reports" / "recon_grid.png")],
    ]
    for step in steps:
        print("+ carff", " ".join(step), flush=True)
        code = main(step + common)
        if code:
            raise CarffError(f"pipeline step '{step[0]}' failed with exit code {code}")
        run.add_output(step[step.index("--out") + 1])


# ----------------------------------------------------------------------------
# argument parsing


def _models_flags(p, stages=STAGES):
    for s in stages:
        p.add_argument(f"--{s}", help=f"{s} checkpoint path")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; unknown keys are rejected, flags win")
    common.add_argument("--seed", type=int, help="seed for every random choice in this command")
    common.add_argument("--log-level", default="WARNING", help="python logging level")

    ap = argparse.ArgumentParser(prog="carff", description="Belief forecasting with latent-conditioned radiance fields")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a procedural multi-view dataset")
    p.add_argument("--archetype", help="blender_toy | single_scene_intersection | multi_scene_intersection | two_lane_merge")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--poses", type=int, help="camera poses per timestamp")
    p.add_argument("--res", type=_parse_res, help="image size as WxH, e.g. 64x64")
    p.set_defaults(func=cmd_gen, over={"archetype": "archetype", "poses": "data.poses"})

    p = sub.add_parser("train-pcvae", parents=[common], help="stage one: pose-conditional VAE")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--kl-end", type=float, help="final KL weight of the delayed-linear schedule")
    p.add_argument("--lr", type=float)
    p.add_argument("--backbone", choices=["small_conv", "vit_shaped"])
    p.add_argument("--metrics", help="CSV path (default <out>.metrics.csv)")
    p.set_defaults(func=cmd_train_pcvae, over={"epochs": "pcvae.epochs", "kl_end": "pcvae.kl.w_end",
                                               "lr": "pcvae.lr", "backbone": "pcvae.backbone"})

    p = sub.add_parser("train-nerf", parents=[common], help="stage two: latent-conditioned radiance field")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _models_flags(p, ("pcvae",))
    p.add_argument("--epochs", type=int)
    p.add_argument("--iters-per-epoch", type=int)
    p.add_argument("--anneal-epochs", type=int)
    p.add_argument("--p-min", type=float, help="final probability of conditioning on the posterior mean")
    p.add_argument("--samples", type=int, help="samples per ray")
    p.add_argument("--rays", type=int, help="rays per batch")
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train_nerf, over={"epochs": "nerf.epochs", "iters_per_epoch": "nerf.iters_per_epoch",
                                              "anneal_epochs": "nerf.anneal_epochs", "p_min": "nerf.p_min",
                                              "samples": "nerf.samples_per_ray", "rays": "nerf.rays_per_batch",
                                              "lr": "nerf.lr"})

    p = sub.add_parser("train-mdn", parents=[common], help="stage three: mixture density forecaster")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _models_flags(p, ("pcvae", "nerf"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train_mdn, over={"epochs": "mdn.epochs", "lr": "mdn.lr"})

    p = sub.add_parser("render", parents=[common], help="render a belief from a pose")
    _models_flags(p)
    p.add_argument("--latent", required=True, help="image.png, latent JSON, or state:S_T")
    p.add_argument("--pose", required=True, help="pose id or camera JSON (file or inline)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render, over={})

    p = sub.add_parser("probe", parents=[common], help="density at given points for a belief")
    _models_flags(p)
    p.add_argument("--latent", required=True)
    p.add_argument("--points", required=True, help="JSON list of xyz points")
    p.add_argument("--out")
    p.set_defaults(func=cmd_probe, over={})

    p = sub.add_parser("predict", parents=[common], help="auto-regressive forecast from one image")
    _models_flags(p)
    p.add_argument("--image", required=True)
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--out", required=True, help="report JSON")
    p.set_defaults(func=cmd_predict, over={})

    p = sub.add_parser("probe-predict", parents=[common], help="one-step forecast samples with probe details")
    _models_flags(p)
    p.add_argument("--image", required=True)
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe_predict, over={})

    p = sub.add_parser("toggle", parents=[common], help="render the encoded scene from another pose")
    _models_flags(p, ("pcvae", "nerf"))
    p.add_argument("--image", required=True)
    p.add_argument("--pose", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_toggle, over={})

    p = sub.add_parser("plan", parents=[common], help="decide an action for one image")
    _models_flags(p)
    p.add_argument("--image", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--controller", choices=["carff", "over", "under", "overconfident", "underconfident"])
    p.add_argument("--rho", type=float, help="share of hazard-free samples needed to proceed")
    p.add_argument("--actions", default="ADVANCE,HALT", help="progressive,cautious pair for the baselines")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plan, over={"n": "controller.n", "controller": "controller.kind",
                                        "rho": "controller.rho"})

    p = sub.add_parser("trials", parents=[common], help="per-scenario success table")
    _models_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--n-list", type=lambda s: [int(v) for v in s.split(",")])
    p.add_argument("--trials", type=int)
    p.add_argument("--out", required=True, help="CSV path; a PNG bar chart is written to <out>.png")
    p.set_defaults(func=cmd_trials, over={"n_list": "trials.n_list", "trials": "trials.trials"})

    p = sub.add_parser("curves", parents=[common], help="accuracy and recall against sample count")
    _models_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--n-max", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--plot", help="PNG path (default <out>.png)")
    p.set_defaults(func=cmd_curves, over={"n_max": "curves.n_max", "repeats": "curves.repeats"})

    p = sub.add_parser("eval", parents=[common], help="evaluation reports")
    p.add_argument("what", choices=["psnr-table", "svm", "recon-grid"])
    _models_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--use-means", action="store_true", help="svm: use posterior means instead of samples")
    p.add_argument("--inputs", type=int, default=4, help="recon-grid: number of input rows")
    p.add_argument("--poses", type=int, default=4, help="recon-grid: decoded poses per row")
    p.set_defaults(func=cmd_eval, over={})

    p = sub.add_parser("pipeline", parents=[common], help="run every stage and report for one archetype")
    p.add_argument("--archetype")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pipeline, over={"archetype": "archetype"})
    return ap


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING))
    try:
        overrides = {dotted: getattr(args, dest) for dest, dotted in args.over.items()}
        overrides["seed"] = args.seed
        cfg = cfgmod.resolve_config(args.config, overrides)
    except (KeyError, TypeError, ValueError, OSError) as exc:
        print(f"carff: config error: {exc}", file=sys.stderr)
        return 2
    run = cfgmod.RunManifest(args.command, cfgmod.config_hash(cfg), cfg["seed"])
    out = Path(str(args.out) if getattr(args, "out", None) else f"carff-{args.command}")
    try:
        args.func(args, cfg, run)
    except OrderingError as exc:
        print(f"carff: ordering error: {exc}", file=sys.stderr)
        return 3
    except (CarffError, OSError, ValueError, KeyError) as exc:
        print(f"carff: error: {exc}", file=sys.stderr)
        return 1
    _write_json(f"{out}.config.json", cfg)
    run.write(f"{out}.run.json")
    return 0


if __name__ == "__main__":
    sys.exit(main())
