"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Criteria 3-8 use the desk-scale models cached by ``conftest.trained_dir`` (built on first use).
"""
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from carff.evalkit import latent_separability, prediction_psnr_table
from carff.forecast import autoregressive_predict, localize_batch, sample_mixture
from carff.planner import ControllerConfig, accuracy_recall_sweep, run_trials, scenario_inputs
from conftest import TESTS, load_trained, trained_dir

ARCHETYPES = ("blender_toy", "single_scene_intersection", "multi_scene_intersection", "two_lane_merge")
MULTI_SCENE = ("multi_scene_intersection", "two_lane_merge")
N_LIST = (2, 5, 10, 35)


def report(num, ok, detail, capsys):
    with capsys.disabled():
        print(f"\ncriterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def run_nodes(nodes):
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *nodes],
                          cwd=TESTS.parent, capture_output=True, text=True)
    return proc.returncode, time.perf_counter() - t0, proc.stdout.strip().splitlines()[-1]


# ----------------------------------------------------------------------------
# 1-2: training-free suites


ORACLES = [
    "tests/test_pcvae.py::test_kl_hand_values",
    "tests/test_pcvae.py::test_kl_matches_numerical_integral",
    "tests/test_nerf.py::test_unit_optical_depth_slab",
    "tests/test_forecast.py::test_logpdf_matches_naive_summation",
    "tests/test_evalkit.py::test_psnr_constant_offset",
    "tests/test_evalkit.py::test_psnr_half_pixels_wrong",
    "tests/test_evalkit.py::test_psnr_identical_images_hit_the_cap",
    "tests/test_pcvae.py::test_kl_weight_schedule_points",
    "tests/test_forecast.py::test_component_frequencies_chi_square",
]

GRADIENT_CHECKS = [
    "tests/test_pcvae.py::test_loss_gradient_matches_finite_differences",
    "tests/test_nerf.py::test_loss_gradient_matches_finite_differences",
    "tests/test_forecast.py::test_nll_gradient_matches_finite_differences",
]


def test_criterion_1_oracle_suites(capsys):
    code, secs, summary = run_nodes(ORACLES)
    report(1, code == 0 and secs < 60, f"oracles: {summary} ({secs:.1f} s, budget 60 s)", capsys)


def test_criterion_2_gradient_checks(capsys):
    code, secs, summary = run_nodes(GRADIENT_CHECKS)
    report(2, code == 0 and secs < 300, f"gradient checks: {summary} ({secs:.1f} s, budget 300 s)", capsys)


# ----------------------------------------------------------------------------
# 3-8: desk-scale trained models


@pytest.mark.slow
def test_criterion_3_pcvae_training(capsys):
    metrics = np.genfromtxt(trained_dir("blender_toy") / "pcvae.ckpt.metrics.csv", delimiter=",", names=True)
    train_psnr = float(metrics["train_psnr"][-1])
    ok = train_psnr >= 22.0
    parts = [f"blender_toy train PSNR {train_psnr:.2f} dB (>= 22)"]
    for arch in ARCHETYPES:
        tr = load_trained(arch)
        rep = latent_separability(tr.models.pcvae, tr.dataset, "scene_timestamp", seed=0)
        ok &= rep.accuracy >= 2 * rep.chance
        if arch == "multi_scene_intersection":
            ok &= rep.accuracy >= 0.70
        parts.append(f"{arch} SVM {rep.accuracy:.3f} (chance {rep.chance:.3f})")
    report(3, ok, "; ".join(parts), capsys)


@pytest.mark.slow
def test_criterion_4_forecast_fidelity(capsys):
    ok, parts = True, []
    for arch in ARCHETYPES:
        tr = load_trained(arch)
        rep = prediction_psnr_table(tr.models, tr.dataset)
        argmax = sum(rep.row_argmax_ok())
        ok &= argmax == len(rep.states) and rep.gap >= 3.0
        parts.append(f"{arch} argmax {argmax}/{len(rep.states)} gap {rep.gap:.2f} dB")
    report(4, ok, "; ".join(parts), capsys)


@pytest.mark.slow
def test_criterion_5_bimodality_under_occlusion(capsys):
    tr = load_trained("multi_scene_intersection")
    m, imgs, models = tr.dataset.manifest, tr.dataset.images, tr.models
    _, _, i = next(c for c in scenario_inputs(m, imgs) if c[1])
    mix = models.mdn.mdn_forward(models.pcvae.encode(imgs[i]))
    states = localize_batch(models.field, sample_mixture(mix, np.random.default_rng(0), 100), models.table)
    present = sum(s is not None and bool(models.table.actor_present[s]) for s in states) / 100
    unlocalized = sum(s is None for s in states)
    report(5, 0.3 <= present <= 0.7,
           f"actor present in {present:.2f} of 100 forecasts from frame {i} ({unlocalized} unlocalized)", capsys)


@pytest.mark.slow
def test_criterion_6_accuracy_recall_curves(capsys):
    tr = load_trained("multi_scene_intersection")
    c = accuracy_recall_sweep(tr.dataset.manifest, tr.dataset.images, tr.models, range(1, 51), seed=0, repeats=10)
    hits = [k for k in range(10) if c.recall[k] >= 1.0 and c.accuracy[k] >= 0.95]
    early, late = float(np.mean(c.accuracy[:10])), float(np.mean(c.accuracy[39:50]))
    ok = bool(hits) and late <= early
    first = f"n={c.n[hits[0]]}" if hits else "none"
    report(6, ok, f"full recall with accuracy >= 0.95 at {first}; mean accuracy n 1-10 {early:.3f}, "
                  f"n 40-50 {late:.3f}; recall at n=1 {c.recall[0]:.2f}", capsys)


@pytest.mark.slow
def test_criterion_7_planning(capsys):
    ok, parts = True, []
    carff = {}
    for arch in MULTI_SCENE:
        tr = load_trained(arch)
        m, imgs = tr.dataset.manifest, tr.dataset.images
        over = run_trials(m, imgs, ControllerConfig(kind="over"), tr.models, trials=30)
        under = run_trials(m, imgs, ControllerConfig(kind="under"), tr.models, trials=30)
        ok &= all(r.successes == (0 if r.hazard else 30) for r in over)
        ok &= all(r.successes == (30 if r.hazard else 0) for r in under)
        parts.append(f"{arch} over {[r.successes for r in over]} under {[r.successes for r in under]}")
        for n in N_LIST:
            carff[arch, n] = run_trials(m, imgs, ControllerConfig(n=n), tr.models, trials=30)
    # tuned n: the sample count whose worst cell is best, smallest n on ties
    tuned = max(N_LIST, key=lambda n: (min(r.successes for a in MULTI_SCENE for r in carff[a, n]), -n))
    worst = min(r.successes for a in MULTI_SCENE for r in carff[a, tuned])
    ok &= worst >= 28
    clear = {n: sum(r.successes for a in MULTI_SCENE for r in carff[a, n] if not r.hazard) for n in (10, 35)}
    ok &= clear[35] < clear[10]
    for a in MULTI_SCENE:
        parts.append(f"{a} carff " + " ".join(f"n={n}:{[r.successes for r in carff[a, n]]}" for n in N_LIST))
    parts.append(f"tuned n={tuned} worst cell {worst}/30; clear cells n=35 {clear[35]} vs n=10 {clear[10]}")
    report(7, ok, "; ".join(parts), capsys)


@pytest.mark.slow
def test_criterion_8_autoregressive_rollout(capsys):
    tr = load_trained("single_scene_intersection")
    m, models = tr.dataset.manifest, tr.models
    i = m.frame_index(0, 0, m.encoder_poses[0])
    roll = autoregressive_predict(tr.dataset.images[i], 9, models.pcvae, models.mdn, models.field, models.table,
                                  np.random.default_rng(0))
    ts = [s.state[1] for s in roll.steps]
    report(8, ts == list(range(1, 10)), f"localized timestamps {ts}", capsys)


# ----------------------------------------------------------------------------
# 9: reproducibility


def tree_bytes(root):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and not p.name.endswith(".run.json")}


def desk_regeneration_diffs(tmp_path):
    """Regenerate the desk dataset and reports from the cached checkpoints; names of outputs that differ."""
    from carff.cli import main

    cached = trained_dir("multi_scene_intersection")
    cfg = ["--config", str(TESTS / "desk_config.json")]
    models = [x for s in ("pcvae", "nerf", "mdn") for x in (f"--{s}", str(cached / f"{s}.ckpt"))]
    data = ["--data", str(cached / "data")]
    steps = {"data": ["gen", "--archetype", "multi_scene_intersection"],
             "trials.csv": ["trials", *data, *models], "curves.csv": ["curves", *data, *models],
             "psnr_table.csv": ["eval", "psnr-table", *data, *models],
             "svm.csv": ["eval", "svm", *data, "--pcvae", str(cached / "pcvae.ckpt")]}
    differ = []
    for name, step in steps.items():
        assert main(step + ["--out", str(tmp_path / name)] + cfg) == 0
        if name == "data":
            same = tree_bytes(tmp_path / name) == tree_bytes(cached / "data")
        else:
            same = (tmp_path / name).read_bytes() == (cached / "reports" / name).read_bytes()
        if not same:
            differ.append(f"desk {name}")
    return differ


@pytest.mark.slow
def test_criterion_9_reproducibility(tmp_path, capsys):
    from carff.cli import main

    cfg = str(TESTS / "quick_config.json")
    runs = []
    for k in (1, 2):
        out = tmp_path / f"run{k}"
        assert main(["pipeline", "--archetype", "multi_scene_intersection", "--out", str(out), "--config", cfg,
                     "--seed", "7"]) == 0
        runs.append(tree_bytes(out))
    differ = sorted(k for k in runs[0].keys() | runs[1].keys() if runs[0].get(k) != runs[1].get(k))
    differ += desk_regeneration_diffs(tmp_path / "desk")
    report(9, not differ, f"two reduced pipeline runs compared over {len(runs[0])} files (datasets, checkpoints, "
                          f"metrics, reports) and the desk dataset and reports regenerated from cached "
                          f"checkpoints; differing: {differ or 'none'}", capsys)
