"""Acceptance suite: one PASS/FAIL line per criterion.

Property criteria re-run their oracle tests in a timed subprocess so runtime
limits are checked as well. The overfit criteria share one training run.
"""
import copy
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from rayzer_lab.config import preset_config
from rayzer_lab.data import OrbitDataset
from rayzer_lab.evaluation import interp_eval, nvs_reports, probe_pose
from rayzer_lab.model import build_model
from rayzer_lab.training import Trainer

ROOT = Path(__file__).resolve().parent.parent
TRAIN_SCENES, HELD_OUT_SCENES, FRAMES = 8, 20, 70


@pytest.fixture
def report(capsys):
    def emit(n, name, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance {n}] {'PASS' if ok else 'FAIL'} {name}: {detail}")
        return ok

    return emit


def run_suite(nodes):
    t = time.perf_counter()
    out = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *nodes],
                         cwd=ROOT, capture_output=True, text=True)
    summary = out.stdout.strip().splitlines()[-1] if out.stdout.strip() else out.stderr[-200:]
    return out.returncode == 0, time.perf_counter() - t, summary


def test_1_gradient_suite(report):
    ok, secs, summary = run_suite(["tests/test_nn.py::TestGradCheck", "tests/test_model.py::test_full_loss_gradient_check"])
    assert report(1, "gradient checks", ok and secs < 300, f"{summary}; {secs:.0f}s (limit 300s)")


def test_2_geometry_suite(report):
    ok, secs, summary = run_suite(["tests/test_geometry.py"])
    assert report(2, "geometry", ok and secs < 60, f"{summary}; {secs:.0f}s (limit 60s)")


def test_3_information_isolation(report):
    ok, _, summary = run_suite(["tests/test_model.py::TestIsolation::test_scene_latent_ignores_target_pixels",
                                "tests/test_evaluation.py::TestProtocols::test_leak_guard"])
    assert report(3, "target pixels never reach the scene latent", ok, summary)


def test_4_split_curriculum_schedule(report):
    ok, _, summary = run_suite(["tests/test_training.py::TestSplit::test_disjoint_cover_1000_draws",
                                "tests/test_training.py::TestCurriculum::test_paper_endpoints",
                                "tests/test_training.py::TestSchedule::test_paper_values"])
    assert report(4, "split, curriculum and lr schedule", ok, summary)


def test_8_determinism_and_persistence(report):
    ok, _, summary = run_suite(["tests/test_checkpoint_config.py::test_round_trip_bit_exact",
                                "tests/test_training.py::TestTrainer::test_first_step_loss_reproducible",
                                "tests/test_data.py::TestDisk::test_regeneration_byte_identical"])
    assert report(8, "checkpoint, first step and dataset reproducibility", ok, summary)


def test_9_metric_oracles(report):
    ok, _, summary = run_suite(["tests/test_evaluation.py::TestMetrics::test_against_brute_force_100_pairs",
                                "tests/test_evaluation.py::TestMetrics::test_psnr_exactly_20_at_mse_001"])
    assert report(9, "psnr and ssim oracles", ok, summary)


@pytest.fixture(scope="session")
def overfit():
    run = preset_config("toy")
    assert (run.model.height, run.model.patch_size, run.model.dim, run.model.scene_tokens) == (32, 8, 64, 16)
    assert (run.model.camera_layers, run.model.scene_layers, run.model.render_layers) == (2, 2, 2)
    assert (run.train.total_iters, run.train.batch_size) == (2000, 4)
    ds = OrbitDataset.generate(TRAIN_SCENES + HELD_OUT_SCENES, FRAMES, focal_ratio=run.data.focal_ratio,
                               test_scenes=HELD_OUT_SCENES, seed=run.seed)
    assert len(ds.scene_ids("train")) == TRAIN_SCENES
    model = build_model(run.model, run.seed)
    initial = copy.deepcopy(model)
    trainer = Trainer(model, ds, run)
    t = time.perf_counter()
    trainer.run()
    return run, ds, model, initial, trainer.history, time.perf_counter() - t


def test_5_overfit(overfit, report):
    run, ds, model, _, history, secs = overfit
    loss = [h["loss"] for h in history]
    final = float(np.mean(loss[-100:]))
    with torch.no_grad():
        ours, copy_ = nvs_reports(model, ds, "even", run.train, seed=run.seed, split="train")
    gap = ours.mean_psnr - copy_.mean_psnr
    ok = final < 0.1 * loss[0] and gap >= 3.0 and secs < 1800
    assert report(5, "overfit", ok,
                  f"loss {loss[0]:.4f} -> {final:.4f} (ratio {final / loss[0]:.3f}, need < 0.1); "
                  f"held-out PSNR {ours.mean_psnr:.2f} vs copy {copy_.mean_psnr:.2f} "
                  f"(gap {gap:+.2f} dB, need >= 3); {secs:.0f}s")


def test_6_interpolation_beats_copy(overfit, report):
    run, ds, model, _, _, _ = overfit
    with torch.no_grad():
        ours, copy_ = interp_eval(model, ds, run.train, seed=run.seed, split="train")
    ok = ours.mean_psnr > copy_.mean_psnr
    assert report(6, "interpolation vs copy", ok, f"interp {ours.mean_psnr:.2f} dB vs copy {copy_.mean_psnr:.2f} dB")


def test_7_probe_trained_vs_random(overfit, report):
    run, ds, model, initial, _, _ = overfit
    assert len(ds.scene_ids("test")) >= 20
    trained = probe_pose(model, ds, run.train, run.eval, seed=run.seed)
    random = probe_pose(initial, ds, run.train, run.eval, seed=run.seed)
    a, b = trained.rotation[30.0], random.rotation[30.0]
    assert report(7, "pose probe R@30", a >= b, f"trained {a:.3f} vs random init {b:.3f} over {len(ds.scene_ids('test'))} held-out sequences")
