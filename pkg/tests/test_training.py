import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rayzer_lab.config import RunConfig, TrainConfig, preset_config
from rayzer_lab.data import OrbitDataset
from rayzer_lab.model import build_model
from rayzer_lab.training import (
    SplitPlan,
    Trainer,
    TrainingDivergence,
    curriculum_range,
    gradient_loss,
    lr_at,
    photometric_loss,
    sample_batch,
    sample_frame_window,
    split_views,
)


class TestSplit:
    def test_disjoint_cover_1000_draws(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            k_a = int(rng.integers(1, 20))
            k_b = int(rng.integers(1, 12))
            plan = split_views(k_a + k_b, k_a, k_b, rng)
            assert not set(plan.a) & set(plan.b)
            assert sorted(plan.a + plan.b) == list(range(k_a + k_b))
            assert (len(plan.a), len(plan.b)) == (k_a, k_b)

    def test_paper_sizes(self):
        plan = split_views(24, 16, 8, np.random.default_rng(1))
        assert (len(plan.a), len(plan.b)) == (16, 8)

    def test_two_singletons(self):
        plan = split_views(2, 1, 1, np.random.default_rng(2))
        assert sorted([plan.a, plan.b]) == [[0], [1]]

    def test_even_mode(self):
        plan = split_views(10, 5, 5, mode="even")
        assert plan.b == [1, 3, 5, 7, 9]
        assert len({b - a for a, b in zip(plan.b, plan.b[1:])}) == 1

    def test_even_mode_toy(self):
        plan = split_views(20, 12, 8, mode="even")
        assert plan.b == [1, 3, 6, 8, 11, 13, 16, 18]
        assert 0 in plan.a and 19 in plan.a

    def test_random_mode_seeded(self):
        a = split_views(20, 12, 8, np.random.default_rng(5), "random")
        b = split_views(20, 12, 8, np.random.default_rng(5), "random")
        assert a == b

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            split_views(10, 4, 4)

    def test_overlap_rejected(self):
        with pytest.raises(ValueError):
            SplitPlan([0, 1], [1, 2])


class TestCurriculum:
    def test_paper_endpoints(self):
        cfg = preset_config("paper").train
        assert curriculum_range(0, cfg.total_iters, cfg.range_start, cfg.range_end) == (24, 32)
        assert curriculum_range(cfg.total_iters, cfg.total_iters, cfg.range_start, cfg.range_end) == (48, 65)

    def test_midpoint(self):
        assert curriculum_range(50, 100, (0, 0), (10, 10)) == (5, 5)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 1000))
    def test_monotone_and_bounded(self, it):
        lo, hi = curriculum_range(it, 1000, (24, 32), (48, 65))
        lo2, hi2 = curriculum_range(min(it + 1, 1000), 1000, (24, 32), (48, 65))
        assert 24 <= lo <= lo2 <= 48 and 32 <= hi <= hi2 <= 65


class TestFrameWindow:
    def test_forced_distance(self):
        idx = sample_frame_window(10, (5, 5), 2, np.random.default_rng(0))
        assert idx[1] - idx[0] == 5

    def test_objaverse_range(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            idx = sample_frame_window(70, (50, 65), 20, rng)
            assert 50 <= idx[-1] - idx[0] <= 65
            assert idx == sorted(idx) and len(set(idx)) == 20
            assert idx[-1] < 70

    def test_full_consecutive_window(self):
        idx = sample_frame_window(30, (9, 9), 10, np.random.default_rng(2))
        assert idx == list(range(idx[0], idx[0] + 10))

    def test_too_short_names_minimum(self):
        with pytest.raises(ValueError, match="at least 66"):
            sample_frame_window(60, (50, 65), 20, np.random.default_rng(0))


class TestLoss:
    def test_identical_is_zero(self):
        x = torch.rand(2, 3, 16, 16, 3)
        assert float(photometric_loss(x, x, 0.2)) == 0.0

    def test_constant_offset_mse(self):
        x = torch.rand(2, 3, 16, 16, 3, dtype=torch.float64) * 0.8
        assert float(photometric_loss(x + 0.1, x, 0.0)) == pytest.approx(0.01, abs=1e-12)

    def test_gradient_term_ignores_constant_offset(self):
        x = torch.rand(1, 16, 16, 3, dtype=torch.float64) * 0.8
        assert float(gradient_loss(x + 0.1, x)) == pytest.approx(0.0, abs=1e-12)

    def test_gradient_term_oracle(self):
        """Single-scale value checked against a loop over pixel differences."""
        rng = np.random.default_rng(3)
        p, g = rng.random((8, 8, 3)), rng.random((8, 8, 3))
        dx = [abs((p[i, j + 1, c] - p[i, j, c]) - (g[i, j + 1, c] - g[i, j, c]))
              for i in range(8) for j in range(7) for c in range(3)]
        dy = [abs((p[i + 1, j, c] - p[i, j, c]) - (g[i + 1, j, c] - g[i, j, c]))
              for i in range(7) for j in range(8) for c in range(3)]
        got = gradient_loss(torch.from_numpy(p), torch.from_numpy(g), scales=1)
        assert float(got) == pytest.approx(np.mean(dx) + np.mean(dy), rel=1e-12)

    def test_weight_and_terms(self):
        rng = torch.Generator().manual_seed(0)
        p, g = torch.rand(2, 16, 16, 3, generator=rng), torch.rand(2, 16, 16, 3, generator=rng)
        total, terms = photometric_loss(p, g, 0.2, return_terms=True)
        assert float(total) == pytest.approx(float(terms["mse"] + 0.2 * terms["percep"]), rel=1e-6)
        assert TrainConfig().perceptual_weight == 0.2

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            photometric_loss(torch.zeros(1, 8, 8, 3), torch.zeros(1, 8, 4, 3))


class TestSchedule:
    def test_paper_values(self):
        cfg = preset_config("paper").train
        assert lr_at(0, cfg) == 0.0
        assert lr_at(cfg.warmup_iters, cfg) == pytest.approx(4e-4, rel=1e-12)
        assert lr_at(cfg.total_iters, cfg) == pytest.approx(1.5e-4, rel=1e-12)
        assert lr_at(cfg.warmup_iters // 2, cfg) == pytest.approx(2e-4)

    def test_cosine_midpoint_and_monotone(self):
        cfg = preset_config("paper").train
        mid = (cfg.warmup_iters + cfg.total_iters) // 2
        assert lr_at(mid, cfg) == pytest.approx((4e-4 + 1.5e-4) / 2)
        values = [lr_at(i, cfg) for i in range(cfg.warmup_iters, cfg.total_iters + 1, 500)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_paper_preset_hyperparameters(self):
        cfg = preset_config("paper").train
        assert (cfg.total_iters, cfg.batch_size, cfg.warmup_iters) == (50_000, 256, 3000)
        assert (cfg.grad_clip, cfg.beta1, cfg.beta2) == (1.0, 0.9, 0.95)


@pytest.fixture(scope="module")
def tiny_run():
    run = RunConfig().with_overrides([
        "train.num_input=3", "train.num_target=2", "train.range_start=[6,8]", "train.range_end=[8,10]",
        "train.total_iters=4", "train.warmup_iters=1", "train.batch_size=2",
    ])
    return run, OrbitDataset.generate(2, 16, seed=0)


class TestTrainer:
    def test_first_step_loss_reproducible(self, tiny_run):
        run, ds = tiny_run
        a = Trainer(build_model(run.model, 0), ds, run).train_step()
        b = Trainer(build_model(run.model, 0), ds, run).train_step()
        assert a["loss"] == b["loss"] and a["grad_norm"] == b["grad_norm"]

    def test_clip_reports_post_clip_norm(self, tiny_run):
        run, ds = tiny_run
        run = run.with_overrides(["train.grad_clip=1e-4"])
        m = Trainer(build_model(run.model, 0), ds, run).train_step()
        assert m["grad_norm_preclip"] > 1e-4
        assert m["grad_norm"] == pytest.approx(1e-4, rel=1e-3)

    def test_divergence_raises(self, tiny_run):
        run, ds = tiny_run
        model = build_model(run.model, 0)
        with torch.no_grad():
            model.patch_embed.weight.fill_(float("nan"))
        with pytest.raises(TrainingDivergence) as info:
            Trainer(model, ds, run).train_step()
        assert info.value.iteration == 0

    def test_resume_matches_uninterrupted(self, tiny_run, tmp_path):
        from rayzer_lab.checkpoint import load_checkpoint, restore_optimizer
        from rayzer_lab.training import make_optimizer

        run, ds = tiny_run
        full = Trainer(build_model(run.model, 0), ds, run)
        full.run(until=4)
        part = Trainer(build_model(run.model, 0), ds, run)
        part.run(until=2, checkpoint_dir=tmp_path)
        model, header, records = load_checkpoint(tmp_path / "last.ckpt")
        opt = make_optimizer(model, run.train)
        restore_optimizer(model, opt, header, records)
        resumed = Trainer(model, ds, run, start_iter=header["meta"]["iteration"], optimizer=opt)
        resumed.run(until=4)
        assert [h["lr"] for h in resumed.history] == [h["lr"] for h in full.history[2:]]
        # float32 storage round-trips exactly, so the resumed steps match
        assert [h["loss"] for h in resumed.history] == [h["loss"] for h in full.history[2:]]

    def test_metrics_csv(self, tiny_run, tmp_path):
        run, ds = tiny_run
        Trainer(build_model(run.model, 0), ds, run).run(until=2, metrics_path=tmp_path / "m.csv")
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "iter,loss,mse,percep,grad_norm,lr,seconds"
        assert len(lines) == 3

    def test_batch_indices(self, tiny_run):
        run, ds = tiny_run
        images, a, b = sample_batch(ds, run.train, 0, np.random.default_rng(0))
        assert images.shape == (2, 5, 32, 32, 3)
        for ai, bi in zip(a.tolist(), b.tolist()):
            assert sorted(ai + bi) == list(range(5))
