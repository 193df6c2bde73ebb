"""Self-supervised training: view sampling, split, loss, schedule and the step loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .config import RunConfig, TrainConfig, substream
from .data import OrbitDataset
from .model import RayZer

log = logging.getLogger(__name__)

METRICS_HEADER = ["iter", "loss", "mse", "percep", "grad_norm", "lr", "seconds"]
SPLIT_MODES = ("train", "even", "random")


class TrainingDivergence(RuntimeError):
    def __init__(self, iteration: int, terms: dict):
        self.iteration = iteration
        self.terms = terms
        detail = ", ".join(f"{k}={v}" for k, v in terms.items())
        super().__init__(f"non-finite loss at iteration {iteration} ({detail})")


@dataclass
class SplitPlan:
    a: list  # scene-building views
    b: list  # supervision / target views

    def __post_init__(self):
        if set(self.a) & set(self.b):
            raise ValueError(f"split sets overlap: {sorted(set(self.a) & set(self.b))}")


def split_views(K: int, k_a: int, k_b: int, rng: Optional[np.random.Generator] = None,
                mode: str = "train") -> SplitPlan:
    """Partition positions 0..K-1 into an input set A and a target set B.

    ``train`` and ``random`` draw a uniform random partition. ``even`` places
    target ``i`` at ``floor((i + 0.5) * K / k_b)``, interleaving targets between
    inputs and keeping both ends as inputs whenever ``K > k_b``.
    """
    if K != k_a + k_b:
        raise ValueError(f"K={K} must equal K_A + K_B = {k_a} + {k_b}")
    if k_a < 1 or k_b < 1:
        raise ValueError("both sets need at least one view")
    if mode == "even":
        b = sorted({int(math.floor((i + 0.5) * K / k_b)) for i in range(k_b)})
    elif mode in ("train", "random"):
        if rng is None:
            raise ValueError(f"split mode {mode!r} needs an rng")
        b = sorted(int(v) for v in rng.choice(K, size=k_b, replace=False))
    else:
        raise ValueError(f"unknown split mode {mode!r}; choose from {SPLIT_MODES}")
    b_set = set(b)
    return SplitPlan([i for i in range(K) if i not in b_set], b)


def curriculum_range(it: int, total: int, start: tuple, end: tuple) -> tuple[int, int]:
    """Linear interpolation of the frame-distance range, rounded half up."""
    frac = min(max(it / total, 0.0), 1.0) if total > 0 else 1.0
    return tuple(int(math.floor(s + (e - s) * frac + 0.5)) for s, e in zip(start, end))


def sample_frame_window(seq_len: int, frame_range: tuple, K: int, rng: np.random.Generator) -> list:
    """K sorted frame indices spanning a random distance drawn from ``frame_range``.

    The first and last picks are the window endpoints; the K-2 interior frames
    are drawn uniformly without replacement.
    """
    lo, hi = frame_range
    if lo > hi:
        raise ValueError(f"invalid range {frame_range}")
    if lo < K - 1:
        raise ValueError(f"range {frame_range} cannot hold {K} distinct frames; need lo >= {K - 1}")
    if seq_len <= hi:
        raise ValueError(f"sequence of {seq_len} frames is too short for range {frame_range}; need at least {hi + 1}")
    dist = int(rng.integers(lo, hi + 1))
    start = int(rng.integers(0, seq_len - dist))
    inner = rng.choice(np.arange(start + 1, start + dist), size=K - 2, replace=False) if K > 2 else []
    return sorted([start, start + dist, *(int(v) for v in inner)])


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

_BINOMIAL = torch.tensor([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _downsample(x: Tensor) -> Tensor:
    """Separable 5-tap binomial blur then stride 2; x is (N, C, H, W)."""
    C = x.shape[1]
    k = _BINOMIAL.to(x)
    x = F.pad(x, (2, 2, 2, 2), mode="replicate")
    x = F.conv2d(x, k.view(1, 1, 1, 5).expand(C, 1, 1, 5), groups=C)
    x = F.conv2d(x, k.view(1, 1, 5, 1).expand(C, 1, 5, 1), groups=C)
    return x[..., ::2, ::2]


def gradient_loss(pred: Tensor, gt: Tensor, scales: int = 3) -> Tensor:
    """Per-image mean L1 gap between horizontal and vertical image differences,
    averaged over a Gaussian pyramid. Inputs (..., H, W, 3); output shape (...)."""
    lead = pred.shape[:-3]
    p = pred.reshape(-1, *pred.shape[-3:]).permute(0, 3, 1, 2)
    g = gt.reshape(-1, *gt.shape[-3:]).permute(0, 3, 1, 2)
    total = 0.0
    for level in range(scales):
        if level:
            p, g = _downsample(p), _downsample(g)
        dx = (p[..., :, 1:] - p[..., :, :-1]) - (g[..., :, 1:] - g[..., :, :-1])
        dy = (p[..., 1:, :] - p[..., :-1, :]) - (g[..., 1:, :] - g[..., :-1, :])
        total = total + dx.abs().mean((1, 2, 3)) + dy.abs().mean((1, 2, 3))
    return (total / scales).reshape(lead)


def photometric_loss(pred: Tensor, gt: Tensor, lam: float = 0.2, return_terms: bool = False):
    """Mean over target images of ``MSE + lam * gradient_loss``."""
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and target {tuple(gt.shape)} differ in shape")
    mse = ((pred - gt) ** 2).mean((-3, -2, -1)).mean()
    percep = gradient_loss(pred, gt).mean() if lam > 0 else torch.zeros((), dtype=pred.dtype)
    total = mse + lam * percep
    if return_terms:
        return total, {"mse": mse.detach(), "percep": percep.detach()}
    return total


def lr_at(it: int, cfg: TrainConfig) -> float:
    """Linear warmup 0 -> peak, then cosine decay peak -> final."""
    if it <= cfg.warmup_iters:
        return cfg.peak_lr * it / cfg.warmup_iters if cfg.warmup_iters else cfg.peak_lr
    frac = min((it - cfg.warmup_iters) / (cfg.total_iters - cfg.warmup_iters), 1.0)
    return cfg.final_lr + 0.5 * (cfg.peak_lr - cfg.final_lr) * (1 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


def make_optimizer(model: RayZer, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(
        model.parameters(), lr=0.0, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps, weight_decay=cfg.weight_decay
    )


def sample_batch(dataset: OrbitDataset, cfg: TrainConfig, it: int, rng: np.random.Generator,
                 scene_ids: Optional[list] = None):
    """Images (B, K, H, W, 3) plus per-sequence A/B index arrays (B, K_A), (B, K_B)."""
    scene_ids = scene_ids if scene_ids is not None else dataset.scene_ids("train")
    if cfg.curriculum:
        frame_range = curriculum_range(it, cfg.total_iters, cfg.range_start, cfg.range_end)
    else:
        frame_range = cfg.range_end
    K = cfg.num_views
    images, a_all, b_all = [], [], []
    for _ in range(cfg.batch_size):
        sid = scene_ids[int(rng.integers(len(scene_ids)))]
        seq, _ = dataset[sid]
        frames = sample_frame_window(len(seq), frame_range, K, rng)
        if cfg.unordered:
            frames = list(rng.permutation(frames))
        plan = split_views(K, cfg.num_input, cfg.num_target, rng, "train")
        images.append(seq[frames])
        a_all.append(plan.a)
        b_all.append(plan.b)
    return torch.from_numpy(np.stack(images)), torch.tensor(a_all), torch.tensor(b_all)


class Trainer:
    """Owns the model, optimizer and random streams for one training run."""

    def __init__(self, model: RayZer, dataset: OrbitDataset, run: RunConfig, start_iter: int = 0,
                 optimizer: Optional[torch.optim.Optimizer] = None):
        self.model = model
        self.dataset = dataset
        self.run_cfg = run
        self.cfg = run.train
        self.optimizer = optimizer or make_optimizer(model, self.cfg)
        self.iteration = start_iter
        self.history: list[dict] = []

    def _rng(self, it: int) -> np.random.Generator:
        # one stream per iteration keeps resumed runs on the same sample sequence
        return substream(self.run_cfg.seed, f"data/{it}")

    def train_step(self) -> dict:
        it = self.iteration
        cfg = self.cfg
        t0 = time.perf_counter()
        images, a_idx, b_idx = sample_batch(self.dataset, cfg, it, self._rng(it))
        self.model.train()
        out = self.model.forward_selfsup(images, a_idx, b_idx)
        gt = images[torch.arange(images.shape[0])[:, None], b_idx]
        loss, terms = photometric_loss(out.renders, gt, cfg.perceptual_weight, return_terms=True)
        if not torch.isfinite(loss):
            raise TrainingDivergence(it, {"loss": loss.item(), **{k: float(v) for k, v in terms.items()}})
        lr = lr_at(it, cfg)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        params = [p for p in self.model.parameters() if p.grad is not None]
        pre_norm = float(torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip))
        post_norm = float(torch.linalg.vector_norm(torch.stack([p.grad.norm() for p in params])))
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.step()
        self.iteration += 1
        metrics = {
            "iter": it,
            "loss": loss.item(),
            "mse": float(terms["mse"]),
            "percep": float(terms["percep"]),
            "grad_norm": post_norm,
            "grad_norm_preclip": pre_norm,
            "lr": lr,
            "seconds": time.perf_counter() - t0,
        }
        self.history.append(metrics)
        return metrics

    def run(self, until: Optional[int] = None, metrics_path=None, checkpoint_dir=None) -> list[dict]:
        """Step until ``until`` (default: total iterations), streaming metrics and checkpoints."""
        from .checkpoint import save_checkpoint

        until = self.cfg.total_iters if until is None else until
        writer, fh = None, None
        if metrics_path is not None:
            metrics_path = Path(metrics_path)
            new = not metrics_path.exists() or metrics_path.stat().st_size == 0
            fh = open(metrics_path, "a", newline="")
            writer = csv.writer(fh)
            if new:
                writer.writerow(METRICS_HEADER)
        try:
            while self.iteration < until:
                m = self.train_step()
                if writer is not None and m["iter"] % self.cfg.log_every == 0:
                    writer.writerow([m[k] if k == "iter" else repr(m[k]) for k in METRICS_HEADER])
                    fh.flush()
                if m["iter"] % 100 == 0:
                    log.info("iter %d loss %.5f lr %.2e", m["iter"], m["loss"], m["lr"])
                if checkpoint_dir is not None and self.iteration % self.cfg.checkpoint_every == 0:
                    save_checkpoint(Path(checkpoint_dir) / "last.ckpt", self.model, self.optimizer, self.iteration)
        finally:
            if fh is not None:
                fh.close()
        if checkpoint_dir is not None:
            save_checkpoint(Path(checkpoint_dir) / "last.ckpt", self.model, self.optimizer, self.iteration)
        return self.history
