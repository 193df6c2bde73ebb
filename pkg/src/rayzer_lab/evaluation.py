"""Evaluation protocols: predicted-pose novel view synthesis, copy-nearest
baseline, pose interpolation and frozen-backbone pose probing."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image
from torch import Tensor

from .config import EvalConfig, TrainConfig, substream
from .data import OrbitDataset, to_uint8
from .geometry import (
    CameraPose,
    Intrinsics,
    compose,
    estimate_orbit,
    invert,
    pluecker_rays,
    pose_params_to_pose,
    rotation_geodesic_deg,
    rotation_to_6d,
    slerp_pose,
)
from .model import RayZer
from .nn import MLP
from .training import SplitPlan, sample_frame_window, split_views

PSNR_CAP = 99.0
SSIM_WINDOW = 8
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
ROT_THRESHOLDS = (10.0, 20.0, 30.0)
TRANS_THRESHOLDS = (0.1, 0.2, 0.3)


class ExtrapolationError(ValueError):
    pass


class InformationLeak(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(a, b) -> float:
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(-10.0 * np.log10(mse), PSNR_CAP)


def ssim(a, b) -> float:
    """Mean SSIM over all valid 8x8 windows (uniform weights, population
    statistics), averaged over channels. Images are (H, W, C) in [0, 1]."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    win = (SSIM_WINDOW, SSIM_WINDOW)
    wa = sliding_window_view(a, win, axis=(0, 1))  # (H', W', C, 8, 8)
    wb = sliding_window_view(b, win, axis=(0, 1))
    mu_a, mu_b = wa.mean((-1, -2)), wb.mean((-1, -2))
    var_a = wa.var(axis=(-1, -2))
    var_b = wb.var(axis=(-1, -2))
    cov = (wa * wb).mean((-1, -2)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float((num / den).mean((0, 1)).mean())


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class NVSReport:
    mode: str
    num_input: int
    num_target: int
    rows: list = field(default_factory=list)  # (scene_id, psnr, ssim)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r[1] for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r[2] for r in self.rows])) if self.rows else float("nan")

    def summary(self) -> dict:
        return {
            "mode": self.mode,
            "num_input": self.num_input,
            "num_target": self.num_target,
            "scenes": len(self.rows),
            "psnr": self.mean_psnr,
            "ssim": self.mean_ssim,
        }

    def write(self, out_dir, name: str) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out_dir / f"{name}.csv", out_dir / f"{name}.json"
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scene_id", "psnr", "ssim"])
            for sid, p, s in self.rows:
                w.writerow([sid, repr(p), repr(s)])
        json_path.write_text(json.dumps(self.summary(), indent=2) + "\n")
        return csv_path, json_path


@dataclass
class PoseAccuracyReport:
    rotation: dict  # threshold (deg) -> fraction
    translation: dict  # threshold -> fraction
    n_views: int

    def summary(self) -> dict:
        out = {f"R@{int(k)}": v for k, v in self.rotation.items()}
        out.update({f"t@{k}": v for k, v in self.translation.items()})
        out["n_views"] = self.n_views
        return out


def save_strip(gt, pred, path) -> None:
    """Two-row PNG: ground-truth views on top, predictions below."""
    top = np.concatenate([to_uint8(_as_array(g)) for g in gt], 1)
    bottom = np.concatenate([to_uint8(_as_array(p)) for p in pred], 1)
    Image.fromarray(np.concatenate([top, bottom], 0)).save(path)


# ---------------------------------------------------------------------------
# predicted-pose novel view synthesis
# ---------------------------------------------------------------------------


def eval_window(n_frames: int, cfg: TrainConfig, scene_id: int, seed: int, mode: str):
    """Deterministic evaluation window and split for one scene (final curriculum range)."""
    rng = substream(seed, f"eval/{scene_id}")
    frames = sample_frame_window(n_frames, cfg.range_end, cfg.num_views, rng)
    plan = split_views(cfg.num_views, cfg.num_input, cfg.num_target, rng, mode)
    return frames, plan


def copy_nearest_baseline(frames: Sequence[int], plan: SplitPlan, renders_a: Tensor) -> Tensor:
    """For each target, the rendering of the input view nearest in frame index (ties -> lower index)."""
    picks = []
    for b in plan.b:
        dist = [(abs(frames[a] - frames[b]), frames[a], k) for k, a in enumerate(plan.a)]
        picks.append(min(dist)[2])
    return renders_a[picks]


@torch.no_grad()
def predict_views(model: RayZer, images: Tensor, plan: SplitPlan):
    """Renders of B (predicted poses), renders of A, and the camera prediction."""
    model.eval()
    cams, z = model.encode(images[None], torch.tensor([plan.a]))
    if model.trace.get("scene_views") != [list(plan.a)]:
        raise InformationLeak(f"scene built from views {model.trace.get('scene_views')}, expected {plan.a}")
    renders_b = model.render_views(z, cams, torch.tensor([plan.b]))[0]
    renders_a = model.render_views(z, cams, torch.tensor([plan.a]))[0]
    return renders_b, renders_a, cams


def nvs_reports(model: RayZer, dataset: OrbitDataset, mode: str, cfg: TrainConfig, seed: int = 0,
                split: str = "test", scene_ids: Optional[list] = None, strip_dir=None):
    """``(model report, copy-nearest report)`` over identical windows and splits."""
    scene_ids = dataset.scene_ids(split) if scene_ids is None else scene_ids
    if not scene_ids:
        raise ValueError(f"no scenes in split {split!r}")
    ours = NVSReport(mode, cfg.num_input, cfg.num_target)
    copy = NVSReport(mode, cfg.num_input, cfg.num_target)
    for sid in scene_ids:
        seq, _ = dataset[sid]
        frames, plan = eval_window(len(seq), cfg, sid, seed, mode)
        images = torch.from_numpy(seq[frames])
        renders_b, renders_a, _ = predict_views(model, images, plan)
        gt = images[plan.b]
        copied = copy_nearest_baseline(frames, plan, renders_a)
        ours.rows.append((sid, *_score(renders_b, gt)))
        copy.rows.append((sid, *_score(copied, gt)))
        if strip_dir is not None:
            Path(strip_dir).mkdir(parents=True, exist_ok=True)
            save_strip(gt, renders_b, Path(strip_dir) / f"scene_{sid:04d}_{mode}.png")
    return ours, copy


def eval_nvs(model, dataset, mode, cfg, seed=0, split="test", scene_ids=None, strip_dir=None) -> NVSReport:
    return nvs_reports(model, dataset, mode, cfg, seed, split, scene_ids, strip_dir)[0]


def _score(pred: Tensor, gt: Tensor) -> tuple[float, float]:
    ps = [psnr(p, g) for p, g in zip(pred, gt)]
    ss = [ssim(p, g) for p, g in zip(pred, gt)]
    return float(np.mean(ps)), float(np.mean(ss))


# ---------------------------------------------------------------------------
# pose interpolation
# ---------------------------------------------------------------------------


@torch.no_grad()
def render_pose(model: RayZer, z: Tensor, pose: CameraPose, focal: Tensor) -> Tensor:
    """Render one view (H, W, 3) of scene ``z`` (1, L, d) from an explicit pose."""
    cfg = model.cfg
    rays = pluecker_rays(pose, Intrinsics(focal, cfg.width, cfg.height))
    return model.render_view(z, ray_map=rays[None].to(z.dtype))[0]


def interpolated_pose(cams, i: int, j: int, t: float, orbit_center: Tensor, orbit_radius: float) -> CameraPose:
    p0 = CameraPose(cams.poses.rotation[0, i].double(), cams.poses.translation[0, i].double())
    p1 = CameraPose(cams.poses.rotation[0, j].double(), cams.poses.translation[0, j].double())
    pose = slerp_pose(p0, p1, t, orbit_radius, orbit_center)
    dtype = cams.poses.rotation.dtype
    return CameraPose(pose.rotation.to(dtype), pose.translation.to(dtype))


def interp_neighbors(frames_a: Sequence[int], frame_b: int) -> tuple[int, int]:
    before = [k for k, f in enumerate(frames_a) if f <= frame_b]
    after = [k for k, f in enumerate(frames_a) if f >= frame_b]
    if not before or not after:
        raise ExtrapolationError(f"target frame {frame_b} lies outside the input span {frames_a[0]}..{frames_a[-1]}")
    return before[-1], after[0]


@torch.no_grad()
def interp_eval(model: RayZer, dataset: OrbitDataset, cfg: TrainConfig, seed: int = 0, split: str = "test",
                scene_ids: Optional[list] = None, strip_dir=None) -> tuple[NVSReport, NVSReport]:
    """Render targets at poses Slerp-interpolated between neighbouring predicted input poses.

    Cameras and scene come from the input views only. Interpolation weights
    use ground-truth azimuths (constant-speed orbit); the orbit center and
    radius are fitted to the predicted input cameras. Returns
    ``(interpolation report, copy-nearest report)``.
    """
    if model.cfg.conditioning != "pluecker":
        raise ValueError("pose interpolation needs explicit ray conditioning")
    scene_ids = dataset.scene_ids(split) if scene_ids is None else scene_ids
    ours = NVSReport("interp", cfg.num_input, cfg.num_target)
    copy = NVSReport("interp", cfg.num_input, cfg.num_target)
    model.eval()
    for sid in scene_ids:
        seq, meta = dataset[sid]
        frames, plan = eval_window(len(seq), cfg, sid, seed, "even")
        frames_a = [frames[k] for k in plan.a]
        images_a = torch.from_numpy(seq[frames_a])
        cams, z = model.encode(images_a[None], torch.arange(len(frames_a))[None])
        renders_a = model.render_views(z, cams, torch.arange(len(frames_a))[None])[0]
        center, radius = estimate_orbit(cams.poses[0])
        az = meta.azimuth_deg()
        # only targets bracketed by two inputs are interpolated
        inner = [b for b in plan.b if frames_a[0] <= frames[b] <= frames_a[-1]]
        if not inner:
            continue
        plan = SplitPlan(plan.a, inner)
        preds = []
        for b in plan.b:
            fb = frames[b]
            i, j = interp_neighbors(frames_a, fb)
            t = 0.0 if i == j else float((az[fb] - az[frames_a[i]]) / (az[frames_a[j]] - az[frames_a[i]]))
            pose = interpolated_pose(cams, i, j, t, center, radius)
            preds.append(render_pose(model, z, pose, cams.focal[0]))
        preds = torch.stack(preds)
        gt = torch.from_numpy(seq[[frames[b] for b in plan.b]])
        copied = copy_nearest_baseline(frames, plan, renders_a)
        ours.rows.append((sid, *_score(preds, gt)))
        copy.rows.append((sid, *_score(copied, gt)))
        if strip_dir is not None:
            Path(strip_dir).mkdir(parents=True, exist_ok=True)
            save_strip(gt, preds, Path(strip_dir) / f"scene_{sid:04d}_interp.png")
    return ours, copy


# ---------------------------------------------------------------------------
# pose probing
# ---------------------------------------------------------------------------


def pose_accuracy(pred: CameraPose, gt: CameraPose, seq_index: Sequence[int], eps: float = 1e-8) -> PoseAccuracyReport:
    """Threshold accuracies of predicted relative poses.

    Rotation error is the geodesic angle. Translation error is
    ``|s * t_pred - t_gt| / max(|t_gt|, eps)`` where ``s`` is the least-squares
    scale aligning each sequence's predicted translations to ground truth.
    """
    rot_err = rotation_geodesic_deg(pred.rotation.double(), gt.rotation.double()).numpy()
    tp, tg = pred.translation.double().numpy(), gt.translation.double().numpy()
    seq_index = np.asarray(seq_index)
    trans_err = np.empty(len(tp))
    for s in np.unique(seq_index):
        m = seq_index == s
        den = float(np.sum(tp[m] * tp[m]))
        scale = float(np.sum(tp[m] * tg[m])) / den if den > eps else 1.0
        trans_err[m] = np.linalg.norm(scale * tp[m] - tg[m], axis=-1) / np.maximum(np.linalg.norm(tg[m], axis=-1), eps)
    return PoseAccuracyReport(
        {th: float(np.mean(rot_err < th)) for th in ROT_THRESHOLDS},
        {th: float(np.mean(trans_err < th)) for th in TRANS_THRESHOLDS},
        len(rot_err),
    )


@torch.no_grad()
def camera_features(model: RayZer, images: Tensor) -> tuple[Tensor, int]:
    """Frozen camera-token features p* (K, d) and the canonical index."""
    model.eval()
    cams = model.estimate_cameras(model.tokenize_images(images[None]), images.shape[0])
    return cams.camera_tokens[0].float(), cams.canonical


def _probe_samples(model, dataset, cfg, scene_ids, windows, seed, tag):
    feats, targets, seq_index = [], [], []
    for sid in scene_ids:
        seq, meta = dataset[sid]
        for w in range(windows):
            rng = substream(seed, f"{tag}/{sid}/{w}")
            frames = sample_frame_window(len(seq), cfg.range_end, cfg.num_views, rng)
            p_star, c = camera_features(model, torch.from_numpy(seq[frames]))
            gt = meta.camera_pose(frames)
            rel = compose(invert(gt[c]), gt)
            keep = [k for k in range(len(frames)) if k != c]
            pairs = torch.cat([p_star, p_star[c].expand_as(p_star)], -1)[keep]
            target = torch.cat([rotation_to_6d(rel.rotation), rel.translation], -1)[keep].float()
            feats.append(pairs)
            targets.append(target)
            seq_index += [f"{sid}/{w}"] * len(keep)
    return torch.cat(feats), torch.cat(targets), seq_index


def probe_pose(model: RayZer, dataset: OrbitDataset, cfg: TrainConfig, probe_cfg: EvalConfig = EvalConfig(),
               seed: int = 0, train_split: str = "train", test_split: str = "test") -> PoseAccuracyReport:
    """Fit a fresh two-layer head on frozen camera tokens to ground-truth relative poses.

    Trains on ``probe_cfg.probe_windows`` windows per ``train_split`` scene and
    reports accuracy on one window per ``test_split`` scene. The backbone is
    never updated.
    """
    train_ids, test_ids = dataset.scene_ids(train_split), dataset.scene_ids(test_split)
    if not train_ids or not test_ids:
        raise ValueError("probing needs labelled scenes in both the train and test split")
    x_tr, y_tr, _ = _probe_samples(model, dataset, cfg, train_ids, probe_cfg.probe_windows, seed, "probe-train")
    x_te, y_te, seq_te = _probe_samples(model, dataset, cfg, test_ids, 1, seed, "probe-test")
    d = model.cfg.dim
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(substream(seed, "probe").integers(2**31)))
        head = MLP(2 * d, d, 9)
    anchor = model.pose_anchor.float()
    opt = torch.optim.Adam(head.parameters(), lr=probe_cfg.probe_lr)
    for _ in range(probe_cfg.probe_steps):
        opt.zero_grad(set_to_none=True)
        loss = ((head(x_tr) + anchor - y_tr) ** 2).mean()
        loss.backward()
        opt.step()
    with torch.no_grad():
        pred = pose_params_to_pose(head(x_te) + anchor, strict=False)
        gt = pose_params_to_pose(y_te.double())
    return pose_accuracy(pred, gt, seq_te)
