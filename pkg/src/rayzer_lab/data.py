"""Synthetic orbit-video dataset: random sphere scenes rendered by analytic ray casting.

Each scene is filmed by a camera circling the origin at radius 1 with a fixed
per-scene elevation in [-20, 60] degrees, azimuth evenly spaced over a full
turn. Ground-truth cameras are stored for evaluation only.

On-disk layout::

    root/manifest.json
    root/scene_0000/meta.json
    root/scene_0000/frame_000.png ...
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from .geometry import CameraPose, Intrinsics, look_at, pluecker_rays

MANIFEST_FORMAT = "rayzer-lab-orbit/1"
ORBIT_RADIUS = 1.0
ELEVATION_RANGE = (-20.0, 60.0)
AMBIENT = 0.1


class DatasetError(OSError):
    pass


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    albedo: np.ndarray


@dataclass
class SceneSpec:
    seed: int
    spheres: list
    background: np.ndarray
    light_dir: np.ndarray


@dataclass
class SequenceMeta:
    scene_seed: int
    poses: np.ndarray  # (N, 3, 4) camera-to-world
    intrinsics: Intrinsics
    elevation_deg: float
    orbit_radius: float = ORBIT_RADIUS
    scene_id: Optional[int] = None

    @property
    def n_frames(self) -> int:
        return len(self.poses)

    def camera_pose(self, idx=slice(None)) -> CameraPose:
        return CameraPose.from_matrix(torch.from_numpy(self.poses[idx]))

    def azimuth_deg(self) -> np.ndarray:
        """Unwrapped azimuth of every camera center, starting in [0, 360)."""
        c = self.poses[:, :, 3]
        az = np.unwrap(np.arctan2(c[:, 1], c[:, 0]))
        return np.degrees(az - 2 * np.pi * np.floor(az[0] / (2 * np.pi)))


def make_scene(seed: int) -> SceneSpec:
    rng = np.random.default_rng(seed)
    spheres = []
    for _ in range(int(rng.integers(3, 9))):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        center = direction * 0.4 * rng.uniform() ** (1 / 3)
        spheres.append(Sphere(center, float(rng.uniform(0.05, 0.2)), rng.uniform(0.15, 1.0, size=3)))
    background = rng.uniform(0.0, 0.3, size=3)
    az, el = rng.uniform(0, 2 * np.pi), np.radians(rng.uniform(20, 80))
    light = np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
    return SceneSpec(seed, spheres, background, light)


def orbit_cameras(n_frames: int, elevation_deg: float, seed: int = 0, focal: float = 24.0,
                  width: int = 32, height: int = 32) -> SequenceMeta:
    """Look-at-origin cameras on the unit sphere, azimuth 0, 360/n, ... with z up."""
    if n_frames < 2:
        raise ValueError("an orbit needs at least 2 frames")
    lo, hi = ELEVATION_RANGE
    if not lo <= elevation_deg <= hi:
        raise ValueError(f"elevation {elevation_deg} outside [{lo}, {hi}]")
    az = np.radians(360.0 * np.arange(n_frames) / n_frames)
    el = math.radians(elevation_deg)
    centers = ORBIT_RADIUS * np.stack(
        [math.cos(el) * np.cos(az), math.cos(el) * np.sin(az), np.full_like(az, math.sin(el))], -1
    )
    poses = look_at(torch.from_numpy(centers)).matrix().numpy()
    return SequenceMeta(seed, poses, Intrinsics(focal, width, height), float(elevation_deg))


def ray_sphere_depth(origins: np.ndarray, dirs: np.ndarray, spheres) -> tuple[np.ndarray, np.ndarray]:
    """Nearest positive hit distance along unit ``dirs`` and the index of the hit sphere (-1 on miss)."""
    depth = np.full(dirs.shape[:-1], np.inf)
    hit = np.full(dirs.shape[:-1], -1)
    for k, sph in enumerate(spheres):
        oc = origins - sph.center
        b = np.sum(oc * dirs, -1)
        c = np.sum(oc * oc, -1) - sph.radius**2
        disc = b * b - c
        root = np.sqrt(np.maximum(disc, 0.0))
        near, far = -b - root, -b + root
        t = np.where(near > 0, near, far)
        ok = (disc >= 0) & (t > 0) & (t < depth)
        depth = np.where(ok, t, depth)
        hit = np.where(ok, k, hit)
    return depth, hit


def render_gt(scene: SceneSpec, pose: CameraPose, intr: Intrinsics) -> np.ndarray:
    """Lambertian + ambient shading of the nearest sphere per pixel, (H, W, 3) in [0, 1]."""
    rays = pluecker_rays(
        CameraPose(pose.rotation.double(), pose.translation.double()), intr
    ).numpy()
    dirs = rays[..., :3]
    origins = np.broadcast_to(pose.translation.double().numpy(), dirs.shape)
    depth, hit = ray_sphere_depth(origins, dirs, scene.spheres)
    img = np.broadcast_to(scene.background, dirs.shape).copy()
    for k, sph in enumerate(scene.spheres):
        mask = hit == k
        if not mask.any():
            continue
        p = origins[mask] + depth[mask, None] * dirs[mask]
        n = (p - sph.center) / sph.radius
        lambert = np.maximum(0.0, n @ scene.light_dir)
        img[mask] = lambert[:, None] * sph.albedo + AMBIENT * sph.albedo
    return np.clip(img, 0.0, 1.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def scene_seed(root_seed: int, scene_id: int) -> int:
    return int(np.random.SeedSequence([int(root_seed), int(scene_id)]).generate_state(1)[0])


def generate_sequence(seed: int, n_frames: int, width: int = 32, height: int = 32,
                      focal_ratio: float = 0.75, workers: int = 1):
    """Scene plus its rendered orbit: ``(uint8 images (N, H, W, 3), SequenceMeta)``."""
    scene = make_scene(seed)
    elevation = float(np.random.default_rng([seed, 1]).uniform(*ELEVATION_RANGE))
    meta = orbit_cameras(n_frames, elevation, seed, focal_ratio * width, width, height)

    def frame(i):
        return to_uint8(render_gt(scene, meta.camera_pose(i), meta.intrinsics))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            frames = list(pool.map(frame, range(n_frames)))
    else:
        frames = [frame(i) for i in range(n_frames)]
    return np.stack(frames), meta


def _scene_dir(root: Path, scene_id: int) -> Path:
    return root / f"scene_{scene_id:04d}"


def write_dataset(root, n_scenes: int, frames_per_scene: int, width: int = 32, height: int = 32,
                  focal_ratio: float = 0.75, test_scenes: int = 0, seed: int = 0, workers: int = 1) -> dict:
    """Render ``n_scenes`` orbits to ``root``; the last ``test_scenes`` are the test split."""
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    if not 0 <= test_scenes <= n_scenes:
        raise ValueError(f"test_scenes must be in [0, {n_scenes}]")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for sid in range(n_scenes):
        seed_s = scene_seed(seed, sid)
        images, meta = generate_sequence(seed_s, frames_per_scene, width, height, focal_ratio, workers)
        d = _scene_dir(root, sid)
        d.mkdir(exist_ok=True)
        for i, img in enumerate(images):
            Image.fromarray(img).save(d / f"frame_{i:03d}.png")
        meta_json = {
            "scene_id": sid,
            "seed": seed_s,
            "elevation_deg": meta.elevation_deg,
            "orbit_radius": meta.orbit_radius,
            "intrinsics": {"focal": meta.intrinsics.focal, "width": width, "height": height},
            "n_frames": frames_per_scene,
            "poses": [[float(v) for v in p.reshape(-1)] for p in meta.poses],
        }
        (d / "meta.json").write_text(json.dumps(meta_json, indent=1) + "\n")
        entries.append({"id": sid, "split": "test" if sid >= n_scenes - test_scenes else "train"})
    manifest = {
        "format": MANIFEST_FORMAT,
        "seed": seed,
        "frames_per_scene": frames_per_scene,
        "width": width,
        "height": height,
        "scenes": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise DatasetError(f"missing manifest: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"corrupt manifest {path}: {exc}") from exc
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DatasetError(f"{path}: unsupported format {manifest.get('format')!r}")
    return manifest


def read_sequence(root, scene_id: int):
    """Load ``(float32 images (N, H, W, 3) in [0, 1], SequenceMeta)`` for one scene."""
    d = _scene_dir(Path(root), scene_id)
    meta_path = d / "meta.json"
    if not meta_path.is_file():
        raise DatasetError(f"missing scene metadata: {meta_path}")
    try:
        raw = json.loads(meta_path.read_text())
        intr = raw["intrinsics"]
        poses = np.asarray(raw["poses"], dtype=np.float64).reshape(-1, 3, 4)
        n = int(raw["n_frames"])
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise DatasetError(f"corrupt scene metadata {meta_path}: {exc}") from exc
    if len(poses) != n:
        raise DatasetError(f"{meta_path}: {len(poses)} poses for {n} frames")
    frames = []
    for i in range(n):
        path = d / f"frame_{i:03d}.png"
        try:
            with Image.open(path) as im:
                frames.append(np.asarray(im.convert("RGB")))
        except OSError as exc:
            raise DatasetError(f"cannot read frame {path}: {exc}") from exc
    meta = SequenceMeta(
        int(raw["seed"]), poses, Intrinsics(float(intr["focal"]), int(intr["width"]), int(intr["height"])),
        float(raw["elevation_deg"]), float(raw["orbit_radius"]), int(raw["scene_id"]),
    )
    return np.stack(frames).astype(np.float32) / 255.0, meta


@dataclass
class OrbitDataset:
    """In-memory view of a dataset directory (or of sequences generated on the fly)."""

    sequences: dict = field(default_factory=dict)  # scene id -> (images, meta)
    splits: dict = field(default_factory=dict)  # scene id -> "train" | "test"

    @classmethod
    def load(cls, root) -> "OrbitDataset":
        manifest = read_manifest(root)
        ds = cls()
        for entry in manifest["scenes"]:
            sid = int(entry["id"])
            ds.sequences[sid] = read_sequence(root, sid)
            ds.splits[sid] = entry["split"]
        return ds

    @classmethod
    def generate(cls, n_scenes: int, frames: int, width: int = 32, height: int = 32,
                 focal_ratio: float = 0.75, test_scenes: int = 0, seed: int = 0) -> "OrbitDataset":
        """Same content as ``write_dataset`` followed by ``load``, without touching disk."""
        ds = cls()
        for sid in range(n_scenes):
            s = scene_seed(seed, sid)
            images, meta = generate_sequence(s, frames, width, height, focal_ratio)
            meta.scene_id = sid
            ds.sequences[sid] = (images.astype(np.float32) / 255.0, meta)
            ds.splits[sid] = "test" if sid >= n_scenes - test_scenes else "train"
        return ds

    def scene_ids(self, split: Optional[str] = None) -> list:
        return sorted(s for s in self.sequences if split is None or self.splits[s] == split)

    def __getitem__(self, scene_id):
        return self.sequences[scene_id]
