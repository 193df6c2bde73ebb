"""Camera and ray math: 6D rotations, SE(3) poses, Plücker ray maps, Slerp.

Conventions used throughout the package:

* ``CameraPose`` is camera-to-world. The camera center is the translation.
* Camera axes follow the OpenCV layout: x right, y down, z forward.
* Rays pass through pixel centers ``(u + 0.5, v + 0.5)``.
* A ray map stores ``(direction, moment)`` per pixel in the last dimension,
  shape ``(..., H, W, 6)``.

All functions accept leading batch dimensions and are differentiable in torch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import torch
from torch import Tensor

PARALLEL_TOL = 1e-9
ANTIPODAL_TOL = 1e-9


class DegenerateRotationError(ValueError):
    """Raised when a 6D rotation input has no well-defined Gram-Schmidt frame."""


class SlerpAmbiguityError(ValueError):
    """Raised when two rotations are half a turn apart and Slerp has no unique path."""


@dataclass
class CameraPose:
    """Camera-to-world rigid transform; ``rotation`` is (..., 3, 3), ``translation`` (..., 3)."""

    rotation: Tensor
    translation: Tensor

    @classmethod
    def identity(cls, batch_shape=(), dtype=torch.float64, device=None) -> "CameraPose":
        eye = torch.eye(3, dtype=dtype, device=device).expand(*batch_shape, 3, 3).clone()
        return cls(eye, torch.zeros(*batch_shape, 3, dtype=dtype, device=device))

    @classmethod
    def from_matrix(cls, m) -> "CameraPose":
        m = torch.as_tensor(m)
        return cls(m[..., :3, :3].clone(), m[..., :3, 3].clone())

    @property
    def center(self) -> Tensor:
        return self.translation

    def matrix(self) -> Tensor:
        """3x4 camera-to-world matrix ``[R | t]``."""
        return torch.cat([self.rotation, self.translation[..., None]], dim=-1)

    def __getitem__(self, idx) -> "CameraPose":
        return CameraPose(self.rotation[idx], self.translation[idx])


@dataclass
class Intrinsics:
    """Pinhole intrinsics with one focal length and a centered principal point.

    ``focal`` may be a python float or a tensor (batched, differentiable).
    """

    focal: Union[float, Tensor]
    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        if not isinstance(self.focal, Tensor) and not self.focal > 0:
            raise ValueError(f"focal must be positive, got {self.focal}")


def rotation_from_6d(r6: Tensor, strict: bool = True, eps: float = 1e-8) -> Tensor:
    """Map (..., 6) vectors to rotation matrices via Gram-Schmidt.

    The first three entries give the first column, the last three are
    orthogonalized against it to give the second; the third column is their
    cross product.

    With ``strict=True`` degenerate inputs (zero first vector, or a second
    vector parallel to the first) raise ``DegenerateRotationError``. With
    ``strict=False`` the norms are floored at ``eps`` instead, which keeps a
    training step alive.
    """
    r6 = torch.as_tensor(r6)
    if r6.shape[-1] != 6:
        raise ValueError(f"expected trailing dimension 6, got shape {tuple(r6.shape)}")
    a1, a2 = r6[..., :3], r6[..., 3:]
    n1 = torch.linalg.vector_norm(a1, dim=-1, keepdim=True)
    if strict:
        if not torch.isfinite(r6).all():
            raise DegenerateRotationError("6D rotation input contains non-finite values")
        n2 = torch.linalg.vector_norm(a2, dim=-1, keepdim=True)
        sine = torch.linalg.vector_norm(torch.cross(a1, a2, dim=-1), dim=-1, keepdim=True)
        if (n1 == 0).any():
            raise DegenerateRotationError("first 3-vector of the 6D rotation is zero")
        if (sine <= PARALLEL_TOL * n1 * n2).any():
            raise DegenerateRotationError("second 3-vector is zero or parallel to the first")
        b1 = a1 / n1
    else:
        b1 = a1 / n1.clamp_min(eps)
    u2 = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    n_u2 = torch.linalg.vector_norm(u2, dim=-1, keepdim=True)
    b2 = u2 / (n_u2 if strict else n_u2.clamp_min(eps))
    b3 = torch.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def rotation_to_6d(rotation: Tensor) -> Tensor:
    """Inverse of ``rotation_from_6d`` on SO(3): the first two columns, concatenated."""
    return torch.cat([rotation[..., :, 0], rotation[..., :, 1]], dim=-1)


def pose_params_to_pose(p: Tensor, strict: bool = True, eps: float = 1e-8) -> CameraPose:
    """Decode (..., 9) pose parameters (6D rotation, then translation)."""
    p = torch.as_tensor(p)
    if p.shape[-1] != 9:
        raise ValueError(f"expected trailing dimension 9, got shape {tuple(p.shape)}")
    return CameraPose(rotation_from_6d(p[..., :6], strict=strict, eps=eps), p[..., 6:])


def compose(a: CameraPose, b: CameraPose) -> CameraPose:
    """``a ∘ b``: apply ``b`` first, then ``a``."""
    rot = a.rotation @ b.rotation
    trans = (a.rotation @ b.translation[..., None])[..., 0] + a.translation
    return CameraPose(rot, trans)


def invert(a: CameraPose) -> CameraPose:
    rt = a.rotation.transpose(-1, -2)
    return CameraPose(rt, -(rt @ a.translation[..., None])[..., 0])


def intrinsics_matrix(intr: Intrinsics) -> Tensor:
    f = intr.focal
    if not isinstance(f, Tensor):
        f = torch.tensor(float(f), dtype=torch.float64)
    zero, one = torch.zeros_like(f), torch.ones_like(f)
    cx = torch.full_like(f, intr.width / 2)
    cy = torch.full_like(f, intr.height / 2)
    rows = [
        torch.stack([f, zero, cx], -1),
        torch.stack([zero, f, cy], -1),
        torch.stack([zero, zero, one], -1),
    ]
    return torch.stack(rows, -2)


def camera_directions(intr: Intrinsics, dtype=None, device=None) -> Tensor:
    """Unnormalized camera-frame directions through pixel centers, (..., H, W, 3)."""
    f = intr.focal
    if isinstance(f, Tensor):
        dtype = dtype or f.dtype
        device = device or f.device
    dtype = dtype or torch.float64
    v, u = torch.meshgrid(
        torch.arange(intr.height, dtype=dtype, device=device) + 0.5,
        torch.arange(intr.width, dtype=dtype, device=device) + 0.5,
        indexing="ij",
    )
    if isinstance(f, Tensor):
        f = f[..., None, None]
    x = (u - intr.width / 2) / f
    y = (v - intr.height / 2) / f
    x, y = torch.broadcast_tensors(x, y)
    return torch.stack([x, y, torch.ones_like(x)], dim=-1)


def pluecker_rays(pose: CameraPose, intr: Intrinsics) -> Tensor:
    """Pixel-aligned Plücker ray map, (..., H, W, 6) holding (direction, moment).

    ``pose`` may carry batch dims (..., 3, 3); a tensor focal must broadcast
    against them.
    """
    rot = pose.rotation
    dirs_cam = camera_directions(intr, dtype=rot.dtype, device=rot.device)
    # (..., 1, 1, 3, 3) @ (..., H, W, 3, 1)
    dirs = (rot[..., None, None, :, :] @ dirs_cam[..., None])[..., 0]
    dirs = dirs / torch.linalg.vector_norm(dirs, dim=-1, keepdim=True)
    origin = pose.translation[..., None, None, :].expand_as(dirs)
    moment = torch.cross(origin, dirs, dim=-1)
    return torch.cat([dirs, moment], dim=-1)


def rotation_geodesic_deg(a: Tensor, b: Tensor) -> Tensor:
    """Angle of the relative rotation ``aᵀb`` in degrees, in [0, 180].

    Uses ``atan2(sin, cos)`` of the relative rotation rather than a bare
    ``arccos`` of the trace, which loses precision near 0 and 180 degrees.
    """
    m = a.transpose(-1, -2) @ b
    tr = m[..., 0, 0] + m[..., 1, 1] + m[..., 2, 2]
    cos = ((tr - 1) / 2).clamp(-1.0, 1.0)
    axis = torch.stack(
        [m[..., 2, 1] - m[..., 1, 2], m[..., 0, 2] - m[..., 2, 0], m[..., 1, 0] - m[..., 0, 1]], -1
    )
    sin = torch.linalg.vector_norm(axis, dim=-1) / 2
    return torch.rad2deg(torch.atan2(sin, cos))


def rotation_to_quaternion(rotation: Tensor) -> Tensor:
    """(..., 3, 3) -> (..., 4) unit quaternion ``(w, x, y, z)`` with w >= 0."""
    m = rotation
    m00, m11, m22 = m[..., 0, 0], m[..., 1, 1], m[..., 2, 2]
    # Shepperd: pick the largest of the four squared components for stability.
    sq = torch.stack([1 + m00 + m11 + m22, 1 + m00 - m11 - m22, 1 - m00 + m11 - m22, 1 - m00 - m11 + m22], -1)
    best = sq.argmax(-1)
    cands = torch.stack(
        [
            torch.stack([sq[..., 0], m[..., 2, 1] - m[..., 1, 2], m[..., 0, 2] - m[..., 2, 0], m[..., 1, 0] - m[..., 0, 1]], -1),
            torch.stack([m[..., 2, 1] - m[..., 1, 2], sq[..., 1], m[..., 1, 0] + m[..., 0, 1], m[..., 0, 2] + m[..., 2, 0]], -1),
            torch.stack([m[..., 0, 2] - m[..., 2, 0], m[..., 1, 0] + m[..., 0, 1], sq[..., 2], m[..., 2, 1] + m[..., 1, 2]], -1),
            torch.stack([m[..., 1, 0] - m[..., 0, 1], m[..., 0, 2] + m[..., 2, 0], m[..., 2, 1] + m[..., 1, 2], sq[..., 3]], -1),
        ],
        -2,
    )
    q = torch.gather(cands, -2, best[..., None, None].expand(*best.shape, 1, 4))[..., 0, :]
    q = q / torch.linalg.vector_norm(q, dim=-1, keepdim=True)
    return torch.where(q[..., :1] < 0, -q, q)


def quaternion_to_rotation(q: Tensor) -> Tensor:
    q = q / torch.linalg.vector_norm(q, dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    rows = [
        torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ]
    return torch.stack(rows, -2)


def slerp_rotation(r0: Tensor, r1: Tensor, t: float) -> Tensor:
    """Constant-speed rotation interpolation along the shorter arc."""
    q0, q1 = rotation_to_quaternion(r0), rotation_to_quaternion(r1)
    dot = float((q0 * q1).sum())
    if abs(dot) <= ANTIPODAL_TOL:
        raise SlerpAmbiguityError("rotations are 180 degrees apart; Slerp path is not unique")
    if dot < 0:
        q1, dot = -q1, -dot
    dot = min(dot, 1.0)
    theta = math.acos(dot)
    if theta < 1e-12:
        q = q0 + t * (q1 - q0)
    else:
        s = math.sin(theta)
        q = (math.sin((1 - t) * theta) / s) * q0 + (math.sin(t * theta) / s) * q1
    return quaternion_to_rotation(q)


def slerp_pose(
    p0: CameraPose,
    p1: CameraPose,
    t: float,
    orbit_radius: float,
    orbit_center: Optional[Tensor] = None,
) -> CameraPose:
    """Interpolate two look-at cameras on a sphere.

    The rotation is the quaternion Slerp of the endpoint rotations; the camera
    is then placed on the sphere of ``orbit_radius`` around ``orbit_center``
    (origin by default) so that its optical axis passes through the center.
    ``t == 0`` and ``t == 1`` return the endpoints unchanged.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if orbit_radius <= 0:
        raise ValueError(f"orbit_radius must be positive, got {orbit_radius}")
    if t == 0.0:
        return CameraPose(p0.rotation.clone(), p0.translation.clone())
    if t == 1.0:
        return CameraPose(p1.rotation.clone(), p1.translation.clone())
    rot = slerp_rotation(p0.rotation, p1.rotation, t)
    if orbit_center is None:
        orbit_center = torch.zeros(3, dtype=rot.dtype)
    center = orbit_center.to(rot.dtype) - orbit_radius * rot[..., :, 2]
    return CameraPose(rot, center)


def look_at(center: Tensor, target: Optional[Tensor] = None, up=(0.0, 0.0, 1.0)) -> CameraPose:
    """Camera at ``center`` whose +z axis points at ``target`` and whose +y points away from ``up``."""
    center = torch.as_tensor(center, dtype=torch.float64)
    target = torch.zeros_like(center) if target is None else torch.as_tensor(target, dtype=center.dtype)
    up = torch.as_tensor(up, dtype=center.dtype).expand_as(center)
    fwd = target - center
    fwd = fwd / torch.linalg.vector_norm(fwd, dim=-1, keepdim=True)
    right = torch.cross(fwd, up, dim=-1)
    right = right / torch.linalg.vector_norm(right, dim=-1, keepdim=True)
    down = torch.cross(fwd, right, dim=-1)
    return CameraPose(torch.stack([right, down, fwd], dim=-1), center.clone())


def estimate_orbit(poses: CameraPose) -> tuple[Tensor, float]:
    """Point closest (least squares) to all optical axes, and mean camera distance to it.

    ``poses`` is a batch (N, ...) of cameras assumed to look at a common point.
    Falls back to the centroid of points one unit ahead of each camera when
    the axes are nearly parallel.
    """
    c = poses.translation.reshape(-1, 3).double()
    d = poses.rotation.reshape(-1, 3, 3)[..., :, 2].double()
    eye = torch.eye(3, dtype=torch.float64)
    proj = eye - d[:, :, None] * d[:, None, :]
    a = proj.sum(0)
    b = (proj @ c[:, :, None]).sum(0)[:, 0]
    evals = torch.linalg.eigvalsh(a)
    if evals[0] < 1e-6 * max(float(evals[-1]), 1e-12):
        target = (c + d).mean(0)
    else:
        target = torch.linalg.solve(a, b)
    radius = float(torch.linalg.vector_norm(c - target, dim=-1).mean())
    return target, radius
