"""The pose-first self-supervised view synthesis network.

Pipeline for one batch of K unposed views:

1. ``tokenize_images``: patch tokens plus fused spatial / image-index embeddings.
2. ``estimate_cameras``: a transformer over image tokens and K camera tokens,
   then per-view relative pose (6D rotation + translation) and one shared focal.
3. ``fuse_ray_condition`` + ``reconstruct_scene``: Plücker rays of the input
   set A are fused with A's raw image tokens and compressed into L latent
   scene tokens.
4. ``render_view``: target rays attend to the scene tokens and are decoded to
   RGB patches.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import torch
from torch import Tensor, nn

from .config import ModelConfig
from .geometry import CameraPose, Intrinsics, pluecker_rays, pose_params_to_pose, rotation_to_6d
from .nn import (
    INIT_STD,
    MLP,
    DimensionError,
    Linear,
    TokenSet,
    Transformer,
    depthwise_init,
    patchify,
    sinusoidal_pe,
    spatial_pe,
    unpatchify,
)

IDENTITY_6D = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)


@dataclass
class CameraPrediction:
    poses: CameraPose  # (B, K) batched, camera-to-world in the canonical frame
    focal: Tensor  # (B,)
    camera_tokens: Tensor  # (B, K, d)
    pose_params: Tensor  # (B, K, 9)
    canonical: int

    def intrinsics(self, width: int, height: int) -> Intrinsics:
        return Intrinsics(self.focal, width, height)


@dataclass
class SelfSupOutput:
    renders: Tensor  # (B, K_B, H, W, 3)
    cameras: CameraPrediction
    scene: Tensor  # (B, L, d)


@lru_cache(maxsize=32)
def _patch_tags(views: int, h: int, w: int) -> tuple:
    return tuple(("patch", v, r, c) for v in range(views) for r in range(h) for c in range(w))


def _gather_views(x: Tensor, idx: Tensor) -> Tensor:
    """Select views per batch element: x (B, K, ...), idx (B, n) -> (B, n, ...)."""
    return x[torch.arange(x.shape[0], device=x.device)[:, None], idx]


class RayZer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d, s = cfg.dim, cfg.patch_size
        h, w = cfg.grid
        self.patch_embed = Linear(3 * s * s, d)
        self.pe_fuse = Linear(2 * d, d)
        self.register_buffer("spatial_pe", spatial_pe(h, w, d), persistent=False)

        self.camera_token = nn.Parameter(torch.empty(1, d))
        self.camera_estimator = Transformer(d, cfg.heads, cfg.camera_layers, cfg.mlp_ratio)
        self.pose_head = MLP(2 * d, d, 9)
        self.focal_head = MLP(d, d, 1)
        self.register_buffer("pose_anchor", torch.tensor(IDENTITY_6D + (0.0, 0.0, 0.0)), persistent=False)

        self.scene_tokens = nn.Parameter(torch.empty(cfg.scene_tokens, d))
        self.scene_reconstructor = Transformer(d, cfg.heads, cfg.scene_layers, cfg.mlp_ratio)
        self.render_decoder = Transformer(d, cfg.heads, cfg.render_layers, cfg.mlp_ratio)
        self.rgb_head = MLP(d, d, 3 * s * s)

        if cfg.conditioning == "pluecker":
            self.ray_embed_scene = Linear(6 * s * s, d)
            self.fuse = MLP(2 * d, d, d)
            self.ray_embed_target = Linear(6 * s * s, d)
        else:
            self.target_tokens = nn.Parameter(torch.empty(h * w, d))
            if cfg.conditioning == "se3-token":
                self.pose_embed = MLP(10, d, d)

        for p in (self.camera_token, self.scene_tokens, getattr(self, "target_tokens", None)):
            if p is not None:
                nn.init.trunc_normal_(p, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
        depthwise_init([self.camera_estimator, self.scene_reconstructor, self.render_decoder])
        # zero output layers: every view starts at the identity pose with focal = W
        with torch.no_grad():
            self.pose_head.fc2.weight.zero_()
            self.focal_head.fc2.weight.zero_()
        # token counts entering each transformer on the last forward pass, plus
        # the views whose pixels reached the scene reconstructor
        self.trace: dict = {}

    # -- stage 1 -------------------------------------------------------

    def canonical_index(self, num_views: int) -> int:
        return num_views // 2 if self.cfg.canonical == "middle-frame" else 0

    def index_pe(self, num_views: int, like: Tensor) -> Tensor:
        return sinusoidal_pe(torch.arange(num_views), self.cfg.dim, like.dtype).to(like.device)

    def tokenize_images(self, images: Tensor) -> TokenSet:
        """images (B, K, H, W, 3) in [0, 1] -> tokens (B, K*h*w, d)."""
        cfg = self.cfg
        if images.dim() != 5 or images.shape[2:] != (cfg.height, cfg.width, 3):
            raise DimensionError(
                f"expected images (B, K, {cfg.height}, {cfg.width}, 3), got {tuple(images.shape)}"
            )
        B, K = images.shape[:2]
        h, w = cfg.grid
        tokens = self.patch_embed(patchify(images, cfg.patch_size))  # (B, K, hw, d)
        sp = self.spatial_pe.to(tokens.dtype)[None].expand(K, -1, -1)
        ip = self.index_pe(K, tokens)[:, None].expand(-1, h * w, -1)
        tokens = tokens + self.pe_fuse(torch.cat([sp, ip], -1))
        return TokenSet(tokens.reshape(B, K * h * w, cfg.dim), list(_patch_tags(K, h, w)))

    # -- stage 2 -------------------------------------------------------

    def estimate_cameras(self, f: TokenSet, num_views: int) -> CameraPrediction:
        cfg = self.cfg
        x = f.data
        B, K = x.shape[0], num_views
        if x.shape[1] != K * cfg.tokens_per_view:
            raise DimensionError(f"{x.shape[1]} image tokens do not match {K} views of {cfg.tokens_per_view}")
        p = self.camera_token.to(x.dtype)[None] + self.index_pe(K, x)[None]
        p = p.expand(B, -1, -1)
        y = torch.cat([x, p], dim=1)
        self.trace["camera_estimator"] = y.shape[1]
        p_star = self.camera_estimator(y)[:, -K:]  # image-token outputs are discarded
        c = self.canonical_index(K)
        p_c = p_star[:, c : c + 1].expand(-1, K, -1)
        params = self.pose_head(torch.cat([p_star, p_c], -1)) + self.pose_anchor.to(x.dtype)
        poses = pose_params_to_pose(params, strict=False)
        is_canon = (torch.arange(K, device=x.device) == c)[None, :]
        eye = torch.eye(3, dtype=x.dtype, device=x.device)
        rot = torch.where(is_canon[..., None, None], eye, poses.rotation)
        trans = torch.where(is_canon[..., None], torch.zeros((), dtype=x.dtype), poses.translation)
        focal = cfg.width * torch.exp(self.focal_head(p_star[:, c])[..., 0])
        return CameraPrediction(CameraPose(rot, trans), focal, p_star, params, c)

    def ray_maps(self, cams: CameraPrediction, idx: Optional[Tensor] = None) -> Tensor:
        """Plücker ray maps (B, n, H, W, 6) for the selected views (all if ``idx`` is None)."""
        poses = cams.poses
        if idx is not None:
            poses = CameraPose(_gather_views(poses.rotation, idx), _gather_views(poses.translation, idx))
        intr = Intrinsics(cams.focal[:, None], self.cfg.width, self.cfg.height)
        return pluecker_rays(poses, intr)

    # -- stage 3 -------------------------------------------------------

    def fuse_ray_condition(self, f_a: Tensor, rays_a: Tensor) -> Tensor:
        """f_a (B, K_A*hw, d) raw image tokens, rays_a (B, K_A, H, W, 6) -> x_A (B, K_A*hw, d)."""
        r = self.ray_embed_scene(patchify(rays_a, self.cfg.patch_size)).flatten(1, 2)
        if r.shape[:2] != f_a.shape[:2]:
            raise DimensionError(f"{f_a.shape[1]} image tokens vs {r.shape[1]} ray tokens")
        return self.fuse(torch.cat([f_a, r], -1))

    def condition_tokens(self, cams: CameraPrediction, idx: Tensor) -> Tensor:
        """Per-view camera tokens for the non-ray conditioning modes, (B, n, d)."""
        if self.cfg.conditioning == "latent-camera":
            return _gather_views(cams.camera_tokens, idx)
        rot6 = rotation_to_6d(_gather_views(cams.poses.rotation, idx))
        W, H = self.cfg.width, self.cfg.height
        f = cams.focal[:, None].expand(-1, idx.shape[1])
        intr = torch.stack([f / W, f / H, torch.full_like(f, 0.5), torch.full_like(f, 0.5)], -1)
        return self.pose_embed(torch.cat([rot6, intr], -1))

    def reconstruct_scene(self, x_a: Tensor, extra: Optional[Tensor] = None) -> Tensor:
        """Learnable latent seed updated jointly with x_A; returns z* (B, L, d)."""
        B = x_a.shape[0]
        z = self.scene_tokens.to(x_a.dtype)[None].expand(B, -1, -1)
        parts = [z, x_a] if extra is None else [z, x_a, extra]
        y = torch.cat(parts, 1)
        self.trace["scene_reconstructor"] = y.shape[1]
        return self.scene_reconstructor(y)[:, : self.cfg.scene_tokens]

    # -- stage 4 -------------------------------------------------------

    def render_view(self, z: Tensor, ray_map: Optional[Tensor] = None, cond: Optional[Tensor] = None) -> Tensor:
        """z (N, L, d) with ray_map (N, H, W, 6) -> images (N, H, W, 3) in [0, 1].

        Non-ray conditioning modes pass ``cond`` (N, d) instead of a ray map.
        """
        cfg = self.cfg
        h, w = cfg.grid
        if cfg.conditioning == "pluecker":
            r = self.ray_embed_target(patchify(ray_map, cfg.patch_size))
            y = torch.cat([r, z], 1)
        else:
            r = self.target_tokens.to(z.dtype)[None].expand(z.shape[0], -1, -1)
            y = torch.cat([r, z, cond[:, None]], 1)
        self.trace["render_decoder"] = y.shape[1]
        r_star = self.render_decoder(y)[:, : h * w]
        rgb = torch.sigmoid(self.rgb_head(r_star))
        return unpatchify(rgb, cfg.patch_size, h, w)

    def render_views(self, z: Tensor, cams: CameraPrediction, idx: Tensor) -> Tensor:
        """Render views ``idx`` (B, n) of every batch element with the predicted cameras."""
        B, n = idx.shape
        zz = z[:, None].expand(-1, n, -1, -1).reshape(B * n, *z.shape[1:])
        if self.cfg.conditioning == "pluecker":
            rays = self.ray_maps(cams, idx).to(z.dtype)
            out = self.render_view(zz, ray_map=rays.reshape(B * n, *rays.shape[2:]))
        else:
            cond = self.condition_tokens(cams, idx)
            out = self.render_view(zz, cond=cond.reshape(B * n, -1))
        return out.reshape(B, n, *out.shape[1:])

    # -- full pass -----------------------------------------------------

    def encode(self, images: Tensor, a_idx: Tensor) -> tuple[CameraPrediction, Tensor]:
        """Cameras for all views and the scene latent from the views in ``a_idx``."""
        cfg = self.cfg
        B, K = images.shape[:2]
        a_idx = torch.as_tensor(a_idx, device=images.device).reshape(B, -1)
        f = self.tokenize_images(images)
        cams = self.estimate_cameras(f, K)
        f_views = f.data.reshape(B, K, cfg.tokens_per_view, cfg.dim)
        f_a = _gather_views(f_views, a_idx).flatten(1, 2)
        if cfg.conditioning == "pluecker":
            x_a = self.fuse_ray_condition(f_a, self.ray_maps(cams, a_idx).to(f_a.dtype))
            z = self.reconstruct_scene(x_a)
        else:
            z = self.reconstruct_scene(f_a, self.condition_tokens(cams, a_idx))
        self.trace["scene_views"] = a_idx.tolist()
        return cams, z

    def forward_selfsup(self, images: Tensor, a_idx, b_idx) -> SelfSupOutput:
        """Render the views ``b_idx`` from a scene built on ``a_idx``; cameras come from all views.

        ``a_idx``/``b_idx`` are index lists (shared across the batch) or (B, n) tensors.
        """
        B = images.shape[0]
        a_idx = _as_index(a_idx, B, images.device)
        b_idx = _as_index(b_idx, B, images.device)
        cams, z = self.encode(images, a_idx)
        renders = self.render_views(z, cams, b_idx)
        return SelfSupOutput(renders, cams, z)

    forward = forward_selfsup


def _as_index(idx, batch: int, device) -> Tensor:
    idx = torch.as_tensor(idx, dtype=torch.long, device=device)
    if idx.dim() == 1:
        idx = idx[None].expand(batch, -1)
    return idx


def build_model(cfg: ModelConfig, seed: int = 0) -> RayZer:
    """Construct with a private RNG so the global torch seed is untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return RayZer(cfg)
