"""Bias-free transformer building blocks and a finite-difference gradient checker.

Reverse-mode gradients come from torch autograd; ``grad_check`` is the
independent oracle that compares them against central differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

LN_EPS = 1e-6
INIT_STD = 0.02


class DimensionError(ValueError):
    pass


@dataclass
class TokenSet:
    """Token matrix ``data`` (..., N, d) plus one provenance tag per token.

    Tags are tuples: ``("patch", view, row, col)``, ``("camera", view)``,
    ``("scene", slot)`` or ``("ray", row, col)``.
    """

    data: Tensor
    tags: list = field(default_factory=list)

    def __post_init__(self):
        if self.data.shape[-2] < 1:
            raise DimensionError("a token set needs at least one token")
        if self.tags and len(self.tags) != self.data.shape[-2]:
            raise DimensionError(f"{len(self.tags)} tags for {self.data.shape[-2]} tokens")

    def __len__(self):
        return self.data.shape[-2]

    def select(self, mask: Sequence[bool]) -> "TokenSet":
        idx = [i for i, keep in enumerate(mask) if keep]
        return TokenSet(self.data[..., idx, :], [self.tags[i] for i in idx])


# ---------------------------------------------------------------------------
# functional primitives
# ---------------------------------------------------------------------------


def linear(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w`` with ``w`` stored as (in, out)."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {tuple(x.shape)} does not match weight {tuple(w.shape)}")
    return x @ w


def layer_norm(x: Tensor, gain: Optional[Tensor] = None, eps: float = LN_EPS) -> Tensor:
    return F.layer_norm(x, x.shape[-1:], gain, None, eps)


def attention(
    x: Tensor,
    w_qkv: Tensor,
    w_out: Tensor,
    q_scale: Tensor,
    k_scale: Tensor,
    heads: int,
) -> Tensor:
    """Full multi-head self-attention with QK-Norm.

    Queries and keys are layer-normalized per head (no gain), multiplied by a
    learnable per-head scalar, then dot products are scaled by 1/sqrt(head_dim).
    """
    *lead, n, d = x.shape
    if d % heads:
        raise DimensionError(f"dim {d} is not divisible by {heads} heads")
    hd = d // heads
    qkv = linear(x, w_qkv).reshape(*lead, n, 3, heads, hd)
    q, k, v = (qkv[..., i, :, :].transpose(-2, -3) for i in range(3))  # (..., heads, n, hd)
    q = layer_norm(q) * q_scale[:, None, None]
    k = layer_norm(k) * k_scale[:, None, None]
    logits = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
    out = torch.softmax(logits, dim=-1) @ v
    out = out.transpose(-2, -3).reshape(*lead, n, d)
    return linear(out, w_out)


def sinusoidal_pe(position, dim: int, dtype=torch.float32) -> Tensor:
    """Interleaved sin/cos embedding: entry 2i is sin(pos / 10000^(2i/dim)), 2i+1 the cosine."""
    if dim % 2:
        raise DimensionError(f"positional embedding dim must be even, got {dim}")
    pos = torch.as_tensor(position, dtype=torch.float64)
    if (pos < 0).any():
        raise ValueError("positions must be non-negative")
    freq = torch.pow(10000.0, -torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    angle = pos[..., None] * freq
    pe = torch.stack([torch.sin(angle), torch.cos(angle)], dim=-1).flatten(-2)
    return pe.to(dtype)


def spatial_pe(h: int, w: int, dim: int, dtype=torch.float32) -> Tensor:
    """(h*w, dim) grid embedding: row embedding in the first half, column in the second."""
    rows, cols = torch.meshgrid(torch.arange(h), torch.arange(w), indexing="ij")
    half = dim // 2
    return torch.cat(
        [sinusoidal_pe(rows.flatten(), half, dtype), sinusoidal_pe(cols.flatten(), half, dtype)], -1
    )


def patchify(image: Tensor, s: int) -> Tensor:
    """(..., H, W, C) -> (..., (H/s)*(W/s), s*s*C), patches in row-major order."""
    *lead, H, W, C = image.shape
    if H % s or W % s:
        raise DimensionError(f"patch size {s} does not divide image size {H}x{W}")
    h, w = H // s, W // s
    x = image.reshape(*lead, h, s, w, s, C).transpose(-4, -3)
    return x.reshape(*lead, h * w, s * s * C)


def unpatchify(patches: Tensor, s: int, h: int, w: int) -> Tensor:
    *lead, n, p = patches.shape
    if n != h * w or p % (s * s):
        raise DimensionError(f"cannot unpatchify {tuple(patches.shape)} into {h}x{w} patches of size {s}")
    C = p // (s * s)
    x = patches.reshape(*lead, h, w, s, s, C).transpose(-4, -3)
    return x.reshape(*lead, h * s, w * s, C)


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_in, d_out))
        nn.init.trunc_normal_(self.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)

    def forward(self, x):
        return linear(x, self.weight)


class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return layer_norm(x, self.gain)


class MLP(nn.Module):
    """Two bias-free linear layers with GELU in between."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.fc1 = Linear(d_in, d_hidden)
        self.fc2 = Linear(d_hidden, d_out)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise DimensionError(f"dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim)
        self.out = Linear(dim, dim)
        self.q_scale = nn.Parameter(torch.ones(heads))
        self.k_scale = nn.Parameter(torch.ones(heads))

    def forward(self, x):
        return attention(x, self.qkv.weight, self.out.weight, self.q_scale, self.k_scale, self.heads)


class TransformerLayer(nn.Module):
    """Pre-norm residual layer: ``x + attn(ln(x))`` then ``+ mlp(ln(.))``."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio * dim, dim)

    def residual_projections(self):
        return [self.attn.out.weight, self.mlp.fc2.weight]

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class Transformer(nn.Module):
    """Stack of full self-attention layers followed by a gain-only layer norm."""

    def __init__(self, dim: int, heads: int, depth: int, mlp_ratio: int = 4):
        super().__init__()
        if depth < 1:
            raise ValueError("a transformer block needs at least one layer")
        self.layers = nn.ModuleList(TransformerLayer(dim, heads, mlp_ratio) for _ in range(depth))
        self.norm = LayerNorm(dim)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return self.norm(x)


def depthwise_init(transformers: Sequence[Transformer]) -> None:
    """Rescale every residual output projection by 1/sqrt(2 * total layers)."""
    total = sum(len(t.layers) for t in transformers)
    scale = 1.0 / math.sqrt(2 * total)
    with torch.no_grad():
        for t in transformers:
            for layer in t.layers:
                for w in layer.residual_projections():
                    w.mul_(scale)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_checked: int
    per_input: list
    message: str = ""

    def __bool__(self):
        return self.passed


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tol: float = 1e-3,
    eps: float = 1e-4,
    atol: float = 1e-7,
    max_coords: Optional[int] = None,
    seed: int = 0,
    analytic: Optional[Sequence[Tensor]] = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``fn(*inputs)`` with central differences.

    ``inputs`` must be float64 leaf tensors with ``requires_grad``; they are
    perturbed in place and restored. With ``max_coords`` only that many
    randomly chosen entries of each input are differenced. The error of one
    entry is ``|a - n| / max(|a|, |n|, atol)``. Passing ``analytic`` replaces
    the autograd gradients (used for negative controls).
    """
    for x in inputs:
        if x.dtype != torch.float64:
            raise TypeError("grad_check runs at double precision; cast inputs to float64")
    out = fn(*inputs)
    if out.numel() != 1:
        raise DimensionError("grad_check needs a scalar-valued function")
    if not torch.isfinite(out):
        return GradCheckReport(math.inf, False, 0, [], f"non-finite function value {float(out)}")
    if analytic is None:
        grads = torch.autograd.grad(out, list(inputs), allow_unused=True)
        analytic = [torch.zeros_like(x) if g is None else g for x, g in zip(inputs, grads)]
    rng = np.random.default_rng(seed)
    per_input, n_checked, worst = [], 0, 0.0
    with torch.no_grad():
        for x, g in zip(inputs, analytic):
            flat, gflat = x.view(-1), g.reshape(-1)
            idx = np.arange(flat.numel())
            if max_coords is not None and flat.numel() > max_coords:
                idx = rng.choice(flat.numel(), size=max_coords, replace=False)
            err_x = 0.0
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = fn(*inputs).item()
                flat[i] = orig - eps
                f_minus = fn(*inputs).item()
                flat[i] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    return GradCheckReport(math.inf, False, n_checked, per_input, f"non-finite value at entry {i}")
                num = (f_plus - f_minus) / (2 * eps)
                a = gflat[i].item()
                err = abs(a - num) / max(abs(a), abs(num), atol)
                err_x = max(err_x, err)
                n_checked += 1
            per_input.append(err_x)
            worst = max(worst, err_x)
    passed = worst <= tol
    msg = "" if passed else f"max relative error {worst:.3e} exceeds {tol:.1e}"
    return GradCheckReport(worst, passed, n_checked, per_input, msg)
