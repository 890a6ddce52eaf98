"""Structure branch (pixel mixer, local and global transformer blocks), texture
branch and structure-texture fusion."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import geometry
from .bspline import teb_encode
from .errors import DimensionMismatch
from .nn_core import BatchNorm, Mlp, softmax


@dataclass(frozen=True)
class SebConfig:
    channels: int = 32
    stripe: tuple[int, int] = (4, 16)  # (short, long) side of a stripe window
    mlp_ratio: int = 2
    blocks: int = 1
    residual: bool = True
    distinct_keys: bool = False

    def __post_init__(self):
        if self.channels % 4:
            raise DimensionMismatch("channel count must be divisible by 4")


# ---------------------------------------------------------------- pixel mixer


def pixel_mixer(x: torch.Tensor) -> torch.Tensor:
    """Shift channel groups 0-3 by one pixel left, right, up and down.

    Works on ``(..., C, H, W)``; vacated border pixels become zero.
    """
    C = x.shape[-3]
    if C % 4:
        raise DimensionMismatch(f"channels ({C}) not divisible by 4")
    g = C // 4
    out = torch.zeros_like(x)
    out[..., 0 * g:1 * g, :, :-1] = x[..., 0 * g:1 * g, :, 1:]
    out[..., 1 * g:2 * g, :, 1:] = x[..., 1 * g:2 * g, :, :-1]
    out[..., 2 * g:3 * g, :-1, :] = x[..., 2 * g:3 * g, 1:, :]
    out[..., 3 * g:4 * g, 1:, :] = x[..., 3 * g:4 * g, :-1, :]
    return out


def pixelwise(mlp: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Apply a channel MLP at every pixel of ``(N, C, H, W)``."""
    return mlp(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class LocalTransformerBlock(nn.Module):
    def __init__(self, channels: int, mlp_ratio: int = 2, residual: bool = True):
        super().__init__()
        self.norm = BatchNorm(channels)
        self.mlp = Mlp([channels, channels * mlp_ratio, channels])
        self.residual = residual

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.norm.weight.shape[0]:
            raise DimensionMismatch(f"LTB expects (N, {self.norm.weight.shape[0]}, H, W)")
        y = pixelwise(self.mlp, pixel_mixer(self.norm(x)))
        return x + y if self.residual else y


# ---------------------------------------------------------------- stripe attention


def stripe_window_attention(x: torch.Tensor, wq: torch.Tensor, wv: torch.Tensor,
                            window: tuple[int, int], wk: torch.Tensor | None = None,
                            return_weights: bool = False):
    """Self-attention inside non-overlapping ``window = (wh, ww)`` tiles.

    ``x`` is ``(N, C, H, W)``; ``wq``/``wv`` (and optional ``wk``) are ``(C, C)``
    matrices applied as ``x @ w``. Without ``wk`` the keys are the queries.
    Inputs are zero padded up to a multiple of the window and padded
    positions are excluded as keys.
    """
    if x.dim() != 4:
        raise DimensionMismatch("expected (N, C, H, W)")
    N, C, H, W = x.shape
    for w in (wq, wv) + ((wk,) if wk is not None else ()):
        if w.shape != (C, C):
            raise DimensionMismatch(f"projection must be ({C}, {C}), got {tuple(w.shape)}")
    wh, ww = window
    Hp, Wp = -(-H // wh) * wh, -(-W // ww) * ww
    valid = torch.zeros(Hp, Wp, dtype=torch.bool, device=x.device)
    valid[:H, :W] = True
    if (Hp, Wp) != (H, W):
        x = F.pad(x, (0, Wp - W, 0, Hp - H))

    def windows(t):  # (N, C, Hp, Wp) -> (N * nw, wh * ww, C)
        t = t.reshape(N, C, Hp // wh, wh, Wp // ww, ww)
        return t.permute(0, 2, 4, 3, 5, 1).reshape(-1, wh * ww, C)

    tokens = windows(x)
    q = tokens @ wq
    k = q if wk is None else tokens @ wk
    v = tokens @ wv
    scores = q @ k.transpose(1, 2) / math.sqrt(C)
    key_ok = valid.reshape(Hp // wh, wh, Wp // ww, ww).permute(0, 2, 1, 3).reshape(1, -1, 1, wh * ww)
    scores = scores.reshape(N, -1, wh * ww, wh * ww).masked_fill(~key_ok, float("-inf"))
    attn = softmax(scores, dim=-1).reshape(-1, wh * ww, wh * ww)
    out = attn @ v
    out = out.reshape(N, Hp // wh, Wp // ww, wh, ww, C).permute(0, 5, 1, 3, 2, 4)
    out = out.reshape(N, C, Hp, Wp)[:, :, :H, :W]
    return (out, attn) if return_weights else out


class GlobalTransformerBlock(nn.Module):
    """Horizontal and vertical stripe attention, concatenated, projected, then an MLP."""

    def __init__(self, channels: int, stripe=(4, 16), mlp_ratio: int = 2,
                 residual: bool = True, distinct_keys: bool = False):
        super().__init__()
        C = channels
        self.stripe = tuple(stripe)
        self.wq_h = nn.Linear(C, C, bias=False)
        self.wv_h = nn.Linear(C, C, bias=False)
        self.wq_v = nn.Linear(C, C, bias=False)
        self.wv_v = nn.Linear(C, C, bias=False)
        if distinct_keys:
            self.wk_h = nn.Linear(C, C, bias=False)
            self.wk_v = nn.Linear(C, C, bias=False)
        else:
            self.wk_h = self.wk_v = None
        self.proj = nn.Linear(2 * C, C)
        self.mlp = Mlp([C, C * mlp_ratio, C])
        self.residual = residual

    def attend(self, x):
        short, long = self.stripe
        # nn.Linear stores W^T, so x @ W means x @ weight.T
        wk_h = None if self.wk_h is None else self.wk_h.weight.T
        wk_v = None if self.wk_v is None else self.wk_v.weight.T
        horiz = stripe_window_attention(x, self.wq_h.weight.T, self.wv_h.weight.T, (short, long), wk_h)
        vert = stripe_window_attention(x, self.wq_v.weight.T, self.wv_v.weight.T, (long, short), wk_v)
        return torch.cat([horiz, vert], dim=1)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.proj.out_features:
            raise DimensionMismatch(f"GTB expects (N, {self.proj.out_features}, H, W)")
        y = pixelwise(self.mlp, pixelwise(self.proj, self.attend(x)))
        return x + y if self.residual else y


class StructureBranch(nn.Module):
    """Each stage computes ``LTB(F) + GTB(F)`` from the same input."""

    def __init__(self, cfg: SebConfig):
        super().__init__()
        self.cfg = cfg
        self.local_blocks = nn.ModuleList(
            LocalTransformerBlock(cfg.channels, cfg.mlp_ratio, cfg.residual) for _ in range(cfg.blocks))
        self.global_blocks = nn.ModuleList(
            GlobalTransformerBlock(cfg.channels, cfg.stripe, cfg.mlp_ratio, cfg.residual,
                                   cfg.distinct_keys) for _ in range(cfg.blocks))

    def forward(self, x):
        for ltb, gtb in zip(self.local_blocks, self.global_blocks):
            x = ltb(x) + gtb(x)
        return x


# ---------------------------------------------------------------- texture branch


NEIGHBOR_OFFSETS = ((0, 0), (1, 0), (0, 1), (1, 1))


def cell_neighbors(u: torch.Tensor, width: int, height: int):
    """Corner sites of the latent cell containing each point of ``u`` (Q, 2).

    Returns integer sites ``(Q, 4, 2)`` ordered (x0,y0), (x1,y0), (x0,y1),
    (x1,y1) and area weights ``(Q, 4)``. Points outside the latent grid are
    assigned to the nearest border cell; their weights use the clamped point.
    """
    lo = u.new_zeros(2)
    hi = u.new_tensor([max(width - 2, 0), max(height - 2, 0)])
    base = torch.minimum(torch.maximum(torch.floor(u.detach()), lo), hi)
    top = u.new_tensor([width - 1, height - 1])
    sites = torch.stack([base + base.new_tensor(o) for o in NEIGHBOR_OFFSETS], dim=1)
    sites = torch.minimum(sites, top)
    uc = torch.minimum(torch.maximum(u, base), base + 1)
    fx, fy = (uc - base).unbind(-1)
    weights = torch.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], dim=-1)
    return sites.long(), weights


class TexturePass(NamedTuple):
    features: torch.Tensor   # (Q, 4, C) per-neighbour encodings
    weights: torch.Tensor    # (Q, 4) ensemble weights
    sites: torch.Tensor      # (Q, 4, 2) latent sites
    delta: torch.Tensor      # (Q, 4, 2) local grid in input pixels
    shape: torch.Tensor      # (Q, 12) pixel shape of the output->input map

    def aggregate(self) -> torch.Tensor:
        return (self.weights.unsqueeze(-1) * self.features).sum(dim=1)


class TextureBranch(nn.Module):
    """Coefficient, knot and dilation estimators plus the warped B-spline encoding."""

    def __init__(self, latent_dim: int, channels: int, degree: int = 3):
        super().__init__()
        self.coef = nn.Linear(latent_dim, channels)
        self.knots = nn.Linear(latent_dim, 2 * channels)
        self.dilation = nn.Linear(12, channels)
        self.degree = degree
        self.channels = channels

    def estimate(self, z_t, shape):
        return self.coef(z_t), self.knots(z_t), self.dilation(shape)

    def forward(self, z: torch.Tensor, out_points: torch.Tensor, hom: torch.Tensor) -> TexturePass:
        """``z`` is the ``(D, h, w)`` latent, ``out_points`` ``(Q, 2)`` output
        pixel coordinates and ``hom`` the ``(3, 3)`` output->input map."""
        D, h, w = z.shape
        if D != self.coef.in_features:
            raise DimensionMismatch(f"latent has {D} channels, estimators expect {self.coef.in_features}")
        pts = out_points.to(torch.float64)
        m = hom.to(torch.float64)
        u = geometry.apply_torch(m, pts)
        shape = geometry.pixel_shape_torch(m, pts)
        sites, weights = cell_neighbors(u, w, h)
        site_f = sites.to(torch.float64)
        delta = u.unsqueeze(1) - site_f
        # Jacobian of the input->output map at each latent site
        jac = geometry.jacobian_torch(torch.linalg.inv(m), site_f)
        flat = z.reshape(D, -1).T
        z_t = flat[sites[..., 1] * w + sites[..., 0]]
        dt = z.dtype
        c, k, d = self.estimate(z_t, shape.to(dt).unsqueeze(1))
        feats = teb_encode(c, k, delta.to(dt), jac.to(dt), d, self.degree)
        return TexturePass(feats, weights.to(dt), sites, delta.to(dt), shape.to(dt))


# ---------------------------------------------------------------- fusion


class FusionState(NamedTuple):
    similarity: torch.Tensor  # R (Q, K)
    index: torch.Tensor       # T (Q,)
    confidence: torch.Tensor  # S (Q,)


def cosine_similarity_matrix(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """``r_ij = q_i.k_j / (|q_i| |k_j|)`` in float64; zero-norm rows/cols give 0."""
    q = q.to(torch.float64)
    k = k.to(torch.float64)
    qn = q.norm(dim=-1, keepdim=True)
    kn = k.norm(dim=-1, keepdim=True)
    qs = torch.where(qn > 0, q / torch.where(qn > 0, qn, torch.ones_like(qn)), torch.zeros_like(q))
    ks = torch.where(kn > 0, k / torch.where(kn > 0, kn, torch.ones_like(kn)), torch.zeros_like(k))
    return (qs @ ks.T).clamp(-1.0, 1.0)


def fusion_state(q: torch.Tensor, k: torch.Tensor) -> FusionState:
    r = cosine_similarity_matrix(q, k)
    s, t = r.max(dim=1)
    # max() does not promise the first index on ties; argmax over equality does
    t = (r == s.unsqueeze(1)).to(torch.int8).argmax(dim=1)
    return FusionState(r, t, s)


class FusionModule(nn.Module):
    """Hard cosine retrieval of texture values into structure queries, scaled by confidence."""

    def __init__(self, query_dim: int, value_dim: int, hidden: int = 64):
        super().__init__()
        self.key_proj = nn.Linear(value_dim, query_dim, bias=False)
        self.ffn = Mlp([value_dim + query_dim, hidden, query_dim])

    def forward(self, queries: torch.Tensor, values: torch.Tensor, bypass: bool = False):
        """``queries`` (Q, D) from the structure branch, ``values`` (K, C) from the
        texture branch. Returns ``(F_STF, FusionState)``."""
        if queries.shape[-1] != self.key_proj.out_features or values.shape[-1] != self.key_proj.in_features:
            raise DimensionMismatch("fusion feature widths do not match configuration")
        if bypass or values.shape[0] == 0:
            empty = queries.new_zeros(queries.shape[0], 0, dtype=torch.float64)
            zeros = queries.new_zeros(queries.shape[0])
            return queries, FusionState(empty, zeros.long(), zeros.to(torch.float64))
        keys = self.key_proj(values)
        state = fusion_state(queries, keys)
        retrieved = values[state.index]
        agg = self.ffn(torch.cat([retrieved, queries], dim=-1))
        return queries + agg * state.confidence.to(queries.dtype).unsqueeze(-1), state
