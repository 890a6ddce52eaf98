"""Blind homography refinement with a learned transformation-error estimator.

The error estimator ``E`` scores an unwarped image; Phase 1 picks the best of
several candidate homographies and Phase 2 refines it by gradient descent on
``E(unwarp(I_w, m)) + alpha * |m - I|``.

Descent runs in a rescaled parameter space where a unit change of any of the
8 free entries moves canvas-scale points by roughly one pixel.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import geometry
from .dataset import WarpSample, bicubic_sample, warp_image
from .errors import DimensionMismatch, NonFiniteLoss
from .geometry import Homography, WarpConfig
from .model import Sten
from .nn_core import Adam, checkpoint_from_module, init_weights, l1_loss

log = logging.getLogger(__name__)

ESTIMATOR_SIZE = 96
IDENTITY_PARAMS = np.array([1, 0, 0, 0, 1, 0, 0, 0], dtype=np.float64)


class ErrorEstimator(nn.Module):
    """Strided conv net mapping a ``96 x 96`` RGB image to a nonnegative error.

    ``views`` is 1 or 8. With 8, :func:`estimate_error` averages the prediction over
    every flip/transpose of the input, which makes the score exactly invariant to them.
    """

    def __init__(self, width: int = 16, size: int = ESTIMATOR_SIZE, seed: int = 0, views: int = 1):
        super().__init__()
        if views not in (1, 8):
            raise ValueError(f"views must be 1 or 8, got {views}")
        self.size = size
        self.width = width
        self.views = views
        chans = [3, width, 2 * width, 2 * width, 2 * width]
        strides = [1, 2, 2, 2]
        self.convs = nn.ModuleList(nn.Conv2d(a, b, 3, stride=s, padding=1)
                                   for a, b, s in zip(chans[:-1], chans[1:], strides))
        cells = size // 8
        self.head = nn.Sequential(nn.Linear(2 * width * cells * cells, 64), nn.ReLU(), nn.Linear(64, 1))
        init_weights(self, seed)

    def forward(self, x):
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.shape[1:] != (3, self.size, self.size):
            raise DimensionMismatch(f"estimator expects (N, 3, {self.size}, {self.size}), got {tuple(x.shape)}")
        x = x - 0.5
        for conv in self.convs:
            x = F.relu(conv(x))
        return F.softplus(self.head(x.flatten(1))[:, 0])

    def arch(self) -> dict:
        return {"width": self.width, "size": self.size, "views": self.views}


def resize_bicubic(img: torch.Tensor, size: int) -> torch.Tensor:
    """Pixel-centre aligned bicubic resize of ``(3, H, W)`` to ``size x size``."""
    _, H, W = img.shape
    if (H, W) == (size, size):
        return img
    c = torch.arange(size, dtype=torch.float64) + 0.5
    ys, xs = torch.meshgrid(c * H / size - 0.5, c * W / size - 0.5, indexing="ij")
    return bicubic_sample(img, xs, ys)


def estimate_error(E: ErrorEstimator, image) -> torch.Tensor:
    """Scalar error for one ``(3, H, W)`` image; resized to the estimator input if needed."""
    img = torch.as_tensor(image, dtype=torch.float32)
    if img.dim() != 3 or img.shape[0] != 3:
        raise DimensionMismatch(f"expected (3, H, W), got {tuple(img.shape)}")
    img = resize_bicubic(img, E.size)
    if getattr(E, "views", 1) == 1:
        return E(img)[0]
    return E(dihedral(img.unsqueeze(0).expand(8, -1, -1, -1), torch.arange(8))).mean()


def matrix_norm(m) -> float | torch.Tensor:
    """Frobenius norm of the 8 free parameters' deviation from the identity."""
    if isinstance(m, Homography):
        return float(np.linalg.norm(m.params - IDENTITY_PARAMS))
    p = torch.as_tensor(m)
    p = p.reshape(-1)[:8] / (p.reshape(-1)[8] if p.numel() == 9 else 1.0)
    return (p - p.new_tensor(IDENTITY_PARAMS)).norm()


def param_scale(width: int, height: int) -> np.ndarray:
    s = float(max(width, height))
    return np.array([1 / s, 1 / s, 1, 1 / s, 1 / s, 1, 1 / s**2, 1 / s**2])


def params_to_matrix(p: torch.Tensor) -> torch.Tensor:
    return torch.cat([p, p.new_ones(1)]).reshape(3, 3)


# ---------------------------------------------------------------- unwarp + score


def coverage(src: torch.Tensor, width: int, height: int) -> torch.Tensor:
    """Fraction of a unit pixel footprint centred at each ``src`` point lying inside the image."""
    def axis(c, n):
        return ((c + 0.5).clamp(max=n - 0.5) - (c - 0.5).clamp(min=-0.5)).clamp(0, 1)

    return axis(src[..., 0], width) * axis(src[..., 1], height)


def masked_unwarp(sten: Sten, lr: torch.Tensor, m: torch.Tensor, out_shape, latents=None) -> torch.Tensor:
    """STEN output weighted by how much of each pixel's preimage lies inside the input.

    The weight is 1 inside, 0 outside and linear across the border pixel, so
    the result is continuous in ``m``. Fusion keys come from pixels whose
    preimage centre is inside.
    """
    H, W = out_shape
    ys, xs = torch.meshgrid(torch.arange(H, dtype=torch.float64), torch.arange(W, dtype=torch.float64),
                            indexing="ij")
    _, h, w = lr.shape
    src = geometry.apply_torch(m, torch.stack([xs, ys], -1))
    inside = src.detach()
    keys = ((inside[..., 0] > -0.5) & (inside[..., 0] < w - 0.5)
            & (inside[..., 1] > -0.5) & (inside[..., 1] < h - 0.5))
    weight = coverage(src, w, h)
    out = sten(lr, m, (H, W), key_mask=keys, latents=latents)
    return out * weight.to(out.dtype)


def cycle_residual(unwarped: np.ndarray, h_est: Homography, sample: WarpSample) -> float:
    """Re-warp an unwarped estimate with ``h_est`` and compare to the observed input.

    Mean absolute difference in 8-bit units over the pixels of the observed
    input that carry content (``sample.lr_mask``).
    """
    _, h, w = sample.lr.shape
    rewarped, _ = warp_image(np.clip(unwarped, 0, 1), geometry.invert(h_est), w, h)
    diff = np.abs(rewarped - sample.lr).mean(axis=0)
    return float(diff[sample.lr_mask].mean() * 255.0)


def displacement_error(h_est: Homography, h_true: Homography, width: int, height: int) -> float:
    """Mean distance in input pixels between where the two matrices send each output pixel."""
    pts = geometry.pixel_grid(width, height).reshape(-1, 2)
    return float(np.linalg.norm(geometry.apply(h_est, pts) - geometry.apply(h_true, pts), axis=-1).mean())


# ---------------------------------------------------------------- estimator training


@dataclass(frozen=True)
class EstimatorTrainConfig:
    perturbations: int = 8            # perturbed copies per sample (plus one exact)
    eps_range: tuple[float, float] = (0.0, 6.0)  # pixels
    eps_power: float = 2.0            # eps = lo + (hi - lo) * u**eps_power; > 1 favours small errors
    kind: str = "translation"         # "translation" or "full"
    full_fraction: float = 0.25       # share of the perturbation norm on non-translation terms
    target: str = "displacement"      # "displacement" or "cycle"
    augment: bool = True              # random flips and transposes; both targets are invariant to them
    views: int = 8                    # flip/transpose views averaged at inference
    steps: int = 8000
    batch_size: int = 16
    lr: float = 1e-3
    lr_halve_every: int = 0           # 0 keeps lr constant
    width: int = 16
    seed: int = 0


def perturb(h: Homography, eps: float, rng: np.random.Generator, kind: str, width: int, height: int,
            full_fraction: float = 0.25) -> Homography:
    """Move ``h`` by ``eps`` (pixel units) in a random direction of scaled parameter space."""
    direction = np.zeros(8)
    direction[[2, 5]] = rng.normal(size=2)
    direction[[2, 5]] /= np.linalg.norm(direction[[2, 5]])
    if kind == "full":
        other = rng.normal(size=6)
        direction[[0, 1, 3, 4, 6, 7]] = full_fraction * other / np.linalg.norm(other)
    elif kind != "translation":
        raise ValueError(f"unknown perturbation kind {kind!r}")
    return Homography.from_params(h.params + eps * direction * param_scale(width, height))


def build_estimator_set(sten: Sten, samples: Sequence[WarpSample], cfg: EstimatorTrainConfig):
    """Unwarped images and error targets for every (sample, perturbation).

    The ``"displacement"`` target is the mean pixel displacement between the
    perturbed and true matrices. ``"cycle"`` re-warps the unwarped image and
    measures its distance to the observed input; it is blind to the matrix
    wherever unwarp and re-warp cancel, so it mostly measures boundary bands
    and resampling blur.
    """
    if cfg.target not in ("displacement", "cycle"):
        raise ValueError(f"unknown estimator target {cfg.target!r}")
    rng = np.random.default_rng(cfg.seed)
    images, targets, eps_used = [], [], []
    sten.eval()
    for s in samples:
        _, H, W = s.hr.shape
        lr = torch.from_numpy(s.lr)
        with torch.no_grad():
            latents = sten.latents(lr)
        for j in range(cfg.perturbations + 1):
            lo, hi = cfg.eps_range
            eps = 0.0 if j == 0 else lo + (hi - lo) * float(rng.uniform()) ** cfg.eps_power
            h_est = perturb(s.homography, eps, rng, cfg.kind, W, H, cfg.full_fraction)
            with torch.no_grad():
                out = masked_unwarp(sten, lr, torch.tensor(h_est.m), (H, W), latents)
            images.append(resize_bicubic(out, ESTIMATOR_SIZE))
            if cfg.target == "cycle":
                targets.append(cycle_residual(out.numpy(), h_est, s))
            else:
                targets.append(displacement_error(h_est, s.homography, W, H))
            eps_used.append(eps)
    return torch.stack(images), torch.tensor(targets, dtype=torch.float32), np.array(eps_used)


def dihedral(images: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
    """Apply one of 8 flip/transpose combinations per square image; bit 0 flips x, bit 1 y, bit 2 transposes."""
    out = []
    for x, code in zip(images, codes.tolist()):
        if code & 1:
            x = x.flip(-1)
        if code & 2:
            x = x.flip(-2)
        if code & 4:
            x = x.transpose(-1, -2)
        out.append(x)
    return torch.stack(out)


def train_error_estimator(sten: Sten, samples: Sequence[WarpSample],
                          cfg: EstimatorTrainConfig = EstimatorTrainConfig(), data=None):
    """Fit ``E`` by L1 regression onto the configured error target; returns ``(E, history)``.

    ``data`` may pass a precomputed :func:`build_estimator_set` result.
    """
    images, targets, _ = data if data is not None else build_estimator_set(sten, samples, cfg)
    E = ErrorEstimator(cfg.width, seed=cfg.seed, views=cfg.views)
    opt = Adam(E.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed + 1)
    history = []
    E.train()
    for step in range(1, cfg.steps + 1):
        if cfg.lr_halve_every:
            opt.lr = cfg.lr * 0.5 ** ((step - 1) // cfg.lr_halve_every)
        idx = torch.from_numpy(rng.integers(len(targets), size=cfg.batch_size))
        batch = images[idx]
        if cfg.augment:
            batch = dihedral(batch, torch.from_numpy(rng.integers(8, size=cfg.batch_size)))
        opt.zero_grad()
        loss = l1_loss(E(batch), targets[idx])
        if not torch.isfinite(loss):
            raise NonFiniteLoss(f"estimator loss not finite at step {step}", {"step": step})
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
    E.eval()
    return E, history


def estimator_checkpoint(E: ErrorEstimator, step: int = 0, seed: int = 0):
    return checkpoint_from_module(E, E.arch(), step, seed, kind="estimator")


def estimator_from_checkpoint(ckpt) -> ErrorEstimator:
    E = ErrorEstimator(**ckpt.arch)
    E.load_state_dict(ckpt.state_dict())
    E.eval()
    return E


# ---------------------------------------------------------------- Algorithm


@dataclass(frozen=True)
class EstimationConfig:
    n: int = 16
    T: int = 50
    alpha: float = 0.05
    step_size: float = 1.0       # pixels, along the normalised gradient
    max_halvings: int = 10
    fd_step: float = 1e-2        # scaled-parameter units
    gradient: str = "reverse"    # "reverse" or "fd"
    candidates: WarpConfig = field(default_factory=lambda: WarpConfig(crop_range=(-4.0, 4.0)))

    def __post_init__(self):
        if self.n < 1 or self.T < 0 or self.alpha < 0:
            raise ValueError("need n >= 1, T >= 0, alpha >= 0")


@dataclass
class EstimationResult:
    homography: Homography
    candidate_errors: list
    selected: int
    losses: list                 # Phase-2 objective, starting value first
    halvings: list = field(default_factory=list)
    fallback: bool = False

    def report(self) -> dict:
        return {"matrix": self.homography.m.tolist(), "candidate_errors": self.candidate_errors,
                "selected": self.selected, "losses": self.losses, "halvings": self.halvings,
                "fallback": self.fallback}


def sample_candidates(n: int, cfg: WarpConfig, rng: np.random.Generator,
                      center=None) -> list[Homography]:
    """The identity followed by ``n - 1`` random draws from ``cfg``."""
    return [Homography.identity()] + [geometry.random_homography(cfg, rng, center) for _ in range(n - 1)]


class Objective:
    """``E(unwarp(I_w, m))`` with an optional regulariser, as a function of scaled parameters."""

    def __init__(self, image, E, sten: Sten, out_shape, alpha: float, base: Homography, latents=None):
        self.lr = torch.as_tensor(image, dtype=torch.float32)
        self.E = E
        self.sten = sten
        if latents is None:
            with torch.no_grad():
                latents = sten.latents(self.lr)
        self.latents = latents
        self.out_shape = tuple(out_shape)
        self.alpha = alpha
        self.base = torch.tensor(base.params)
        self.scale = torch.tensor(param_scale(self.out_shape[1], self.out_shape[0]))

    def matrix(self, theta: torch.Tensor) -> torch.Tensor:
        return params_to_matrix(self.base + theta * self.scale)

    def error(self, m: torch.Tensor) -> torch.Tensor:
        out = masked_unwarp(self.sten, self.lr, m, self.out_shape, self.latents)
        return self.E(out) if not isinstance(self.E, nn.Module) else estimate_error(self.E, out)

    def __call__(self, theta: torch.Tensor) -> torch.Tensor:
        m = self.matrix(theta)
        return self.error(m) + self.alpha * matrix_norm(m)


def _gradient(obj: Objective, theta: torch.Tensor, mode: str, fd_step: float):
    if mode == "reverse":
        th = theta.clone().requires_grad_(True)
        loss = obj(th)
        (g,) = torch.autograd.grad(loss, th)
        if torch.isfinite(g).all():
            return float(loss.detach()), g
    with torch.no_grad():
        loss = float(obj(theta))
        g = torch.zeros_like(theta)
        for i in range(theta.numel()):
            e = torch.zeros_like(theta)
            e[i] = fd_step
            g[i] = (float(obj(theta + e)) - float(obj(theta - e))) / (2 * fd_step)
    return loss, g


def self_estimate(image, candidates: Sequence[Homography], E, sten: Sten,
                  cfg: EstimationConfig = EstimationConfig(), out_shape=None) -> EstimationResult:
    """Candidate search followed by ``cfg.T`` backtracking descent steps.

    ``E`` is an :class:`ErrorEstimator` or any callable mapping an unwarped
    ``(3, H, W)`` tensor to a scalar tensor.
    """
    if len(candidates) < 1:
        raise ValueError("need at least one candidate")
    out_shape = tuple(out_shape) if out_shape is not None else tuple(np.asarray(image).shape[1:])
    sten.eval()
    if isinstance(E, nn.Module):
        E.eval()
    for p in sten.parameters():
        p.requires_grad_(False)
    try:
        with torch.no_grad():
            latents = sten.latents(torch.as_tensor(image, dtype=torch.float32))
        errors = []
        best, best_err = 0, math.inf
        for i, cand in enumerate(candidates):
            obj = Objective(image, E, sten, out_shape, 0.0, cand, latents)
            with torch.no_grad():
                err = float(obj.error(obj.matrix(torch.zeros(8, dtype=torch.float64))))
            errors.append(err)
            if err < best_err:
                best, best_err = i, err
        start = candidates[best]
        result = EstimationResult(start, errors, best, [])
        if cfg.T == 0:
            return result

        obj = Objective(image, E, sten, out_shape, cfg.alpha, start, latents)
        theta = torch.zeros(8, dtype=torch.float64)
        for it in range(cfg.T):
            loss, g = _gradient(obj, theta, cfg.gradient, cfg.fd_step)
            if not math.isfinite(loss) or not torch.isfinite(g).all():
                raise NonFiniteLoss(f"objective not finite at iteration {it}")
            if not result.losses:
                result.losses.append(loss)
            gn = float(g.norm())
            if gn == 0.0:
                break
            step = cfg.step_size
            accepted = False
            for k in range(cfg.max_halvings + 1):
                trial = theta - step * g / gn
                with torch.no_grad():
                    trial_loss = float(obj(trial))
                if math.isfinite(trial_loss) and trial_loss <= loss:
                    theta, accepted = trial, True
                    result.losses.append(trial_loss)
                    result.halvings.append(k)
                    break
                step /= 2
            if not accepted:
                break
        with torch.no_grad():
            result.homography = Homography(obj.matrix(theta).numpy())
        return result
    except NonFiniteLoss as exc:
        log.warning("self-estimation fell back to the Phase-1 candidate: %s", exc)
        return EstimationResult(candidates[best], errors, best, [], fallback=True)
    finally:
        for p in sten.parameters():
            p.requires_grad_(True)
