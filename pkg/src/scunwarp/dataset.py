"""Synthetic screen-content images, warped training pairs, resampling and metrics.

Images are ``(3, H, W)`` float32 arrays with values in ``[0, 1]``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch

from . import geometry
from .errors import EmptyDataset, EmptyMask
from .geometry import Homography, WarpConfig

BICUBIC_A = -0.5

# ---------------------------------------------------------------- resampling


def cubic_kernel(t: torch.Tensor, a: float = BICUBIC_A) -> torch.Tensor:
    at = t.abs()
    at2, at3 = at * at, at * at * at
    near = (a + 2) * at3 - (a + 3) * at2 + 1
    far = a * at3 - 5 * a * at2 + 8 * a * at - 4 * a
    return torch.where(at <= 1, near, torch.where(at < 2, far, torch.zeros_like(t)))


def bicubic_sample(img: torch.Tensor, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Separable cubic interpolation of ``img`` (C, H, W) at points ``(x, y)``.

    Indices outside the image are clamped to the border. Differentiable in
    both the image and the coordinates. Returns ``(C,) + x.shape``.
    """
    C, H, W = img.shape
    dt = torch.float64 if img.dtype == torch.float64 else torch.float32
    x = x.to(torch.float64)
    y = y.to(torch.float64)
    x0 = torch.floor(x.detach())
    y0 = torch.floor(y.detach())
    fx, fy = x - x0, y - y0
    flat = img.reshape(C, -1)
    out = 0
    for j in range(-1, 3):
        wy = cubic_kernel(fy - j).to(dt)
        yi = (y0 + j).clamp(0, H - 1).long()
        row = 0
        for i in range(-1, 3):
            wx = cubic_kernel(fx - i).to(dt)
            xi = (x0 + i).clamp(0, W - 1).long()
            row = row + wx * flat[:, (yi * W + xi).reshape(-1)].reshape((C,) + x.shape)
        out = out + wy * row
    return out.to(img.dtype)


def bicubic_resample(img: np.ndarray, point) -> np.ndarray:
    """Value of ``img`` (C, H, W) at a single continuous point ``(x, y)``."""
    t = torch.from_numpy(np.asarray(img, dtype=np.float64))
    x, y = (torch.tensor([float(v)], dtype=torch.float64) for v in point)
    return bicubic_sample(t, x, y)[:, 0].numpy()


def warp_image(img: np.ndarray, out_to_src: Homography, out_w: int, out_h: int,
               fill: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-map every output pixel through ``out_to_src`` and sample bicubically.

    Returns the float32 image and the boolean validity mask; invalid pixels
    hold ``fill``.
    """
    img = np.asarray(img, dtype=np.float64)
    _, H, W = img.shape
    m = out_to_src.m
    grid = geometry.pixel_grid(out_w, out_h)
    x, y = grid[..., 0], grid[..., 1]
    w = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    ok = w > geometry.DENOM_EPS
    w = np.where(ok, w, 1.0)
    src = np.stack([(m[0, 0] * x + m[0, 1] * y + m[0, 2]) / w,
                    (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / w], axis=-1)
    mask = ok & geometry.inside_rect(src, W, H)
    src = np.where(mask[..., None], src, 0.0)
    vals = bicubic_sample(torch.from_numpy(img), torch.from_numpy(src[..., 0]),
                          torch.from_numpy(src[..., 1])).numpy()
    vals = np.where(mask[None], vals, fill)
    return vals.astype(np.float32), mask


# ---------------------------------------------------------------- pairs


@dataclass
class WarpSample:
    """``lr`` is the warped observation, ``hr`` the ground truth and
    ``homography`` maps HR pixel coordinates to LR pixel coordinates.
    ``mask`` marks HR pixels that land inside the LR image; ``lr_mask`` marks
    LR pixels whose preimage lies inside the HR image."""

    lr: np.ndarray
    hr: np.ndarray
    homography: Homography
    mask: np.ndarray
    lr_mask: np.ndarray
    family: str = "custom"
    scale: float = 1.0


def synthesize_pair(hr: np.ndarray, h: Homography, dst_w: int | None = None,
                    dst_h: int | None = None, family: str = "custom") -> WarpSample:
    """Render ``I_lr(y) = I_hr(h^-1(y))`` on a ``dst_w x dst_h`` canvas."""
    _, H, W = hr.shape
    dst_w = W if dst_w is None else dst_w
    dst_h = H if dst_h is None else dst_h
    h_inv = geometry.invert(h)
    lr, lr_mask = warp_image(hr, h_inv, dst_w, dst_h)
    mask = geometry.valid_region_mask(h_inv, dst_w, dst_h, W, H)
    scale = 1.0 / math.sqrt(abs(np.linalg.det(geometry.jacobian_analytic(h, [(W - 1) / 2, (H - 1) / 2]))))
    return WarpSample(lr, np.asarray(hr, dtype=np.float32), h, mask, lr_mask, family, scale)


def downscale_homography(factor: float) -> Homography:
    """Pixel-centre aligned axis scaling from HR to LR coordinates."""
    s = 1.0 / factor
    off = 0.5 * s - 0.5
    return Homography([[s, 0, off], [0, s, off], [0, 0, 1]])


GENERAL_WARP = WarpConfig(scale_range=(0.45, 0.9), rotation_range=(-0.35, 0.35),
                          projective_range=(-1.5e-3, 1.5e-3), crop_range=(-4.0, 4.0))
TRANSLATION_WARP = WarpConfig(crop_range=(-4.0, 4.0))
FAMILIES = ("x2", "homography", "translation", "identity")


def make_sample(hr: np.ndarray, family: str, rng: np.random.Generator,
                warp: WarpConfig | None = None) -> WarpSample:
    _, H, W = hr.shape
    if family == "x2":
        return synthesize_pair(hr, downscale_homography(2.0), W // 2, H // 2, family)
    if family == "identity":
        return synthesize_pair(hr, Homography.identity(), W, H, family)
    if family == "translation":
        h = geometry.random_homography(warp or TRANSLATION_WARP, rng)
        return synthesize_pair(hr, h, W, H, family)
    if family == "homography":
        h = geometry.random_homography(warp or GENERAL_WARP, rng, center=((W - 1) / 2, (H - 1) / 2))
        h, dw, dh = geometry.fit_to_canvas(h, W, H)
        return synthesize_pair(hr, h, dw, dh, family)
    raise ValueError(f"unknown warp family {family!r}")


# ---------------------------------------------------------------- SCI-toy content

_FONT = {
    "A": ("01110", "10001", "10001", "11111", "10001", "10001", "10001"),
    "B": ("11110", "10001", "10001", "11110", "10001", "10001", "11110"),
    "C": ("01111", "10000", "10000", "10000", "10000", "10000", "01111"),
    "E": ("11111", "10000", "10000", "11110", "10000", "10000", "11111"),
    "F": ("11111", "10000", "10000", "11110", "10000", "10000", "10000"),
    "H": ("10001", "10001", "10001", "11111", "10001", "10001", "10001"),
    "K": ("10001", "10010", "10100", "11000", "10100", "10010", "10001"),
    "L": ("10000", "10000", "10000", "10000", "10000", "10000", "11111"),
    "M": ("10001", "11011", "10101", "10101", "10001", "10001", "10001"),
    "N": ("10001", "11001", "10101", "10011", "10001", "10001", "10001"),
    "O": ("01110", "10001", "10001", "10001", "10001", "10001", "01110"),
    "P": ("11110", "10001", "10001", "11110", "10000", "10000", "10000"),
    "R": ("11110", "10001", "10001", "11110", "10100", "10010", "10001"),
    "S": ("01111", "10000", "10000", "01110", "00001", "00001", "11110"),
    "T": ("11111", "00100", "00100", "00100", "00100", "00100", "00100"),
    "V": ("10001", "10001", "10001", "10001", "10001", "01010", "00100"),
    "X": ("10001", "10001", "01010", "00100", "01010", "10001", "10001"),
    "Z": ("11111", "00001", "00010", "00100", "01000", "10000", "11111"),
    "0": ("01110", "10011", "10101", "10101", "11001", "10001", "01110"),
    "1": ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    "2": ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    "7": ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    "+": ("00000", "00100", "00100", "11111", "00100", "00100", "00000"),
    "=": ("00000", "00000", "11111", "00000", "11111", "00000", "00000"),
}
GLYPHS = {k: np.array([[c == "1" for c in row] for row in v]) for k, v in _FONT.items()}
GLYPH_KEYS = sorted(GLYPHS)

DEFAULT_PALETTE = ((0.96, 0.96, 0.96), (1.0, 1.0, 1.0), (0.93, 0.95, 1.0),
                   (0.12, 0.13, 0.16), (0.98, 0.94, 0.86))


@dataclass(frozen=True)
class SciToyConfig:
    canvas: tuple[int, int] = (96, 96)  # (width, height)
    glyph_density: float = 1.0
    shape_density: float = 1.0
    palette: tuple = DEFAULT_PALETTE
    frame: int = 0
    seed: int = 0

    def __post_init__(self):
        if min(self.canvas) < 64:
            raise ValueError("canvas must be at least 64x64")


def _contrast(bg: np.ndarray, rng) -> np.ndarray:
    lum = bg.mean()
    base = rng.uniform(0.0, 0.35, 3) if lum > 0.5 else rng.uniform(0.7, 1.0, 3)
    if rng.random() < 0.3:  # saturated accent colour
        base[rng.integers(3)] = 0.85 if lum > 0.5 else 0.25
    return base


def gen_sci_toy(cfg: SciToyConfig) -> np.ndarray:
    """Flat background with rectangles, line segments and bitmap text, all hard edged."""
    rng = np.random.default_rng(cfg.seed)
    W, H = cfg.canvas
    bg = np.array(cfg.palette[rng.integers(len(cfg.palette))], dtype=np.float64)
    img = np.empty((H, W, 3))
    img[:] = bg
    area_units = W * H / (96 * 96)

    n_rect = rng.poisson(3 * cfg.shape_density * area_units) if cfg.shape_density > 0 else 0
    for _ in range(n_rect):
        w, h = rng.integers(6, W // 2), rng.integers(4, H // 3)
        x, y = rng.integers(0, W - w), rng.integers(0, H - h)
        color = rng.uniform(0, 1, 3) if rng.random() < 0.5 else _contrast(bg, rng) * 0.5 + bg * 0.5
        img[y:y + h, x:x + w] = color
        if rng.random() < 0.5:  # outlined panel
            inner = img[y + 1:y + h - 1, x + 1:x + w - 1]
            inner[:] = bg if rng.random() < 0.5 else np.clip(color + 0.3, 0, 1)

    n_line = rng.poisson(3 * cfg.shape_density * area_units) if cfg.shape_density > 0 else 0
    for _ in range(n_line):
        color = _contrast(bg, rng)
        t = int(rng.integers(1, 3))
        if rng.random() < 0.5:
            y, x0 = rng.integers(0, H - t), rng.integers(0, W // 2)
            img[y:y + t, x0:x0 + rng.integers(8, W - x0)] = color
        else:
            x, y0 = rng.integers(0, W - t), rng.integers(0, H // 2)
            img[y0:y0 + rng.integers(8, H - y0), x:x + t] = color

    n_rows = rng.poisson(4 * cfg.glyph_density * area_units) if cfg.glyph_density > 0 else 0
    for _ in range(n_rows):
        scale = 1 if rng.random() < 0.7 else 2
        gw, gh = 6 * scale, 8 * scale
        y = int(rng.integers(0, H - gh))
        x = int(rng.integers(0, max(W // 2, 1)))
        local = img[y + gh // 2, min(x, W - 1)]
        color = _contrast(local, rng)
        for _ in range(int(rng.integers(2, 10))):
            if x + 5 * scale > W:
                break
            glyph = GLYPHS[GLYPH_KEYS[rng.integers(len(GLYPH_KEYS))]]
            big = np.kron(glyph, np.ones((scale, scale), dtype=bool))
            img[y:y + 7 * scale, x:x + 5 * scale][big] = color
            x += gw

    if cfg.frame > 0:
        f = cfg.frame
        color = np.array((0.2, 0.3, 0.6))
        img[:f], img[-f:], img[:, :f], img[:, -f:] = color, color, color, color
    return np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32)


def edge_fraction(img: np.ndarray, threshold: float = 0.1) -> float:
    """Fraction of pixels whose finite-difference gradient magnitude exceeds ``threshold``."""
    lum = np.asarray(img, dtype=np.float64).mean(axis=0)
    gx = np.zeros_like(lum)
    gy = np.zeros_like(lum)
    gx[:, :-1] = lum[:, 1:] - lum[:, :-1]
    gy[:-1] = lum[1:] - lum[:-1]
    return float((np.hypot(gx, gy) > threshold).mean())


# ---------------------------------------------------------------- metrics


def psnr(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> float:
    """PSNR in dB with peak 1.0 over masked pixels; ``inf`` for identical inputs."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    err = (pred - target) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise EmptyMask("mask selects no pixels")
        err = err[..., mask]
    mse = float(err.mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def centre_crop(img: np.ndarray, size: int) -> np.ndarray:
    _, H, W = img.shape
    size = min(size, H, W)
    y0, x0 = (H - size) // 2, (W - size) // 2
    return img[:, y0:y0 + size, x0:x0 + size]


def make_images(n: int, seed: int, canvas: int = 96, frame: int = 0) -> list[np.ndarray]:
    seeds = np.random.SeedSequence(seed).generate_state(n)
    return [gen_sci_toy(SciToyConfig(canvas=(canvas, canvas), frame=frame, seed=int(s))) for s in seeds]


def make_dataset(n_images: int, families: Sequence[str], seed: int, canvas: int = 96,
                 frame: int = 0) -> list[WarpSample]:
    """One warped pair per (image, family), ordered image-major."""
    rng = np.random.default_rng(seed + 7919)
    out = []
    for img in make_images(n_images, seed, canvas, frame):
        for fam in families:
            out.append(make_sample(img, fam, rng))
    return out


# ---------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class EvalConfig:
    n_images: int = 50
    families: tuple[str, ...] = ("x2", "homography")
    seed: int = 1_000_003
    canvas: int = 96
    crop: int = 96
    dataset: str = "sci-toy"
    methods: tuple[str, ...] = ("bicubic", "sten")


def bicubic_unwarp(sample: WarpSample) -> np.ndarray:
    _, H, W = sample.hr.shape
    out, _ = warp_image(sample.lr, sample.homography, W, H)
    return out


SCALE_LABELS = {"x2": "2", "identity": "1", "translation": "1", "homography": "isc"}


def eval_suite(model, cfg: EvalConfig) -> list[dict]:
    """Mean masked PSNR per (family, method) on a held-out synthetic set.

    ``model`` is a STEN module, a checkpoint, or ``None`` (bicubic only).
    """
    from .model import load_model

    if cfg.n_images <= 0:
        raise EmptyDataset("evaluation set is empty")
    if model is not None and not isinstance(model, torch.nn.Module):
        model = load_model(model)
    images = [centre_crop(im, cfg.crop) for im in make_images(cfg.n_images, cfg.seed, cfg.canvas)]
    groups = {}
    for fam in cfg.families:
        rng = np.random.default_rng(cfg.seed + FAMILIES.index(fam))
        groups[fam] = [make_sample(im, fam, rng) for im in images]
    return evaluate_samples(model, groups, cfg.methods, cfg.dataset)


def evaluate_samples(model, groups: dict, methods: Sequence[str], dataset: str) -> list[dict]:
    """Mean masked PSNR per (family, method) for pre-built ``{family: [WarpSample]}`` groups."""
    from .model import unwarp

    if not any(groups.values()):
        raise EmptyDataset("evaluation set is empty")
    rows = []
    for fam, samples in groups.items():
        if not samples:
            continue
        for method in methods:
            if method == "sten" and model is None:
                continue
            scores = []
            for s in samples:
                pred = bicubic_unwarp(s) if method == "bicubic" else unwarp(model, s)
                scores.append(psnr(np.clip(pred, 0, 1), s.hr, s.mask))
            rows.append({"dataset": dataset, "warp_family": fam, "scale": SCALE_LABELS.get(fam, "isc"),
                         "method": method, "psnr_db": float(np.mean(scores)), "n_images": len(scores)})
    return rows


METRIC_COLUMNS = ("dataset", "warp_family", "scale", "method", "psnr_db", "n_images")


def write_metrics_csv(rows: Iterable[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r["dataset"], r["warp_family"], r["scale"], r["method"],
                        f"{r['psnr_db']:.6f}", r["n_images"]])


# ---------------------------------------------------------------- PNG io


def load_png(path) -> np.ndarray:
    from PIL import Image

    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def save_png(path, img: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(img)).save(path)


def save_mask_png(path, mask: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(mask.astype(np.uint8) * 255).save(path)
