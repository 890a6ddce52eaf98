"""Projective coordinate maps, their derivatives and random warp generation.

Coordinates are continuous pixel coordinates ``(x, y)`` with pixel centres on
integers; ``x`` indexes columns and ``y`` rows. An image of size ``w x h``
covers the open rectangle ``(-0.5, w - 0.5) x (-0.5, h - 0.5)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import DegenerateConfig, DegeneratePoint, SingularMatrix

DENOM_EPS = 1e-12
DET_EPS = 1e-12
JACOBIAN_STEP = 1e-3
HESSIAN_STEP = 1e-2


class Homography:
    """Immutable 3x3 projective transform normalised so that ``m[2, 2] == 1``."""

    __slots__ = ("_m",)

    def __init__(self, m):
        m = np.array(m, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(m)):
            raise SingularMatrix("homography has non-finite entries")
        if abs(m[2, 2]) < DET_EPS:
            raise SingularMatrix("cannot normalise: bottom-right entry is zero")
        m = m / m[2, 2]
        m.setflags(write=False)
        self._m = m

    @property
    def m(self) -> np.ndarray:
        return self._m

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        return cls([[1, 0, tx], [0, 1, ty], [0, 0, 1]])

    @classmethod
    def scaling(cls, sx: float, sy: float | None = None) -> "Homography":
        sy = sx if sy is None else sy
        return cls([[sx, 0, 0], [0, sy, 0], [0, 0, 1]])

    @classmethod
    def rotation(cls, theta: float) -> "Homography":
        c, s = math.cos(theta), math.sin(theta)
        return cls([[c, -s, 0], [s, c, 0], [0, 0, 1]])

    @classmethod
    def from_params(cls, p: Sequence[float]) -> "Homography":
        p = np.asarray(p, dtype=np.float64).ravel()
        if p.size != 8:
            raise ValueError(f"expected 8 free parameters, got {p.size}")
        return cls(np.append(p, 1.0))

    @property
    def params(self) -> np.ndarray:
        """The 8 free entries, row-major, without the fixed ``m[2, 2]``."""
        return self._m.ravel()[:8].copy()

    @property
    def det(self) -> float:
        return float(np.linalg.det(self._m))

    def __matmul__(self, other: "Homography") -> "Homography":
        return Homography(self._m @ other._m)

    def __call__(self, p):
        return apply(self, p)

    def __eq__(self, other):
        return isinstance(other, Homography) and np.array_equal(self._m, other._m)

    def __hash__(self):
        return hash(self._m.tobytes())

    def __repr__(self):
        rows = "; ".join(" ".join(f"{v:.6g}" for v in r) for r in self._m)
        return f"Homography([{rows}])"

    def to_text(self) -> str:
        return format_hom(self)


def format_hom(h: Homography) -> str:
    """Serialise as 9 whitespace-separated numbers (three per line)."""
    return "\n".join(" ".join(repr(float(v)) for v in row) for row in h.m) + "\n"


def parse_hom(text: str) -> Homography:
    values = text.split()
    if len(values) != 9:
        raise ValueError(f"homography text needs 9 numbers, got {len(values)}")
    return Homography(np.array([float(v) for v in values]).reshape(3, 3))


def load_hom(path) -> Homography:
    return parse_hom(Path(path).read_text())


def save_hom(path, h: Homography) -> None:
    Path(path).write_text(format_hom(h))


def apply(h: Homography, p):
    """Projective image of point(s) ``p`` (shape ``(2,)`` or ``(..., 2)``)."""
    p = np.asarray(p, dtype=np.float64)
    m = h.m
    x, y = p[..., 0], p[..., 1]
    w = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    if np.any(np.abs(w) <= DENOM_EPS):
        raise DegeneratePoint("projective denominator below threshold")
    u = (m[0, 0] * x + m[0, 1] * y + m[0, 2]) / w
    v = (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / w
    return np.stack([u, v], axis=-1)


def invert(h: Homography) -> Homography:
    det = np.linalg.det(h.m)
    if abs(det) < DET_EPS:
        raise SingularMatrix(f"|det| = {abs(det):.3g} below {DET_EPS}")
    return Homography(np.linalg.inv(h.m))


def jacobian_analytic(h: Homography, p) -> np.ndarray:
    """Closed-form 2x2 Jacobian ``d(u, v)/d(x, y)`` of the projective map."""
    p = np.asarray(p, dtype=np.float64)
    m = h.m
    x, y = p[..., 0], p[..., 1]
    w = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    if np.any(np.abs(w) <= DENOM_EPS):
        raise DegeneratePoint("projective denominator below threshold")
    u = (m[0, 0] * x + m[0, 1] * y + m[0, 2]) / w
    v = (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / w
    jac = np.empty(p.shape[:-1] + (2, 2))
    jac[..., 0, 0] = (m[0, 0] - u * m[2, 0]) / w
    jac[..., 0, 1] = (m[0, 1] - u * m[2, 1]) / w
    jac[..., 1, 0] = (m[1, 0] - v * m[2, 0]) / w
    jac[..., 1, 1] = (m[1, 1] - v * m[2, 1]) / w
    return jac


CoordMap = Callable[[np.ndarray], np.ndarray]


def _as_map(f) -> CoordMap:
    if isinstance(f, Homography):
        return lambda q: apply(f, q)
    return f


def jacobian_numeric(f, p, step: float = JACOBIAN_STEP) -> np.ndarray:
    """Central-difference Jacobian of a coordinate map at ``p``."""
    if step <= 0:
        raise ValueError("step must be positive")
    f = _as_map(f)
    p = np.asarray(p, dtype=np.float64)
    ex = np.array([step, 0.0])
    ey = np.array([0.0, step])
    dx = (f(p + ex) - f(p - ex)) / (2 * step)
    dy = (f(p + ey) - f(p - ey)) / (2 * step)
    return np.stack([dx, dy], axis=-1)


def hessian_numeric(f, p, step: float = HESSIAN_STEP) -> np.ndarray:
    """Second-order central stencil; entry ``[k, i, j]`` is d2 f_k / dx_i dx_j."""
    if step <= 0:
        raise ValueError("step must be positive")
    f = _as_map(f)
    p = np.asarray(p, dtype=np.float64)
    e = np.eye(2) * step
    f0 = f(p)
    out = np.empty(p.shape[:-1] + (2, 2, 2))
    for i in range(2):
        out[..., :, i, i] = (f(p + e[i]) - 2 * f0 + f(p - e[i])) / step**2
    cross = (f(p + e[0] + e[1]) - f(p + e[0] - e[1])
             - f(p - e[0] + e[1]) + f(p - e[0] - e[1])) / (4 * step**2)
    out[..., :, 0, 1] = cross
    out[..., :, 1, 0] = cross
    return out


def pixel_shape(h_inv, y, step: float = JACOBIAN_STEP,
                hessian_step: float = HESSIAN_STEP) -> np.ndarray:
    """12-vector ``[J row-major (4), H in (out, d1, d2) order (8)]`` of ``h_inv`` at ``y``."""
    jac = jacobian_numeric(h_inv, y, step)
    hes = hessian_numeric(h_inv, y, hessian_step)
    lead = jac.shape[:-2]
    return np.concatenate([jac.reshape(lead + (4,)), hes.reshape(lead + (8,))], axis=-1)


# torch counterparts, differentiable in both the matrix and the points


def apply_torch(m: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    x, y = p[..., 0], p[..., 1]
    w = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    u = (m[0, 0] * x + m[0, 1] * y + m[0, 2]) / w
    v = (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / w
    return torch.stack([u, v], dim=-1)


def jacobian_torch(m: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    x, y = p[..., 0], p[..., 1]
    w = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    u = (m[0, 0] * x + m[0, 1] * y + m[0, 2]) / w
    v = (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / w
    row0 = torch.stack([(m[0, 0] - u * m[2, 0]) / w, (m[0, 1] - u * m[2, 1]) / w], dim=-1)
    row1 = torch.stack([(m[1, 0] - v * m[2, 0]) / w, (m[1, 1] - v * m[2, 1]) / w], dim=-1)
    return torch.stack([row0, row1], dim=-2)


def pixel_shape_torch(m: torch.Tensor, p: torch.Tensor, step: float = JACOBIAN_STEP,
                      hessian_step: float = HESSIAN_STEP) -> torch.Tensor:
    """Same stencils and layout as :func:`pixel_shape`, batched over ``p``."""
    ex = p.new_tensor([step, 0.0])
    ey = p.new_tensor([0.0, step])
    jx = (apply_torch(m, p + ex) - apply_torch(m, p - ex)) / (2 * step)
    jy = (apply_torch(m, p + ey) - apply_torch(m, p - ey)) / (2 * step)
    jac = torch.stack([jx, jy], dim=-1)

    hx = p.new_tensor([hessian_step, 0.0])
    hy = p.new_tensor([0.0, hessian_step])
    f0 = apply_torch(m, p)
    h2 = hessian_step**2
    dxx = (apply_torch(m, p + hx) - 2 * f0 + apply_torch(m, p - hx)) / h2
    dyy = (apply_torch(m, p + hy) - 2 * f0 + apply_torch(m, p - hy)) / h2
    dxy = (apply_torch(m, p + hx + hy) - apply_torch(m, p + hx - hy)
           - apply_torch(m, p - hx + hy) + apply_torch(m, p - hx - hy)) / (4 * h2)
    hes = torch.stack([torch.stack([dxx, dxy], -1), torch.stack([dxy, dyy], -1)], -2)
    lead = p.shape[:-1]
    return torch.cat([jac.reshape(lead + (4,)), hes.reshape(lead + (8,))], dim=-1)


@dataclass(frozen=True)
class WarpConfig:
    """Uniform sampling ranges for :func:`random_homography`.

    ``crop_range`` bounds the translation (pixels) on each axis.
    """

    scale_range: tuple[float, float] = (1.0, 1.0)
    rotation_range: tuple[float, float] = (0.0, 0.0)
    projective_range: tuple[float, float] = (0.0, 0.0)
    crop_range: tuple[float, float] = (0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        for name in ("scale_range", "rotation_range", "projective_range", "crop_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise DegenerateConfig(f"{name} is empty: ({lo}, {hi})")
        if self.scale_range[0] <= 0:
            raise DegenerateConfig("scales must be positive")


def random_homography(cfg: WarpConfig, rng: np.random.Generator,
                      center: tuple[float, float] | None = None,
                      max_tries: int = 100) -> Homography:
    """Draw ``scale @ rotation @ translation @ projection`` from ``cfg``.

    With ``center`` the whole warp acts about that point instead of the origin.
    """
    for _ in range(max_tries):
        s = rng.uniform(*cfg.scale_range)
        theta = rng.uniform(*cfg.rotation_range)
        tx, ty = rng.uniform(*cfg.crop_range, size=2)
        px, py = rng.uniform(*cfg.projective_range, size=2)
        proj = np.array([[1, 0, 0], [0, 1, 0], [px, py, 1]], dtype=np.float64)
        c, sn = math.cos(theta), math.sin(theta)
        m = (np.diag([s, s, 1.0])
             @ np.array([[c, -sn, 0], [sn, c, 0], [0, 0, 1]])
             @ np.array([[1, 0, tx], [0, 1, ty], [0, 0, 1]])
             @ proj)
        if center is not None:
            cx, cy = center
            m = (np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1]]) @ m
                 @ np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]]))
        if abs(m[2, 2]) < DET_EPS:
            continue
        h = Homography(m)
        if abs(h.det) > 1e-6:
            return h
    raise DegenerateConfig(f"no invertible homography after {max_tries} draws")


def pixel_grid(w: int, h: int) -> np.ndarray:
    """``(h, w, 2)`` array of pixel-centre coordinates ``(x, y)``."""
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.stack([xs, ys], axis=-1)


def inside_rect(p: np.ndarray, w: int, h: int) -> np.ndarray:
    x, y = p[..., 0], p[..., 1]
    return (x > -0.5) & (x < w - 0.5) & (y > -0.5) & (y < h - 0.5)


def valid_region_mask(h: Homography, src_w: int, src_h: int,
                      dst_w: int, dst_h: int) -> np.ndarray:
    """Destination pixels whose preimage under ``h`` lies strictly inside the source."""
    if min(src_w, src_h, dst_w, dst_h) <= 0:
        raise ValueError("dimensions must be positive")
    m = invert(h).m
    grid = pixel_grid(dst_w, dst_h)
    x, y = grid[..., 0], grid[..., 1]
    w = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    ok = w > DENOM_EPS
    w = np.where(ok, w, 1.0)
    pre = np.stack([(m[0, 0] * x + m[0, 1] * y + m[0, 2]) / w,
                    (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / w], axis=-1)
    return ok & inside_rect(pre, src_w, src_h)


def fit_to_canvas(h: Homography, src_w: int, src_h: int) -> tuple[Homography, int, int]:
    """Shift ``h`` so the warped source rectangle starts at the canvas origin.

    Returns the shifted homography and the bounding canvas size, i.e. the
    maximal effective region of the warped source.
    """
    corners = np.array([[-0.5, -0.5], [src_w - 0.5, -0.5],
                        [-0.5, src_h - 0.5], [src_w - 0.5, src_h - 0.5]])
    warped = apply(h, corners)
    lo = warped.min(axis=0)
    hi = warped.max(axis=0)
    size = np.ceil(hi - lo - 1e-9).astype(int)
    shift = Homography.translation(-0.5 - lo[0], -0.5 - lo[1])
    return shift @ h, int(max(size[0], 1)), int(max(size[1], 1))
