"""Centered cardinal B-splines and the B-spline texture-coefficient encoding."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np
import torch

from .errors import DimensionMismatch, UnsupportedDegree

SUPPORTED_DEGREES = (0, 1, 2, 3)


def basis(degree: int, x: torch.Tensor) -> torch.Tensor:
    """Piecewise-polynomial centred B-spline of ``degree``, elementwise on a tensor.

    Pieces are selected on half-open intervals ``[lo, hi)`` so the autograd
    derivative at a breakpoint is the right-hand limit.
    """
    if degree not in SUPPORTED_DEGREES:
        raise UnsupportedDegree(f"degree {degree} not in {SUPPORTED_DEGREES}")
    zero = torch.zeros_like(x)
    if degree == 0:
        return torch.where(x.abs() < 0.5, torch.ones_like(x), zero)
    # signed |x| whose derivative at 0 is +1
    a = torch.where(x >= 0, x, -x)

    def on(r):
        return (x >= -r) & (x < r)

    if degree == 1:
        return torch.where(on(1.0), 1.0 - a, zero)
    if degree == 2:
        inner = 0.75 - x * x
        outer = 0.5 * (1.5 - a) ** 2
        return torch.where(on(0.5), inner, torch.where(on(1.5), outer, zero))
    x2 = x * x
    inner = 2.0 / 3.0 - x2 + 0.5 * a * x2
    outer = (2.0 - a) ** 3 / 6.0
    return torch.where(on(1.0), inner, torch.where(on(2.0), outer, zero))


def basis_eval(degree: int, x):
    """Scalar / numpy front end of :func:`basis`, evaluated in float64."""
    t = torch.as_tensor(np.asarray(x, dtype=np.float64))
    out = basis(degree, t).numpy()
    return float(out) if out.ndim == 0 else out


class BtcFeature(NamedTuple):
    """Coefficients ``c`` (C), knot offsets ``k`` (2C, interleaved x/y) and dilations ``d`` (C)."""

    c: torch.Tensor
    k: torch.Tensor
    d: torch.Tensor


def _check(c, k, d, delta):
    C = c.shape[-1]
    if C == 0 or k.shape[-1] != 2 * C or d.shape[-1] != C or delta.shape[-1] != 2:
        raise DimensionMismatch(
            f"c {tuple(c.shape)}, k {tuple(k.shape)}, d {tuple(d.shape)}, delta {tuple(delta.shape)}")


def btc_encode(c, k, d, delta, degree: int = 3) -> torch.Tensor:
    """``c_i * b((dx - k_2i) d_i) * b((dy - k_2i+1) d_i)`` for every channel ``i``.

    Leading dimensions broadcast; ``delta`` has a trailing axis of size 2.
    """
    _check(c, k, d, delta)
    kx, ky = k[..., 0::2], k[..., 1::2]
    bx = basis(degree, (delta[..., 0:1] - kx) * d)
    by = basis(degree, (delta[..., 1:2] - ky) * d)
    return c * bx * by


def teb_encode(c, k, delta_x, jac, dilation, degree: int = 3) -> torch.Tensor:
    """:func:`btc_encode` on the grid ``jac @ delta_x`` with a shape-derived dilation."""
    if jac.shape[-2:] != (2, 2):
        raise DimensionMismatch(f"jacobian must be 2x2, got {tuple(jac.shape)}")
    grid = torch.einsum("...ij,...j->...i", jac, delta_x)
    return btc_encode(c, k, dilation, grid, degree)
