"""Small numerics layer on top of torch: checked ops, MLP, Adam, checkpoints.

Tensors are float32 by default; gradient checks re-evaluate in float64.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointError, DimensionMismatch, NoGraph

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# ---------------------------------------------------------------- layers


class Mlp(nn.Module):
    """Fully connected network with ReLU between layers (none after the last)."""

    def __init__(self, widths: Sequence[int], activation: str = "relu"):
        super().__init__()
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        if activation not in ("relu", "gelu"):
            raise ValueError(f"unknown activation {activation!r}")
        self.widths = list(widths)
        self.activation = activation
        self.layers = nn.ModuleList(
            nn.Linear(a, b) for a, b in zip(self.widths[:-1], self.widths[1:]))

    def forward(self, x):
        return mlp_forward(self, x)


def mlp_forward(m: Mlp, x: torch.Tensor) -> torch.Tensor:
    if x.shape[-1] != m.widths[0]:
        raise DimensionMismatch(f"MLP expects last dim {m.widths[0]}, got {x.shape[-1]}")
    act = F.relu if m.activation == "relu" else F.gelu
    n = len(m.layers)
    for i, layer in enumerate(m.layers):
        x = layer(x)
        if i < n - 1:
            x = act(x)
    return x


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias=None, stride: int = 1,
           padding: int = 0) -> torch.Tensor:
    """Cross-correlation with zero padding; accepts ``(C, H, W)`` or ``(N, C, H, W)``."""
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    if x.dim() != 4 or weight.dim() != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionMismatch(
            f"input {tuple(x.shape)} incompatible with kernel {tuple(weight.shape)}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionMismatch("bias length must equal output channels")
    out = F.conv2d(x, weight, bias, stride=stride, padding=padding)
    return out[0] if squeeze else out


def batch_norm(x: torch.Tensor, gamma, beta, running_mean, running_var,
               training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
    """Per-channel normalisation over ``(N, C, H, W)``.

    In training mode the batch statistics are used and the running
    statistics are updated in place. Statistics accumulate in float64.
    """
    if x.dim() != 4:
        raise DimensionMismatch("batch_norm expects (N, C, H, W)")
    C = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean),
                    ("running_var", running_var)):
        if t is not None and t.shape != (C,):
            raise DimensionMismatch(f"{name} must have shape ({C},)")
    shape = (1, C, 1, 1)
    xd = x.double()
    if training:
        mean = xd.mean((0, 2, 3))
        var = xd.var((0, 2, 3), unbiased=False)
        if running_mean is not None:
            n = x.numel() // C
            with torch.no_grad():
                running_mean.mul_(1 - momentum).add_(momentum * mean.to(running_mean.dtype))
                unbiased = var * (n / max(n - 1, 1))
                running_var.mul_(1 - momentum).add_(momentum * unbiased.to(running_var.dtype))
    else:
        mean, var = running_mean.double(), running_var.double()
    out = (xd - mean.view(shape)) / (var.view(shape) + eps).sqrt()
    if gamma is not None:
        out = out * gamma.double().view(shape)
    if beta is not None:
        out = out + beta.double().view(shape)
    return out.to(x.dtype)


class BatchNorm(nn.Module):
    def __init__(self, channels: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x):
        return batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                          self.training, self.momentum, self.eps)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = x - x.amax(dim=dim, keepdim=True)
    e = shifted.exp()
    return e / e.sum(dim=dim, keepdim=True)


def l1_loss(pred: torch.Tensor, target: torch.Tensor, mask=None) -> torch.Tensor:
    """Mean absolute difference; with ``mask`` (broadcast over channels) only masked pixels count."""
    if pred.shape != target.shape:
        raise DimensionMismatch(f"{tuple(pred.shape)} vs {tuple(target.shape)}")
    diff = (pred - target).abs()
    if mask is None:
        return diff.mean()
    mask = mask.to(diff.dtype).expand_as(diff)
    return (diff * mask).sum() / mask.sum().clamp_min(1.0)


# ---------------------------------------------------------------- init


def init_weights(module: nn.Module, seed: int) -> None:
    """He-uniform weights (bound ``sqrt(6 / fan_in)``) and zero biases, seeded."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for mod in module.modules():
            if isinstance(mod, (nn.Linear, nn.Conv2d)):
                fan_in = mod.weight[0].numel()
                bound = math.sqrt(6.0 / fan_in)
                mod.weight.copy_(torch.rand(mod.weight.shape, generator=gen) * 2 * bound - bound)
                if mod.bias is not None:
                    mod.bias.zero_()


# ---------------------------------------------------------------- gradients


def backward(loss: torch.Tensor, params: Iterable[torch.Tensor]) -> list[torch.Tensor]:
    """Reverse-mode gradients of a scalar ``loss`` for each of ``params``.

    Parameters the loss does not depend on get zero gradients.
    """
    params = list(params)
    if loss.dim() != 0:
        raise DimensionMismatch("backward needs a scalar loss")
    if not loss.requires_grad:
        raise NoGraph("loss was not computed from any tensor that requires grad")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


@dataclass
class GradCheck:
    name: str
    index: int
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        return relative_error(self.analytic, self.numeric)


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradient_check(loss_fn: Callable[[], torch.Tensor], module: nn.Module, n_samples: int,
                   step: float = 1e-6, seed: int = 0,
                   names: Sequence[str] | None = None) -> list[GradCheck]:
    """Compare autograd against central differences on randomly chosen scalars.

    ``loss_fn`` must read the module's current parameter values; the module
    should already be in float64.
    """
    named = [(n, p) for n, p in module.named_parameters()
             if p.requires_grad and (names is None or n in names)]
    module.zero_grad(set_to_none=True)
    loss = loss_fn()
    grads = backward(loss, [p for _, p in named])
    sizes = np.array([p.numel() for _, p in named], dtype=np.float64)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_samples):
        which = int(rng.choice(len(named), p=sizes / sizes.sum()))
        name, p = named[which]
        idx = int(rng.integers(p.numel()))
        flat = p.data.view(-1)
        orig = flat[idx].item()
        with torch.no_grad():
            flat[idx] = orig + step
            up = loss_fn().item()
            flat[idx] = orig - step
            down = loss_fn().item()
            flat[idx] = orig
        out.append(GradCheck(name, idx, grads[which].view(-1)[idx].item(), (up - down) / (2 * step)))
    return out


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update applied to ``params`` in place."""
    if len(params) != len(grads):
        raise DimensionMismatch("params and grads differ in length")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if p.shape != g.shape or p.shape != m.shape:
                raise DimensionMismatch(f"param {tuple(p.shape)} vs grad {tuple(g.shape)}")
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))


class Adam:
    """Minimal optimizer wrapper around :func:`adam_step`."""

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self):
        grads = [torch.zeros_like(p) if p.grad is None else p.grad for p in self.params]
        adam_step(self.params, grads, self.state, self.lr, *self.betas, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------- checkpoints
#
# Layout (all integers little-endian):
#   b"SCUWCKPT"                       magic, 8 bytes
#   u32 version                       FORMAT_VERSION
#   u32 n, n bytes                    UTF-8 JSON header: {"arch", "step", "seed", "kind"}
#   u32 count                         number of parameter blocks
#   per block:
#     u16 n, n bytes                  UTF-8 name
#     u8 ndim, ndim * u32             shape
#     prod(shape) * f32               row-major data

MAGIC = b"SCUWCKPT"
FORMAT_VERSION = 1


@dataclass
class ModelCheckpoint:
    arch: dict
    params: dict
    step: int = 0
    seed: int = 0
    kind: str = "sten"
    version: int = FORMAT_VERSION

    def state_dict(self) -> dict:
        return {k: torch.from_numpy(v.copy()) for k, v in self.params.items()}


def checkpoint_from_module(module: nn.Module, arch: dict, step: int = 0, seed: int = 0,
                           kind: str = "sten") -> ModelCheckpoint:
    params = {k: v.detach().cpu().to(torch.float32).numpy().copy()
              for k, v in module.state_dict().items()}
    return ModelCheckpoint(arch=dict(arch), params=params, step=step, seed=seed, kind=kind)


def checkpoint_bytes(ckpt: ModelCheckpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    header = json.dumps({"arch": ckpt.arch, "step": ckpt.step, "seed": ckpt.seed,
                         "kind": ckpt.kind}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(ckpt.params)))
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def save_checkpoint(path, ckpt: ModelCheckpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def _read(view, offset, fmt):
    size = struct.calcsize(fmt)
    if offset + size > len(view):
        raise CheckpointError("truncated checkpoint")
    return struct.unpack_from(fmt, view, offset), offset + size


def load_checkpoint(path) -> ModelCheckpoint:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    (version,), off = _read(data, 8, "<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (n,), off = _read(data, off, "<I")
    header = json.loads(data[off:off + n])
    off += n
    (count,), off = _read(data, off, "<I")
    params = {}
    for _ in range(count):
        (n,), off = _read(data, off, "<H")
        name = data[off:off + n].decode()
        off += n
        (ndim,), off = _read(data, off, "<B")
        shape, off = _read(data, off, f"<{ndim}I")
        size = int(np.prod(shape)) * 4
        if off + size > len(data):
            raise CheckpointError("truncated checkpoint")
        params[name] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=off).reshape(shape).copy()
        off += size
    return ModelCheckpoint(arch=header["arch"], params=params, step=header["step"],
                           seed=header["seed"], kind=header.get("kind", "sten"), version=version)
