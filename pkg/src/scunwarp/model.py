"""End-to-end unwarping network and its training loop."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .branches import FusionModule, SebConfig, StructureBranch, TextureBranch
from .dataset import WarpSample, bicubic_sample
from .errors import DimensionMismatch, EmptyDataset, NonFiniteLoss, OutOfCell
from .geometry import Homography
from .nn_core import (Adam, Mlp, ModelCheckpoint, checkpoint_from_module, init_weights,
                      l1_loss, load_checkpoint)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StenConfig:
    latent_dim: int = 32
    channels: int = 64
    encoder_depth: int = 4
    decoder_hidden: tuple[int, ...] = (64, 64)
    fusion_hidden: int = 64
    seb: SebConfig = field(default_factory=SebConfig)
    degree: int = 3
    tile: int = 32
    fusion: bool = True
    skip: str = "bicubic"  # "bicubic" adds the resampled input to the decoded output; "none" disables it
    seed: int = 0

    def __post_init__(self):
        if min(self.latent_dim, self.channels, self.encoder_depth, self.tile) <= 0:
            raise ValueError("StenConfig sizes must be positive")
        if self.seb.channels != self.latent_dim:
            raise DimensionMismatch("structure branch width must equal the latent dimension")
        if self.skip not in ("bicubic", "none"):
            raise ValueError(f"unknown skip mode {self.skip!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StenConfig":
        d = dict(d)
        seb = d.pop("seb", {})
        seb = SebConfig(**{**seb, "stripe": tuple(seb.get("stripe", (4, 16)))})
        d["decoder_hidden"] = tuple(d.get("decoder_hidden", (64, 64)))
        return cls(seb=seb, **d)


class Encoder(nn.Module):
    """Plain 3x3 conv stack, 3 -> D channels, no downsampling."""

    def __init__(self, out_dim: int, depth: int):
        super().__init__()
        chans = [3] + [out_dim] * depth
        self.convs = nn.ModuleList(nn.Conv2d(a, b, 3, padding=1) for a, b in zip(chans[:-1], chans[1:]))

    def forward(self, x):
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = torch.relu(x)
        return x


def ensemble_weights(y, neighbors) -> np.ndarray:
    """Area weights of the four cell corners around ``y``.

    ``neighbors`` are the corners in (x0,y0), (x1,y0), (x0,y1), (x1,y1) order;
    each weight is the area of the rectangle between ``y`` and the opposite corner.
    """
    y = np.asarray(y, dtype=np.float64)
    nb = np.asarray(neighbors, dtype=np.float64)
    (x0, y0), (x1, y1) = nb[0], nb[3]
    if not (x0 <= y[0] <= x1 and y0 <= y[1] <= y1):
        raise OutOfCell(f"point {tuple(y)} outside cell [{x0}, {x1}] x [{y0}, {y1}]")
    opposite = nb[[3, 2, 1, 0]]
    areas = np.abs(y[0] - opposite[:, 0]) * np.abs(y[1] - opposite[:, 1])
    return areas / areas.sum()


class Sten(nn.Module):
    def __init__(self, cfg: StenConfig = StenConfig()):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.latent_dim, cfg.encoder_depth)
        self.structure = StructureBranch(cfg.seb)
        self.texture = TextureBranch(cfg.latent_dim, cfg.channels, cfg.degree)
        self.fusion = FusionModule(cfg.latent_dim, cfg.channels, cfg.fusion_hidden)
        self.decode_stf = Mlp([cfg.latent_dim, *cfg.decoder_hidden, 3])
        self.decode_teb = Mlp([cfg.channels, *cfg.decoder_hidden, 3])
        init_weights(self, cfg.seed)
        with torch.no_grad():
            self.texture.dilation.bias.fill_(1.0)
            if cfg.skip != "none":
                # start from the resampled input and learn a correction
                for mlp in (self.decode_stf, self.decode_teb):
                    mlp.layers[-1].weight.zero_()
                    mlp.layers[-1].bias.zero_()

    def encode(self, lr: torch.Tensor) -> torch.Tensor:
        if lr.dim() != 3 or lr.shape[0] != 3:
            raise DimensionMismatch(f"expected a (3, h, w) image, got {tuple(lr.shape)}")
        return self.encoder(lr.unsqueeze(0))[0]

    def latents(self, lr: torch.Tensor):
        z = self.encode(lr)
        return z, self.structure(z.unsqueeze(0))[0]

    def query(self, z, seb, hom, points, key_select=None, return_parts: bool = False, lr=None):
        """Predict RGB at output points ``(Q, 2)``.

        ``key_select`` is a boolean ``(Q,)`` picking which queries also act as
        fusion keys/values. With the bicubic skip enabled, ``lr`` is the input
        image resampled at each query's preimage and added to the output.
        """
        tp = self.texture(z, points, hom)
        Q = points.shape[0]
        teb_rgb = (tp.weights.unsqueeze(-1) * self.decode_teb(tp.features)).sum(dim=1)

        D, h, w = seb.shape
        u = tp.delta[:, 0] + tp.sites[:, 0].to(tp.delta.dtype)
        near = torch.floor(u.detach() + 0.5)
        nx = near[:, 0].clamp(0, w - 1).long()
        ny = near[:, 1].clamp(0, h - 1).long()
        q = seb.reshape(D, -1).T[ny * w + nx]
        if key_select is None:
            key_select = torch.zeros(Q, dtype=torch.bool)
        values = tp.aggregate()[key_select]
        f_stf, state = self.fusion(q, values, bypass=not self.cfg.fusion)
        stf_rgb = self.decode_stf(f_stf)
        pred = stf_rgb + teb_rgb
        base = None
        if self.cfg.skip == "bicubic" and lr is not None:
            base = bicubic_sample(lr, u[:, 0], u[:, 1]).T.to(pred.dtype)
            pred = pred + base
        if return_parts:
            return pred, {"base": base, "teb": tp, "stf_rgb": stf_rgb, "teb_rgb": teb_rgb,
                          "queries": q, "f_stf": f_stf, "state": state}
        return pred

    def forward(self, lr: torch.Tensor, hom: torch.Tensor, out_shape: tuple[int, int],
                region: tuple[int, int, int, int] | None = None, key_mask=None, latents=None) -> torch.Tensor:
        """Unwarp ``lr`` (3, h, w) onto an ``out_shape = (H, W)`` grid.

        ``hom`` (3, 3) maps output pixel coordinates to input pixel
        coordinates. ``region = (y0, x0, hh, ww)`` restricts the prediction to
        a window. ``key_mask`` (H, W) limits which positions may serve as
        fusion keys. ``latents`` reuses a previous ``self.latents(lr)``. The
        output is processed in square tiles; keys are the even-row,
        even-column positions of each tile.
        """
        H, W = out_shape
        y0, x0, hh, ww = region if region is not None else (0, 0, H, W)
        z, seb = latents if latents is not None else self.latents(lr)
        out = lr.new_zeros(3, hh, ww)
        T = self.cfg.tile
        for ty in range(y0, y0 + hh, T):
            for tx in range(x0, x0 + ww, T):
                th, tw = min(T, y0 + hh - ty), min(T, x0 + ww - tx)
                ys, xs = torch.meshgrid(torch.arange(ty, ty + th), torch.arange(tx, tx + tw), indexing="ij")
                pts = torch.stack([xs, ys], -1).reshape(-1, 2).to(torch.float64)
                sel = ((ys % 2 == 0) & (xs % 2 == 0)).reshape(-1)
                if key_mask is not None:
                    sel = sel & torch.as_tensor(key_mask)[ys, xs].reshape(-1)
                pred = self.query(z, seb, hom, pts, sel, lr=lr)
                out[:, ty - y0:ty - y0 + th, tx - x0:tx - x0 + tw] = pred.T.reshape(3, th, tw)
        return out


def hom_tensor(h: Homography, dtype=torch.float64) -> torch.Tensor:
    return torch.tensor(h.m, dtype=dtype)


def encoder_forward(model: Sten, img) -> torch.Tensor:
    return model.encode(torch.as_tensor(img, dtype=torch.float32))


def sten_forward(model: Sten, lr, h: Homography, out_shape, key_mask=None) -> torch.Tensor:
    return model(torch.as_tensor(lr, dtype=torch.float32), hom_tensor(h), out_shape, key_mask=key_mask)


def unwarp(model: Sten, sample_or_lr, h: Homography | None = None, out_shape=None) -> np.ndarray:
    """Inference helper returning a float32 ``(3, H, W)`` array (unclamped)."""
    if isinstance(sample_or_lr, WarpSample):
        s = sample_or_lr
        lr, h, out_shape, key_mask = s.lr, s.homography, s.hr.shape[1:], s.mask
    else:
        lr, key_mask = sample_or_lr, None
        if out_shape is None:
            out_shape = np.asarray(lr).shape[1:]
    model.eval()
    with torch.no_grad():
        return sten_forward(model, lr, h, tuple(out_shape), key_mask).numpy()


# ---------------------------------------------------------------- checkpoints


def make_checkpoint(model: Sten, step: int = 0, seed: int = 0) -> ModelCheckpoint:
    return checkpoint_from_module(model, model.cfg.to_dict(), step, seed, kind="sten")


def model_from_checkpoint(ckpt: ModelCheckpoint) -> Sten:
    model = Sten(StenConfig.from_dict(ckpt.arch))
    model.load_state_dict(ckpt.state_dict())
    model.eval()
    return model


def load_model(path_or_ckpt) -> Sten:
    ckpt = path_or_ckpt if isinstance(path_or_ckpt, ModelCheckpoint) else load_checkpoint(path_or_ckpt)
    return model_from_checkpoint(ckpt)


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 4
    lr: float = 5e-4
    lr_halve_every: int = 1200
    crop: int = 32
    seed: int = 0
    time_limit: float | None = None  # seconds; stops early when exceeded
    log_every: int = 50


@dataclass
class TrainResult:
    checkpoint: ModelCheckpoint
    history: list  # (step, loss, lr)

    def write_loss_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss", "lr"])
            for step, loss, lr in self.history:
                w.writerow([step, f"{loss:.8f}", f"{lr:.8g}"])


def random_region(sample: WarpSample, crop: int, rng: np.random.Generator, tries: int = 20):
    _, H, W = sample.hr.shape
    ch, cw = min(crop, H), min(crop, W)
    best = None
    for _ in range(tries):
        y0 = int(rng.integers(0, H - ch + 1))
        x0 = int(rng.integers(0, W - cw + 1))
        frac = sample.mask[y0:y0 + ch, x0:x0 + cw].mean()
        if best is None or frac > best[0]:
            best = (frac, (y0, x0, ch, cw))
        if frac > 0.5:
            break
    return best[1]


def sample_loss(model: Sten, sample: WarpSample, region) -> torch.Tensor:
    y0, x0, hh, ww = region
    lr = torch.from_numpy(sample.lr)
    pred = model(lr, hom_tensor(sample.homography), sample.hr.shape[1:], region, key_mask=sample.mask)
    target = torch.from_numpy(sample.hr[:, y0:y0 + hh, x0:x0 + ww])
    mask = torch.from_numpy(sample.mask[y0:y0 + hh, x0:x0 + ww]).unsqueeze(0)
    return l1_loss(pred, target, mask)


def train(model: Sten, dataset: Sequence[WarpSample], cfg: TrainConfig = TrainConfig(),
          dump_path=None) -> TrainResult:
    """Adam on masked L1 over random output crops; lr halves every ``lr_halve_every`` steps."""
    import time

    if len(dataset) == 0:
        raise EmptyDataset("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.lr)
    history = []
    start = time.monotonic()
    model.train()
    step = 0
    for step in range(1, cfg.steps + 1):
        opt.lr = cfg.lr * 0.5 ** ((step - 1) // cfg.lr_halve_every)
        opt.zero_grad()
        idx = rng.integers(len(dataset), size=cfg.batch_size)
        total = 0.0
        for i in idx:
            s = dataset[int(i)]
            loss = sample_loss(model, s, random_region(s, cfg.crop, rng)) / cfg.batch_size
            if not torch.isfinite(loss):
                state = {"step": step, "lr": opt.lr, "sample": int(i), "loss": float(loss.detach())}
                if dump_path is not None:
                    Path(dump_path).write_text(json.dumps(state, indent=2))
                raise NonFiniteLoss(f"non-finite loss at step {step}", state)
            loss.backward()
            total += loss.item()
        opt.step()
        history.append((step, total, opt.lr))
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d loss %.5f lr %.2e", step, total, opt.lr)
        if cfg.time_limit is not None and time.monotonic() - start > cfg.time_limit:
            log.info("time limit reached at step %d", step)
            break
    model.eval()
    return TrainResult(make_checkpoint(model, step, cfg.seed), history)
