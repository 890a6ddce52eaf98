"""Command-line interface: ``scunwarp <subcommand> ...``.

Every option can also come from a JSON file passed with ``--config``; an
explicit flag wins over the file, which wins over the built-in default.
Exit status is 0 on success, 2 on invalid input or configuration and 3 on a
numeric failure; errors are printed to stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import dataset as ds
from . import geometry
from . import model as md
from . import self_estimation as se
from .errors import ConfigError, EmptyDataset, ScunwarpError
from .geometry import Homography
from .nn_core import load_checkpoint, save_checkpoint

DEFAULT_SEED = 0
_EST = se.EstimatorTrainConfig()
NUMERIC_ERRORS = (FloatingPointError, ArithmeticError)

# Per-subcommand config keys and their built-in defaults.
DEFAULTS = {
    "gen-data": {"out": None, "count": 10, "families": "x2,homography", "seed": DEFAULT_SEED,
                 "canvas": 96, "frame": 0},
    "warp": {"input": None, "out": None, "matrix": None, "size": None},
    "unwarp": {"input": None, "out": None, "matrix": None, "size": None, "checkpoint": None,
               "method": "sten", "gt": None, "estimate": False, "estimator": None,
               "n": 16, "T": 50, "alpha": 0.05, "seed": DEFAULT_SEED},
    "train": {"data": None, "out": None, "steps": 3000, "batch_size": 4, "lr": 5e-4,
              "lr_halve_every": 1200, "crop": 32, "seed": DEFAULT_SEED, "loss_csv": None},
    "train-estimator": {"data": None, "checkpoint": None, "out": None, "steps": _EST.steps,
                        "perturbations": _EST.perturbations, "max_eps": _EST.eps_range[1],
                        "eps_power": _EST.eps_power, "kind": _EST.kind, "target": _EST.target,
                        "augment": _EST.augment, "views": _EST.views, "lr": _EST.lr, "seed": DEFAULT_SEED},
    "eval": {"data": None, "checkpoint": None, "out": None, "methods": "bicubic,sten",
             "dataset_name": "sci-toy", "n_images": 50, "seed": 1_000_003, "families": "x2,homography"},
    "estimate": {"input": None, "checkpoint": None, "estimator": None, "out": None, "report": None,
                 "size": None, "n": 16, "T": 50, "alpha": 0.05, "step_size": 1.0, "seed": DEFAULT_SEED},
}
REQUIRED = {
    "gen-data": ("out",), "warp": ("input", "out", "matrix"), "unwarp": ("input", "out"),
    "train": ("data", "out"), "train-estimator": ("data", "checkpoint", "out"),
    "eval": ("out",), "estimate": ("input", "checkpoint", "estimator", "out"),
}


class ValidationError(ScunwarpError):
    pass


# ---------------------------------------------------------------- config


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Merge flag values over the ``--config`` file over the defaults."""
    cfg = dict(DEFAULTS[command])
    if args.config:
        path = Path(args.config)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}", [])
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object", [])
        unknown = sorted(k for k in data if k.replace("-", "_") not in {x.replace("-", "_") for x in cfg})
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}", unknown)
        cfg.update({k.replace("-", "_"): v for k, v in data.items()})
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None and value is not False:
            cfg[key] = value
    missing = [k for k in REQUIRED[command] if cfg.get(k) in (None, "")]
    if missing:
        raise ConfigError(f"missing required settings for {command}: {', '.join(missing)}", missing)
    return cfg


def parse_size(text) -> tuple[int, int] | None:
    """``WxH`` to ``(height, width)``."""
    if text is None:
        return None
    try:
        w, h = (int(v) for v in str(text).lower().split("x"))
    except ValueError:
        raise ValidationError(f"size must look like WxH, got {text!r}")
    if w <= 0 or h <= 0:
        raise ValidationError(f"size must be positive, got {text!r}")
    return h, w


def read_matrix(value) -> Homography:
    """A ``.hom`` path or nine inline numbers."""
    if isinstance(value, (list, tuple)):
        return Homography(np.asarray(value, dtype=np.float64).reshape(3, 3))
    path = Path(str(value))
    if path.exists():
        return geometry.load_hom(path)
    return geometry.parse_hom(str(value))


def require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"input file not found: {p}")
    return p


def parse_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    if str(value).lower() in ("true", "1", "yes"):
        return True
    if str(value).lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def split_list(value) -> list[str]:
    return [v for v in value.split(",") if v] if isinstance(value, str) else list(value)


# ---------------------------------------------------------------- dataset directories


def cmd_gen_data(cfg: dict) -> dict:
    out = Path(cfg["out"])
    families = split_list(cfg["families"])
    for fam in families:
        if fam not in ds.FAMILIES:
            raise ConfigError(f"unknown warp family {fam!r}", ["families"])
    count = int(cfg["count"])
    if count < 0:
        raise ConfigError("count must be >= 0", ["count"])
    samples = ds.make_dataset(count, families, int(cfg["seed"]), int(cfg["canvas"]), int(cfg["frame"]))
    for sub in ("hr", "lr", "mask", "hom"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    per_image = len(families)
    for idx, s in enumerate(samples):
        image, fam = idx // per_image, s.family
        hr = f"hr/{image:05d}.png"
        stem = f"{image:05d}_{fam}"
        paths = {"hr": hr, "lr": f"lr/{stem}.png", "mask": f"mask/{stem}.png",
                 "lr_mask": f"mask/{stem}_lr.png", "hom": f"hom/{stem}.hom"}
        if idx % per_image == 0:
            ds.save_png(out / hr, s.hr)
        ds.save_png(out / paths["lr"], s.lr)
        ds.save_mask_png(out / paths["mask"], s.mask)
        ds.save_mask_png(out / paths["lr_mask"], s.lr_mask)
        geometry.save_hom(out / paths["hom"], s.homography)
        entries.append({"image": image, "family": fam, "scale": s.scale, **paths})
    manifest = {"seed": int(cfg["seed"]), "count": count, "families": families,
                "canvas": int(cfg["canvas"]), "frame": int(cfg["frame"]), "entries": entries}
    text = json.dumps(manifest, indent=1, sort_keys=True)
    (out / "manifest.json").write_text(text)
    return {"manifest": str(out / "manifest.json"), "entries": len(entries),
            "sha256": hashlib.sha256(text.encode()).hexdigest()}


def load_manifest(data_dir) -> tuple[dict, list[ds.WarpSample]]:
    """Rebuild ``WarpSample`` objects from a directory written by ``gen-data``."""
    root = Path(data_dir)
    path = root / "manifest.json"
    if not path.is_file():
        raise ValidationError(f"no manifest.json in {root}")
    manifest = json.loads(path.read_text())
    samples = []
    for e in manifest["entries"]:
        hr = ds.load_png(require_file(root / e["hr"]))
        lr = ds.load_png(require_file(root / e["lr"]))
        h = geometry.load_hom(require_file(root / e["hom"]))
        _, H, W = hr.shape
        _, lh, lw = lr.shape
        mask = geometry.valid_region_mask(geometry.invert(h), lw, lh, W, H)
        lr_mask = geometry.valid_region_mask(h, W, H, lw, lh)
        samples.append(ds.WarpSample(lr, hr, h, mask, lr_mask, e["family"], float(e["scale"])))
    return manifest, samples


# ---------------------------------------------------------------- image commands


def cmd_warp(cfg: dict) -> dict:
    img = ds.load_png(require_file(cfg["input"]))
    h = read_matrix(cfg["matrix"])
    _, H, W = img.shape
    size = parse_size(cfg["size"]) or (H, W)
    out, _ = ds.warp_image(img, geometry.invert(h), size[1], size[0])
    ds.save_png(cfg["out"], out)
    return {"out": str(cfg["out"])}


def _estimate(img: np.ndarray, out_shape, cfg: dict, sten: md.Sten) -> se.EstimationResult:
    E = se.estimator_from_checkpoint(load_checkpoint(require_file(cfg["estimator"])))
    rng = np.random.default_rng(int(cfg["seed"]))
    H, W = out_shape
    ecfg = se.EstimationConfig(n=int(cfg["n"]), T=int(cfg["T"]), alpha=float(cfg["alpha"]),
                               step_size=float(cfg.get("step_size", 1.0)))
    cands = se.sample_candidates(ecfg.n, ecfg.candidates, rng, center=((W - 1) / 2, (H - 1) / 2))
    return se.self_estimate(img, cands, E, sten, ecfg, out_shape)


def cmd_unwarp(cfg: dict) -> dict:
    img = ds.load_png(require_file(cfg["input"]))
    _, H, W = img.shape
    out_shape = parse_size(cfg["size"]) or (H, W)
    result = {"out": str(cfg["out"])}
    sten = None
    if cfg["method"] == "sten" or cfg["estimate"]:
        if not cfg["checkpoint"]:
            raise ConfigError("the sten method and --estimate need a checkpoint", ["checkpoint"])
        sten = md.load_model(require_file(cfg["checkpoint"]))
    if cfg["estimate"]:
        if not cfg["estimator"]:
            raise ConfigError("--estimate needs an estimator checkpoint", ["estimator"])
        est = _estimate(img, out_shape, cfg, sten)
        h = est.homography
        hom_path = Path(cfg["out"]).with_suffix(".hom")
        geometry.save_hom(hom_path, h)
        result["hom"] = str(hom_path)
    elif cfg["matrix"] is not None:
        h = read_matrix(cfg["matrix"])
    else:
        raise ConfigError("unwarp needs --matrix or --estimate", ["matrix"])
    geometry.invert(h)  # raises SingularMatrix early
    if cfg["method"] == "sten":
        pred = md.unwarp(sten, img, h, out_shape)
    elif cfg["method"] == "bicubic":
        pred, _ = ds.warp_image(img, h, out_shape[1], out_shape[0])
    else:
        raise ConfigError(f"unknown method {cfg['method']!r}", ["method"])
    ds.save_png(cfg["out"], pred)
    if cfg["gt"]:
        gt = ds.load_png(require_file(cfg["gt"]))
        mask = geometry.valid_region_mask(geometry.invert(h), W, H, out_shape[1], out_shape[0])
        result["psnr_db"] = ds.psnr(np.clip(pred, 0, 1), gt, mask)
    return result


# ---------------------------------------------------------------- learning commands


def cmd_train(cfg: dict) -> dict:
    _, samples = load_manifest(cfg["data"])
    if not samples:
        raise EmptyDataset("training manifest has no entries")
    tcfg = md.TrainConfig(steps=int(cfg["steps"]), batch_size=int(cfg["batch_size"]), lr=float(cfg["lr"]),
                          lr_halve_every=int(cfg["lr_halve_every"]), crop=int(cfg["crop"]),
                          seed=int(cfg["seed"]))
    model = md.Sten(md.StenConfig(seed=int(cfg["seed"])))
    res = md.train(model, samples, tcfg, dump_path=Path(cfg["out"]).with_suffix(".dump.json"))
    save_checkpoint(cfg["out"], res.checkpoint)
    if cfg["loss_csv"]:
        res.write_loss_csv(cfg["loss_csv"])
    return {"checkpoint": str(cfg["out"]), "final_loss": res.history[-1][1] if res.history else None}


def cmd_train_estimator(cfg: dict) -> dict:
    _, samples = load_manifest(cfg["data"])
    if not samples:
        raise EmptyDataset("training manifest has no entries")
    sten = md.load_model(require_file(cfg["checkpoint"]))
    ecfg = se.EstimatorTrainConfig(perturbations=int(cfg["perturbations"]),
                                   eps_range=(0.0, float(cfg["max_eps"])), eps_power=float(cfg["eps_power"]),
                                   kind=cfg["kind"], target=cfg["target"], augment=parse_bool(cfg["augment"]),
                                   views=int(cfg["views"]),
                                   steps=int(cfg["steps"]), lr=float(cfg["lr"]), seed=int(cfg["seed"]))
    E, history = se.train_error_estimator(sten, samples, ecfg)
    save_checkpoint(cfg["out"], se.estimator_checkpoint(E, ecfg.steps, ecfg.seed))
    return {"estimator": str(cfg["out"]), "final_loss": history[-1] if history else None}


def cmd_eval(cfg: dict) -> dict:
    methods = split_list(cfg["methods"])
    model = md.load_model(require_file(cfg["checkpoint"])) if "sten" in methods else None
    if cfg["data"]:
        _, samples = load_manifest(cfg["data"])
        groups: dict = {}
        for s in samples:
            groups.setdefault(s.family, []).append(s)
        if not samples:
            raise EmptyDataset("evaluation manifest has no entries")
        rows = ds.evaluate_samples(model, groups, methods, cfg["dataset_name"])
    else:
        ecfg = ds.EvalConfig(n_images=int(cfg["n_images"]), families=tuple(split_list(cfg["families"])),
                             seed=int(cfg["seed"]), dataset=cfg["dataset_name"], methods=tuple(methods))
        rows = ds.eval_suite(model, ecfg)
    ds.write_metrics_csv(rows, cfg["out"])
    return {"metrics": str(cfg["out"]), "rows": rows}


def cmd_estimate(cfg: dict) -> dict:
    img = ds.load_png(require_file(cfg["input"]))
    out_shape = parse_size(cfg["size"]) or img.shape[1:]
    sten = md.load_model(require_file(cfg["checkpoint"]))
    est = _estimate(img, out_shape, cfg, sten)
    geometry.save_hom(cfg["out"], est.homography)
    report = est.report()
    if cfg["report"]:
        Path(cfg["report"]).write_text(json.dumps(report, indent=1))
    return {"hom": str(cfg["out"]), "fallback": est.fallback}


COMMANDS = {"gen-data": cmd_gen_data, "warp": cmd_warp, "unwarp": cmd_unwarp, "train": cmd_train,
            "train-estimator": cmd_train_estimator, "eval": cmd_eval, "estimate": cmd_estimate}


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scunwarp", description="Screen-content image unwarping.")
    parser.add_argument("--threads", type=int, default=None, help="cap torch intra-op threads")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file of settings; flags override it")
        return p

    p = common(sub.add_parser("gen-data", help="write a synthetic SCI-toy dataset"))
    p.add_argument("--out")
    p.add_argument("--count", type=int)
    p.add_argument("--families", help="comma-separated: x2,homography,translation,identity")
    p.add_argument("--seed", type=int)
    p.add_argument("--canvas", type=int)
    p.add_argument("--frame", type=int, help="window border width in pixels")

    p = common(sub.add_parser("warp", help="apply a homography to an image"))
    p.add_argument("--input")
    p.add_argument("--out")
    p.add_argument("--matrix", help=".hom file or nine numbers")
    p.add_argument("--size", help="output WxH (default: input size)")

    p = common(sub.add_parser("unwarp", help="undo a homography"))
    p.add_argument("--input")
    p.add_argument("--out")
    p.add_argument("--matrix", help=".hom file or nine numbers; maps output pixels to input pixels")
    p.add_argument("--size", help="output WxH (default: input size)")
    p.add_argument("--checkpoint")
    p.add_argument("--method", choices=("sten", "bicubic"))
    p.add_argument("--gt", help="ground-truth PNG for a PSNR report")
    p.add_argument("--estimate", action="store_true", help="estimate the matrix blindly")
    p.add_argument("--estimator", help="error-estimator checkpoint for --estimate")
    p.add_argument("--n", type=int)
    p.add_argument("--T", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--seed", type=int)

    p = common(sub.add_parser("train", help="train the unwarping model"))
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-halve-every", dest="lr_halve_every", type=int)
    p.add_argument("--crop", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--loss-csv", dest="loss_csv")

    p = common(sub.add_parser("train-estimator", help="train the transformation-error estimator"))
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.add_argument("--steps", type=int)
    p.add_argument("--perturbations", type=int)
    p.add_argument("--max-eps", dest="max_eps", type=float)
    p.add_argument("--eps-power", dest="eps_power", type=float, help="eps = max_eps * u**power")
    p.add_argument("--kind", choices=("translation", "full"))
    p.add_argument("--target", choices=("displacement", "cycle"))
    p.add_argument("--augment", choices=("true", "false"))
    p.add_argument("--views", type=int, choices=(1, 8))
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)

    p = common(sub.add_parser("eval", help="masked PSNR table as CSV"))
    p.add_argument("--data", help="dataset directory; omit to generate a held-out set")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.add_argument("--methods")
    p.add_argument("--dataset-name", dest="dataset_name")
    p.add_argument("--n-images", dest="n_images", type=int)
    p.add_argument("--families")
    p.add_argument("--seed", type=int)

    p = common(sub.add_parser("estimate", help="estimate the homography of a warped image"))
    p.add_argument("--input")
    p.add_argument("--checkpoint")
    p.add_argument("--estimator")
    p.add_argument("--out", help=".hom output path")
    p.add_argument("--report", help="JSON report path")
    p.add_argument("--size", help="unwarped WxH (default: input size)")
    p.add_argument("--n", type=int)
    p.add_argument("--T", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--step-size", dest="step_size", type=float)
    p.add_argument("--seed", type=int)
    return parser


def _fail(code: int, exc: BaseException) -> int:
    body = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        body["keys"] = list(exc.keys)
    print(json.dumps(body), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    if args.threads is not None:
        if args.threads < 1:
            return _fail(2, ValidationError("--threads must be >= 1"))
        torch.set_num_threads(args.threads)
    try:
        cfg = resolve_config(args.command, args)
        result = COMMANDS[args.command](cfg)
    except NUMERIC_ERRORS as exc:
        return _fail(3, exc)
    except (ScunwarpError, ValueError, OSError, KeyError) as exc:
        return _fail(2, exc)
    print(json.dumps(result, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
