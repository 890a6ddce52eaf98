import json

import numpy as np
import torch

from scunwarp import branches as br
from scunwarp import cli
from scunwarp import dataset as ds
from scunwarp import geometry as g
from scunwarp import model as md
from scunwarp import self_estimation as se
from scunwarp.geometry import Homography
from scunwarp.nn_core import load_checkpoint, save_checkpoint

TINY_ARCH = dict(latent_dim=8, channels=8, encoder_depth=1, decoder_hidden=(8,), fusion_hidden=8,
                 seb=br.SebConfig(channels=8, stripe=(2, 4)))


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def smooth_png(path, seed=0, size=64):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    img = np.stack([0.5 + a * xx + b * yy for a, b in rng.uniform(-0.3, 0.3, (3, 2))]).astype(np.float32)
    ds.save_png(path, img)
    return ds.load_png(path)


def test_gen_data_empty_and_hash(tmp_path, capsys):
    code, out, _ = run(capsys, "gen-data", "--out", tmp_path / "empty", "--count", 0)
    assert code == 0
    manifest = json.loads((tmp_path / "empty" / "manifest.json").read_text())
    assert manifest["entries"] == []
    hashes = []
    for name in ("a", "b"):
        code, out, _ = run(capsys, "gen-data", "--out", tmp_path / name, "--count", 3, "--seed", 11,
                           "--canvas", 64, "--families", "x2,homography,translation")
        assert code == 0
        hashes.append(json.loads(out)["sha256"])
    assert hashes[0] == hashes[1]
    assert (tmp_path / "a" / "lr" / "00002_homography.png").read_bytes() == \
        (tmp_path / "b" / "lr" / "00002_homography.png").read_bytes()


def test_gen_data_entries_satisfy_mask_invariant(tmp_path, capsys):
    run(capsys, "gen-data", "--out", tmp_path, "--count", 4, "--canvas", 64,
        "--families", "x2,homography,translation")
    manifest, samples = cli.load_manifest(tmp_path)
    assert len(samples) == 12
    for e, s in zip(manifest["entries"], samples):
        _, H, W = s.hr.shape
        _, lh, lw = s.lr.shape
        stored = ds.load_png(tmp_path / e["mask"])[0] > 0.5
        assert np.array_equal(stored, s.mask)
        ys, xs = np.nonzero(s.mask)
        pre = g.apply(s.homography, np.stack([xs, ys], -1).astype(np.float64))
        assert np.all((pre > -0.5) & (pre < np.array([lw, lh]) - 0.5))


def test_warp_identity_is_byte_identical(tmp_path, capsys):
    img = ds.gen_sci_toy(ds.SciToyConfig(seed=0))
    ds.save_png(tmp_path / "in.png", img)
    code, _, _ = run(capsys, "warp", "--input", tmp_path / "in.png", "--out", tmp_path / "out.png",
                     "--matrix", "1 0 0 0 1 0 0 0 1")
    assert code == 0
    assert np.array_equal(ds.to_uint8(ds.load_png(tmp_path / "in.png")), ds.to_uint8(ds.load_png(tmp_path / "out.png")))
    assert (tmp_path / "in.png").read_bytes() == (tmp_path / "out.png").read_bytes()


def test_warp_then_bicubic_unwarp_cycle(tmp_path, capsys):
    img = smooth_png(tmp_path / "in.png")
    h = Homography.translation(32, 32) @ Homography.rotation(0.15) @ Homography.scaling(0.9) \
        @ Homography.translation(-32, -32)
    g.save_hom(tmp_path / "w.hom", h)
    assert run(capsys, "warp", "--input", tmp_path / "in.png", "--out", tmp_path / "w.png",
               "--matrix", tmp_path / "w.hom")[0] == 0
    code, out, _ = run(capsys, "unwarp", "--input", tmp_path / "w.png", "--out", tmp_path / "u.png",
                       "--matrix", tmp_path / "w.hom", "--method", "bicubic", "--gt", tmp_path / "in.png")
    assert code == 0
    from scipy.ndimage import binary_erosion

    mask = g.valid_region_mask(g.invert(h), 64, 64, 64, 64)
    interior = binary_erosion(mask, iterations=4)
    assert ds.psnr(ds.load_png(tmp_path / "u.png"), img, interior) > 40
    assert "psnr_db" in json.loads(out)


def tiny_checkpoints(tmp_path):
    m = md.Sten(md.StenConfig(**TINY_ARCH))
    save_checkpoint(tmp_path / "sten.bin", md.make_checkpoint(m))
    E = se.ErrorEstimator(width=4)
    save_checkpoint(tmp_path / "est.bin", se.estimator_checkpoint(E))
    return tmp_path / "sten.bin", tmp_path / "est.bin"


def test_unwarp_with_estimate_writes_hom(tmp_path, capsys):
    sten, est = tiny_checkpoints(tmp_path)
    img = ds.gen_sci_toy(ds.SciToyConfig(canvas=(64, 64), seed=1))
    ds.save_png(tmp_path / "in.png", img)
    code, out, err = run(capsys, "unwarp", "--input", tmp_path / "in.png", "--out", tmp_path / "res.png",
                         "--checkpoint", sten, "--estimate", "--estimator", est, "--n", 2, "--T", 1)
    assert code == 0, err
    assert (tmp_path / "res.png").exists() and (tmp_path / "res.hom").exists()
    g.load_hom(tmp_path / "res.hom")


def test_estimate_command_report(tmp_path, capsys):
    sten, est = tiny_checkpoints(tmp_path)
    ds.save_png(tmp_path / "in.png", ds.gen_sci_toy(ds.SciToyConfig(canvas=(64, 64), seed=2)))
    code, _, err = run(capsys, "estimate", "--input", tmp_path / "in.png", "--checkpoint", sten,
                       "--estimator", est, "--out", tmp_path / "m.hom", "--report", tmp_path / "r.json",
                       "--n", 3, "--T", 2)
    assert code == 0, err
    report = json.loads((tmp_path / "r.json").read_text())
    assert len(report["candidate_errors"]) == 3 and "losses" in report


def test_eval_on_empty_manifest_fails(tmp_path, capsys):
    run(capsys, "gen-data", "--out", tmp_path / "d", "--count", 0)
    code, _, err = run(capsys, "eval", "--data", tmp_path / "d", "--methods", "bicubic",
                       "--out", tmp_path / "m.csv")
    assert code == 2
    assert json.loads(err)["error"] == "EmptyDataset"


def test_train_and_eval_on_manifest(tmp_path, capsys):
    run(capsys, "gen-data", "--out", tmp_path / "d", "--count", 2, "--canvas", 64)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"steps": 2, "batch_size": 1, "crop": 16}))
    code, _, err = run(capsys, "train", "--config", cfg, "--data", tmp_path / "d", "--out", tmp_path / "s.bin",
                       "--lr", 0)
    assert code == 0, err
    ckpt = load_checkpoint(tmp_path / "s.bin")
    assert ckpt.step == 2
    init = md.make_checkpoint(md.Sten(md.StenConfig()))
    params = dict(md.Sten(md.StenConfig()).named_parameters())
    for name in params:
        assert np.array_equal(ckpt.params[name], init.params[name]), name
    code, out, err = run(capsys, "eval", "--data", tmp_path / "d", "--checkpoint", tmp_path / "s.bin",
                         "--out", tmp_path / "m.csv")
    assert code == 0, err
    rows = json.loads(out)["rows"]
    assert {r["method"] for r in rows} == {"bicubic", "sten"}


def test_numeric_failure_exit_code(tmp_path, capsys):
    run(capsys, "gen-data", "--out", tmp_path / "d", "--count", 1, "--canvas", 64, "--families", "x2")
    code, _, err = run(capsys, "train", "--data", tmp_path / "d", "--out", tmp_path / "s.bin",
                       "--steps", 6, "--batch-size", 1, "--crop", 16, "--lr", 1e30)
    assert code == 3
    assert json.loads(err)["error"] == "NonFiniteLoss"


def test_validation_errors(tmp_path, capsys):
    ds.save_png(tmp_path / "in.png", np.zeros((3, 8, 8), dtype=np.float32))
    code, _, err = run(capsys, "warp", "--input", tmp_path / "in.png", "--out", tmp_path / "o.png",
                       "--matrix", "0 0 0 0 0 0 0 0 1")
    assert code == 2 and json.loads(err)["error"] == "SingularMatrix"
    code, _, err = run(capsys, "warp", "--input", tmp_path / "in.png")
    body = json.loads(err)
    assert code == 2 and body["keys"] == ["out", "matrix"]
    (tmp_path / "c.json").write_text(json.dumps({"bogus": 1, "steps": 3}))
    code, _, err = run(capsys, "train", "--config", tmp_path / "c.json", "--data", "x", "--out", "y")
    assert code == 2 and json.loads(err)["keys"] == ["bogus"]
    code, _, err = run(capsys, "warp", "--input", tmp_path / "missing.png", "--out", "o.png", "--matrix", "1 0 0 0 1 0 0 0 1")
    assert code == 2
    assert run(capsys, "no-such-command")[0] == 2


def test_config_precedence(tmp_path):
    parser = cli.build_parser()
    (tmp_path / "c.json").write_text(json.dumps({"steps": 7, "lr": 0.5}))
    args = parser.parse_args(["train", "--config", str(tmp_path / "c.json"), "--data", "d", "--out", "o",
                              "--steps", "9"])
    cfg = cli.resolve_config("train", args)
    assert cfg["steps"] == 9 and cfg["lr"] == 0.5 and cfg["batch_size"] == cli.DEFAULTS["train"]["batch_size"]


def test_threads_flag(tmp_path, capsys):
    before = torch.get_num_threads()
    try:
        code, _, _ = run(capsys, "--threads", 1, "gen-data", "--out", tmp_path, "--count", 0)
        assert code == 0 and torch.get_num_threads() == 1
        assert run(capsys, "--threads", 0, "gen-data", "--out", tmp_path, "--count", 0)[0] == 2
    finally:
        torch.set_num_threads(before)
