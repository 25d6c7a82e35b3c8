"""CLI behaviour: commands, exit codes, artifact paths."""

import json

import numpy as np
import pytest
from click.testing import CliRunner

from tests.phantoms import tissue_image
from slidereg.cli import main
from slidereg.imagery import Raster, box_downsample, load_image, resample, save_image
from slidereg.metrics import LandmarkSet, save_landmarks
from slidereg.features import load_extractor
from slidereg.transform import (
    compose,
    load_transform,
    rescale_to_level,
    rotation_about,
    translation,
)

SIDE = 384


@pytest.fixture(scope="module")
def workdir(tmp_path_factory, model_path):
    """A directory with a small registered-able pair and the model beside it."""
    root = tmp_path_factory.mktemp("cli")
    ref = tissue_image(SIDE, seed=21)
    motion = compose(translation(18.0, -12.0), rotation_about(9.0, (SIDE / 2, SIDE / 2)))
    mov = resample(ref, motion.m, (SIDE, SIDE))
    save_image(ref, root / "ref.png")
    save_image(mov, root / "mov.png")
    save_image(Raster(np.full((SIDE, SIDE), 255, dtype=np.uint8)), root / "blank.png")
    return {"root": root, "model": str(model_path), "motion": motion}


@pytest.fixture()
def runner():
    return CliRunner()


def test_register_success_exit_zero(workdir, runner, tmp_path):
    root = workdir["root"]
    out = tmp_path / "regout"
    result = runner.invoke(main, [
        "register", str(root / "ref.png"), str(root / "mov.png"),
        "--model", workdir["model"], "--out", str(out),
    ])
    assert result.exit_code == 0, result.output
    assert "pre-alignment rotation" in result.output
    assert (out / "transform.json").exists()
    assert (out / "diagnostics.json").exists()

    # the recovered transform undoes the synthetic motion
    t = load_transform(out / "transform.json")
    pts = np.array([[100.0, 100.0], [280.0, 120.0], [150.0, 300.0]])
    err = np.linalg.norm(t.apply(workdir["motion"].apply(pts)) - pts, axis=1)
    assert np.median(err) < 0.005 * np.hypot(SIDE, SIDE)


def test_register_model_from_environment(workdir, runner, tmp_path):
    root = workdir["root"]
    out = tmp_path / "envout"
    result = runner.invoke(main, [
        "register", str(root / "ref.png"), str(root / "mov.png"), "--out", str(out),
    ], env={"SLIDEREG_MODEL": workdir["model"]})
    assert result.exit_code == 0, result.output
    assert (out / "transform.json").exists()


def test_register_partial_exit_two(workdir, runner, tmp_path):
    root = workdir["root"]
    result = runner.invoke(main, [
        "register", str(root / "ref.png"), str(root / "blank.png"),
        "--model", workdir["model"], "--out", str(tmp_path / "partial"),
    ])
    assert result.exit_code == 2
    assert "partial: failed at prealign" in result.output
    # the flagged partial document is still written
    assert (tmp_path / "partial" / "transform.json").exists()


def test_register_unreadable_input_exit_one(workdir, runner, tmp_path):
    result = runner.invoke(main, [
        "register", str(workdir["root"] / "ref.png"), str(tmp_path / "nope.png"),
        "--model", workdir["model"], "--out", str(tmp_path / "eout"),
    ])
    assert result.exit_code == 1
    assert "failed at load" in result.output


def test_register_bad_mask_option_exit_one(workdir, runner, tmp_path):
    root = workdir["root"]
    result = runner.invoke(main, [
        "register", str(root / "ref.png"), str(root / "mov.png"),
        "--model", workdir["model"], "--mask", "bogus", "--out", str(tmp_path / "m"),
    ])
    assert result.exit_code == 1
    assert "unknown mask option" in result.output

    result = runner.invoke(main, [
        "register", str(root / "ref.png"), str(root / "mov.png"),
        "--model", workdir["model"], "--mask", "external:", "--out", str(tmp_path / "m"),
    ])
    assert result.exit_code == 1
    assert "external mask needs a directory" in result.output


def test_register_external_masks(workdir, runner, tmp_path):
    root = workdir["root"]
    mask_dir = tmp_path / "masks"
    mask_dir.mkdir()
    for side, name in (("ref", "ref_mask.png"), ("mov", "mov_mask.png")):
        img = load_image(root / f"{side}.png" if side == "ref" else root / "mov.png")
        bits = (img.data.min(axis=-1) if img.data.ndim == 3 else img.data) < 250
        save_image(Raster(bits.astype(np.uint8) * 255), mask_dir / name)
    out = tmp_path / "extout"
    result = runner.invoke(main, [
        "register", str(root / "ref.png"), str(root / "mov.png"),
        "--model", workdir["model"], "--mask", f"external:{mask_dir}",
        "--out", str(out),
    ])
    assert result.exit_code == 0, result.output
    assert (out / "transform.json").exists()


def test_evaluate_manifest(workdir, runner, tmp_path):
    root = workdir["root"]
    motion = workdir["motion"]
    # landmarks: ref points and where the synthetic motion puts them
    pts = np.array([[90.0, 110.0], [260.0, 140.0], [180.0, 290.0], [120.0, 200.0]])
    save_landmarks(LandmarkSet(pts), root / "ref_land.csv")
    save_landmarks(LandmarkSet(motion.apply(pts)), root / "mov_land.csv")
    manifest = tmp_path / "pairs.csv"
    manifest.write_text(
        "ref_image,mov_image,ref_landmarks,mov_landmarks\n"
        f"{root / 'ref.png'},{root / 'mov.png'},{root / 'ref_land.csv'},{root / 'mov_land.csv'}\n"
    )
    out = tmp_path / "evalout"
    result = runner.invoke(main, [
        "evaluate", "--manifest", str(manifest),
        "--model", workdir["model"], "--out", str(out),
    ])
    assert result.exit_code == 0, result.output
    assert "median-of-medians rTRE" in result.output
    assert "1/1 pairs registered" in result.output
    report = json.loads((out / "report.json").read_text())
    assert report["n_pairs"] == 1 and report["n_failed"] == 0
    assert (out / "step_medians.csv").exists()


def test_evaluate_partial_exit_two(workdir, runner, tmp_path):
    root = workdir["root"]
    manifest = tmp_path / "pairs.csv"
    manifest.write_text(
        "ref_image,mov_image\n"
        f"{root / 'ref.png'},{root / 'mov.png'}\n"
        f"{root / 'ref.png'},{tmp_path / 'missing.png'}\n"
    )
    out = tmp_path / "evalout2"
    result = runner.invoke(main, [
        "evaluate", "--manifest", str(manifest),
        "--model", workdir["model"], "--out", str(out),
    ])
    assert result.exit_code == 2, result.output
    assert "1/2 pairs registered" in result.output


def test_evaluate_bad_manifest_exit_one(workdir, runner, tmp_path):
    manifest = tmp_path / "bad.csv"
    manifest.write_text("left,right\na,b\n")
    result = runner.invoke(main, [
        "evaluate", "--manifest", str(manifest),
        "--model", workdir["model"], "--out", str(tmp_path / "x"),
    ])
    assert result.exit_code == 1
    assert "manifest" in result.output


def test_warp_matches_direct_resample(workdir, runner, tmp_path):
    root = workdir["root"]
    out_dir = tmp_path / "w"
    out_dir.mkdir()
    reg = runner.invoke(main, [
        "register", str(root / "ref.png"), str(root / "mov.png"),
        "--model", workdir["model"], "--out", str(out_dir / "reg"),
    ])
    assert reg.exit_code == 0, reg.output

    for level, interp in ((0, "bilinear"), (1, "nearest")):
        out_png = out_dir / f"warp_{level}_{interp}.png"
        result = runner.invoke(main, [
            "warp", str(root / "mov.png"),
            "--transform", str(out_dir / "reg" / "transform.json"),
            "--out", str(out_png), "--level", str(level), "--interp", interp,
        ])
        assert result.exit_code == 0, result.output

        t = load_transform(out_dir / "reg" / "transform.json")
        data = load_image(root / "mov.png").data
        for _ in range(level):
            data = box_downsample(data)
        plane = Raster(data, level=level, downsample=float(2**level))
        want = resample(plane, rescale_to_level(t, level).m,
                        ((SIDE + (1 << level) - 1) >> level,) * 2, mode=interp)
        got = load_image(out_png)
        assert got.data.shape == want.data.shape
        np.testing.assert_array_equal(got.data, want.data)


def test_warp_bad_transform_exit_one(workdir, runner, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("not json")
    result = runner.invoke(main, [
        "warp", str(workdir["root"] / "mov.png"),
        "--transform", str(bad), "--out", str(tmp_path / "o.png"),
    ])
    assert result.exit_code == 1


def test_make_model_writes_loadable_backbone(runner, tmp_path):
    out = tmp_path / "bb.pt"
    result = runner.invoke(main, ["make-model", str(out), "--seed", "7"])
    assert result.exit_code == 0, result.output
    assert out.exists()
    load_extractor(str(out))  # loads without raising


def test_serve_rejects_missing_dir(runner, tmp_path):
    result = runner.invoke(main, [
        "serve", "--pairs-dir", str(tmp_path / "absent"), "--port", "0",
    ])
    assert result.exit_code == 1
