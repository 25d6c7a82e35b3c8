"""Command-line front end: register pairs, evaluate batches, warp, serve."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .imagery import Raster, box_downsample, load_image, resample, save_image
from .models import make_fixture_model
from .pipeline import PipelineConfig, PipelineError, run_batch, run_pipeline
from .preprocess import EXTERNAL, TS, TSEF
from .transform import load_transform, rescale_to_level

MODE_CHOICES = ("greyscale", "rgb", "blue-ratio", "h-stain")
KIND_CHOICES = ("rigid", "similarity", "affine")

EXIT_PARTIAL = 2


@click.group()
def main():
    """Serial-section slide registration tools."""


def _mask_settings(mask: str) -> tuple[str, str | None]:
    if mask == "ts":
        return TS, None
    if mask == "tsef":
        return TSEF, None
    if mask.startswith("external:"):
        mask_dir = mask.split(":", 1)[1]
        if not mask_dir:
            raise click.ClickException("external mask needs a directory: external:<dir>")
        return EXTERNAL, mask_dir
    raise click.ClickException(
        f"unknown mask option {mask!r}; expected ts, tsef, or external:<dir>"
    )


def _build_config(model, mode, mask, kind, u) -> PipelineConfig:
    flavor, mask_dir = _mask_settings(mask)
    try:
        return PipelineConfig(
            model_path=model,
            mode=mode.replace("-", "_"),
            mask_flavor=flavor,
            mask_dir=mask_dir,
            kind=kind,
            u=u,
        )
    except PipelineError as exc:
        raise click.ClickException(str(exc)) from exc


_shared_options = [
    click.option("--model", envvar="SLIDEREG_MODEL", required=True,
                 help="feature backbone file (env: SLIDEREG_MODEL)"),
    click.option("--mode", type=click.Choice(MODE_CHOICES), default="greyscale",
                 show_default=True, help="channel the feature stages work on"),
    click.option("--mask", default="tsef", show_default=True,
                 help="ts | tsef | external:<dir with ref_mask.png and mov_mask.png>"),
    click.option("--kind", type=click.Choice(KIND_CHOICES), default="rigid",
                 show_default=True, help="transform family to fit"),
    click.option("--u", default=128, show_default=True,
                 help="feature matches kept per fitting step"),
]


def _with_shared_options(cmd):
    for opt in reversed(_shared_options):
        cmd = opt(cmd)
    return cmd


@main.command()
@click.argument("ref")
@click.argument("mov")
@_with_shared_options
@click.option("--out", default="registration_out", show_default=True,
              help="directory for transform.json, diagnostics.json, warped.png")
def register(ref, mov, model, mode, mask, kind, u, out):
    """Register MOV onto REF and write the transform artifacts."""
    cfg = _build_config(model, mode, mask, kind, u)
    res = run_pipeline(ref, mov, cfg, out)
    for flag in res.flags:
        click.echo(f"flag: {flag}", err=True)
    if res.success:
        pre = res.diagnostics["stages"]["prealign"]
        click.echo(f"pre-alignment rotation {pre['rotation_deg']:+.1f} deg, "
                   f"mask overlap {pre['overlap']:.3f}")
        click.echo(f"wrote {Path(out) / 'transform.json'}")
        return
    # nothing ran at all -> plain error; a mid-cascade failure is a partial result
    sys.exit(1 if res.failed_stage == "load" else EXIT_PARTIAL)


@main.command()
@click.option("--manifest", required=True,
              help="CSV with ref_image,mov_image,ref_landmarks,mov_landmarks")
@_with_shared_options
@click.option("--out", default="evaluation_out", show_default=True)
@click.option("--workers", default=1, show_default=True,
              help="pairs registered concurrently")
def evaluate(manifest, model, mode, mask, kind, u, out, workers):
    """Run a manifest of pairs and report per-stage landmark metrics."""
    cfg = _build_config(model, mode, mask, kind, u)
    try:
        report, _ = run_batch(manifest, cfg, out, workers=workers)
    except (PipelineError, OSError) as exc:
        raise click.ClickException(str(exc)) from exc
    for name, agg in report["stage_summary"].items():
        click.echo(f"{name:10s} median-of-medians rTRE {agg['mmrtre']:.5f}  "
                   f"mean robustness {agg.get('mean_robustness', 0.0):.2f}")
    click.echo(f"{report['n_pairs'] - report['n_failed']}/{report['n_pairs']} pairs "
               f"registered; report at {Path(out) / 'report.json'}")
    if report["n_failed"]:
        sys.exit(EXIT_PARTIAL)


def _dims_at_level(w: int, h: int, level: int) -> tuple[int, int]:
    for _ in range(level):
        w, h = (w + 1) // 2, (h + 1) // 2
    return w, h


@main.command()
@click.argument("image")
@click.option("--transform", "transform_path", required=True,
              help="transform JSON produced by register")
@click.option("--out", required=True, help="output image path")
@click.option("--level", default=0, show_default=True,
              help="pyramid level to render (image is box-downsampled to it)")
@click.option("--interp", type=click.Choice(["nearest", "bilinear"]),
              default="bilinear", show_default=True)
def warp(image, transform_path, out, level, interp):
    """Warp IMAGE through a stored transform into the reference frame."""
    try:
        raster = load_image(image)
        t = load_transform(transform_path)
        with open(transform_path) as fh:
            doc = json.load(fh)
    except (ValueError, OSError) as exc:
        raise click.ClickException(str(exc)) from exc

    data = raster.data
    for _ in range(level):
        data = box_downsample(data)
    plane = Raster(data, level=level, downsample=float(2**level))

    ref_frame = doc.get("frame", {}).get("ref")
    if ref_frame:
        out_w, out_h = _dims_at_level(ref_frame["width"], ref_frame["height"], level)
    else:
        out_w, out_h = plane.width, plane.height
    t_level = rescale_to_level(t, level)
    warped = resample(plane, t_level.m, (out_w, out_h), mode=interp, fill=255)
    save_image(warped, out)
    click.echo(f"wrote {out} ({out_w}x{out_h} at level {level})")


@main.command()
@click.option("--pairs-dir", required=True,
              help="directory of registered pairs (transform.json + pyramids)")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
@click.option("--tile-size", default=256, show_default=True)
def serve(pairs_dir, host, port, tile_size):
    """Serve reference and warped moving tiles over HTTP."""
    import uvicorn

    from .service import create_app

    try:
        app = create_app(pairs_dir, tile_size)
    except ValueError as exc:
        raise click.ClickException(str(exc)) from exc
    uvicorn.run(app, host=host, port=port)


@main.command("make-model")
@click.argument("out")
@click.option("--seed", default=0, show_default=True)
def make_model(out, seed):
    """Write a seeded random-weight feature backbone (tests and demos)."""
    make_fixture_model(out, seed=seed)
    click.echo(f"wrote {out}")


if __name__ == "__main__":
    main()
