"""End-to-end registration pipeline and batch evaluation.

One ``run_pipeline`` call executes the full cascade on an image pair:
preprocessing (style normalization, tissue segmentation), rough COM/rotation
pre-alignment at a coarse working scale, whole-tissue and block-wise
feature refinement at a finer scale, and a final phase-correlation offset.
Every stage's cumulative transform is recorded; the result is written as a
deterministic level-0 transform file plus a separate diagnostics file and a
preview of the warped moving image at the feature working scale.
"""

from __future__ import annotations

import csv
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import featurealign, localalign, metrics, prealign, preprocess
from .features import Extractor, load_extractor
from .imagery import BACKGROUND, Raster, box_downsample, load_image, resample, save_image
from .preprocess import DEFAULT_MODE, EXTERNAL, MODES, TSEF, TissueMask
from .transform import (
    KINDS,
    RIGID,
    PlanarTransform,
    RegistrationStages,
    identity,
    rescale_to_level,
    save_transform,
)

log = logging.getLogger(__name__)

TRANSFORM_NAME = "transform.json"
DIAGNOSTICS_NAME = "diagnostics.json"
WARPED_NAME = "warped.png"

PREALIGN_MAX_DIM = 512
DFBR_MAX_DIM = 1024

STAGE_ORDER = ("prealign", "tissue", "blockwise", "offset")

MANIFEST_FIELDS = ("ref_image", "mov_image", "ref_landmarks", "mov_landmarks")


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs for one registration run; defaults follow the standard recipe."""

    model_path: str | Path = ""
    mode: str = DEFAULT_MODE
    mask_flavor: str = TSEF
    mask_dir: str | Path | None = None  # EXTERNAL masks: <dir>/ref_mask.png, mov_mask.png
    prealign_max_dim: int = PREALIGN_MAX_DIM
    dfbr_max_dim: int = DFBR_MAX_DIM
    u: int = 128
    kind: str = RIGID
    trim: bool = False
    histogram_match: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise PipelineError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.kind not in KINDS:
            raise PipelineError(f"unknown estimation kind {self.kind!r}")
        if self.u < 4:
            raise PipelineError("U must be at least 4")
        if self.prealign_max_dim > self.dfbr_max_dim:
            raise PipelineError("pre-alignment scale must be at or below the feature scale")
        if self.mask_flavor == EXTERNAL and self.mask_dir is None:
            raise PipelineError("EXTERNAL masks need mask_dir")


@dataclass
class RegistrationResult:
    """What one pipeline run produced (possibly partially)."""

    stages: RegistrationStages
    final: PlanarTransform
    diagnostics: dict
    out_dir: Path | None
    success: bool
    failed_stage: str | None = None

    @property
    def flags(self) -> list[str]:
        return self.stages.flags


def _working_level(w: int, h: int, max_dim: int) -> int:
    level = 0
    while max(w, h) > max_dim:
        w = (w + 1) // 2
        h = (h + 1) // 2
        level += 1
    return level


def _to_level(raster: Raster, level: int) -> Raster:
    if raster.level > level:
        raise PipelineError("cannot upsample a raster to a coarser source level")
    data = raster.data
    for _ in range(level - raster.level):
        data = box_downsample(data)
    return Raster(data, level=level, downsample=float(2**level))


def _shrink_mask(bits: np.ndarray, levels: int) -> np.ndarray:
    """Halve a mask ``levels`` times; a cell is foreground if any of its
    source pixels were (keeps thin tissue from vanishing)."""
    out = bits
    for _ in range(levels):
        h, w = out.shape
        padded = np.zeros(((h + 1) // 2 * 2, (w + 1) // 2 * 2), dtype=bool)
        padded[:h, :w] = out
        out = padded.reshape(padded.shape[0] // 2, 2, padded.shape[1] // 2, 2).any(axis=(1, 3))
    return out


def _segment(raster: Raster, config: PipelineConfig, side: str) -> TissueMask:
    if config.mask_flavor == EXTERNAL:
        path = Path(config.mask_dir) / f"{side}_mask.png"
        full = load_image(path)
        if full.channels != 1:
            raise PipelineError(f"external mask {path} must be single-channel")
        bits = _shrink_mask(full.data >= 128, raster.level)
        if bits.shape != (raster.height, raster.width):
            raise PipelineError(f"external mask {path} does not match the image dimensions")
        return TissueMask(bits, EXTERNAL)
    return preprocess.segment_tissue(raster, config.mask_flavor)


def _warp_image(ref_like: Raster, mov: Raster, t: PlanarTransform) -> Raster:
    return resample(mov, t.m, (ref_like.width, ref_like.height),
                    mode="bilinear", fill=BACKGROUND)


def _warp_mask(ref_like: Raster, mov: Raster, mask: TissueMask,
               t: PlanarTransform) -> TissueMask:
    as_raster = Raster(mask.bits.astype(np.uint8) * 255, mov.level, mov.downsample)
    warped = resample(as_raster, t.m, (ref_like.width, ref_like.height),
                      mode="nearest", fill=0)
    return TissueMask(warped.data > 0, mask.flavor)


def run_pipeline(
    ref_path: str | Path,
    mov_path: str | Path,
    config: PipelineConfig,
    out_dir: str | Path | None = None,
    extractor: Extractor | None = None,
) -> RegistrationResult:
    """Register ``mov`` onto ``ref`` and (optionally) write the artifacts.

    A stage failure stops the cascade but still records and writes the
    transforms of every stage that succeeded, with a flag naming the failed
    stage; callers distinguish full success via ``result.success``.
    """
    stages = RegistrationStages()
    diagnostics: dict = {"stages": {}}
    final = identity()
    level_f = 0
    mode_ref_f = mode_mov_f = None

    try:
        if extractor is None:
            extractor = load_extractor(config.model_path)
        ref0 = load_image(ref_path)
        mov0 = load_image(mov_path)
        diagnostics["inputs"] = {
            "ref": {"path": str(ref_path), "width": ref0.width, "height": ref0.height},
            "mov": {"path": str(mov_path), "width": mov0.width, "height": mov0.height},
        }
    except (ValueError, OSError) as exc:
        return _finish(stages, final, diagnostics, out_dir, "load", str(exc),
                       None, None, 0)

    level_p = max(
        _working_level(ref0.width, ref0.height, config.prealign_max_dim),
        _working_level(mov0.width, mov0.height, config.prealign_max_dim),
    )
    level_f = max(
        _working_level(ref0.width, ref0.height, config.dfbr_max_dim),
        _working_level(mov0.width, mov0.height, config.dfbr_max_dim),
    )
    diagnostics["levels"] = {"prealign": level_p, "dfbr": level_f}

    try:
        t0 = time.perf_counter()
        ref_f = _to_level(ref0, level_f)
        mov_f = _to_level(mov0, level_f)
        mask_ref_f = _segment(ref_f, config, "ref")
        mask_mov_f = _segment(mov_f, config, "mov")
        mode_ref_f = preprocess.apply_mode(ref_f, config.mode)
        mode_mov_f = preprocess.apply_mode(mov_f, config.mode)
        # with no tissue to sample there is no style to transfer; the empty
        # mask then fails loudly in pre-alignment, which owns that contract
        can_match = bool(mask_ref_f.bits.any()) and bool(mask_mov_f.bits.any())
        if config.histogram_match and can_match and mode_ref_f.channels == 1:
            mode_ref_f, mode_mov_f = preprocess.histogram_match(
                (mode_ref_f, mode_mov_f), (mask_ref_f, mask_mov_f)
            )
        # pre-alignment always works on plain greyscale at its own scale
        mask_ref_p = TissueMask(_shrink_mask(mask_ref_f.bits, level_p - level_f),
                                mask_ref_f.flavor)
        mask_mov_p = TissueMask(_shrink_mask(mask_mov_f.bits, level_p - level_f),
                                mask_mov_f.flavor)
        grey_ref_p = preprocess.to_greyscale(_to_level(ref_f, level_p))
        grey_mov_p = preprocess.to_greyscale(_to_level(mov_f, level_p))
        if config.histogram_match and can_match:
            grey_ref_p, grey_mov_p = preprocess.histogram_match(
                (grey_ref_p, grey_mov_p), (mask_ref_p, mask_mov_p)
            )
        diagnostics["stages"]["preprocess"] = {
            "elapsed_s": round(time.perf_counter() - t0, 3),
            "ref_tissue_frac": round(float(mask_ref_f.bits.mean()), 4),
            "mov_tissue_frac": round(float(mask_mov_f.bits.mean()), 4),
        }
    except (ValueError, OSError) as exc:
        return _finish(stages, final, diagnostics, out_dir, "preprocess", str(exc),
                       None, None, level_f)

    # ---- stage 1: centre-of-mass shift + exhaustive rotation, coarse scale
    try:
        t0 = time.perf_counter()
        pre = prealign.prealign(grey_ref_p, mask_ref_p, grey_mov_p, mask_mov_p)
        t_pre = rescale_to_level(pre.transform, level_f)
        stages.prealign = t_pre
        final = t_pre
        diagnostics["stages"]["prealign"] = {
            "elapsed_s": round(time.perf_counter() - t0, 3),
            "rotation_deg": round(pre.rotation_deg, 3),
            "overlap": round(pre.overlap_score, 4),
        }
    except (ValueError, OSError) as exc:
        return _finish(stages, final, diagnostics, out_dir, "prealign", str(exc),
                       None, None, level_f)

    # ---- stage 2: whole-tissue feature refinement, feature scale
    try:
        t0 = time.perf_counter()
        wg = _warp_image(mode_ref_f, mode_mov_f, t_pre)
        wm = _warp_mask(mode_ref_f, mode_mov_f, mask_mov_f, t_pre)
        crop = preprocess.union_tissue_bbox(mask_ref_f, wm)
        pre_f = prealign.PrealignResult(
            transform=t_pre, rotation_deg=pre.rotation_deg,
            com_ref=pre.com_ref, com_mov=pre.com_mov,
            overlap_score=pre.overlap_score, crop=crop,
            warped_grey=wg, warped_mask=wm,
        )
        t_tissue = featurealign.tissue_transform(
            mode_ref_f, pre_f, extractor, kind=config.kind, u=config.u, trim=config.trim
        )
        stages.tissue = t_tissue
        final = t_tissue
        diagnostics["stages"]["tissue"] = {"elapsed_s": round(time.perf_counter() - t0, 3)}
    except (ValueError, OSError) as exc:
        return _finish(stages, final, diagnostics, out_dir, "tissue", str(exc),
                       mode_mov_f, mode_ref_f, level_f)

    # ---- stage 3: block-wise refinement with a pooled fit
    try:
        t0 = time.perf_counter()
        wg = _warp_image(mode_ref_f, mode_mov_f, t_tissue)
        wm = _warp_mask(mode_ref_f, mode_mov_f, mask_mov_f, t_tissue)
        t_block, block_flags = featurealign.blockwise_transform(
            mode_ref_f, mask_ref_f, wg, wm, t_tissue, extractor,
            kind=config.kind, u=config.u, trim=config.trim,
        )
        stages.blockwise = t_block
        stages.flags.extend(block_flags)
        final = t_block
        diagnostics["stages"]["blockwise"] = {
            "elapsed_s": round(time.perf_counter() - t0, 3),
            "flags": block_flags,
        }
    except (ValueError, OSError) as exc:
        return _finish(stages, final, diagnostics, out_dir, "blockwise", str(exc),
                       mode_mov_f, mode_ref_f, level_f)

    # ---- stage 4: global phase-correlation offset
    try:
        t0 = time.perf_counter()
        wg = _warp_image(mode_ref_f, mode_mov_f, final)
        off = localalign.phase_correlation(
            preprocess.to_greyscale(mode_ref_f), preprocess.to_greyscale(wg),
            scope=localalign.GLOBAL, level=level_f,
        )
        if off.degenerate:
            stages.flags.append("offset: degenerate correlation, no offset applied")
        t_off = localalign.apply_offset(final, off)
        stages.offset = t_off
        final = t_off
        diagnostics["stages"]["offset"] = {
            "elapsed_s": round(time.perf_counter() - t0, 3),
            "dx": float(off.dx), "dy": float(off.dy), "peak": round(float(off.peak), 4),
        }
    except (ValueError, OSError) as exc:
        return _finish(stages, final, diagnostics, out_dir, "offset", str(exc),
                       mode_mov_f, mode_ref_f, level_f)

    return _finish(stages, final, diagnostics, out_dir, None, None,
                   mode_mov_f, mode_ref_f, level_f)


def _finish(
    stages: RegistrationStages,
    final: PlanarTransform,
    diagnostics: dict,
    out_dir: str | Path | None,
    failed_stage: str | None,
    error: str | None,
    mov_f: Raster | None,
    ref_f: Raster | None,
    level_f: int,
) -> RegistrationResult:
    if failed_stage is not None:
        stages.flags.append(f"partial: failed at {failed_stage}: {error}")
        diagnostics["error"] = {"stage": failed_stage, "message": error}
        log.error("pipeline failed at %s: %s", failed_stage, error)

    # persist everything in level-0 coordinates so any pyramid level can use it
    stages_l0 = RegistrationStages(flags=list(stages.flags))
    for name in STAGE_ORDER:
        t = getattr(stages, name)
        if t is not None:
            setattr(stages_l0, name, rescale_to_level(t, 0))
    final_l0 = rescale_to_level(final, 0)

    out_path = None
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
        frame = None
        if "inputs" in diagnostics:
            frame = {
                "ref": {k: diagnostics["inputs"]["ref"][k] for k in ("width", "height")},
                "mov": {k: diagnostics["inputs"]["mov"][k] for k in ("width", "height")},
                "levels": diagnostics.get("levels", {}),
            }
        save_transform(out_path / TRANSFORM_NAME, final_l0, stages_l0, frame)
        with open(out_path / DIAGNOSTICS_NAME, "w") as fh:
            json.dump(diagnostics, fh, indent=2, sort_keys=True)
            fh.write("\n")
        if mov_f is not None and ref_f is not None:
            warped = _warp_image(ref_f, mov_f, rescale_to_level(final_l0, level_f))
            save_image(warped, out_path / WARPED_NAME)

    return RegistrationResult(
        stages=stages_l0,
        final=final_l0,
        diagnostics=diagnostics,
        out_dir=out_path,
        success=failed_stage is None,
        failed_stage=failed_stage,
    )


# ---------------------------------------------------------------------------
# batch evaluation


def _read_manifest(path: str | Path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [f for f in ("ref_image", "mov_image") if f not in (reader.fieldnames or [])]
        if missing:
            raise PipelineError(f"manifest is missing columns: {', '.join(missing)}")
        for row in reader:
            if not (row.get("ref_image") or "").strip():
                continue
            rows.append({k: (row.get(k) or "").strip() for k in MANIFEST_FIELDS})
    if not rows:
        raise PipelineError("manifest has no pairs")
    return rows


def _stage_chain(stages: RegistrationStages) -> list[tuple[str, PlanarTransform]]:
    """Cumulative transform after each evaluation step, starting from rest."""
    chain = [("initial", identity())]
    last = identity()
    for name in STAGE_ORDER:
        t = getattr(stages, name)
        if t is not None:
            last = t
        chain.append((name, last))
    return chain


def run_batch(
    manifest_path: str | Path,
    config: PipelineConfig,
    out_dir: str | Path,
    workers: int = 1,
) -> tuple[dict, list[RegistrationResult]]:
    """Run the pipeline over a manifest CSV and aggregate landmark metrics.

    The manifest header is ``ref_image,mov_image,ref_landmarks,mov_landmarks``
    with the landmark columns optional per row; paths are taken relative to
    the manifest. Failing pairs are recorded and the batch continues.

    With ``workers > 1`` pairs run concurrently; each worker thread holds its
    own extractor handle (inference calls on one handle are not reentrant)
    and reports are assembled in manifest order, so output is identical
    whatever order pairs finish in.
    """
    if workers < 1:
        raise PipelineError(f"workers must be >= 1, got {workers}")
    rows = _read_manifest(manifest_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    extractor = load_extractor(config.model_path)  # surfaces model errors up front
    base = Path(manifest_path).parent

    def run_one(idx: int, row: dict, ext: Extractor) -> RegistrationResult:
        return run_pipeline(base / row["ref_image"], base / row["mov_image"],
                            config, out_dir / f"pair_{idx:03d}", extractor=ext)

    if workers == 1:
        results = [run_one(i, row, extractor) for i, row in enumerate(rows)]
    else:
        tls = threading.local()

        def run_in_worker(task: tuple[int, dict]) -> RegistrationResult:
            ext = getattr(tls, "extractor", None)
            if ext is None:
                ext = tls.extractor = load_extractor(config.model_path)
            return run_one(task[0], task[1], ext)

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_in_worker, enumerate(rows)))

    failures: list[dict] = []
    pair_reports: list[dict] = []
    stage_rtre: dict[str, list[np.ndarray]] = {}
    stage_robust: dict[str, list[float]] = {}

    for idx, (row, res) in enumerate(zip(rows, results)):
        report: dict = {
            "pair": idx,
            "ref": row["ref_image"],
            "mov": row["mov_image"],
            "success": res.success,
            "flags": res.flags,
        }
        if not res.success:
            failures.append({
                "pair": idx,
                "stage": res.failed_stage,
                "error": res.diagnostics.get("error", {}).get("message", ""),
            })
        if res.success and row["ref_landmarks"] and row["mov_landmarks"]:
            try:
                land_ref = metrics.load_landmarks(base / row["ref_landmarks"])
                land_mov = metrics.load_landmarks(base / row["mov_landmarks"])
                ref_w = res.diagnostics["inputs"]["ref"]["width"]
                ref_h = res.diagnostics["inputs"]["ref"]["height"]
                report["stages"] = {}
                for name, t in _stage_chain(res.stages):
                    moved = metrics.LandmarkSet(t.apply(land_mov.points))
                    r = metrics.rtre(metrics.tre(land_ref, moved), ref_w, ref_h)
                    rob = metrics.robustness(land_ref, land_mov, moved)
                    stage_rtre.setdefault(name, []).append(r)
                    stage_robust.setdefault(name, []).append(rob)
                    report["stages"][name] = {
                        "median_rtre": float(np.median(r)),
                        "max_rtre": float(r.max()),
                        "robustness": rob,
                    }
            except (ValueError, OSError) as exc:
                report["landmark_error"] = str(exc)
        pair_reports.append(report)

    stage_summary = {}
    step_medians: dict[str, list[float]] = {}
    for name, _ in _stage_chain(RegistrationStages()):
        if name not in stage_rtre:
            continue
        agg = metrics.aggregate(stage_rtre[name], stage_robust[name])
        doc = metrics.report_to_dict(agg)
        doc.pop("pairs", None)  # per-pair numbers already live in the pair reports
        stage_summary[name] = doc
        step_medians[name] = [p.median_rtre for p in agg.pairs]

    batch_report = {
        "pairs": pair_reports,
        "stage_summary": stage_summary,
        "failures": failures,
        "n_pairs": len(rows),
        "n_failed": len(failures),
    }
    with open(out_dir / "report.json", "w") as fh:
        json.dump(batch_report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if step_medians:
        metrics.save_step_medians(step_medians, out_dir / "step_medians.csv")
    return batch_report, results
