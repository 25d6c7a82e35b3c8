"""Landmark-based registration evaluation: TRE family and robustness.

Conventions follow the public challenge usage: target registration error
(TRE) is the per-landmark Euclidean distance, rTRE normalizes by the
reference image diagonal, and aggregates are medians/means of per-pair
medians and maxima. Landmark files are CSV with an ``index,x,y`` header.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class LandmarkSet:
    """Ordered 2-D landmarks in level-0 pixel coordinates."""

    points: np.ndarray
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.names is not None and len(self.names) != len(pts):
            raise MetricsError("names/points length mismatch")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class PairMetrics:
    median_rtre: float
    max_rtre: float
    robustness: float | None = None


@dataclass
class MetricsReport:
    pairs: list[PairMetrics] = field(default_factory=list)
    mmrtre: float = 0.0  # median of per-pair medians
    amrtre: float = 0.0  # mean of per-pair medians
    amaxrtre: float = 0.0  # mean of per-pair maxima
    mean_robustness: float | None = None


def tre(land_ref: LandmarkSet, land_mov: LandmarkSet) -> np.ndarray:
    """Per-index Euclidean distance between paired landmark sets."""
    if len(land_ref) != len(land_mov):
        raise MetricsError(f"landmark count mismatch: {len(land_ref)} vs {len(land_mov)}")
    if len(land_ref) == 0:
        raise MetricsError("empty landmark sets")
    diff = land_ref.points - land_mov.points
    return np.sqrt((diff**2).sum(axis=1))


def rtre(tre_values: np.ndarray, ref_width: float, ref_height: float) -> np.ndarray:
    """TRE normalized by the reference image diagonal."""
    if ref_width <= 0 or ref_height <= 0:
        raise MetricsError("reference dimensions must be positive")
    return np.asarray(tre_values, dtype=np.float64) / np.hypot(ref_width, ref_height)


def robustness(
    land_ref: LandmarkSet, land_before: LandmarkSet, land_after: LandmarkSet
) -> float:
    """Fraction of landmarks strictly closer to the reference after
    registration than before (ties count as failures)."""
    before = tre(land_ref, land_before)
    after = tre(land_ref, land_after)
    return float((after < before).mean())


def aggregate(
    per_pair_rtre: list[np.ndarray],
    per_pair_robustness: list[float] | None = None,
) -> MetricsReport:
    """Summarize per-pair rTRE lists into challenge-style aggregates.

    Medians of even-length lists are the mean of the two central values.
    """
    if not per_pair_rtre:
        raise MetricsError("no pairs to aggregate")
    if per_pair_robustness is not None and len(per_pair_robustness) != len(per_pair_rtre):
        raise MetricsError("robustness list length mismatch")
    pairs = []
    for i, values in enumerate(per_pair_rtre):
        v = np.asarray(values, dtype=np.float64)
        if v.size == 0:
            raise MetricsError(f"pair {i} has no rTRE values")
        rob = per_pair_robustness[i] if per_pair_robustness is not None else None
        pairs.append(PairMetrics(float(np.median(v)), float(v.max()), rob))
    medians = np.array([p.median_rtre for p in pairs])
    maxima = np.array([p.max_rtre for p in pairs])
    report = MetricsReport(
        pairs=pairs,
        mmrtre=float(np.median(medians)),
        amrtre=float(medians.mean()),
        amaxrtre=float(maxima.mean()),
    )
    if per_pair_robustness is not None:
        report.mean_robustness = float(np.mean(per_pair_robustness))
    return report


def load_landmarks(path: str | Path) -> LandmarkSet:
    """Read a landmark CSV (header row, then ``index,x,y`` per row)."""
    path = Path(path)
    points = []
    names = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            next(reader)  # header
        except StopIteration as exc:
            raise MetricsError(f"{path.name}: empty landmark file") from exc
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 3:
                raise MetricsError(f"{path.name}:{lineno}: expected index,x,y")
            try:
                x, y = float(row[1]), float(row[2])
            except ValueError as exc:
                raise MetricsError(f"{path.name}:{lineno}: non-numeric coordinate") from exc
            names.append(row[0].strip())
            points.append((x, y))
    pts = np.array(points, dtype=np.float64).reshape(-1, 2)
    return LandmarkSet(pts, tuple(names) if names else None)


def save_landmarks(land: LandmarkSet, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["", "x", "y"])
        for i, (x, y) in enumerate(land.points):
            name = land.names[i] if land.names else str(i)
            writer.writerow([name, f"{x:g}", f"{y:g}"])


def report_to_dict(report: MetricsReport) -> dict:
    doc = {
        "pairs": [
            {
                "median_rtre": p.median_rtre,
                "max_rtre": p.max_rtre,
                **({"robustness": p.robustness} if p.robustness is not None else {}),
            }
            for p in report.pairs
        ],
        "mmrtre": report.mmrtre,
        "amrtre": report.amrtre,
        "amaxrtre": report.amaxrtre,
    }
    if report.mean_robustness is not None:
        doc["mean_robustness"] = report.mean_robustness
    return doc


def save_report(report: MetricsReport, json_path: str | Path, csv_path: str | Path | None = None) -> None:
    """Write a report as JSON, and optionally as a flat per-pair CSV."""
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    with open(json_path, "w") as fh:
        json.dump(report_to_dict(report), fh, sort_keys=True, indent=2)
        fh.write("\n")
    if csv_path is None:
        return
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pair", "median_rtre", "max_rtre", "robustness"])
        for i, p in enumerate(report.pairs):
            writer.writerow([i, f"{p.median_rtre:.9g}", f"{p.max_rtre:.9g}",
                             "" if p.robustness is None else f"{p.robustness:.9g}"])


def save_step_medians(step_medians: dict[str, list[float]], path: str | Path) -> None:
    """Per-stage median-rTRE vectors (box-plot input): one column per stage."""
    steps = list(step_medians)
    rows = max((len(v) for v in step_medians.values()), default=0)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(steps)
        for i in range(rows):
            writer.writerow(
                [f"{step_medians[s][i]:.9g}" if i < len(step_medians[s]) else "" for s in steps]
            )
