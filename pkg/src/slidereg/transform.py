"""Planar transform algebra: estimation, composition, level rescaling, I/O.

A transform maps moving-image pixel coordinates to reference-image pixel
coordinates at a declared pyramid level, as a 3x3 homogeneous matrix with
last row (0, 0, 1). Rigid and similarity fits use the closed-form
orthogonal-Procrustes solution on centered points; affine uses least squares.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RIGID = "rigid"
SIMILARITY = "similarity"
AFFINE = "affine"
KINDS = (RIGID, SIMILARITY, AFFINE)
_GENERALITY = {RIGID: 0, SIMILARITY: 1, AFFINE: 2}

ORTHO_TOL = 1e-9


class TransformError(ValueError):
    pass


@dataclass(frozen=True)
class PlanarTransform:
    """3x3 homogeneous planar map (moving -> reference) at a pyramid level."""

    m: np.ndarray
    kind: str = RIGID
    level: int = 0

    def __post_init__(self):
        m = np.array(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise TransformError(f"matrix must be 3x3, got {m.shape}")
        if not np.allclose(m[2], (0.0, 0.0, 1.0), atol=1e-9):
            raise TransformError(f"last row must be (0,0,1), got {m[2]}")
        m[2] = (0.0, 0.0, 1.0)
        if self.kind not in KINDS:
            raise TransformError(f"unknown kind {self.kind!r}")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @property
    def linear(self) -> np.ndarray:
        return self.m[:2, :2]

    @property
    def translation(self) -> np.ndarray:
        return self.m[:2, 2]

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map an (N, 2) array of (x, y) points."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return p @ self.linear.T + self.translation

    def inverse(self) -> "PlanarTransform":
        return PlanarTransform(np.linalg.inv(self.m), self.kind, self.level)

    def is_rigid(self, tol: float = ORTHO_TOL) -> bool:
        r = self.linear
        return bool(
            np.allclose(r.T @ r, np.eye(2), atol=tol) and abs(np.linalg.det(r) - 1.0) <= tol
        )

    def rotation_deg(self) -> float:
        """Rotation angle of the linear part (valid for rigid/similarity)."""
        return float(np.degrees(np.arctan2(self.m[1, 0], self.m[0, 0])))


def identity(level: int = 0) -> PlanarTransform:
    return PlanarTransform(np.eye(3), RIGID, level)


def translation(dx: float, dy: float, level: int = 0) -> PlanarTransform:
    m = np.eye(3)
    m[0, 2] = dx
    m[1, 2] = dy
    return PlanarTransform(m, RIGID, level)


def rotation_about(deg: float, center: tuple[float, float], level: int = 0) -> PlanarTransform:
    """Rotation by ``deg`` about ``center`` in y-down pixel coordinates."""
    th = np.radians(deg)
    c, s = np.cos(th), np.sin(th)
    cx, cy = center
    m = np.array(
        [
            [c, -s, cx - c * cx + s * cy],
            [s, c, cy - s * cx - c * cy],
            [0.0, 0.0, 1.0],
        ]
    )
    return PlanarTransform(m, RIGID, level)


def estimate(
    p_mov: np.ndarray, p_ref: np.ndarray, kind: str = RIGID, level: int = 0
) -> PlanarTransform:
    """Least-squares transform sending p_mov onto p_ref.

    Rigid/similarity come from the orthogonal-Procrustes closed form: rotation
    is the polar factor of the centered cross-covariance with the determinant
    forced to +1 (no reflections); similarity adds the least-squares scale.
    Affine solves the 6-parameter normal equations.
    """
    a = np.asarray(p_mov, dtype=np.float64)
    b = np.asarray(p_ref, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 2:
        raise TransformError(f"point arrays must both be (N, 2), got {a.shape} vs {b.shape}")
    n = a.shape[0]
    if kind not in KINDS:
        raise TransformError(f"unknown kind {kind!r}")

    if kind == AFFINE:
        if n < 3:
            raise TransformError("affine needs >= 3 point pairs")
        design = np.hstack([a, np.ones((n, 1))])
        params, _, rank, _ = np.linalg.lstsq(design, b, rcond=None)
        if rank < 3:
            raise TransformError("degenerate configuration: points are collinear")
        m = np.eye(3)
        m[:2, :3] = params.T
        return PlanarTransform(m, AFFINE, level)

    if n < 2:
        raise TransformError("rigid/similarity need >= 2 point pairs")
    ca, cb = a.mean(axis=0), b.mean(axis=0)
    a0, b0 = a - ca, b - cb
    spread = float((a0**2).sum())
    if spread <= 0:
        raise TransformError("degenerate configuration: moving points coincide")
    h = a0.T @ b0
    u, s, vt = np.linalg.svd(h)
    d = 1.0 if np.linalg.det(vt.T @ u.T) >= 0 else -1.0
    r = vt.T @ np.diag([1.0, d]) @ u.T
    if kind == SIMILARITY:
        scale = float(s[0] + d * s[1]) / spread
        if scale <= 0:
            raise TransformError("degenerate configuration: non-positive scale")
        r = scale * r
    m = np.eye(3)
    m[:2, :2] = r
    m[:2, 2] = cb - r @ ca
    return PlanarTransform(m, kind, level)


def compose(outer: PlanarTransform, inner: PlanarTransform) -> PlanarTransform:
    """outer after inner; kinds combine to the most general of the two."""
    if outer.level != inner.level:
        raise TransformError(f"level mismatch: {outer.level} vs {inner.level}")
    kind = outer.kind if _GENERALITY[outer.kind] >= _GENERALITY[inner.kind] else inner.kind
    return PlanarTransform(outer.m @ inner.m, kind, outer.level)


def rescale_to_level(t: PlanarTransform, to_level: int) -> PlanarTransform:
    """Re-express a transform in another level's pixel grid.

    Conjugation by the scale change: the linear part is unchanged, the
    translation scales by the downsample ratio 2^(from - to).
    """
    if to_level == t.level:
        return t
    k = 2.0 ** (t.level - to_level)
    s = np.diag([k, k, 1.0])
    s_inv = np.diag([1.0 / k, 1.0 / k, 1.0])
    return PlanarTransform(s @ t.m @ s_inv, t.kind, to_level)


@dataclass
class RegistrationStages:
    """Cumulative per-stage transforms, all at the same level."""

    prealign: PlanarTransform | None = None
    tissue: PlanarTransform | None = None
    blockwise: PlanarTransform | None = None
    offset: PlanarTransform | None = None
    flags: list[str] = field(default_factory=list)

    def named(self) -> dict[str, PlanarTransform]:
        out = {}
        for name in ("prealign", "tissue", "blockwise", "offset"):
            t = getattr(self, name)
            if t is not None:
                out[name] = t
        return out

    def final(self) -> PlanarTransform:
        last = None
        for name in ("prealign", "tissue", "blockwise", "offset"):
            t = getattr(self, name)
            if t is not None:
                last = t
        if last is None:
            raise TransformError("no stages recorded")
        return last


def transform_to_dict(
    t: PlanarTransform,
    stages: RegistrationStages | None = None,
    frame: dict | None = None,
) -> dict:
    doc = {
        "level": t.level,
        "kind": t.kind,
        "matrix": [float(v) for v in np.asarray(t.m).ravel()],
    }
    if stages is not None:
        doc["stages"] = {
            name: [float(v) for v in st.m.ravel()] for name, st in stages.named().items()
        }
        if stages.flags:
            doc["flags"] = list(stages.flags)
    if frame:
        doc["frame"] = frame
    return doc


def transform_from_dict(doc: dict) -> PlanarTransform:
    try:
        m = np.array(doc["matrix"], dtype=np.float64).reshape(3, 3)
        return PlanarTransform(m, doc.get("kind", RIGID), int(doc.get("level", 0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise TransformError(f"malformed transform document: {exc}") from exc


def save_transform(
    path: str | Path,
    t: PlanarTransform,
    stages: RegistrationStages | None = None,
    frame: dict | None = None,
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(transform_to_dict(t, stages, frame), fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_transform(path: str | Path) -> PlanarTransform:
    with open(path) as fh:
        return transform_from_dict(json.load(fh))


def load_transform_stages(path: str | Path) -> dict[str, PlanarTransform]:
    """Read the named per-stage matrices from a transform file (may be {})."""
    with open(path) as fh:
        doc = json.load(fh)
    level = int(doc.get("level", 0))
    out = {}
    for name, vals in doc.get("stages", {}).items():
        m = np.array(vals, dtype=np.float64).reshape(3, 3)
        out[name] = PlanarTransform(m, doc.get("kind", RIGID), level)
    return out
