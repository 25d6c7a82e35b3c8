"""Distance combination and top-U matching, checked against independent
per-pair and per-column oracles."""

import math

import numpy as np
import pytest

from slidereg.features import FeatureMaps
from slidereg.matching import (
    MatchFrame,
    MatchingError,
    MatchSet,
    combine_distances,
    match_features,
    match_points,
    pairwise_distances,
    save_matches,
    to_level_coords,
)

SQRT2 = math.sqrt(2.0)


# ---------------------------------------------------------------------------
# pairwise distances


def test_self_distance_zero_diagonal():
    rng = np.random.default_rng(0)
    f = rng.standard_normal((5, 5, 16))
    d = pairwise_distances(f, f)
    assert d.shape == (25, 25)
    assert np.allclose(np.diag(d), 0.0)


def test_orthonormal_descriptors():
    # unit vectors along distinct axes are sqrt(2) apart
    f = np.eye(4).reshape(2, 2, 4)
    d = pairwise_distances(f, f)
    expected = np.full((4, 4), SQRT2)
    np.fill_diagonal(expected, 0.0)
    assert np.allclose(d, expected)


def test_pairwise_against_loop_oracle():
    rng = np.random.default_rng(7)
    fr = rng.standard_normal((3, 4, 8))
    fm = rng.standard_normal((3, 4, 8))
    d = pairwise_distances(fr, fm)
    a = fr.reshape(-1, 8)
    b = fm.reshape(-1, 8)
    for i in range(12):
        for j in range(12):
            ref = math.sqrt(((a[i] - b[j]) ** 2).sum())
            assert d[i, j] == pytest.approx(ref, abs=1e-6)


def test_pairwise_channel_mismatch():
    with pytest.raises(MatchingError, match="descriptor length"):
        pairwise_distances(np.zeros((2, 2, 8)), np.zeros((2, 2, 16)))


# ---------------------------------------------------------------------------
# distance combination


def test_combine_zeros():
    d = combine_distances(np.zeros((49, 49)), np.zeros((16, 16)), np.zeros((4, 4)))
    assert d.shape == (49, 49)
    assert np.all(d == 0.0)


def test_combine_fine_only_weight():
    d = combine_distances(np.ones((49, 49)), np.zeros((16, 16)), np.zeros((4, 4)))
    assert np.allclose(d, SQRT2)


def test_combine_coarse_replication():
    # a single pool5 entry spreads over the 4x4 block of fine points it covers
    d5 = np.zeros((4, 4))
    d5[0, 3] = 1.0  # ref cell (0,0) vs mov cell (1,1)
    d = combine_distances(np.zeros((49, 49)), np.zeros((16, 16)), d5)
    fine = np.arange(49).reshape(7, 7)
    rows = fine[0:4, 0:4].ravel()
    cols = fine[4:7, 4:7].ravel()
    mask = np.zeros((49, 49), bool)
    mask[np.ix_(rows, cols)] = True
    assert np.all(d[mask] == 1.0)
    assert np.all(d[~mask] == 0.0)


def _owning_cell(y: int, x: int, factor: int, grid: tuple) -> tuple:
    # written out longhand on purpose: this is the check, not the implementation
    cy = y // factor
    cx = x // factor
    if cy > grid[0] - 1:
        cy = grid[0] - 1
    if cx > grid[1] - 1:
        cx = grid[1] - 1
    return cy, cx


def test_combine_small_input_oracle():
    # 56x56 input geometry: 7x7 / 4x4 / 2x2 grids, where the coarse grids
    # are ceil-sized and the edge points fold into the last coarse cell
    rng = np.random.default_rng(42)
    d3 = rng.random((49, 49))
    d4 = rng.random((16, 16))
    d5 = rng.random((4, 4))
    d = combine_distances(d3, d4, d5, grid3=(7, 7), grid4=(4, 4), grid5=(2, 2))
    for i in range(49):
        yi, xi = divmod(i, 7)
        for j in range(49):
            yj, xj = divmod(j, 7)
            c4i = _owning_cell(yi, xi, 2, (4, 4))
            c4j = _owning_cell(yj, xj, 2, (4, 4))
            c5i = _owning_cell(yi, xi, 4, (2, 2))
            c5j = _owning_cell(yj, xj, 4, (2, 2))
            want = (
                SQRT2 * d3[i, j]
                + d4[c4i[0] * 4 + c4i[1], c4j[0] * 4 + c4j[1]]
                + d5[c5i[0] * 2 + c5i[1], c5j[0] * 2 + c5j[1]]
            )
            assert d[i, j] == pytest.approx(want, abs=1e-6)


def test_combine_shape_validation():
    with pytest.raises(MatchingError, match="D4"):
        combine_distances(np.zeros((49, 49)), np.zeros((15, 15)), np.zeros((4, 4)))


# ---------------------------------------------------------------------------
# match selection


def _diag_min_matrix(n: int, gap: float = 1.0) -> np.ndarray:
    d = np.full((n, n), 2.0 + gap)
    np.fill_diagonal(d, 2.0)
    return d


def test_identity_matches():
    d = _diag_min_matrix(4)
    m = match_points(d, u=10, grid_shape=(2, 2))
    assert len(m) == 4
    assert np.array_equal(m.p_ref, m.p_mov)
    assert np.all(m.quality == 1.0)


def test_equal_gap_truncation_prefers_low_columns():
    # identical qualities everywhere: the tie at the cut falls to column order
    d = _diag_min_matrix(4)
    m = match_points(d, u=2, grid_shape=(2, 2))
    assert len(m) == 2
    centers = [(4.0, 4.0), (12.0, 4.0)]  # columns 0 and 1
    assert [tuple(p) for p in m.p_mov] == centers


def test_ambiguous_column_excluded():
    d = _diag_min_matrix(4)
    d[2, 1] = d[1, 1]  # two equal minima in column 1 -> zero quality
    m = match_points(d, u=10, grid_shape=(2, 2))
    cols = {tuple(p) for p in m.p_mov}
    assert (12.0, 4.0) not in cols
    assert len(m) == 3


def test_too_few_rows():
    with pytest.raises(MatchingError, match="fewer than 2"):
        match_points(np.zeros((1, 4)), u=4, grid_shape=(2, 2))


def test_non_finite_rejected():
    d = _diag_min_matrix(4)
    d[0, 0] = np.nan
    with pytest.raises(MatchingError, match="non-finite"):
        match_points(d, u=4, grid_shape=(2, 2))


def _oracle_match(d: np.ndarray, u: int):
    """Column-by-column scan written independently of the implementation."""
    candidates = []
    for j in range(d.shape[1]):
        col = d[:, j]
        srt = np.sort(col)
        quality = srt[1] - srt[0]
        row = int(np.flatnonzero(col == srt[0])[0])
        if quality > 0:
            candidates.append((j, row, quality))
    candidates.sort(key=lambda t: (-t[2], t[0]))
    return candidates[:u]


@pytest.mark.parametrize("seed", range(8))
def test_match_against_scan_oracle(seed):
    rng = np.random.default_rng(seed)
    n = 36
    if seed % 2:
        d = rng.integers(0, 12, size=(n, n)).astype(float)  # plenty of exact ties
    else:
        d = rng.random((n, n))
    u = [4, 17, 36, 100][seed % 4]
    m = match_points(d, u=u, grid_shape=(6, 6))
    want = _oracle_match(d, u)
    assert len(m) == len(want)
    centers = lambda idx: (4.0 + 8.0 * (idx % 6), 4.0 + 8.0 * (idx // 6))
    for k, (j, row, q) in enumerate(want):
        assert tuple(m.p_mov[k]) == centers(j)
        assert tuple(m.p_ref[k]) == centers(row)
        assert m.quality[k] == q


def test_match_size_bound():
    rng = np.random.default_rng(3)
    d = rng.random((49, 49))
    for u in (1, 10, 49, 500):
        assert len(match_points(d, u=u, grid_shape=(7, 7))) <= u


def test_quality_sorted_descending():
    rng = np.random.default_rng(11)
    d = rng.random((25, 25))
    m = match_points(d, u=25, grid_shape=(5, 5))
    assert np.all(np.diff(m.quality) <= 0)


def test_constant_offset_invariance():
    rng = np.random.default_rng(5)
    d = rng.random((16, 16))
    a = match_points(d, u=8, grid_shape=(4, 4))
    b = match_points(d + 3.25, u=8, grid_shape=(4, 4))
    assert np.array_equal(a.p_ref, b.p_ref)
    assert np.array_equal(a.p_mov, b.p_mov)
    assert np.allclose(a.quality, b.quality, atol=1e-9)


# ---------------------------------------------------------------------------
# full chain and coordinate mapping


def _random_features(rng, rows=7, cols=7):
    return FeatureMaps(
        f3=rng.standard_normal((rows, cols, 32)),
        f4=rng.standard_normal(((rows + 1) // 2, (cols + 1) // 2, 64)),
        f5=rng.standard_normal(((rows + 3) // 4, (cols + 3) // 4, 64)),
    )


def test_self_match_is_identity():
    rng = np.random.default_rng(19)
    f = _random_features(rng)
    m = match_features(f, f, u=49)
    assert len(m) == 49
    assert np.array_equal(m.p_ref, m.p_mov)
    assert np.all(m.quality > 0)


def test_match_features_grid_mismatch():
    rng = np.random.default_rng(2)
    with pytest.raises(MatchingError, match="grids differ"):
        match_features(_random_features(rng, 7, 7), _random_features(rng, 6, 6))


def test_to_level_coords_identity_frame():
    m = MatchSet(
        p_ref=np.array([[4.0, 4.0]]), p_mov=np.array([[12.0, 4.0]]),
        quality=np.array([1.0]),
    )
    out = to_level_coords(m)
    assert tuple(out.p_ref[0]) == (4.0, 4.0)
    assert tuple(out.p_mov[0]) == (12.0, 4.0)


def test_to_level_coords_crop_and_scale():
    # crop at (100, 200), 2 level pixels per matcher pixel: the first grid
    # center (4, 4) lands at (108, 208)
    frame = MatchFrame(origin=(100.0, 200.0), scale=(2.0, 2.0), level=1)
    m = MatchSet(
        p_ref=np.array([[4.0, 4.0]]), p_mov=np.array([[4.0, 4.0]]),
        quality=np.array([1.0]), frame=frame,
    )
    out = to_level_coords(m)
    assert tuple(out.p_ref[0]) == (108.0, 208.0)
    assert out.frame.level == 1
    assert out.frame.origin == (0.0, 0.0)


def test_to_level_coords_anisotropic():
    frame = MatchFrame(origin=(10.0, 20.0), scale=(3.0, 0.5))
    m = MatchSet(
        p_ref=np.array([[8.0, 8.0]]), p_mov=np.array([[8.0, 8.0]]),
        quality=np.array([1.0]), frame=frame,
    )
    out = to_level_coords(m)
    assert tuple(out.p_ref[0]) == (34.0, 24.0)


def test_save_matches(tmp_path):
    m = MatchSet(
        p_ref=np.array([[4.0, 4.0], [12.0, 4.0]]),
        p_mov=np.array([[4.0, 12.0], [20.0, 4.0]]),
        quality=np.array([2.0, 1.0]),
    )
    path = tmp_path / "matches.csv"
    save_matches(m, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "x_ref,y_ref,x_mov,y_mov,quality"
    assert lines[1] == "4,4,4,12,2"
    assert len(lines) == 3
