"""Graded grid: grading, coverage, disjointness, field evaluation, dumps."""

import io
import json

import numpy as np
import pytest

from chordarc.errors import InvalidInputError, ResourceLimitError
from chordarc.geometry import generate_curve, nearest_points
from chordarc.grid import GradedGrid, ScalarField, build_graded_grid


@pytest.fixture(scope="module")
def seg_grid(segment_curve):
    return build_graded_grid(segment_curve, n_max=3)


@pytest.fixture(scope="module")
def helix_grid(helix_curve):
    return build_graded_grid(helix_curve, n_max=4)


def test_grading_exhaustive(segment_curve, seg_grid):
    _, d = nearest_points(segment_curve, seg_grid.centers)
    near = d <= segment_curve.total_len
    floor = np.maximum(d[near], seg_grid.r_excl)
    assert np.all(seg_grid.sides[near] <= seg_grid.theta * floor + 1e-12)
    assert np.all(seg_grid.sides <= seg_grid.h_max + 1e-12)
    # the tube core is resolved at the exclusion scale, not coarser
    core = d < seg_grid.r_excl
    assert np.any(core)
    assert np.all(seg_grid.sides[core] <= seg_grid.theta * seg_grid.r_excl + 1e-12)


def test_stored_distances_are_certified_lower_bounds(segment_curve, seg_grid):
    _, d = nearest_points(segment_curve, seg_grid.centers[::37])
    stored = seg_grid.dist[::37]
    assert np.all(stored <= d + 1e-12)
    assert np.all(stored >= d - seg_grid.dist_slack - 1e-12)


def test_coverage_of_far_ball(segment_curve, seg_grid):
    rng = np.random.default_rng(5150)
    a = segment_curve.point_at(0.0)
    pts = a + rng.uniform(-2.2, 2.2, (20000, 3)) * segment_curve.total_len
    # points on and right next to the curve must be covered too
    s = rng.uniform(0.0, segment_curve.total_len, 64)
    on_curve = segment_curve.point_at(s)
    jitter = rng.normal(size=(64, 3)) * (0.3 * seg_grid.r_excl)
    pts = np.vstack([pts, on_curve, on_curve + jitter])
    inside = np.linalg.norm(pts - a, axis=1) <= 2.0 * segment_curve.total_len
    idx = seg_grid.lookup(pts[inside])
    assert np.all(idx >= 0)
    h = seg_grid.sides[idx]
    assert np.all(
        np.abs(pts[inside] - seg_grid.centers[idx]) <= 0.5 * h[:, None] + 1e-12
    )


def test_leaves_pairwise_disjoint(seg_grid):
    coords = np.floor(
        (seg_grid.centers - seg_grid.origin) / seg_grid.sides[:, None]
    ).astype(np.int64)
    for lev in range(seg_grid.level_sides.shape[0]):
        lo, hi = seg_grid.lk_offsets[lev], seg_grid.lk_offsets[lev + 1]
        if lo == hi:
            continue
        keys_at_level = seg_grid.lk_keys[lo:hi]
        deeper = seg_grid.levels > lev
        if not np.any(deeper):
            continue
        anc = coords[deeper] >> (seg_grid.levels[deeper] - lev)[:, None]
        anc_keys = (anc[:, 0] << 42) | (anc[:, 1] << 21) | anc[:, 2]
        pos = np.searchsorted(keys_at_level, anc_keys)
        pos = np.clip(pos, 0, keys_at_level.size - 1)
        assert not np.any(keys_at_level[pos] == anc_keys)


def test_active_split_matches_exclusion_radius(seg_grid):
    assert np.array_equal(seg_grid.active, seg_grid.dist >= seg_grid.r_excl)
    assert 0 < np.count_nonzero(seg_grid.active) < seg_grid.n_cells


def test_doubling_hmax_keeps_near_cells(segment_curve, seg_grid):
    wide = build_graded_grid(segment_curve, n_max=3, h_max=2.0 * seg_grid.h_max)

    def near_set(g, cut):
        sel = g.dist < cut
        rows = np.column_stack([g.centers[sel], g.sides[sel]])
        return rows[np.lexsort(rows.T)]

    cut = 4.0 * seg_grid.h_max
    a = near_set(seg_grid, cut)
    b = near_set(wide, cut)
    assert a.shape == b.shape
    np.testing.assert_array_equal(a, b)


def test_deterministic_rebuild(helix_curve, helix_grid):
    again = build_graded_grid(helix_curve, n_max=4)
    assert again.n_cells == helix_grid.n_cells
    np.testing.assert_array_equal(again.centers, helix_grid.centers)
    np.testing.assert_array_equal(again.sides, helix_grid.sides)
    assert again.report() == helix_grid.report()


def test_cell_count_within_budget(helix_grid):
    assert helix_grid.n_cells <= 5_000_000


def test_budget_exceeded_raises(segment_curve):
    with pytest.raises(ResourceLimitError):
        build_graded_grid(segment_curve, n_max=3, max_cells=1000)


def test_parameter_validation(segment_curve):
    with pytest.raises(InvalidInputError):
        build_graded_grid(segment_curve, n_max=3, theta=0.6)
    with pytest.raises(InvalidInputError):
        build_graded_grid(segment_curve, n_max=1)
    with pytest.raises(InvalidInputError):
        build_graded_grid(segment_curve, n_max=3, h_max=-1.0)


def test_const_field_returns_cell_values(seg_grid):
    vals = np.arange(seg_grid.n_cells, dtype=np.float64)
    f = ScalarField(seg_grid, vals, mode="const")
    got = f.evaluate(seg_grid.centers[::101])
    np.testing.assert_array_equal(got, vals[::101])


def test_field_zero_outside_coverage(segment_curve, seg_grid):
    f = ScalarField(seg_grid, np.ones(seg_grid.n_cells), mode="const")
    far = segment_curve.point_at(0.0) + np.array([[0.0, 0.0, 5.0 * segment_curve.total_len]])
    assert f.evaluate(far)[0] == 0.0


def test_trilinear_reproduces_affine_in_uniform_regions(seg_grid):
    g = seg_grid
    coef = np.array([1.0, 2.0, -1.0])
    vals = g.centers @ coef + 0.5
    f = ScalarField(g, vals, mode="trilinear")
    # pick cells whose entire same-level partner box exists
    cand = np.nonzero((g.dist > 0.5) & (g.dist < 1.0))[0][:500]
    rng = np.random.default_rng(664)
    offs = rng.uniform(-0.49, 0.49, size=(cand.size, 3))
    pts = g.centers[cand] + offs * g.sides[cand, None]
    keep = np.ones(cand.size, dtype=bool)
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                q = g.centers[cand] + np.array([dx, dy, dz]) * g.sides[cand, None]
                j = g.lookup(q)
                keep &= (j >= 0) & (g.levels[j] == g.levels[cand])
    assert np.count_nonzero(keep) > 100
    got = f.evaluate(pts[keep])
    want = pts[keep] @ coef + 0.5
    assert np.abs(got - want).max() < 1e-10


def test_field_validation(seg_grid):
    with pytest.raises(InvalidInputError):
        ScalarField(seg_grid, np.ones(3))
    bad = np.ones(seg_grid.n_cells)
    bad[0] = np.nan
    with pytest.raises(InvalidInputError):
        ScalarField(seg_grid, bad)
    with pytest.raises(InvalidInputError):
        ScalarField(seg_grid, np.ones(seg_grid.n_cells), mode="cubic")


def test_dump_deterministic_and_parseable(segment_curve):
    small = build_graded_grid(segment_curve, n_max=2, h_max=segment_curve.total_len / 4)
    f = ScalarField(small, small.dist.copy(), mode="const")
    buf1, buf2 = io.StringIO(), io.StringIO()
    f.dump(buf1)
    rebuilt = build_graded_grid(segment_curve, n_max=2, h_max=segment_curve.total_len / 4)
    ScalarField(rebuilt, rebuilt.dist.copy(), mode="const").dump(buf2)
    assert buf1.getvalue() == buf2.getvalue()
    lines = buf1.getvalue().strip().split("\n")
    assert len(lines) == small.n_cells
    rec = json.loads(lines[0])
    assert set(rec) == {"center", "h", "value"}
