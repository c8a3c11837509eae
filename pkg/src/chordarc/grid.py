"""Distance-graded octree cells around a curve, and scalar fields on them.

The grid covers the closed ball of radius 2|L| about the curve start,
minus a thin tube around the curve itself: leaf cells shrink toward the
curve so that cell size stays below a fixed fraction of the distance to
it.  Cells entirely inside half the exclusion radius are dropped, which
keeps every later stencil and averaging ball inside covered territory.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ConstructionError, InvalidInputError, ResourceLimitError
from .geometry import CurveProximity, PolylineCurve

_KEY_BITS = 21
_MAX_DEPTH = 20
# cells are kept within this multiple of the curve length around the start
# point; the margin past the 2|L| data support lets the smoothing taper and
# the difference stencils close out on real cells
_FAR_COVER = 2.75

_CHILD_OFFSETS = np.array(
    [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64
)


def _spread_bits(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def _morton_codes(coords: np.ndarray) -> np.ndarray:
    x = _spread_bits(coords[:, 0])
    y = _spread_bits(coords[:, 1])
    z = _spread_bits(coords[:, 2])
    return (x | (y << np.uint64(1)) | (z << np.uint64(2))).astype(np.int64)


@njit(cache=True)
def _find_leaf(px, py, pz, ox, oy, oz, level_sides, lk_keys, lk_offsets, lk_index, hint):
    """Index of the leaf containing the point, or -1; tries hint level first."""
    n_levels = level_sides.shape[0]
    for trial in range(-1, n_levels):
        lev = hint if trial == -1 else trial
        if trial >= 0 and lev == hint:
            continue
        if lev < 0 or lev >= n_levels:
            continue
        lo = lk_offsets[lev]
        hi = lk_offsets[lev + 1]
        if lo == hi:
            continue
        s = level_sides[lev]
        ix = int(math.floor((px - ox) / s))
        iy = int(math.floor((py - oy) / s))
        iz = int(math.floor((pz - oz) / s))
        top = 1 << lev
        if ix < 0 or iy < 0 or iz < 0 or ix >= top or iy >= top or iz >= top:
            continue
        key = (ix << (2 * _KEY_BITS)) | (iy << _KEY_BITS) | iz
        a, b = lo, hi
        while a < b:
            mid = (a + b) >> 1
            if lk_keys[mid] < key:
                a = mid + 1
            else:
                b = mid
        if a < hi and lk_keys[a] == key:
            return lk_index[a]
    return -1


@njit(cache=True)
def _lookup_batch(points, ox, oy, oz, level_sides, lk_keys, lk_offsets, lk_index, levels):
    n = points.shape[0]
    out = np.empty(n, dtype=np.int64)
    hint = level_sides.shape[0] - 1
    for i in range(n):
        idx = _find_leaf(
            points[i, 0], points[i, 1], points[i, 2],
            ox, oy, oz, level_sides, lk_keys, lk_offsets, lk_index, hint,
        )
        out[i] = idx
        if idx >= 0:
            hint = levels[idx]
    return out


@njit(cache=True)
def _eval_const(points, ox, oy, oz, level_sides, lk_keys, lk_offsets, lk_index, levels, values):
    n = points.shape[0]
    out = np.zeros(n)
    hint = level_sides.shape[0] - 1
    for i in range(n):
        idx = _find_leaf(
            points[i, 0], points[i, 1], points[i, 2],
            ox, oy, oz, level_sides, lk_keys, lk_offsets, lk_index, hint,
        )
        if idx >= 0:
            out[i] = values[idx]
            hint = levels[idx]
    return out


@njit(cache=True)
def _eval_trilinear(
    points, ox, oy, oz, level_sides, lk_keys, lk_offsets, lk_index,
    levels, centers, sides, values,
):
    """Blend the 8 same-level partner cells around the containing cell.

    Partner values are read by plain containment lookup, so the blend
    degrades gracefully across refinement jumps; points outside coverage
    contribute 0.
    """
    n = points.shape[0]
    out = np.zeros(n)
    hint = level_sides.shape[0] - 1
    for i in range(n):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        idx = _find_leaf(px, py, pz, ox, oy, oz, level_sides, lk_keys, lk_offsets, lk_index, hint)
        if idx < 0:
            continue
        lev = levels[idx]
        hint = lev
        h = sides[idx]
        tx = (px - centers[idx, 0]) / h
        ty = (py - centers[idx, 1]) / h
        tz = (pz - centers[idx, 2]) / h
        sx = 1.0 if tx >= 0.0 else -1.0
        sy = 1.0 if ty >= 0.0 else -1.0
        sz = 1.0 if tz >= 0.0 else -1.0
        ax, ay, az = abs(tx), abs(ty), abs(tz)
        acc = 0.0
        for bx in range(2):
            wx = ax if bx == 1 else 1.0 - ax
            if wx == 0.0:
                continue
            qx = centers[idx, 0] + h * sx * bx
            for by in range(2):
                wy = ay if by == 1 else 1.0 - ay
                if wy == 0.0:
                    continue
                qy = centers[idx, 1] + h * sy * by
                for bz in range(2):
                    wz = az if bz == 1 else 1.0 - az
                    if wz == 0.0:
                        continue
                    qz = centers[idx, 2] + h * sz * bz
                    if bx == 0 and by == 0 and bz == 0:
                        acc += wx * wy * wz * values[idx]
                        continue
                    j = _find_leaf(
                        qx, qy, qz, ox, oy, oz,
                        level_sides, lk_keys, lk_offsets, lk_index, lev,
                    )
                    if j >= 0:
                        acc += wx * wy * wz * values[j]
        out[i] = acc
    return out


class GradedGrid:
    """Octree leaves graded by distance to the curve.

    Stored ``dist`` values are certified lower bounds on the true curve
    distance of each center (within ``dist_slack`` of exact).  Leaves are
    kept in Morton order of their finest-scale min corners.
    """

    def __init__(self, curve, n_max, theta, h_max, excl_level, origin, root_side,
                 centers, sides, dist, levels, lookup_tables):
        self.curve = curve
        self.n_max = int(n_max)
        self.theta = float(theta)
        self.h_max = float(h_max)
        self.excl_level = int(excl_level)
        self.r_excl = curve.total_len * 2.0 ** -excl_level
        self.origin = origin
        self.root_side = float(root_side)
        self.centers = centers
        self.sides = sides
        self.dist = dist
        self.levels = levels
        self.level_sides, self.lk_keys, self.lk_offsets, self.lk_index = lookup_tables
        self.active = dist >= self.r_excl

    @property
    def n_cells(self) -> int:
        return self.centers.shape[0]

    @property
    def volumes(self) -> np.ndarray:
        return self.sides**3

    def lookup(self, points) -> np.ndarray:
        """Leaf index containing each point, -1 outside coverage."""
        pts = np.ascontiguousarray(np.atleast_2d(np.asarray(points, dtype=np.float64)))
        return _lookup_batch(
            pts, self.origin[0], self.origin[1], self.origin[2],
            self.level_sides, self.lk_keys, self.lk_offsets, self.lk_index, self.levels,
        )

    def kernel_args(self) -> tuple:
        """Array pack consumed by numba kernels doing containment lookups."""
        return (
            self.origin[0], self.origin[1], self.origin[2],
            self.level_sides, self.lk_keys, self.lk_offsets, self.lk_index, self.levels,
        )

    def report(self) -> dict:
        return {
            "cells": int(self.n_cells),
            "active_cells": int(np.count_nonzero(self.active)),
            "levels": int(self.level_sides.shape[0]),
            "finest_side": float(self.level_sides[-1]),
            "exclusion_radius": float(self.r_excl),
        }


@dataclass
class ScalarField:
    """Per-cell values with piecewise-constant or blended evaluation."""

    grid: GradedGrid
    values: np.ndarray
    mode: str = "const"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.grid.n_cells,):
            raise InvalidInputError("field values must align with grid cells")
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError("field values must be finite")
        if self.mode not in ("const", "trilinear"):
            raise InvalidInputError("field mode must be 'const' or 'trilinear'")

    def evaluate(self, points) -> np.ndarray:
        pts = np.ascontiguousarray(np.atleast_2d(np.asarray(points, dtype=np.float64)))
        if self.mode == "const":
            return _eval_const(pts, *self.grid.kernel_args(), self.values)
        return _eval_trilinear(
            pts, *self.grid.kernel_args(),
            self.grid.centers, self.grid.sides, self.values,
        )

    def dump(self, stream) -> None:
        """One JSON record per cell, in the grid's Morton order."""
        centers = self.grid.centers
        sides = self.grid.sides
        for i in range(self.grid.n_cells):
            rec = {
                "center": [centers[i, 0], centers[i, 1], centers[i, 2]],
                "h": sides[i],
                "value": self.values[i],
            }
            stream.write(json.dumps(rec, sort_keys=True) + "\n")


def build_graded_grid(
    curve: PolylineCurve,
    n_max: int,
    theta: float = 0.25,
    h_max: float | None = None,
    excl_level: int | None = None,
    max_cells: int = 5_000_000,
) -> GradedGrid:
    """Subdivide a box around the curve into distance-graded leaf cells.

    Leaves satisfy h <= theta * d(center) wherever d(center) <= |L| and
    h <= h_max globally; cells entirely within half the exclusion radius
    of the curve, or entirely outside the coverage ball about the start,
    are dropped.
    """
    if not 0.0 < theta <= 0.5:
        raise InvalidInputError("grading ratio theta must lie in (0, 1/2]")
    if n_max < 2:
        raise InvalidInputError("grading anchor level must be at least 2")
    total = curve.total_len
    if h_max is None:
        h_max = total / 8.0
    if not h_max > 0.0:
        raise InvalidInputError("h_max must be positive")
    if excl_level is None:
        excl_level = n_max + 2
    if excl_level < 1:
        raise InvalidInputError("exclusion level must be at least 1")
    r_excl = total * 2.0**-excl_level

    a = curve.point_at(0.0)
    # root of 8|L| puts the far leaves exactly at h_max = |L|/8; coverage
    # past the 2|L| support ball leaves room for the smoothing taper and
    # difference stencils to die out on real cells
    root_side = 8.0 * total
    origin = a - 0.5 * root_side
    prox = CurveProximity(curve, r_excl / 32.0)
    slack = prox.slack()
    cover_r = _FAR_COVER * total

    coords = np.zeros((1, 3), dtype=np.int64)
    side = root_side
    level = 0
    leaf_coords: list[np.ndarray] = []
    leaf_levels: list[np.ndarray] = []
    leaf_dist: list[np.ndarray] = []
    n_leaves = 0
    while coords.shape[0] > 0:
        if level > _MAX_DEPTH:
            raise ConstructionError("graded grid depth exceeded")
        centers = origin + (coords.astype(np.float64) + 0.5) * side
        d_ub = prox.distances(centers)
        d_lb = d_ub - slack
        half_diag = 0.5 * math.sqrt(3.0) * side
        far = np.linalg.norm(centers - a, axis=1) - half_diag > cover_r
        keep = ~far
        # refinement bottoms out at the exclusion scale; the tube core is
        # kept at that resolution so full-grid quadratures can reach the curve
        target = theta * np.maximum(d_lb, r_excl)
        split = keep & ((side > h_max) | ((d_lb <= total) & (side > target)))
        leaf = keep & ~split
        if np.any(leaf):
            leaf_coords.append(coords[leaf])
            leaf_levels.append(np.full(int(leaf.sum()), level, dtype=np.int64))
            leaf_dist.append(d_lb[leaf])
            n_leaves += int(leaf.sum())
            if n_leaves > max_cells:
                raise ResourceLimitError("cell budget exceeded")
        parents = coords[split]
        coords = (parents[:, None, :] * 2 + _CHILD_OFFSETS[None, :, :]).reshape(-1, 3)
        side *= 0.5
        level += 1

    if n_leaves == 0:
        raise ConstructionError("graded grid produced no cells")
    depth = level - 1
    all_coords = np.concatenate(leaf_coords)
    all_levels = np.concatenate(leaf_levels)
    all_dist = np.concatenate(leaf_dist)
    scaled = all_coords << (depth - all_levels)[:, None]
    order = np.argsort(_morton_codes(scaled), kind="stable")
    all_coords = all_coords[order]
    all_levels = all_levels[order]
    all_dist = all_dist[order]

    level_sides = root_side * 2.0 ** -np.arange(depth + 1)
    all_sides = level_sides[all_levels]
    all_centers = origin + (all_coords.astype(np.float64) + 0.5) * all_sides[:, None]

    lk_keys = np.empty(n_leaves, dtype=np.int64)
    lk_index = np.empty(n_leaves, dtype=np.int64)
    lk_offsets = np.zeros(depth + 2, dtype=np.int64)
    pos = 0
    for lev in range(depth + 1):
        sel = np.nonzero(all_levels == lev)[0]
        lk_offsets[lev] = pos
        if sel.size:
            c = all_coords[sel]
            keys = (c[:, 0] << (2 * _KEY_BITS)) | (c[:, 1] << _KEY_BITS) | c[:, 2]
            srt = np.argsort(keys, kind="stable")
            lk_keys[pos : pos + sel.size] = keys[srt]
            lk_index[pos : pos + sel.size] = sel[srt]
            pos += sel.size
    lk_offsets[depth + 1] = pos

    grid = GradedGrid(
        curve, n_max, theta, h_max, excl_level, origin, root_side,
        all_centers, all_sides, all_dist, all_levels,
        (level_sides, lk_keys, lk_offsets, lk_index),
    )
    grid.dist_slack = slack
    grid.prox = prox
    return grid
