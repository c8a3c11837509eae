"""Pseudoharmonic continuation of a curve function into space.

Pipeline: a piecewise-constant step extension copies curve values onto
graded cells by dyadic annulus and nearest anchor; two successive ball
averages, with the regularized distance as radius, yield a field whose
second differences stay controlled by the local modulus of the boundary
data all the way down to the exclusion tube.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import (
    ConstructionError,
    InconsistencyError,
    InvalidInputError,
    ResourceLimitError,
)
from .functions import CurveFunction, delta_star_grid
from .geometry import PolylineCurve, chord_arc_constant, dyadic_points
from .grid import GradedGrid, ScalarField, _find_leaf, build_graded_grid
from .whitney import RegularizedDistance, _d0_accumulate


def _unit_ball_lattice() -> np.ndarray:
    # 9x9x9 midpoint lattice on [-1,1]^3 clipped to the unit ball;
    # symmetric, so constants and affine functions average exactly
    g = (np.arange(9) + 0.5) / 4.5 - 1.0
    u = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    inside = np.einsum("ij,ij->i", u, u) <= 1.0
    return np.ascontiguousarray(u[inside])


MOLLIFY_NODES = _unit_ball_lattice()

_STENCIL = np.array(
    [[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, -1.0, 0], [0, 0, 1.0], [0, 0, -1.0]]
)


# -- annulus membership and anchor assignment ----------------------------------------


@njit(cache=True)
def _first_hit(px, py, pz, anchors, k0, w, rad):
    """Smallest anchor index within rad among k0 +- w, or -1."""
    kmax = anchors.shape[0] - 1
    lo = k0 - w
    if lo < 0:
        lo = 0
    hi = k0 + w
    if hi > kmax:
        hi = kmax
    r2 = rad * rad
    for k in range(lo, hi + 1):
        dx = px - anchors[k, 0]
        dy = py - anchors[k, 1]
        dz = pz - anchors[k, 2]
        if dx * dx + dy * dy + dz * dz <= r2:
            return k
    return -1


@njit(cache=True)
def _first_hit_batch(centers, level_of, s_near, anchors_flat, anchor_off, lam, w):
    n = centers.shape[0]
    out = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        lev = level_of[i]
        if lev < 0:
            continue
        a0 = anchor_off[lev]
        anchors = anchors_flat[a0 : anchor_off[lev + 1]]
        k0 = int(round(s_near[i] / lam[lev]))
        out[i] = _first_hit(
            centers[i, 0], centers[i, 1], centers[i, 2], anchors, k0, w, 2.0 * lam[lev]
        )
    return out


@dataclass
class TubeAssignments:
    """Per-cell annulus level and first-hit anchor for a graded grid."""

    n_levels: int
    member: np.ndarray  # (n_cells, n_levels + 2) ball-union membership
    n_star: np.ndarray  # deepest member level, -1 outside the level-0 balls
    k_star: np.ndarray  # smallest in-range anchor at level n_star, -1 outside
    anchor_arcs: list  # arc params per level
    lam: np.ndarray  # anchor spacing per level

    def annulus(self, n: int) -> np.ndarray:
        return self.n_star == n


def assign_tube(curve: PolylineCurve, grid: GradedGrid, n_levels: int | None = None) -> TubeAssignments:
    """Classify every cell center into its dyadic annulus and anchor.

    Membership in the level-n ball union is a prefix in n (true through a
    last level, then false), so the annulus of a cell is the deepest level
    whose union still contains it.
    """
    if n_levels is None:
        n_levels = grid.excl_level + 2
    if n_levels < 1:
        raise InvalidInputError("need at least one annulus level")
    centers = grid.centers
    n_cells = centers.shape[0]
    member = np.zeros((n_cells, n_levels + 2), dtype=bool)
    subs = [dyadic_points(curve, n) for n in range(n_levels + 2)]
    for n, sub in enumerate(subs):
        dist, _ = sub.tree().query(centers)
        member[:, n] = dist <= 2.0 * sub.spacing
    # the level-0 ball about the start has radius 2|L|, which is also where
    # the coverage margin begins; keep the data support at exactly that ball
    # so the smoothing taper dies out on covered cells
    start_dist = np.linalg.norm(centers - curve.point_at(0.0), axis=1)
    member[:, 0] &= start_dist <= 2.0 * curve.total_len
    n_star = np.cumprod(member, axis=1).sum(axis=1).astype(np.int64) - 1
    np.minimum(n_star, n_levels, out=n_star)

    s_near, _ = grid.prox.nearest(centers)
    b = chord_arc_constant(curve)
    w = int(math.ceil(4.0 * b + 2.0))
    anchors_flat = np.concatenate([sub.positions for sub in subs])
    anchor_off = np.zeros(len(subs) + 1, dtype=np.int64)
    anchor_off[1:] = np.cumsum([len(sub) for sub in subs])
    lam = np.array([sub.spacing for sub in subs])
    k_star = _first_hit_batch(
        np.ascontiguousarray(centers), n_star, s_near,
        np.ascontiguousarray(anchors_flat), anchor_off, lam, w,
    )
    if np.any((n_star >= 0) & (k_star < 0)):
        raise ConstructionError("anchor window missed a member cell")
    return TubeAssignments(
        n_levels, member, n_star, k_star, [sub.s for sub in subs], lam
    )


def step_extension(
    f: CurveFunction,
    curve: PolylineCurve,
    grid: GradedGrid,
    n_levels: int | None = None,
    assignments: TubeAssignments | None = None,
) -> ScalarField:
    """Piecewise-constant extension: anchor value on its annulus patch, else 0."""
    if f.curve is not curve:
        raise InvalidInputError("function and grid curve must match")
    if assignments is None:
        assignments = assign_tube(curve, grid, n_levels)
    vals = np.zeros(grid.n_cells)
    sel = assignments.n_star >= 0
    ns = assignments.n_star[sel]
    ks = assignments.k_star[sel]
    arcs = np.empty(ns.shape[0])
    for n in np.unique(ns):
        m = ns == n
        arcs[m] = assignments.anchor_arcs[n][ks[m]]
    vals[sel] = f(arcs)
    out = ScalarField(grid, vals, mode="const")
    out.assignments = assignments
    return out


@dataclass
class TubePartition:
    """First-hit anchor ownership of cells at one dyadic level.

    ``omega`` assigns annulus-n cells; ``beta`` partitions the whole level-n
    ball union.  Entries are anchor indices, -1 for unassigned cells.
    """

    level: int
    omega: np.ndarray
    beta: np.ndarray


def tube_partition(
    curve: PolylineCurve,
    grid: GradedGrid,
    level: int,
    assignments: TubeAssignments,
) -> TubePartition:
    if not 0 <= level <= assignments.n_levels:
        raise InvalidInputError("partition level outside assigned range")
    omega = np.where(assignments.annulus(level), assignments.k_star, -1)
    sub = dyadic_points(curve, level)
    s_near, _ = grid.prox.nearest(grid.centers)
    level_of = np.where(assignments.member[:, level], level, -1).astype(np.int64)
    anchor_off = np.array([0, len(sub)], dtype=np.int64)
    b = chord_arc_constant(curve)
    w = int(math.ceil(4.0 * b + 2.0))
    beta = _first_hit_batch(
        np.ascontiguousarray(grid.centers),
        np.where(level_of >= 0, 0, -1).astype(np.int64),
        s_near,
        np.ascontiguousarray(sub.positions),
        anchor_off,
        np.array([sub.spacing]),
        w,
    )
    return TubePartition(level, omega.astype(np.int64), beta)


# -- ball averages -------------------------------------------------------------------


@njit(cache=True)
def _fill_table(tab, r_tab, cx, cy, cz, h, lev, home,
                ox, oy, oz, level_sides, lk_keys, lk_offsets, lk_index, levels, values):
    # slots outside coverage fall back to the home value: the averaging
    # ball itself stays covered, only the interpolation frame pokes out
    size = 2 * r_tab + 1
    for a in range(size):
        qx = cx + h * (a - r_tab)
        for bb in range(size):
            qy = cy + h * (bb - r_tab)
            for c in range(size):
                qz = cz + h * (c - r_tab)
                idx = _find_leaf(qx, qy, qz, ox, oy, oz,
                                 level_sides, lk_keys, lk_offsets, lk_index, lev)
                tab[a, bb, c] = values[idx] if idx >= 0 else values[home]


@njit(cache=True)
def _blend_table(tab, r_tab, tx, ty, tz):
    """Trilinear read at lattice coordinates (t in cell widths from center)."""
    size = 2 * r_tab + 1
    ux = tx + r_tab
    uy = ty + r_tab
    uz = tz + r_tab
    ix = int(math.floor(ux))
    iy = int(math.floor(uy))
    iz = int(math.floor(uz))
    if ix < 0:
        ix = 0
    if iy < 0:
        iy = 0
    if iz < 0:
        iz = 0
    if ix > size - 2:
        ix = size - 2
    if iy > size - 2:
        iy = size - 2
    if iz > size - 2:
        iz = size - 2
    fx = ux - ix
    fy = uy - iy
    fz = uz - iz
    c00 = tab[ix, iy, iz] * (1 - fx) + tab[ix + 1, iy, iz] * fx
    c10 = tab[ix, iy + 1, iz] * (1 - fx) + tab[ix + 1, iy + 1, iz] * fx
    c01 = tab[ix, iy, iz + 1] * (1 - fx) + tab[ix + 1, iy, iz + 1] * fx
    c11 = tab[ix, iy + 1, iz + 1] * (1 - fx) + tab[ix + 1, iy + 1, iz + 1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


@njit(cache=True)
def _d0_of(px, py, pz, wkeys, woffsets, wsides, wox, woy, woz, wlo, whi, weps, buf):
    _d0_accumulate(px, py, pz, wkeys, woffsets, wsides, wox, woy, woz, wlo, whi, buf, 0)
    return weps * buf[0]


@njit(cache=True)
def _ball_avg_const(points, nodes,
                    ox, oy, oz, level_sides, lk_keys, lk_offsets, lk_index, levels,
                    centers, sides, values,
                    wkeys, woffsets, wsides, wox, woy, woz, wlo, whi, weps):
    """Mean of a piecewise-constant field over the d0-ball at each point."""
    n = points.shape[0]
    m = nodes.shape[0]
    out = np.zeros(n)
    buf = np.empty(10)
    hint = level_sides.shape[0] - 1
    for i in range(n):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        home = _find_leaf(px, py, pz, ox, oy, oz,
                          level_sides, lk_keys, lk_offsets, lk_index, hint)
        cx = cy = cz = 0.0
        half = -1.0
        if home >= 0:
            hint = levels[home]
            cx, cy, cz = centers[home, 0], centers[home, 1], centers[home, 2]
            half = 0.5 * sides[home]
        r = _d0_of(px, py, pz, wkeys, woffsets, wsides, wox, woy, woz, wlo, whi, weps, buf)
        if r <= 0.0:
            if home >= 0:
                out[i] = values[home]
            continue
        acc = 0.0
        for j in range(m):
            qx = px + r * nodes[j, 0]
            qy = py + r * nodes[j, 1]
            qz = pz + r * nodes[j, 2]
            if abs(qx - cx) <= half and abs(qy - cy) <= half and abs(qz - cz) <= half:
                acc += values[home]
            else:
                idx = _find_leaf(qx, qy, qz, ox, oy, oz,
                                 level_sides, lk_keys, lk_offsets, lk_index, hint)
                if idx >= 0:
                    acc += values[idx]
        out[i] = acc / m
    return out


@njit(cache=True)
def _f0_at_one(px, py, pz, nodes, tab,
               ox, oy, oz, level_sides, lk_keys, lk_offsets, lk_index, levels,
               centers, sides, values,
               wkeys, woffsets, wsides, wox, woy, woz, wlo, whi, weps, buf):
    """Ball average of the blended field, in the frame of the point's cell."""
    home = _find_leaf(px, py, pz, ox, oy, oz,
                      level_sides, lk_keys, lk_offsets, lk_index,
                      level_sides.shape[0] - 1)
    m = nodes.shape[0]
    r = _d0_of(px, py, pz, wkeys, woffsets, wsides, wox, woy, woz, wlo, whi, weps, buf)
    if home < 0:
        # outside coverage: plain piecewise-constant average
        if r <= 0.0:
            return 0.0
        acc = 0.0
        hint = level_sides.shape[0] - 1
        for j in range(m):
            idx = _find_leaf(px + r * nodes[j, 0], py + r * nodes[j, 1],
                             pz + r * nodes[j, 2], ox, oy, oz,
                             level_sides, lk_keys, lk_offsets, lk_index, hint)
            if idx >= 0:
                acc += values[idx]
        return acc / m
    if r <= 0.0:
        return values[home]
    h = sides[home]
    cx, cy, cz = centers[home, 0], centers[home, 1], centers[home, 2]
    r_tab = 1 if 0.5 + r / h <= 1.0 else 2
    _fill_table(tab, r_tab, cx, cy, cz, h, levels[home], home,
                ox, oy, oz, level_sides, lk_keys, lk_offsets, lk_index, levels, values)
    acc = 0.0
    for j in range(m):
        tx = (px + r * nodes[j, 0] - cx) / h
        ty = (py + r * nodes[j, 1] - cy) / h
        tz = (pz + r * nodes[j, 2] - cz) / h
        acc += _blend_table(tab, r_tab, tx, ty, tz)
    return acc / m


@njit(cache=True)
def _ball_avg_trilinear(points, nodes,
                        ox, oy, oz, level_sides, lk_keys, lk_offsets, lk_index, levels,
                        centers, sides, values,
                        wkeys, woffsets, wsides, wox, woy, woz, wlo, whi, weps):
    n = points.shape[0]
    out = np.empty(n)
    tab = np.empty((5, 5, 5))
    buf = np.empty(10)
    for i in range(n):
        out[i] = _f0_at_one(points[i, 0], points[i, 1], points[i, 2], nodes, tab,
                            ox, oy, oz, level_sides, lk_keys, lk_offsets, lk_index, levels,
                            centers, sides, values,
                            wkeys, woffsets, wsides, wox, woy, woz, wlo, whi, weps, buf)
    return out


def mollify(field_in: ScalarField, rdist: RegularizedDistance) -> ScalarField:
    """Average the field over the ball of radius d0 about each cell center.

    The quadrature is the fixed clipped-lattice rule; the result is read
    back with trilinear blending.
    """
    grid = field_in.grid
    pts = np.ascontiguousarray(grid.centers)
    args = (
        pts, MOLLIFY_NODES, *grid.kernel_args(),
        grid.centers, grid.sides, field_in.values, *rdist.kernel_args(),
    )
    if field_in.mode == "const":
        vals = _ball_avg_const(*args)
    else:
        vals = _ball_avg_trilinear(*args)
    return ScalarField(grid, vals, mode="trilinear")


# -- Laplacian -----------------------------------------------------------------------


def laplacian_at(evaluate, point, step: float) -> tuple[float, float]:
    """7-point second difference of a batch-callable scalar at one point."""
    if not step > 0.0:
        raise InvalidInputError("laplacian step must be positive")
    p = np.asarray(point, dtype=np.float64)
    center = float(np.asarray(evaluate(p[None, :]))[0])
    vals = np.asarray(evaluate(p[None, :] + step * _STENCIL))
    return (float(vals.sum()) - 6.0 * center) / step**2, step


@njit(cache=True)
def _face_laplacian(centers, sides, values,
                    ox, oy, oz, level_sides, lk_keys, lk_offsets, lk_index, levels):
    # flux form: every face flux is computed once and scattered with opposite
    # signs into the two adjacent cells, so cell sums over any region
    # telescope to the flux through its boundary; only local dipole errors
    # remain.  The fine (or positive-side equal) cell owns each face.
    n = centers.shape[0]
    acc = np.zeros(n)
    for i in range(n):
        h = sides[i]
        px, py, pz = centers[i, 0], centers[i, 1], centers[i, 2]
        for a in range(3):
            for s2 in range(2):
                sgn = -1.0 if s2 == 0 else 1.0
                off = sgn * h * 0.5001
                qx, qy, qz = px, py, pz
                if a == 0:
                    qx += off
                elif a == 1:
                    qy += off
                else:
                    qz += off
                j = _find_leaf(qx, qy, qz, ox, oy, oz, level_sides,
                               lk_keys, lk_offsets, lk_index, levels[i])
                if j < 0:
                    # coverage boundary: the field is identically zero there
                    acc[i] -= values[i] * h
                    continue
                hj = sides[j]
                if hj < h or (hj == h and sgn < 0.0):
                    continue
                flux = (values[j] - values[i]) / (0.5 * (h + hj)) * h * h
                acc[i] += flux
                acc[j] -= flux
    return acc


@dataclass
class LaplacianField:
    """Second differences of the smoothed extension on active cells."""

    grid: GradedGrid
    values: np.ndarray
    steps: np.ndarray
    computed: np.ndarray
    excluded: int

    def masses(self) -> np.ndarray:
        """Cellwise -lap * volume / 4pi, zero on excluded cells."""
        out = np.where(self.computed, self.values, 0.0) * self.grid.volumes
        return -out / (4.0 * math.pi)


# -- the assembled continuation ------------------------------------------------------


@dataclass
class Extension:
    """Grid-backed continuation of a curve function, with its derivatives."""

    fn: CurveFunction
    curve: PolylineCurve
    grid: GradedGrid
    rdist: RegularizedDistance
    assignments: TubeAssignments
    f1: ScalarField
    f2: ScalarField
    f0: ScalarField
    lap: LaplacianField | None = None

    def f0_at(self, points) -> np.ndarray:
        """Smoothed extension at arbitrary points (0 outside coverage)."""
        pts = np.ascontiguousarray(np.atleast_2d(np.asarray(points, dtype=np.float64)))
        return _ball_avg_trilinear(
            pts, MOLLIFY_NODES, *self.grid.kernel_args(),
            self.grid.centers, self.grid.sides, self.f2.values,
            *self.rdist.kernel_args(),
        )

    def gradient_at(self, points, rel_step: float = 0.25) -> np.ndarray:
        """Central-difference gradient of the smoothed extension."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        d = self.grid.prox.distances(pts) - self.grid.prox.slack()
        step = np.maximum(rel_step * d / 8.0, 1e-12 * self.curve.total_len)
        grad = np.empty_like(pts)
        for ax in range(3):
            e = np.zeros(3)
            e[ax] = 1.0
            up = self.f0_at(pts + step[:, None] * e)
            dn = self.f0_at(pts - step[:, None] * e)
            grad[:, ax] = (up - dn) / (2.0 * step)
        return grad

    def laplacian(self, point) -> tuple[float, float]:
        """(second difference, step used) at one point near the grid."""
        p = np.asarray(point, dtype=np.float64)
        idx = int(self.grid.lookup(p)[0])
        if idx < 0:
            raise InvalidInputError("point outside grid coverage")
        step = min(float(self.grid.sides[idx]), float(self.grid.dist[idx]) / 8.0)
        value, step = laplacian_at(self.f0_at, p, step)
        return value, step


def laplacian_field(ext: Extension) -> LaplacianField:
    """Per-cell flux-form second differences over every cell.

    Shared face fluxes make region sums telescope to boundary fluxes, so
    quadratures built from these values carry no interface bias; the cells
    in the tube core contribute at the exclusion-scale resolution.
    """
    grid = ext.grid
    acc = _face_laplacian(
        np.ascontiguousarray(grid.centers), grid.sides, ext.f0.values,
        *grid.kernel_args(),
    )
    values = acc / grid.sides**3
    every = np.ones(grid.n_cells, dtype=np.bool_)
    return LaplacianField(grid, values, grid.sides.copy(), every, 0)


def build_extension(
    fn: CurveFunction,
    curve: PolylineCurve,
    n_max: int,
    theta: float = 0.25,
    h_max: float | None = None,
    excl_level: int | None = None,
    max_cells: int = 5_000_000,
    with_laplacian: bool = True,
) -> Extension:
    """Grid, regularized distance, step extension, and double ball average."""
    grid = build_graded_grid(curve, n_max, theta, h_max, excl_level, max_cells)
    rdist = RegularizedDistance(curve, floor=grid.r_excl / 16.0)
    assignments = assign_tube(curve, grid)
    f1 = step_extension(fn, curve, grid, assignments=assignments)
    f2 = mollify(f1, rdist)
    f0 = mollify(f2, rdist)
    ext = Extension(fn, curve, grid, rdist, assignments, f1, f2, f0)
    if with_laplacian:
        ext.lap = laplacian_field(ext)
    return ext


# far-resolution divisor and exclusion level, in increasing accuracy; the
# far octave dominates the quadrature error of curve-side reconstructions,
# the exclusion depth is secondary
_BUDGET_LADDER = ((8, 4), (16, 4), (16, 5), (32, 5), (32, 6))


def plan_for_budget(curve: PolylineCurve, budget: int, n_max: int = 4) -> dict:
    """Most accurate grid configuration whose cell count fits the budget.

    Walks a fixed configuration ladder with budget-capped grid builds and
    returns keyword arguments for build_extension.  Deterministic: depends
    only on the curve and the budget.
    """
    if budget < 1:
        raise InvalidInputError("cell budget must be positive")
    total = curve.total_len
    chosen: dict | None = None
    for div, excl in _BUDGET_LADDER:
        try:
            grid = build_graded_grid(
                curve, max(n_max, 2), h_max=total / div,
                excl_level=excl, max_cells=budget,
            )
        except ResourceLimitError:
            break
        chosen = {
            "n_max": n_max,
            "excl_level": excl,
            "h_max": total / div,
            "cells": grid.n_cells,
        }
    if chosen is None:
        raise InvalidInputError(
            "cell budget below the coarsest grid configuration"
        )
    return chosen


# -- smoothness-constant fit ----------------------------------------------------------


def fit_smoothness_constants(
    ext: Extension,
    levels: tuple = (2, 3, 4, 5),
    c5_ladder: tuple = (1.0, 2.0, 4.0, 8.0),
    per_level: int = 300,
    spread_cap: float = 2.5,
) -> dict:
    """Smallest modulus-dilation factor making the second-difference bound flat.

    For each candidate c5, measures C_n = max over sampled annulus-n cells of
    the pointwise stencil value * Lambda_n^2 / delta_star(anchor, c5 * d),
    then picks the smallest c5 whose C_n spread across levels is within
    spread_cap.
    """
    fn = ext.fn
    asg = ext.assignments
    grid = ext.grid
    samples = {}
    for n in levels:
        # the bound concerns cells outside the exclusion core, where the
        # smoothing radius tracks the true distance
        cells = np.nonzero(asg.annulus(n) & grid.active)[0]
        if cells.size == 0:
            continue
        take = np.unique(np.linspace(0, cells.size - 1, per_level).astype(int))
        samples[n] = cells[take]
    if not samples:
        raise InconsistencyError("no annulus cells available for the fit")
    lap_abs = {}
    for n, cells in samples.items():
        centers = grid.centers[cells]
        step = np.minimum(grid.sides[cells], grid.dist[cells] / 8.0)
        arms = [centers]
        for ax in range(3):
            e = np.zeros(3)
            e[ax] = 1.0
            arms.append(centers + step[:, None] * e)
            arms.append(centers - step[:, None] * e)
        vals = ext.f0_at(np.vstack(arms)).reshape(7, cells.size)
        lap_abs[n] = np.abs((vals[1:].sum(axis=0) - 6.0 * vals[0]) / step**2)
    results = {}
    for c5 in c5_ladder:
        by_level = {}
        for n, cells in samples.items():
            lam = ext.curve.total_len * 2.0**-n
            ratios = []
            for j, i in enumerate(cells):
                arc = asg.anchor_arcs[n][asg.k_star[i]]
                r = c5 * max(grid.dist[i], 1e-12)
                mod = float(delta_star_grid(fn, np.array([arc]), r)[0])
                if mod <= 0.0:
                    continue
                ratios.append(lap_abs[n][j] * lam**2 / mod)
            if ratios:
                by_level[n] = max(ratios)
        if len(by_level) >= 2:
            vals = np.array(list(by_level.values()))
            results[c5] = {"C_by_level": by_level, "spread": float(vals.max() / vals.min())}
    if not results:
        raise InconsistencyError("smoothness fit found no usable levels")
    chosen = None
    for c5 in c5_ladder:
        if c5 in results and results[c5]["spread"] <= spread_cap:
            chosen = c5
            break
    if chosen is None:
        chosen = min(results, key=lambda c: results[c]["spread"])
    out = dict(results[chosen])
    out["c5"] = float(chosen)
    out["C"] = float(max(out["C_by_level"].values()))
    out["all_spreads"] = {float(c): results[c]["spread"] for c in results}
    return out
