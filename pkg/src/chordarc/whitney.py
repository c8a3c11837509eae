"""Regularized distance d0 from a Whitney-cube partition of R^3 minus the curve.

The construction: dyadic cubes subdivide a box around the curve until each
cube Q satisfies diam(Q) <= dist(Q, L) (checked via the center distance).
Each accepted cube carries a C^2 bump

    phi_Q(M) = (1 - w)^4,  w = ||M - c_Q||^2 / rho_Q^2,  rho_Q = 0.75 diam(Q),

and d0(M) = eps0 * sum_Q phi_Q(M) * diam(Q).  The influence radius
0.75*diam keeps contributions local: only cubes with side <= ~2.3 d(M)
reach M, so d0 is comparable to d = dist(., L) from both sides.  The global
scale eps0 is calibrated by deterministic sampling so that d0 <= d/16
everywhere, and the measured lower-bound constant c2 is recorded.

Gradient and Hessian come from analytic differentiation of the bumps.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .errors import ConstructionError, InvalidInputError, SingularInputError
from .geometry import CurveProximity, PolylineCurve

__all__ = ["RegularizedDistance", "regularized_distance"]

# Whitney acceptance: diam(Q) <= d(center) - diam(Q)/2, i.e. d(center) >= 1.5*diam.
_ACCEPT = 1.5 * math.sqrt(3.0)

# Influence radius as a multiple of the cube side: 0.75 * diam = 0.75*sqrt(3)*side.
_RHO = 0.75 * math.sqrt(3.0)

_TARGET_RATIO = 1.0 / 16.0
_CALIBRATION_MARGIN = 1.12

_KEY_BITS = 21


@njit(cache=True)
def _d0_accumulate(px, py, pz, keys, offsets, sides, ox, oy, oz, lo, hi, out, want):
    """Accumulate d0, gradient, and Hessian of the bump sum at one point.

    out: float64[10] = [d0, gx, gy, gz, hxx, hyy, hzz, hxy, hxz, hyz].
    want: 0 = value only, 1 = value+gradient, 2 = all.
    """
    for i in range(10):
        out[i] = 0.0
    n_levels = sides.shape[0]
    for lev in range(n_levels):
        s = sides[lev]
        reach = _RHO * s
        if offsets[lev] == offsets[lev + 1]:
            continue
        if (
            px < lo[lev, 0] - reach
            or px > hi[lev, 0] + reach
            or py < lo[lev, 1] - reach
            or py > hi[lev, 1] + reach
            or pz < lo[lev, 2] - reach
            or pz > hi[lev, 2] + reach
        ):
            continue
        diam = math.sqrt(3.0) * s
        rho2 = reach * reach
        i0 = int(math.floor((px - ox) / s - 0.5))
        j0 = int(math.floor((py - oy) / s - 0.5))
        k0 = int(math.floor((pz - oz) / s - 0.5))
        base = offsets[lev]
        end = offsets[lev + 1]
        for ii in range(i0 - 1, i0 + 3):
            if ii < 0:
                continue
            cx = ox + (ii + 0.5) * s
            if abs(px - cx) >= reach:
                continue
            for jj in range(j0 - 1, j0 + 3):
                if jj < 0:
                    continue
                cy = oy + (jj + 0.5) * s
                if abs(py - cy) >= reach:
                    continue
                for kk in range(k0 - 1, k0 + 3):
                    if kk < 0:
                        continue
                    cz = oz + (kk + 0.5) * s
                    if abs(pz - cz) >= reach:
                        continue
                    key = (ii << (2 * _KEY_BITS)) | (jj << _KEY_BITS) | kk
                    a = base
                    b = end
                    while a < b:
                        mid = (a + b) >> 1
                        if keys[mid] < key:
                            a = mid + 1
                        else:
                            b = mid
                    if a >= end or keys[a] != key:
                        continue
                    dx = px - cx
                    dy = py - cy
                    dz = pz - cz
                    w = (dx * dx + dy * dy + dz * dz) / rho2
                    if w >= 1.0:
                        continue
                    om = 1.0 - w
                    om2 = om * om
                    out[0] += om2 * om2 * diam
                    if want >= 1:
                        g = -8.0 * om2 * om * diam / rho2
                        out[1] += g * dx
                        out[2] += g * dy
                        out[3] += g * dz
                    if want >= 2:
                        hd = -8.0 * om2 * om * diam / rho2
                        ho = 48.0 * om2 * diam / (rho2 * rho2)
                        out[4] += hd + ho * dx * dx
                        out[5] += hd + ho * dy * dy
                        out[6] += hd + ho * dz * dz
                        out[7] += ho * dx * dy
                        out[8] += ho * dx * dz
                        out[9] += ho * dy * dz


@njit(cache=True)
def _d0_batch(points, keys, offsets, sides, ox, oy, oz, lo, hi, want):
    n = points.shape[0]
    res = np.empty((n, 10))
    buf = np.empty(10)
    for i in range(n):
        _d0_accumulate(
            points[i, 0], points[i, 1], points[i, 2],
            keys, offsets, sides, ox, oy, oz, lo, hi, buf, want,
        )
        for j in range(10):
            res[i, j] = buf[j]
    return res


class RegularizedDistance:
    """C^2 substitute for dist(., L), comparable to it with d0 <= d/16."""

    def __init__(self, curve: PolylineCurve, floor: float | None = None, max_cubes: int = 6_000_000):
        total = curve.total_len
        if floor is None:
            floor = total * 2.0**-13
        if not 0.0 < floor < total:
            raise InvalidInputError("whitney floor must lie in (0, |L|)")
        self.curve = curve
        self.floor = float(floor)
        self._prox = CurveProximity(curve, self.floor / 4.0)
        root_side = 8.0 * total
        a = curve.point_at(0.0)
        self.origin = a - 0.5 * root_side
        self._build(root_side, max_cubes)
        self._calibrate()

    def _build(self, root_side: float, max_cubes: int) -> None:
        coords = np.zeros((1, 3), dtype=np.int64)
        side = root_side
        level_keys: list[np.ndarray] = []
        level_sides: list[float] = []
        level_lo: list[np.ndarray] = []
        level_hi: list[np.ndarray] = []
        total_cubes = 0
        slack = self._prox.slack()
        while coords.shape[0] > 0:
            centers = self.origin + (coords.astype(np.float64) + 0.5) * side
            # lower bound on the true curve distance keeps the accept safe
            d = self._prox.distances(centers) - slack
            accepted = d >= _ACCEPT * side
            acc = coords[accepted]
            if acc.shape[0] > 0:
                keys = (acc[:, 0] << (2 * _KEY_BITS)) | (acc[:, 1] << _KEY_BITS) | acc[:, 2]
                order = np.argsort(keys, kind="stable")
                level_keys.append(keys[order])
                acc_centers = centers[accepted]
                level_lo.append(acc_centers.min(axis=0))
                level_hi.append(acc_centers.max(axis=0))
            else:
                level_keys.append(np.empty(0, dtype=np.int64))
                level_lo.append(np.zeros(3))
                level_hi.append(np.full(3, -1.0))
            level_sides.append(side)
            total_cubes += acc.shape[0]
            if total_cubes > max_cubes:
                raise ConstructionError("whitney cube budget exceeded")
            rest = coords[~accepted]
            if side / 2.0 < self.floor or rest.shape[0] == 0:
                break
            children = (rest[:, None, :] * 2) + _CHILD_OFFSETS[None, :, :]
            coords = children.reshape(-1, 3)
            side = side / 2.0
        self.n_cubes = total_cubes
        self.sides = np.asarray(level_sides)
        self.keys = np.concatenate(level_keys) if level_keys else np.empty(0, dtype=np.int64)
        offs = np.zeros(len(level_keys) + 1, dtype=np.int64)
        np.cumsum([k.shape[0] for k in level_keys], out=offs[1:])
        self.offsets = offs
        self.box_lo = np.vstack(level_lo)
        self.box_hi = np.vstack(level_hi)

    def _calibration_points(self) -> tuple[np.ndarray, np.ndarray]:
        # Full-sphere offsets so endpoint caps are probed, not just the
        # perpendicular tube, plus a seeded cloud against blind spots.
        curve = self.curve
        total = curve.total_len
        arcs = np.linspace(0.0, total, 192)
        pos = curve.point_at(arcs)
        grid = np.array([-1.0, 0.0, 1.0])
        dirs = np.stack(np.meshgrid(grid, grid, grid, indexing="ij"), axis=-1).reshape(-1, 3)
        dirs = dirs[np.any(dirs != 0.0, axis=1)]
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        d_lo = max(8.0 * self.floor, 1e-4 * total)
        radii = np.geomspace(d_lo, 2.5 * total, 22)
        pts = pos[:, None, None, :] + radii[None, None, :, None] * dirs[None, :, None, :]
        rng = np.random.default_rng(2718)
        r_arcs = rng.uniform(0.0, total, 4096)
        r_dirs = rng.normal(size=(4096, 3))
        r_dirs /= np.linalg.norm(r_dirs, axis=1, keepdims=True)
        r_rad = np.exp(rng.uniform(np.log(d_lo), np.log(2.5 * total), 4096))
        cloud = curve.point_at(r_arcs) + r_rad[:, None] * r_dirs
        pts = np.concatenate([pts.reshape(-1, 3), cloud])
        # lower bound: a kept point truly has d >= d_lo, and ratios d0/d
        # computed against it overestimate, pushing eps0 to the safe side
        d = self._prox.distances(pts) - self._prox.slack()
        keep = d >= d_lo
        return pts[keep], d[keep]

    def _calibrate(self) -> None:
        pts, d = self._calibration_points()
        raw = self._raw(pts, want=1)
        vals = raw[:, 0]
        if np.any(vals <= 0.0):
            raise ConstructionError("whitney coverage hole at calibration point")
        ratio = vals / d
        self.eps0 = _TARGET_RATIO / (_CALIBRATION_MARGIN * float(ratio.max()))
        self.c2 = self.eps0 * float(ratio.min())
        self.c3 = self.eps0 * float(np.max(np.linalg.norm(raw[:, 1:4], axis=1)))

    def _raw(self, points: np.ndarray, want: int) -> np.ndarray:
        return _d0_batch(
            np.ascontiguousarray(points, dtype=np.float64),
            self.keys, self.offsets, self.sides,
            self.origin[0], self.origin[1], self.origin[2],
            self.box_lo, self.box_hi, want,
        )

    def values(self, points: np.ndarray) -> np.ndarray:
        """d0 at points (no on-curve check; 0 outside coverage)."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return self.eps0 * self._raw(points, want=0)[:, 0]

    def at(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(d0, grad d0, ||Hessian d0||_F) at points off the curve.

        Raises singular-input on points of L and construction error where the
        cube cover has no cube reaching the point (outside the built region).
        """
        points = np.asarray(points, dtype=np.float64)
        single = points.ndim == 1
        pts = np.atleast_2d(points)
        raw = self._raw(pts, want=2)
        dead = raw[:, 0] <= 0.0
        if np.any(dead):
            # distinguish on-curve points from uncovered ones only on failure
            d = self._prox.distances(pts[dead])
            if np.any(d <= self._prox.slack()):
                raise SingularInputError("regularized distance is undefined on the curve")
            raise ConstructionError("point outside whitney coverage")
        d0 = self.eps0 * raw[:, 0]
        grad = self.eps0 * raw[:, 1:4]
        h = self.eps0 * raw[:, 4:10]
        hess_norm = np.sqrt(
            h[:, 0] ** 2 + h[:, 1] ** 2 + h[:, 2] ** 2
            + 2.0 * (h[:, 3] ** 2 + h[:, 4] ** 2 + h[:, 5] ** 2)
        )
        if single:
            return float(d0[0]), grad[0], float(hess_norm[0])
        return d0, grad, hess_norm

    def hessians(self, points: np.ndarray) -> np.ndarray:
        """Full symmetric Hessian components [xx, yy, zz, xy, xz, yz]."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return self.eps0 * self._raw(pts, want=2)[:, 4:10]

    def kernel_args(self) -> tuple:
        """Array pack consumed by numba kernels needing d0 values."""
        return (
            self.keys, self.offsets, self.sides,
            self.origin[0], self.origin[1], self.origin[2],
            self.box_lo, self.box_hi, self.eps0,
        )


_CHILD_OFFSETS = np.array(
    [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64
)


def regularized_distance(curve: PolylineCurve, M, rdist: RegularizedDistance | None = None):
    """(d0, grad, hess_norm) at point M; builds (and caches) the default cover."""
    if rdist is None:
        rdist = getattr(curve, "_default_rdist", None)
        if rdist is None:
            rdist = RegularizedDistance(curve)
            curve._default_rdist = rdist
    return rdist.at(np.asarray(M, dtype=np.float64))
