"""Newtonian potentials of grid Laplacian masses with per-anchor correctors.

The field's second differences, turned into point masses at cell centers,
give a potential reproducing the boundary data on the curve.  Excluding the
masses inside the dyadic tube makes the potential harmonic there; for each
anchor, a compensating charge spread over a nearby shell restores the
excluded mass so the far field is unchanged.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.spatial import cKDTree
from scipy.stats import qmc

from .errors import (
    ConstructionError,
    InconsistencyError,
    InvalidInputError,
    SingularInputError,
)
from .extension import LaplacianField, TubePartition
from .functions import CurveFunction, delta_star_grid
from .geometry import PolylineCurve, chord_arc_constant, dyadic_points, in_omega_star_many

_FOUR_PI = 4.0 * math.pi


def _sphere_directions() -> np.ndarray:
    g = np.array([-1.0, 0.0, 1.0])
    d = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    d = d[np.any(d != 0.0, axis=1)]
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _ball_probe_offsets() -> np.ndarray:
    # center + two shells of 26 directions + 50 low-discrepancy interior
    # points, all within the unit ball; scaled by the probe radius at use
    dirs = _sphere_directions()
    samples = qmc.Halton(d=3, scramble=False).random(256) * 2.0 - 1.0
    inside = samples[np.einsum("ij,ij->i", samples, samples) <= 1.0][:50]
    return np.concatenate([np.zeros((1, 3)), 0.5 * dirs, dirs, inside])


_PROBE_OFFSETS = _ball_probe_offsets()


@njit(cache=True)
def _potential_kernel(pos, q, pts, out, ok):
    for i in range(pts.shape[0]):
        px, py, pz = pts[i, 0], pts[i, 1], pts[i, 2]
        s = 0.0
        comp = 0.0
        good = True
        for j in range(pos.shape[0]):
            dx = pos[j, 0] - px
            dy = pos[j, 1] - py
            dz = pos[j, 2] - pz
            r2 = dx * dx + dy * dy + dz * dz
            if r2 <= 0.0:
                good = False
                break
            y = q[j] / math.sqrt(r2) - comp
            t = s + y
            comp = (t - s) - y
            s = t
        out[i] = s if good else np.nan
        ok[i] = good


@njit(cache=True)
def _gradient_kernel(pos, q, pts, out, ok):
    for i in range(pts.shape[0]):
        px, py, pz = pts[i, 0], pts[i, 1], pts[i, 2]
        sx = sy = sz = 0.0
        cx = cy = cz = 0.0
        good = True
        for j in range(pos.shape[0]):
            dx = pos[j, 0] - px
            dy = pos[j, 1] - py
            dz = pos[j, 2] - pz
            r2 = dx * dx + dy * dy + dz * dz
            if r2 <= 0.0:
                good = False
                break
            w = q[j] / (r2 * math.sqrt(r2))
            y = w * dx - cx
            t = sx + y
            cx = (t - sx) - y
            sx = t
            y = w * dy - cy
            t = sy + y
            cy = (t - sy) - y
            sy = t
            y = w * dz - cz
            t = sz + y
            cz = (t - sz) - y
            sz = t
        if good:
            out[i, 0] = sx
            out[i, 1] = sy
            out[i, 2] = sz
        else:
            out[i, 0] = np.nan
        ok[i] = good


def _potential(pos, q, points) -> np.ndarray:
    pts = np.ascontiguousarray(np.atleast_2d(np.asarray(points, dtype=np.float64)))
    out = np.empty(pts.shape[0])
    ok = np.empty(pts.shape[0], dtype=np.bool_)
    _potential_kernel(pos, q, pts, out, ok)
    if not np.all(ok):
        raise SingularInputError("evaluation point coincides with a source")
    return out


def _gradient(pos, q, points) -> np.ndarray:
    pts = np.ascontiguousarray(np.atleast_2d(np.asarray(points, dtype=np.float64)))
    out = np.empty((pts.shape[0], 3))
    ok = np.empty(pts.shape[0], dtype=np.bool_)
    _gradient_kernel(pos, q, pts, out, ok)
    if not np.all(ok):
        raise SingularInputError("evaluation point coincides with a source")
    return out


# -- corrector coefficients ------------------------------------------------------------


@dataclass
class CorrectorCoefficients:
    """Per-anchor charge amplitudes balancing the excluded tube mass."""

    level: int
    c11: int
    c5: float
    c_k: np.ndarray  # beta integral in units of Lambda_n * modulus
    gamma_k: np.ndarray  # shell charge amplitude
    modulus_k: np.ndarray  # local modulus at dilation (c5 + 2b) * Lambda_n
    beta_integral_k: np.ndarray
    support_volume_k: np.ndarray
    support_cells: list  # grid cell indices per anchor


def c11_search(curve: PolylineCurve, n: int, resolution: int = 33) -> int:
    """Smallest shell radius factor leaving half of each anchor ball uncovered.

    Checks, for every level-n anchor, that the ball of radius c11*Lambda_n
    keeps at least half its volume outside the level-(n-2) tube, using a
    midpoint-lattice volume estimate.
    """
    if n < 2:
        raise InvalidInputError("need level >= 2 so the coarser tube exists")
    sub = dyadic_points(curve, n)
    g = (np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0
    u = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    u = u[np.einsum("ij,ij->i", u, u) <= 1.0]
    for c11 in range(2, 33):
        rad = c11 * sub.spacing
        good = True
        for k in range(len(sub)):
            pts = sub.positions[k] + rad * u
            covered = in_omega_star_many(curve, n - 2, pts)
            if np.count_nonzero(~covered) * 2 < pts.shape[0]:
                good = False
                break
        if good:
            return c11
    raise ConstructionError("no shell factor up to 32 clears half the ball volume")


def corrector_coefficients(
    laplacian: LaplacianField,
    partition: TubePartition,
    f: CurveFunction,
    c11: int,
    c5: float,
) -> CorrectorCoefficients:
    """Solve the per-anchor mass balance for the shell charge amplitudes."""
    grid = laplacian.grid
    curve = f.curve
    n = partition.level
    sub = dyadic_points(curve, n)
    lam = sub.spacing
    b = chord_arc_constant(curve)
    n_anchors = len(sub)

    lap_vol = np.where(laplacian.computed, laplacian.values, 0.0) * grid.volumes
    owned = laplacian.computed & (partition.beta >= 0)
    integral = np.bincount(
        partition.beta[owned], weights=lap_vol[owned], minlength=n_anchors
    )
    modulus = delta_star_grid(f, sub.s, (c5 + 2.0 * b) * lam)

    shell = laplacian.computed & (partition.beta < 0)
    shell_idx = np.nonzero(shell)[0]
    tree = cKDTree(grid.centers[shell_idx])
    support_cells = []
    support_volume = np.zeros(n_anchors)
    for k in range(n_anchors):
        local = tree.query_ball_point(sub.positions[k], c11 * lam)
        cells = np.sort(shell_idx[np.asarray(local, dtype=np.int64)])
        support_cells.append(cells)
        support_volume[k] = grid.volumes[cells].sum()
    if np.any(support_volume <= 0.0):
        raise ConstructionError("empty corrector shell: grid too coarse for this level")

    noise = 1e-8 * max(np.abs(lap_vol).sum(), 1e-300)
    gamma = np.zeros(n_anchors)
    c_k = np.zeros(n_anchors)
    live = modulus > 0.0
    if np.any(~live & (np.abs(integral) > noise)):
        raise InconsistencyError("flat boundary data but nonzero tube mass")
    c_k[live] = integral[live] / (lam * modulus[live])
    gamma[live] = -integral[live] / (modulus[live] / lam**2 * support_volume[live])
    return CorrectorCoefficients(
        n, int(c11), float(c5), c_k, gamma, modulus, integral, support_volume,
        support_cells,
    )


# -- source assembly -------------------------------------------------------------------


@dataclass
class SourceSet:
    """Point charges at cell centers: far-field masses plus shell correctors.

    Records keep one entry per (cell, origin) pair so per-anchor bookkeeping
    stays inspectable; overlapping shells mean a cell can carry many records.
    Evaluation uses the per-cell merged arrays instead.
    """

    level: int
    positions: np.ndarray
    charges: np.ndarray
    kinds: np.ndarray  # 0 = laplacian-cell, 1 = corrector
    tags: np.ndarray  # cell index or anchor index
    cells: np.ndarray  # grid cell index per record

    @property
    def n_records(self) -> int:
        return self.positions.shape[0]

    def total_charge(self) -> float:
        return float(self.charges.sum())

    def merged(self, kind: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """(positions, charges) with charges accumulated per distinct cell."""
        cache = getattr(self, "_merged", None)
        if cache is None:
            cache = {}
            self._merged = cache
        if kind not in cache:
            m = slice(None) if kind is None else np.nonzero(self.kinds == kind)[0]
            cells = self.cells[m]
            uniq, first = np.unique(cells, return_index=True)
            q = np.bincount(cells, weights=self.charges[m])[uniq]
            cache[kind] = (
                np.ascontiguousarray(self.positions[m][first]),
                np.ascontiguousarray(q),
            )
        return cache[kind]

    @property
    def n_sources(self) -> int:
        return self.merged()[0].shape[0]


@dataclass
class Approximant:
    """Potential of a source set, harmonic inside the level-n tube."""

    level: int
    sources: SourceSet
    tube_cells: np.ndarray  # computed cells inside the tube, left out of the sum
    n_laplacian: int
    n_corrector: int
    c11: int = 0


def assemble(
    n: int,
    laplacian: LaplacianField,
    coefficients: CorrectorCoefficients,
    partition: TubePartition,
) -> Approximant:
    """Source set from far-field cell masses and per-anchor shell charges."""
    if coefficients.level != n or partition.level != n:
        raise InvalidInputError("level mismatch between coefficients and partition")
    grid = laplacian.grid
    masses = laplacian.masses()
    outside = laplacian.computed & (partition.beta < 0)
    v_idx = np.nonzero(outside)[0]
    lam_n = grid.r_excl * 2.0 ** (grid.excl_level - n)

    pos = [grid.centers[v_idx]]
    charge = [masses[v_idx]]
    kinds = [np.zeros(v_idx.size, dtype=np.int8)]
    tags = [v_idx]
    cell_ids = [v_idx]
    for k, cells in enumerate(coefficients.support_cells):
        if coefficients.gamma_k[k] == 0.0 or cells.size == 0:
            continue
        phi = coefficients.gamma_k[k] * coefficients.modulus_k[k]
        q = phi / lam_n**2 * grid.volumes[cells] / _FOUR_PI
        pos.append(grid.centers[cells])
        charge.append(q)
        kinds.append(np.ones(cells.size, dtype=np.int8))
        tags.append(np.full(cells.size, k, dtype=np.int64))
        cell_ids.append(cells)
    sources = SourceSet(
        n,
        np.ascontiguousarray(np.concatenate(pos)),
        np.ascontiguousarray(np.concatenate(charge)),
        np.concatenate(kinds),
        np.concatenate(tags).astype(np.int64),
        np.concatenate(cell_ids).astype(np.int64),
    )
    d = grid.prox.distances(sources.positions) - grid.prox.slack()
    if np.any(d <= lam_n):
        raise ConstructionError("source inside the harmonicity tube")
    tube_cells = np.nonzero(laplacian.computed & (partition.beta >= 0))[0]
    return Approximant(
        n,
        sources,
        tube_cells,
        int(v_idx.size),
        int(sources.n_records - v_idx.size),
        int(coefficients.c11),
    )


# -- evaluation ------------------------------------------------------------------------


def evaluate(approx: Approximant, points) -> np.ndarray:
    """Potential sum q/r over all sources, compensated, fixed order."""
    pos, q = approx.sources.merged()
    return _potential(pos, q, points)


def evaluate_split(approx: Approximant, points) -> tuple[np.ndarray, np.ndarray]:
    """(far-field mass part, corrector part), summing to evaluate()."""
    s = approx.sources
    pos, q = s.merged(0)
    v = _potential(pos, q, points)
    u = np.zeros_like(v)
    if np.any(s.kinds == 1):
        pos, q = s.merged(1)
        u = _potential(pos, q, points)
    return v, u


def evaluate_gradient(approx: Approximant, points) -> np.ndarray:
    """Gradient sum q*(P - M)/r^3 matching central differences of evaluate."""
    pos, q = approx.sources.merged()
    return _gradient(pos, q, points)


def grad_star(approx: Approximant, M, delta: float) -> float:
    """Max gradient norm over the ball of radius delta/2 about M."""
    if not delta > 0.0:
        raise InvalidInputError("probe diameter must be positive")
    M = np.asarray(M, dtype=np.float64)
    pos, q = approx.sources.merged()
    if pos.shape[0] == 0:
        return 0.0
    probes = M[None, :] + 0.5 * delta * _PROBE_OFFSETS
    tree = _source_tree(approx)
    d_min, _ = tree.query(M[None, :], k=1)
    if d_min[0] <= 0.5 * delta:
        raise InvalidInputError("probe ball reaches the source region")
    g = _gradient(pos, q, probes)
    return float(np.linalg.norm(g, axis=1).max())


def grad_star_many(approx: Approximant, points, delta: float) -> np.ndarray:
    """grad_star at many centers with one batched gradient pass."""
    if not delta > 0.0:
        raise InvalidInputError("probe diameter must be positive")
    pts = np.ascontiguousarray(np.atleast_2d(np.asarray(points, dtype=np.float64)))
    pos, q = approx.sources.merged()
    if pos.shape[0] == 0:
        return np.zeros(pts.shape[0])
    tree = _source_tree(approx)
    d_min, _ = tree.query(pts, k=1)
    if np.any(d_min <= 0.5 * delta):
        raise InvalidInputError("probe ball reaches the source region")
    probes = (pts[:, None, :] + 0.5 * delta * _PROBE_OFFSETS[None, :, :]).reshape(-1, 3)
    g = _gradient(pos, q, probes).reshape(pts.shape[0], _PROBE_OFFSETS.shape[0], 3)
    return np.linalg.norm(g, axis=2).max(axis=1)


def zero_approximant(level: int) -> Approximant:
    """Sourceless member completing an approximant family at coarse radii."""
    sources = SourceSet(
        int(level),
        np.empty((0, 3)),
        np.empty(0),
        np.empty(0, dtype=np.int8),
        np.empty(0, dtype=np.int64),
        np.empty(0, dtype=np.int64),
    )
    return Approximant(int(level), sources, np.empty(0, dtype=np.int64), 0, 0, 0)


def _source_tree(approx: Approximant) -> cKDTree:
    tree = getattr(approx, "_tree", None)
    if tree is None:
        tree = cKDTree(approx.sources.merged()[0])
        approx._tree = tree
    return tree


def _sphere_rule(n_polar: int = 8, n_azimuth: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre x uniform-azimuth sphere rule: (directions, weights).

    Exact for spherical harmonics through degree 2*n_polar - 1, which makes
    sphere averages of a potential with sources at distance > the radius
    converge geometrically in the rule size.
    """
    x, w = np.polynomial.legendre.leggauss(n_polar)
    azi = 2.0 * np.pi * (np.arange(n_azimuth) + 0.5) / n_azimuth
    sin_t = np.sqrt(1.0 - x**2)
    dirs = np.stack(
        [
            sin_t[:, None] * np.cos(azi)[None, :],
            sin_t[:, None] * np.sin(azi)[None, :],
            x[:, None] * np.ones(n_azimuth)[None, :],
        ],
        axis=-1,
    ).reshape(-1, 3)
    wts = (w[:, None] / 2.0 / n_azimuth * np.ones(n_azimuth)[None, :]).reshape(-1)
    return dirs, wts


def mean_value_deviation(
    approx: Approximant, points, radius_factor: float = 0.5
) -> np.ndarray:
    """Relative mean-value defect on spheres centered at the given points.

    Each sphere radius is radius_factor times the distance to the nearest
    source, so the potential is harmonic through the whole ball and its
    sphere average must reproduce the center value.
    """
    if not 0.0 < radius_factor < 1.0:
        raise InvalidInputError("radius factor must lie in (0, 1)")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    pos, q = approx.sources.merged()
    if pos.shape[0] == 0:
        return np.zeros(pts.shape[0])
    d_min, _ = _source_tree(approx).query(pts, k=1)
    dirs, wts = _sphere_rule()
    out = np.empty(pts.shape[0])
    for i, p in enumerate(pts):
        rho = radius_factor * d_min[i]
        vals = _potential(pos, q, p[None, :] + rho * dirs)
        center = _potential(pos, q, p[None, :])[0]
        out[i] = abs(float(vals @ wts) - center) / max(abs(center), 1e-300)
    return out


def dump_sources(approx: Approximant, fh) -> None:
    """JSON-lines dump: one header, then one record per source charge."""
    s = approx.sources
    header = {
        "level": int(approx.level),
        "c11": int(approx.c11),
        "n_laplacian": int(approx.n_laplacian),
        "n_corrector": int(approx.n_corrector),
        "records": int(s.n_records),
    }
    fh.write(json.dumps(header, sort_keys=True) + "\n")
    for j in range(s.n_records):
        rec = {
            "p": [s.positions[j, 0], s.positions[j, 1], s.positions[j, 2]],
            "q": s.charges[j],
            "kind": int(s.kinds[j]),
            "tag": int(s.tags[j]),
            "cell": int(s.cells[j]),
        }
        fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_sources(fh) -> Approximant:
    """Rebuild an approximant from a dump; evaluation-complete, grid-free.

    The tube cell list is grid-bound state and is not serialized, so error
    splits against a Laplacian field need the originally assembled object.
    """
    lines = fh.read().splitlines()
    if not lines:
        raise ConstructionError("source dump is empty")
    try:
        header = json.loads(lines[0])
        need = {"level", "c11", "n_laplacian", "n_corrector", "records"}
        if not need <= set(header):
            raise ValueError("missing header fields")
        n = int(header["records"])
    except ValueError as exc:
        raise ConstructionError(f"source dump header unreadable: {exc}") from exc
    if len(lines) != n + 1:
        raise ConstructionError(
            f"source dump holds {len(lines) - 1} records, header says {n}"
        )
    pos = np.empty((n, 3))
    charges = np.empty(n)
    kinds = np.empty(n, dtype=np.int8)
    tags = np.empty(n, dtype=np.int64)
    cells = np.empty(n, dtype=np.int64)
    for j, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            pos[j - 2] = rec["p"]
            charges[j - 2] = rec["q"]
            kinds[j - 2] = rec["kind"]
            tags[j - 2] = rec["tag"]
            cells[j - 2] = rec["cell"]
        except (ValueError, KeyError, TypeError) as exc:
            raise ConstructionError(f"source dump line {j} unreadable: {exc}") from exc
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(charges))):
        raise ConstructionError("source dump carries non-finite entries")
    sources = SourceSet(
        int(header["level"]), np.ascontiguousarray(pos), charges, kinds, tags, cells
    )
    return Approximant(
        int(header["level"]),
        sources,
        np.empty(0, dtype=np.int64),
        int(header["n_laplacian"]),
        int(header["n_corrector"]),
        int(header["c11"]),
    )


def reconstruct(laplacian: LaplacianField, points) -> np.ndarray:
    """Boundary data recovered from the full-grid mass distribution."""
    grid = laplacian.grid
    sel = np.nonzero(laplacian.computed)[0]
    masses = laplacian.masses()
    return _potential(
        np.ascontiguousarray(grid.centers[sel]),
        np.ascontiguousarray(masses[sel]),
        points,
    )


def error_split(
    approx: Approximant, laplacian: LaplacianField, points
) -> tuple[np.ndarray, np.ndarray]:
    """Tube-mass and corrector terms whose sum is evaluate - reconstruct."""
    grid = laplacian.grid
    masses = laplacian.masses()
    idx = approx.tube_cells
    tube = -_potential(
        np.ascontiguousarray(grid.centers[idx]),
        np.ascontiguousarray(masses[idx]),
        points,
    )
    s = approx.sources
    if np.any(s.kinds == 1):
        pos, q = s.merged(1)
        u = _potential(pos, q, points)
    else:
        u = np.zeros(np.atleast_2d(np.asarray(points)).shape[0])
    return tube, u
