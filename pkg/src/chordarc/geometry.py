"""Polyline curves in R^3 and their chord-arc bookkeeping.

A curve is a nonclosed rectifiable polyline given by an ordered vertex list.
Smooth curves are expected as dense polylines (>= 4096 vertices recommended);
all arc-length queries are exact on the polyline itself.  The module provides

* arc-length parameterisation and exact nearest-point projection,
* the chord-arc constant ``b`` (sup of arc length over chord length),
* dyadic subdivisions ``M_kn`` of the curve into ``2^n`` equal arcs,
* membership tests for the dyadic ball unions ``Omega*_n`` built from them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidInputError, ResourceLimitError

__all__ = [
    "CurvePoint",
    "PolylineCurve",
    "DyadicSubdivision",
    "generate_curve",
    "curve_from_spec",
    "load_curve_json",
    "chord_arc_constant",
    "dyadic_points",
    "nearest_point",
    "nearest_points",
    "arc_between",
    "in_omega_star",
    "in_omega_star_many",
]

# Deepest supported dyadic level; 2^24 + 1 anchor points is already far past
# anything the desk-scale experiments resolve.
MAX_DYADIC_LEVEL = 24

# Stratified chord-arc sampling always includes every dyadic pair up to this
# level, so the worst subarc of a curved corpus member cannot be skipped.
_MIN_SAMPLING_LEVEL = 10
_MAX_SAMPLING_LEVEL = 14


@dataclass(frozen=True, eq=False)
class CurvePoint:
    """A point on the curve: arc parameter ``s`` plus its position."""

    s: float
    position: np.ndarray


class PolylineCurve:
    """Ordered polyline with cached arc-length tables and search trees.

    Parameters
    ----------
    vertices : (N, 3) array_like
        Ordered vertex positions; consecutive vertices must be distinct.
    """

    def __init__(self, vertices: Iterable[Sequence[float]]):
        verts = np.asarray(vertices, dtype=np.float64)
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise InvalidInputError("curve vertices must form an (N, 3) array")
        if verts.shape[0] < 2:
            raise InvalidInputError("curve needs at least two vertices")
        if not np.all(np.isfinite(verts)):
            raise InvalidInputError("curve vertices must be finite")
        seg = np.diff(verts, axis=0)
        seg_len = np.linalg.norm(seg, axis=1)
        if np.any(seg_len == 0.0):
            raise InvalidInputError("consecutive curve vertices must be distinct")
        self.vertices = verts
        self.segments = seg
        self.seg_lengths = seg_len
        self.cum_len = np.concatenate(([0.0], np.cumsum(seg_len)))
        self.total_len = float(self.cum_len[-1])
        self._seg_len2 = seg_len * seg_len
        self._vertex_tree: cKDTree | None = None
        self._chord_arc: float | None = None
        self._dyadic_cache: dict[int, DyadicSubdivision] = {}

    # -- basic parameterisation -------------------------------------------------

    def point_at(self, s) -> np.ndarray:
        """Position(s) at arc parameter ``s`` (scalar or array), clipped to [0, |L|]."""
        s = np.clip(np.asarray(s, dtype=np.float64), 0.0, self.total_len)
        x = np.interp(s, self.cum_len, self.vertices[:, 0])
        y = np.interp(s, self.cum_len, self.vertices[:, 1])
        z = np.interp(s, self.cum_len, self.vertices[:, 2])
        return np.stack([x, y, z], axis=-1)

    def point(self, s: float) -> CurvePoint:
        s = float(s)
        if s < -1e-9 * self.total_len or s > self.total_len * (1.0 + 1e-9):
            raise InvalidInputError(f"arc parameter {s!r} outside [0, {self.total_len}]")
        s = min(max(s, 0.0), self.total_len)
        return CurvePoint(s, self.point_at(s))

    @property
    def start(self) -> np.ndarray:
        return self.vertices[0]

    @property
    def end(self) -> np.ndarray:
        return self.vertices[-1]

    def vertex_tree(self) -> cKDTree:
        if self._vertex_tree is None:
            self._vertex_tree = cKDTree(self.vertices)
        return self._vertex_tree

    def chord_arc(self) -> float:
        """Cached chord-arc constant at the default sampling density."""
        if self._chord_arc is None:
            self._chord_arc = chord_arc_constant(self)
        return self._chord_arc


@dataclass(eq=False)
class DyadicSubdivision:
    """Anchor points ``M_kn`` splitting the curve into ``2^n`` equal arcs."""

    curve: PolylineCurve
    level: int
    s: np.ndarray
    positions: np.ndarray
    spacing: float
    _tree: cKDTree | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.s.shape[0]

    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.positions)
        return self._tree

    def ball_radius(self) -> float:
        """Radius ``2 * Lambda_n`` of the covering balls around the anchors."""
        return 2.0 * self.spacing


# -- construction ----------------------------------------------------------------


def generate_curve(name: str, **params) -> PolylineCurve:
    """Build one of the canonical test curves by name.

    Supported names: ``segment``, ``semicircle``, ``quarter-circle``, ``helix``.
    """
    known = {"segment", "semicircle", "quarter-circle", "helix"}
    if name not in known:
        raise InvalidInputError(f"unknown curve generator {name!r}; known: {sorted(known)}")
    if name == "segment":
        length = float(params.pop("length", 1.0))
        vertices = int(params.pop("vertices", 2))
        _reject_extra(name, params)
        if length <= 0:
            raise InvalidInputError("segment length must be positive")
        t = np.linspace(0.0, length, max(vertices, 2))
        pts = np.column_stack([t, np.zeros_like(t), np.zeros_like(t)])
        return PolylineCurve(pts)
    if name in ("semicircle", "quarter-circle"):
        radius = float(params.pop("radius", 1.0))
        vertices = int(params.pop("vertices", 4097))
        _reject_extra(name, params)
        if radius <= 0:
            raise InvalidInputError("radius must be positive")
        t_max = math.pi if name == "semicircle" else 0.5 * math.pi
        t = np.linspace(0.0, t_max, max(vertices, 3))
        pts = np.column_stack([radius * np.cos(t), radius * np.sin(t), np.zeros_like(t)])
        return PolylineCurve(pts)
    # helix: (R cos t, R sin t, pitch * t)
    radius = float(params.pop("radius", 1.0))
    pitch = float(params.pop("pitch", 0.25))
    t_max = float(params.pop("t_max", math.pi))
    vertices = int(params.pop("vertices", 4097))
    _reject_extra(name, params)
    if radius <= 0 or t_max <= 0:
        raise InvalidInputError("helix radius and t_max must be positive")
    t = np.linspace(0.0, t_max, max(vertices, 3))
    pts = np.column_stack([radius * np.cos(t), radius * np.sin(t), pitch * t])
    return PolylineCurve(pts)


def _reject_extra(name: str, params: dict) -> None:
    if params:
        raise InvalidInputError(f"unknown parameter(s) for {name!r}: {sorted(params)}")


def curve_from_spec(spec: dict) -> PolylineCurve:
    """Build a curve from a config object: a generator reference or a file."""
    if not isinstance(spec, dict):
        raise InvalidInputError("curve spec must be an object")
    if "generator" in spec:
        extra = set(spec) - {"generator", "params"}
        if extra:
            raise InvalidInputError(f"unknown curve spec field(s): {sorted(extra)}")
        params = spec.get("params", {})
        if not isinstance(params, dict):
            raise InvalidInputError("curve params must be an object")
        return generate_curve(spec["generator"], **params)
    if "file" in spec:
        extra = set(spec) - {"file"}
        if extra:
            raise InvalidInputError(f"unknown curve spec field(s): {sorted(extra)}")
        return load_curve_json(spec["file"])
    raise InvalidInputError("curve spec needs either 'generator' or 'file'")


def load_curve_json(path) -> PolylineCurve:
    """Load a curve from a JSON array of [x, y, z] vertex triples."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"curve file {path}: invalid JSON ({exc})") from exc
    if not isinstance(data, list):
        raise InvalidInputError(f"curve file {path}: expected a JSON array of vertices")
    return PolylineCurve(data)


# -- chord-arc constant ------------------------------------------------------------


def chord_arc_constant(curve: PolylineCurve, samples: int = 1024) -> float:
    """Estimate the chord-arc constant ``b = sup arc(M1, M2) / ||M1 M2||``.

    The supremum is taken over all pairs of a stratified arc-parameter set:
    the dyadic grid at level ``max(10, ceil(log2(samples - 1)))``, so every
    dyadic pair up to level 10 is always included and the estimate is
    monotone nondecreasing in ``samples``.

    Parameters
    ----------
    curve : PolylineCurve
    samples : int
        Requested sampling density along the arc (>= 2).

    Returns
    -------
    float
        Largest sampled arc/chord ratio, clamped below by 1.
    """
    if curve.total_len <= 0.0:
        raise InvalidInputError("degenerate curve: zero length")
    if samples < 2:
        raise InvalidInputError("samples must be >= 2")
    level = max(_MIN_SAMPLING_LEVEL, math.ceil(math.log2(max(samples - 1, 1))))
    if level > _MAX_SAMPLING_LEVEL:
        raise ResourceLimitError(
            f"chord-arc sampling level {level} exceeds cap {_MAX_SAMPLING_LEVEL}"
        )
    count = (1 << level) + 1
    s = curve.total_len * np.arange(count, dtype=np.float64) / float(1 << level)
    pts = curve.point_at(s)
    best = 1.0
    # Row-chunked pair sweep keeps memory flat for deep sampling levels.
    chunk = max(1, (1 << 22) // count)
    for lo in range(0, count, chunk):
        hi = min(lo + chunk, count)
        arc = np.abs(s[lo:hi, None] - s[None, :])
        chord = np.linalg.norm(pts[lo:hi, None, :] - pts[None, :, :], axis=-1)
        mask = arc > 0.0
        if np.any(chord[mask] == 0.0):
            raise InvalidInputError("curve has coincident points at distinct arc parameters")
        ratio = np.divide(arc, chord, out=np.zeros_like(arc), where=mask)
        best = max(best, float(ratio.max()))
    if not np.isfinite(best):
        raise InvalidInputError("chord-arc ratio is unbounded on the sample set")
    return best


# -- dyadic subdivisions ------------------------------------------------------------


def dyadic_points(curve: PolylineCurve, n: int) -> DyadicSubdivision:
    """Anchor points ``M_kn``, ``k = 0..2^n``, equally spaced in arc length."""
    if n < 0:
        raise InvalidInputError("dyadic level must be nonnegative")
    if n > MAX_DYADIC_LEVEL:
        raise ResourceLimitError(f"dyadic level {n} exceeds cap {MAX_DYADIC_LEVEL}")
    cached = curve._dyadic_cache.get(n)
    if cached is not None:
        return cached
    count = (1 << n) + 1
    # total * k / 2^n keeps nested levels bit-identical (power-of-two division).
    s = curve.total_len * np.arange(count, dtype=np.float64) / float(1 << n)
    sub = DyadicSubdivision(
        curve=curve,
        level=n,
        s=s,
        positions=curve.point_at(s),
        spacing=curve.total_len / float(1 << n),
    )
    curve._dyadic_cache[n] = sub
    return sub


def in_omega_star(curve: PolylineCurve, n: int, point) -> bool:
    """Whether ``point`` lies in the union of closed balls B(M_kn, 2*Lambda_n)."""
    return bool(in_omega_star_many(curve, n, np.asarray(point, dtype=np.float64)[None, :])[0])


def in_omega_star_many(curve: PolylineCurve, n: int, points: np.ndarray) -> np.ndarray:
    sub = dyadic_points(curve, n)
    dist, _ = sub.tree().query(points)
    return dist <= sub.ball_radius()


# -- nearest point projection --------------------------------------------------------

# Number of nearest vertices whose adjacent segments are tried before the
# exhaustive fallback kicks in.
_KNN = 8


def nearest_points(curve: PolylineCurve, points) -> tuple[np.ndarray, np.ndarray]:
    """Exact nearest-point projection for a batch of query points.

    Returns
    -------
    (s, dist) : pair of arrays
        Arc parameters of the closest curve points (ties resolved toward the
        smallest arc parameter) and the Euclidean distances.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[1] != 3:
        raise InvalidInputError("query points must be 3-vectors")
    n_seg = curve.segments.shape[0]
    k = min(_KNN, curve.vertices.shape[0])
    d_vert, idx = curve.vertex_tree().query(pts, k=k)
    if k == 1:
        d_vert = d_vert[:, None]
        idx = idx[:, None]
    # candidate segments: both segments adjacent to each of the k vertices
    cand = np.concatenate([idx - 1, idx], axis=1)
    np.clip(cand, 0, n_seg - 1, out=cand)
    s_best, d2_best = _project_candidates(curve, pts, cand)
    # certified exact unless an unseen segment could still beat the best:
    # any such segment has both endpoints farther than the k-th vertex.
    margin = float(curve.seg_lengths.max())
    uncertain = np.sqrt(d2_best) > d_vert[:, -1] - margin
    if curve.vertices.shape[0] <= _KNN:
        uncertain[:] = False
    if np.any(uncertain):
        rows = np.nonzero(uncertain)[0]
        all_seg = np.arange(n_seg)
        chunk = max(1, (1 << 22) // max(n_seg, 1))
        for lo in range(0, rows.size, chunk):
            sel = rows[lo : lo + chunk]
            cand_full = np.broadcast_to(all_seg, (sel.size, n_seg))
            s_f, d2_f = _project_candidates(curve, pts[sel], cand_full)
            s_best[sel] = s_f
            d2_best[sel] = d2_f
    return s_best, np.sqrt(d2_best)


def _project_candidates(curve, pts, cand):
    """Closed-form projection of each point onto its candidate segments."""
    base = curve.vertices[cand]                       # (N, C, 3)
    seg = curve.segments[cand]                        # (N, C, 3)
    diff = pts[:, None, :] - base
    t = np.einsum("ncd,ncd->nc", diff, seg) / curve._seg_len2[cand]
    np.clip(t, 0.0, 1.0, out=t)
    foot = base + t[..., None] * seg
    d2 = np.einsum("ncd,ncd->nc", pts[:, None, :] - foot, pts[:, None, :] - foot)
    s_cand = curve.cum_len[cand] + t * curve.seg_lengths[cand]
    d2_min = d2.min(axis=1)
    # tie-break toward the smallest arc parameter among exact minima
    tied = d2 == d2_min[:, None]
    s_masked = np.where(tied, s_cand, np.inf)
    return s_masked.min(axis=1), d2_min


def nearest_point(curve: PolylineCurve, point) -> tuple[CurvePoint, float]:
    """Nearest curve point to a single query position."""
    s, d = nearest_points(curve, np.asarray(point, dtype=np.float64)[None, :])
    return curve.point(float(s[0])), float(d[0])


def arc_between(curve: PolylineCurve, a, b) -> float:
    """Arc length between two curve points given as arc parameters or CurvePoints."""
    sa = a.s if isinstance(a, CurvePoint) else float(a)
    sb = b.s if isinstance(b, CurvePoint) else float(b)
    tol = 1e-9 * max(curve.total_len, 1.0)
    for s in (sa, sb):
        if s < -tol or s > curve.total_len + tol:
            raise InvalidInputError(f"arc parameter {s!r} outside [0, {curve.total_len}]")
    return abs(sb - sa)


class CurveProximity:
    """Conservative curve-distance queries from a dense arc sampling.

    ``distances`` returns the distance to the nearest sample point, which
    overestimates the true curve distance by at most ``slack()`` (half the
    arc spacing, since chords are no longer than arcs).  Orders of magnitude
    faster than the exact projection for large batches against polylines
    with many segments.
    """

    def __init__(self, curve: PolylineCurve, spacing: float):
        if not spacing > 0.0:
            raise InvalidInputError("sample spacing must be positive")
        n = int(math.ceil(curve.total_len / spacing)) + 1
        arcs = np.linspace(0.0, curve.total_len, max(n, 2))
        self.spacing = float(arcs[1] - arcs[0])
        self._arcs = arcs
        self._tree = cKDTree(curve.point_at(arcs))

    def slack(self) -> float:
        """Worst-case overestimate of the reported distances."""
        return 0.5 * self.spacing

    def distances(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        d, _ = self._tree.query(pts, k=1)
        return np.asarray(d, dtype=np.float64)

    def nearest(self, points) -> tuple[np.ndarray, np.ndarray]:
        """(arc params of nearest samples, distances to them)."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        d, idx = self._tree.query(pts, k=1)
        return self._arcs[idx], np.asarray(d, dtype=np.float64)
