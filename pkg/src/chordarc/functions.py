"""Hölder-in-L^p machinery for functions living on a chord-arc curve.

The central object is the local modulus

    delta_star(f, M, r) = sup { |f(N) - f(M)| : N in closed_ball(M, r) /\\ L },

taken over the *Euclidean* ball intersected with the curve.  Because the
curve is chord-arc with constant ``b``, that intersection is contained in
the arc window of half-width ``b * r`` around ``M``, which makes dense arc
sampling of the supremum cheap and reliable.  On top of the modulus sit the
L^p seminorm sup_r ( integral_L (delta_star/r^alpha)^p dm )^(1/p), the
pointwise-regularity probe test, and the uniform Hölder constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InvalidInputError
from .geometry import CurvePoint, PolylineCurve, dyadic_points

__all__ = [
    "CurveFunction",
    "HolderParams",
    "ConstantsLedger",
    "LpSeminormResult",
    "RegularityReport",
    "make_curve_function",
    "delta_star",
    "delta_star_grid",
    "max_delta",
    "max_delta_grid",
    "lp_seminorm",
    "regularity_constant",
    "uniform_holder_constant",
    "standard_probes",
]

# Minimum number of arc nodes for a CurveFunction sample grid.
MIN_GRID_NODES = (1 << 14) + 1

# Minimum number of midpoint nodes for curve integrals.
MIN_INTEGRAL_NODES = 1 << 12

# Safety factor on the chord-arc window half-width b * r; covers the gap
# between the sampled chord-arc constant and the true supremum.
_WINDOW_MARGIN = 1.1


class CurveFunction:
    """Function on a curve, stored as dense arc samples with linear interpolation."""

    def __init__(self, curve: PolylineCurve, values, s_grid=None):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1:
            raise InvalidInputError("curve function values must be a 1-d array")
        if s_grid is None:
            s_grid = np.linspace(0.0, curve.total_len, values.shape[0])
        else:
            s_grid = np.asarray(s_grid, dtype=np.float64)
        if s_grid.shape != values.shape:
            raise InvalidInputError("sample grid and values must have equal length")
        if values.shape[0] < MIN_GRID_NODES:
            raise InvalidInputError(
                f"curve function needs >= {MIN_GRID_NODES} arc samples, got {values.shape[0]}"
            )
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("curve function values must be finite")
        if s_grid[0] != 0.0 or abs(s_grid[-1] - curve.total_len) > 1e-9 * curve.total_len:
            raise InvalidInputError("sample grid must span [0, |L|]")
        if np.any(np.diff(s_grid) <= 0.0):
            raise InvalidInputError("sample grid must be strictly increasing")
        self.curve = curve
        self.s_grid = s_grid
        self.values = values

    def __call__(self, s):
        return np.interp(np.clip(s, 0.0, self.curve.total_len), self.s_grid, self.values)

    @classmethod
    def from_callable(
        cls,
        curve: PolylineCurve,
        fn: Callable[[np.ndarray], np.ndarray],
        nodes: int = MIN_GRID_NODES,
    ) -> "CurveFunction":
        s = np.linspace(0.0, curve.total_len, max(nodes, MIN_GRID_NODES))
        return cls(curve, np.asarray(fn(s), dtype=np.float64), s)


def make_curve_function(curve: PolylineCurve, spec: dict) -> CurveFunction:
    """Build a CurveFunction from a JSON function spec.

    Supported kinds: ``arc-power`` (s^alpha in arc length), ``dist-power``
    (Euclidean distance to a fixed point, raised to a power), ``samples``
    (explicit values, linearly resampled), ``constant``.
    """
    if not isinstance(spec, dict) or "kind" not in spec:
        raise InvalidInputError("function spec must be an object with a 'kind' field")
    kind = spec["kind"]
    if kind == "arc-power":
        _check_fields(spec, {"kind", "alpha"})
        a = float(spec["alpha"])
        if not 0.0 < a <= 1.0:
            raise InvalidInputError("arc-power exponent must lie in (0, 1]")
        return CurveFunction.from_callable(curve, lambda s: s**a)
    if kind == "dist-power":
        _check_fields(spec, {"kind", "point", "alpha"})
        point = np.asarray(spec["point"], dtype=np.float64)
        if point.shape != (3,) or not np.all(np.isfinite(point)):
            raise InvalidInputError("dist-power point must be a finite 3-vector")
        a = float(spec["alpha"])
        if not 0.0 < a <= 1.0:
            raise InvalidInputError("dist-power exponent must lie in (0, 1]")
        return CurveFunction.from_callable(
            curve, lambda s: np.linalg.norm(curve.point_at(s) - point, axis=-1) ** a
        )
    if kind == "samples":
        _check_fields(spec, {"kind", "values"})
        vals = np.asarray(spec["values"], dtype=np.float64)
        if vals.ndim != 1 or vals.shape[0] < 2 or not np.all(np.isfinite(vals)):
            raise InvalidInputError("samples kind needs >= 2 finite values")
        coarse = np.linspace(0.0, curve.total_len, vals.shape[0])
        return CurveFunction.from_callable(curve, lambda s: np.interp(s, coarse, vals))
    if kind == "constant":
        _check_fields(spec, {"kind", "value"})
        c = float(spec["value"])
        if not math.isfinite(c):
            raise InvalidInputError("constant value must be finite")
        return CurveFunction.from_callable(curve, lambda s: np.full_like(s, c))
    raise InvalidInputError(f"unknown function kind {kind!r}")


def _check_fields(spec: dict, allowed: set) -> None:
    extra = set(spec) - allowed
    if extra:
        raise InvalidInputError(f"unknown function spec field(s): {sorted(extra)}")
    missing = allowed - set(spec)
    if missing:
        raise InvalidInputError(f"function spec missing field(s): {sorted(missing)}")


@dataclass(frozen=True)
class HolderParams:
    """Class parameters: exponent ``alpha``, integrability ``p``, regularity ``eps``."""

    alpha: float
    p: float
    eps: float
    creg: float | None = None

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise InvalidInputError("alpha must lie in (0, 1)")
        # equality admitted: the seminorm itself is well defined at p = 1/alpha,
        # only the embedding into a uniform class needs the strict inequality
        if not self.p * self.alpha >= 1.0:
            raise InvalidInputError("p must be at least 1/alpha")
        if not self.eps > 0.0:
            raise InvalidInputError("eps must be positive")
        if self.creg is not None and not self.creg > 0.0:
            raise InvalidInputError("creg must be positive when given")


class ConstantsLedger:
    """Named record of every measured constant of a run."""

    def __init__(self):
        self._entries: dict[str, tuple[float, str]] = {}

    def record(self, name: str, value: float, note: str = "") -> None:
        value = float(value)
        if not math.isfinite(value) or value <= 0.0:
            raise InvalidInputError(f"ledger entry {name!r} must be finite and positive")
        self._entries[name] = (value, note)

    def get(self, name: str) -> float:
        if name not in self._entries:
            raise InvalidInputError(f"ledger has no entry {name!r}")
        return self._entries[name][0]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def as_dict(self) -> dict[str, dict]:
        return {k: {"value": v, "note": n} for k, (v, n) in sorted(self._entries.items())}

    def merge(self, other: "ConstantsLedger") -> None:
        self._entries.update(other._entries)


# -- local modulus ----------------------------------------------------------------------


def _arc_param(curve: PolylineCurve, M) -> float:
    if isinstance(M, CurvePoint):
        return float(M.s)
    return float(M)


def _window(curve: PolylineCurve, r: float) -> float:
    return _WINDOW_MARGIN * curve.chord_arc() * r


def _ball_offsets(curve: PolylineCurve, r: float, max_step: float | None) -> np.ndarray:
    """Arc offsets covering the window that contains closed_ball(., r) /\\ L.

    Uniform with step <= r/16 (or ``max_step``), with the window ends, the
    center, and the exact arc offsets +-r all included, so the sup is exact
    on flat stretches where the ball boundary sits at arc distance r.
    """
    step = r / 16.0 if max_step is None else min(max_step, r / 16.0)
    half = _window(curve, r)
    m = int(math.ceil(half / step))
    base = np.linspace(-half, half, 2 * m + 1)  # odd count: 0 included exactly
    return np.unique(np.concatenate([base, (-r, 0.0, r)]))


def _ball_sample_arcs(
    curve: PolylineCurve, s_nodes: np.ndarray, r: float, max_step: float | None
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Arc samples of closed_ball(M, r) /\\ L for each node M.

    Returns ``(s, inside, cross_rows, cross_s)``: the window sample arcs
    ``s`` (nodes x offsets) with the Euclidean mask ``inside``, plus the arc
    parameters of the ball-boundary crossings (bisected to machine precision)
    so the sup over the closed ball sees its exact endpoints.
    """
    offsets = _ball_offsets(curve, r, max_step)
    s = np.clip(s_nodes[:, None] + offsets[None, :], 0.0, curve.total_len)
    center = curve.point_at(s_nodes)
    dist = np.linalg.norm(curve.point_at(s) - center[:, None, :], axis=-1)
    inside = dist <= r
    rows, cols = np.nonzero(inside[:, :-1] != inside[:, 1:])
    if rows.size == 0:
        return s, inside, rows, np.empty(0)
    lo = s[rows, cols]
    hi = s[rows, cols + 1]
    # orient brackets so g = dist - r changes sign from lo (inside) to hi
    swap = ~inside[rows, cols]
    lo[swap], hi[swap] = hi[swap], lo[swap].copy()
    c_rows = center[rows]
    for _ in range(52):
        mid = 0.5 * (lo + hi)
        g_in = np.linalg.norm(curve.point_at(mid) - c_rows, axis=-1) <= r
        lo = np.where(g_in, mid, lo)
        hi = np.where(g_in, hi, mid)
    return s, inside, rows, lo


def delta_star_grid(
    f: CurveFunction, s_nodes: np.ndarray, r: float, max_step: float | None = None
) -> np.ndarray:
    """Local modulus delta_star(f, ., r) at many arc parameters at once.

    The supremum over closed_ball(M, r) /\\ L is sampled on the arc window
    [s - b*r, s + b*r] with step <= r/16 (or ``max_step``), window endpoints
    included exactly, then restricted to the Euclidean ball of radius r.
    """
    curve = f.curve
    if not r > 0.0:
        raise InvalidInputError("modulus radius r must be positive")
    s_nodes = np.asarray(s_nodes, dtype=np.float64)
    s, inside, rows, cross_s = _ball_sample_arcs(curve, s_nodes, r, max_step)
    f_center = f(s_nodes)
    gap = np.abs(f(s) - f_center[:, None])
    gap[~inside] = 0.0
    out = gap.max(axis=1)
    if rows.size:
        cross_gap = np.abs(f(cross_s) - f_center[rows])
        np.maximum.at(out, rows, cross_gap)
    return out


def delta_star(f: CurveFunction, M, r: float, max_step: float | None = None) -> float:
    """Local modulus of ``f`` at curve point ``M`` and radius ``r``."""
    s0 = _arc_param(f.curve, M)
    return float(delta_star_grid(f, np.array([s0]), r, max_step)[0])


def max_delta_grid(
    F: CurveFunction, s_nodes: np.ndarray, delta: float, max_step: float | None = None
) -> np.ndarray:
    """Sampled sup of |F| over closed_ball(M, delta) /\\ L at many M."""
    curve = F.curve
    if not delta > 0.0:
        raise InvalidInputError("ball radius delta must be positive")
    s_nodes = np.asarray(s_nodes, dtype=np.float64)
    s, inside, rows, cross_s = _ball_sample_arcs(curve, s_nodes, delta, max_step)
    mag = np.abs(F(s))
    mag[~inside] = 0.0
    out = mag.max(axis=1)
    if rows.size:
        np.maximum.at(out, rows, np.abs(F(cross_s)))
    return out


def max_delta(F: CurveFunction, M, delta: float, max_step: float | None = None) -> float:
    s0 = _arc_param(F.curve, M)
    return float(max_delta_grid(F, np.array([s0]), delta, max_step)[0])


# -- L^p seminorm -----------------------------------------------------------------------


@dataclass(frozen=True)
class LpSeminormResult:
    value: float
    r_values: np.ndarray
    per_r: np.ndarray

    def table(self) -> dict[float, float]:
        return {float(r): float(v) for r, v in zip(self.r_values, self.per_r)}


def default_r_grid(curve: PolylineCurve, levels: int = 10) -> np.ndarray:
    """Dyadic radii |L| * 2^-k, k = 0..levels (r < |L| except the first probe)."""
    return curve.total_len * 0.5 ** np.arange(0, levels + 1, dtype=np.float64)


def lp_seminorm(
    f: CurveFunction,
    params: HolderParams,
    r_grid: Iterable[float] | None = None,
    nodes: int = MIN_INTEGRAL_NODES,
) -> LpSeminormResult:
    """Sup over the r-grid of ( integral_L (delta_star/r^alpha)^p dm_1 )^(1/p).

    The curve integral uses the composite midpoint rule on ``nodes`` equal
    arcs (>= 2^12).  Returns the sup together with the per-r table.
    """
    curve = f.curve
    if nodes < MIN_INTEGRAL_NODES:
        raise InvalidInputError(f"curve integrals need >= {MIN_INTEGRAL_NODES} arc nodes")
    rs = default_r_grid(curve) if r_grid is None else np.asarray(list(r_grid), dtype=np.float64)
    if rs.size == 0 or np.any(rs <= 0.0):
        raise InvalidInputError("r grid must contain positive radii")
    ds = curve.total_len / nodes
    mids = (np.arange(nodes, dtype=np.float64) + 0.5) * ds
    per_r = np.empty(rs.size)
    for i, r in enumerate(rs):
        mod = delta_star_grid(f, mids, float(r))
        per_r[i] = (np.sum(mod**params.p) * ds) ** (1.0 / params.p) / r**params.alpha
    return LpSeminormResult(float(per_r.max()), rs, per_r)


# -- pointwise regularity ------------------------------------------------------------------


@dataclass(frozen=True)
class RegularityReport:
    constant: float
    informative: int
    violations: int
    note: str = ""


def standard_probes(
    curve: PolylineCurve, anchor_level: int = 6, max_radius_level: int = 8
) -> list[tuple[float, float, float, float]]:
    """Deterministic probe set (s_M, s_N, r, R) for the regularity test.

    Radii run over dyadic pairs r = |L| 2^-j <= R = |L| 2^-i, i <= j <=
    ``max_radius_level``; anchors M live on the level-``anchor_level`` dyadic
    grid and N is the nearest dyadic neighbour within Euclidean distance R
    (M itself when no neighbour qualifies).
    """
    sub = dyadic_points(curve, anchor_level)
    total = curve.total_len
    probes = []
    for i in range(0, max_radius_level + 1):
        R = total * 0.5**i
        for j in range(i, max_radius_level + 1):
            r = total * 0.5**j
            for k in range(len(sub)):
                s_m = float(sub.s[k])
                s_n = s_m
                nb = k + 1 if k + 1 < len(sub) else k - 1
                if np.linalg.norm(sub.positions[nb] - sub.positions[k]) <= R:
                    s_n = float(sub.s[nb])
                probes.append((s_m, s_n, r, R))
    return probes


def regularity_constant(
    f: CurveFunction,
    eps: float,
    probes: Sequence[tuple[float, float, float, float]] | None = None,
) -> RegularityReport:
    """Smallest sampled constant c with delta*(M, r) <= c (r/R)^eps delta*(N, R).

    A probe with delta*(N, R) = 0 but delta*(M, r) > 0 counts as a violation
    of the pointwise-regularity hypothesis.  With no informative probe the
    report carries the note ``"no informative probes"``.
    """
    if not eps > 0.0:
        raise InvalidInputError("eps must be positive")
    if probes is None:
        probes = standard_probes(f.curve)
    if not probes:
        raise InvalidInputError("probe list is empty")
    arr = np.asarray(probes, dtype=np.float64)
    s_m, s_n, r_all, R_all = arr.T
    if np.any(r_all <= 0.0) or np.any(R_all <= 0.0) or np.any(r_all > R_all * (1 + 1e-12)):
        raise InvalidInputError("probes need 0 < r <= R")
    # group by radius so each distinct (r) and (R) modulus batch is vectorised
    num = np.empty(arr.shape[0])
    den = np.empty(arr.shape[0])
    for r in np.unique(r_all):
        sel = r_all == r
        num[sel] = delta_star_grid(f, s_m[sel], float(r))
    for R in np.unique(R_all):
        sel = R_all == R
        den[sel] = delta_star_grid(f, s_n[sel], float(R))
    scale = np.max(np.abs(f.values)) - np.min(f.values)
    zero_tol = 1e-13 * max(scale, 1.0)
    informative = den > zero_tol
    violated = (~informative) & (num > zero_tol)
    if not np.any(informative):
        return RegularityReport(0.0, 0, int(violated.sum()), "no informative probes")
    ratio = num[informative] / ((r_all[informative] / R_all[informative]) ** eps * den[informative])
    return RegularityReport(float(ratio.max()), int(informative.sum()), int(violated.sum()))


def uniform_holder_constant(
    f: CurveFunction,
    alpha: float,
    r_levels: int = 10,
    anchor_level: int = 10,
) -> float:
    """Sampled sup over (M, r) of delta_star(f, M, r) / r^alpha.

    Radii run over the dyadic ladder |L| 2^-k, k = 0..r_levels; anchors over
    the level-``anchor_level`` dyadic grid (endpoints included).
    """
    if not 0.0 < alpha < 1.0:
        raise InvalidInputError("alpha must lie in (0, 1)")
    curve = f.curve
    anchors = dyadic_points(curve, anchor_level).s
    best = 0.0
    for k in range(0, r_levels + 1):
        r = curve.total_len * 0.5**k
        mod = delta_star_grid(f, anchors, r)
        best = max(best, float((mod / r**alpha).max()))
    return best
