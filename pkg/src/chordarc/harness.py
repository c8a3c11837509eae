"""Direct and inverse approximation experiments, rate fits, and the embedding check.

The direct run builds, level by level, the smoothed volume extension of the
boundary data and its harmonic approximant, then measures the windowed
residual and half-ball gradient bounds on the curve together with the raw
L^p error and its decay rate in the ball radius.  The inverse run takes the
resulting approximant family and certifies membership of the data in the
Holder-in-L^p class: an adversarial far-point selection, a line-integral
bound along chords, and the seminorm table over dyadic radii.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ChordArcError, InconsistencyError, InvalidInputError
from .extension import build_extension, fit_smoothness_constants, tube_partition
from .functions import (
    MIN_GRID_NODES,
    ConstantsLedger,
    CurveFunction,
    HolderParams,
    _ball_sample_arcs,
    delta_star_grid,
    lp_seminorm,
    max_delta_grid,
    regularity_constant,
    uniform_holder_constant,
)
from .geometry import PolylineCurve, chord_arc_constant
from .potential import (
    Approximant,
    assemble,
    c11_search,
    corrector_coefficients,
    evaluate,
    evaluate_gradient,
    grad_star_many,
    mean_value_deviation,
    zero_approximant,
)

__all__ = [
    "DirectLevel",
    "DirectRunResult",
    "InverseRadius",
    "InverseRunResult",
    "RateFit",
    "build_approximant",
    "embedding_check",
    "fit_rate",
    "run_direct",
    "run_inverse",
    "trace_residual",
]

# number of arc samples of the approximant trace; the potential is smooth at
# the tube scale, so the lifted linear interpolant resolves it fully
TRACE_NODES = 4097

# midpoint nodes for curve integrals of cheap integrands
INTEGRAL_NODES = 4096

# midpoint nodes for gradient-based integrands (one batched pass per level)
GRADIENT_NODES = 257

_GAUSS_X, _GAUSS_W = np.polynomial.legendre.leggauss(16)


@dataclass(frozen=True)
class RateFit:
    """Least-squares power law fitted in log-log coordinates."""

    slope: float
    intercept: float
    residual: float
    levels: tuple[int, ...]


@dataclass(frozen=True)
class DirectLevel:
    """Measured quantities of one approximant level.

    ``residual_bound`` is the L^p norm over the curve of the windowed
    residual sup divided by delta^alpha; ``gradient_bound`` is delta^(1-alpha)
    times the L^p norm of the half-ball gradient max; ``raw_error`` is the
    unscaled windowed-residual norm.
    """

    level: int
    delta: float
    residual_bound: float
    gradient_bound: float
    raw_error: float
    wall_time: float


@dataclass
class DirectRunResult:
    """Per-level measurements, decay-rate fit, and the approximant family."""

    params: HolderParams
    levels: list[DirectLevel]
    failures: dict[int, str]
    warnings: list[str]
    rate: RateFit | None
    ledger: ConstantsLedger
    family: dict[int, Approximant]


@dataclass(frozen=True)
class InverseRadius:
    """Membership measurements at one ball radius.

    ``modulus_norm`` is the L^p norm of the local modulus over the curve
    divided by r^alpha; ``approx_term`` and ``gradient_term`` decompose its
    pathwise bound through the approximant at delta = c1 * r.
    """

    k: int
    r: float
    delta: float
    level: int
    modulus_norm: float
    approx_term: float
    gradient_term: float
    ratio: float
    chain_violations: int
    line_residual: float
    adversarial_gap: float


@dataclass
class InverseRunResult:
    """Seminorm table over dyadic radii and the pathwise bound decomposition."""

    params: HolderParams
    radii: list[InverseRadius]
    seminorm: float
    bound_constant: float
    c1: float
    mean_value_max: float
    log: list[str] = field(default_factory=list)


def fit_rate(pairs, levels=None) -> RateFit:
    """Log-log least-squares line through (delta, error) pairs."""
    arr = np.asarray([(float(d), float(e)) for d, e in pairs], dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 3:
        raise InvalidInputError("rate fit needs at least 3 (delta, error) pairs")
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
        raise InvalidInputError("rate fit needs positive finite pairs")
    x = np.log(arr[:, 0])
    y = np.log(arr[:, 1])
    slope, intercept = np.polyfit(x, y, 1)
    resid = float(np.sqrt(np.mean((y - slope * x - intercept) ** 2)))
    if levels is None:
        levels = range(arr.shape[0])
    return RateFit(float(slope), float(intercept), resid, tuple(int(n) for n in levels))


def trace_residual(f: CurveFunction, approx: Approximant, trace_nodes: int = TRACE_NODES) -> CurveFunction:
    """Boundary data minus the approximant trace, as a curve function."""
    curve = f.curve
    s_tr = np.linspace(0.0, curve.total_len, trace_nodes)
    v_tr = evaluate(approx, curve.point_at(s_tr))
    s = np.linspace(0.0, curve.total_len, MIN_GRID_NODES)
    return CurveFunction(curve, f(s) - np.interp(s, s_tr, v_tr), s)


def _lp_norm(values: np.ndarray, ds: float, p: float) -> float:
    return float((np.sum(np.abs(values) ** p) * ds) ** (1.0 / p))


def _midpoints(total: float, nodes: int) -> tuple[np.ndarray, float]:
    ds = total / nodes
    return (np.arange(nodes, dtype=np.float64) + 0.5) * ds, ds


def build_approximant(f: CurveFunction, curve: PolylineCurve, n: int, c5: float,
                      ledger: ConstantsLedger | None = None) -> Approximant:
    """One level of the extension-to-potential pipeline."""
    ext = build_extension(f, curve, n)
    part = tube_partition(curve, ext.grid, n, ext.assignments)
    c11 = c11_search(curve, n)
    if ledger is not None:
        ledger.record(f"c11_level{n}", float(c11), "shell radius factor")
    coeff = corrector_coefficients(ext.lap, part, f, c11, c5)
    return assemble(n, ext.lap, coeff, part)


def run_direct(
    curve: PolylineCurve,
    f: CurveFunction,
    params: HolderParams,
    levels=(2, 3, 4, 5),
    theta: float = 0.25,
    h_max: float | None = None,
    excl_level: int | None = None,
    max_cells: int = 5_000_000,
) -> DirectRunResult:
    """Build the approximant family and measure its per-level bounds."""
    levels = sorted({int(n) for n in levels})
    if not levels or levels[0] < 2:
        raise InvalidInputError("direct run needs levels >= 2")
    if not params.p * params.alpha > 1.0:
        raise InvalidInputError("direct run needs p > 1/alpha strictly")
    if f.curve is not curve:
        raise InvalidInputError("boundary data lives on a different curve")

    warnings: list[str] = []
    ledger = ConstantsLedger()
    b = chord_arc_constant(curve)
    ledger.record("b", b, "chord-arc constant")
    reg = regularity_constant(f, params.eps)
    if reg.violations:
        warnings.append(
            f"pointwise-regularity probe failed at {reg.violations} probes; "
            "results are exploratory"
        )
    if reg.constant > 0.0:
        ledger.record("c_regularity", reg.constant, "pointwise regularity probe")

    total = curve.total_len
    mids_i, ds_i = _midpoints(total, INTEGRAL_NODES)
    mids_g, ds_g = _midpoints(total, GRADIENT_NODES)
    pts_g = curve.point_at(mids_g)

    out: list[DirectLevel] = []
    failures: dict[int, str] = {}
    family: dict[int, Approximant] = {}
    c5 = None
    # deepest level first: its extension carries every annulus the
    # smoothness fit wants, and the fitted c5 then serves all levels
    for n in sorted(levels, reverse=True):
        t0 = time.perf_counter()
        try:
            ext = build_extension(
                f, curve, n, theta=theta, h_max=h_max,
                excl_level=excl_level, max_cells=max_cells,
            )
            if c5 is None:
                try:
                    fit = fit_smoothness_constants(ext, levels=tuple(range(2, n + 1)))
                    c5 = fit["c5"]
                    ledger.record("c5", c5, "modulus dilation of the smoothness fit")
                    ledger.record("C_smoothness", fit["C"], "second-difference bound")
                except InconsistencyError:
                    c5 = 1.0
                    warnings.append("smoothness fit uninformative; c5 defaulted to 1")
            part = tube_partition(curve, ext.grid, n, ext.assignments)
            c11 = c11_search(curve, n)
            ledger.record(f"c11_level{n}", float(c11), "shell radius factor")
            coeff = corrector_coefficients(ext.lap, part, f, c11, c5)
            approx = assemble(n, ext.lap, coeff, part)
            del ext, part, coeff

            delta = total * 2.0**-n
            res = trace_residual(f, approx)
            md = max_delta_grid(res, mids_i, delta)
            raw = _lp_norm(md, ds_i, params.p)
            q3 = raw / delta**params.alpha
            gs = grad_star_many(approx, pts_g, delta)
            q4 = delta ** (1.0 - params.alpha) * _lp_norm(gs, ds_g, params.p)
            family[n] = approx
            out.append(DirectLevel(n, delta, q3, q4, raw, time.perf_counter() - t0))
        except ChordArcError as exc:
            failures[n] = f"{type(exc).__name__}: {exc}"
    out.sort(key=lambda lvl: lvl.level)

    rate = None
    good = [(lvl.delta, lvl.raw_error) for lvl in out if lvl.raw_error > 0.0]
    if len(good) >= 3:
        rate = fit_rate(good, levels=[lvl.level for lvl in out if lvl.raw_error > 0.0])
    return DirectRunResult(params, out, failures, warnings, rate, ledger, family)


def _select_level(family: dict[int, Approximant], delta: float, total: float) -> tuple[int, Approximant]:
    """Family member for radius delta: v_delta = v at the enclosing dyadic level."""
    n = math.floor(-math.log2(delta / total) + 1e-12)
    lo = min(family)
    hi = max(family)
    if n > hi:
        raise InvalidInputError(
            f"family lacks level {n} needed for delta = {delta:.6g}"
        )
    if n < lo:
        # coarse completion: the zero potential is harmonic everywhere and
        # its residual bound is absorbed by the modulus at radii near |L|
        return n, zero_approximant(n)
    if n not in family:
        raise InvalidInputError(f"family has a gap at level {n}")
    return n, family[n]


def _adversarial_selection(
    f: CurveFunction, s_nodes: np.ndarray, r: float
) -> tuple[np.ndarray, np.ndarray, float]:
    """Worst far point per node: argmax of |f(N) - f(M)| over the r-ball.

    Returns the selected arc parameters, the realized gaps, and the largest
    difference against the windowed-modulus route computed from the same
    samples (an internal consistency measure, expected at roundoff).
    """
    curve = f.curve
    s, inside, rows, cross_s = _ball_sample_arcs(curve, s_nodes, r, None)
    f_center = f(s_nodes)
    gap = np.abs(f(s) - f_center[:, None])
    gap[~inside] = 0.0
    best_col = np.argmax(gap, axis=1)
    idx = np.arange(s_nodes.size)
    best_gap = gap[idx, best_col]
    best_s = s[idx, best_col]
    if rows.size:
        cross_gap = np.abs(f(cross_s) - f_center[rows])
        for i, row in enumerate(rows):
            if cross_gap[i] > best_gap[row]:
                best_gap[row] = cross_gap[i]
                best_s[row] = cross_s[i]
    reference = delta_star_grid(f, s_nodes, r)
    scale = max(float(np.max(np.abs(f.values))), 1.0)
    gap_vs_ref = float(np.max(np.abs(best_gap - reference)))
    if gap_vs_ref > 1e-6 * scale:
        raise InconsistencyError(
            "adversarial selection disagrees with the windowed modulus"
        )
    return best_s, best_gap, gap_vs_ref


def run_inverse(
    curve: PolylineCurve,
    f: CurveFunction,
    family: dict[int, Approximant],
    params: HolderParams,
    k_range=(2, 3, 4, 5, 6),
    c1: float = 4.0,
) -> InverseRunResult:
    """Certify class membership of the data through the approximant family."""
    ks = sorted({int(k) for k in k_range})
    if not ks or ks[0] < 1:
        raise InvalidInputError("inverse run needs radius levels k >= 1")
    if not family:
        raise InvalidInputError("approximant family is empty")
    if f.curve is not curve:
        raise InvalidInputError("boundary data lives on a different curve")
    if not c1 > 2.0:
        raise InvalidInputError("chord safety factor c1 must exceed 2")

    total = curve.total_len
    log: list[str] = []

    # each member must behave harmonically in its tube before it can
    # witness membership; spot-check the sphere mean value on curve points
    mv_pts = curve.point_at(np.linspace(0.1, 0.9, 8) * total)
    mv_max = 0.0
    for n in sorted(family):
        if family[n].sources.n_sources == 0:
            continue
        dev = float(mean_value_deviation(family[n], mv_pts).max())
        mv_max = max(mv_max, dev)
        if dev > 1e-3:
            raise InconsistencyError(
                f"family member at level {n} fails the mean-value test ({dev:.2e})"
            )

    mids_i, ds_i = _midpoints(total, INTEGRAL_NODES)
    mids_c, ds_c = _midpoints(total, GRADIENT_NODES)
    pts_c = curve.point_at(mids_c)
    residual_cache: dict[int, CurveFunction] = {}

    radii = None
    for _ in range(6):
        try:
            radii = [
                _inverse_radius(
                    curve, f, family, params, k, c1,
                    mids_i, ds_i, mids_c, ds_c, pts_c, residual_cache,
                )
                for k in ks
            ]
            break
        except _GeometryRetry as retry:
            c1 *= 2.0
            log.append(f"{retry}; c1 increased to {c1:g}")
    if radii is None:
        raise InconsistencyError(
            "no chord safety factor kept probe balls inside the harmonicity "
            "domain: " + "; ".join(log)
        )

    seminorm = max(rr.modulus_norm for rr in radii)
    bound_constant = max(rr.ratio for rr in radii)
    return InverseRunResult(params, radii, seminorm, bound_constant, c1, mv_max, log)


class _GeometryRetry(Exception):
    """Internal: the probe ball of some chain node reached the source region."""


def _inverse_radius(
    curve, f, family, params, k, c1,
    mids_i, ds_i, mids_c, ds_c, pts_c, residual_cache,
) -> InverseRadius:
    total = curve.total_len
    r = total * 2.0**-k
    delta = c1 * r
    n, approx = _select_level(family, delta, total)
    if n not in residual_cache:
        residual_cache[n] = trace_residual(f, approx)
    res = residual_cache[n]

    # seminorm entry at this radius (dense midpoint rule)
    modulus_norm = _lp_norm(delta_star_grid(f, mids_i, r), ds_i, params.p) / r**params.alpha

    # adversarial far points and the pathwise chain on the coarser node set
    sel_s, sel_gap, adv_gap = _adversarial_selection(f, mids_c, r)
    pts_n = curve.point_at(sel_s)

    md = max_delta_grid(res, mids_c, delta)

    try:
        gs = grad_star_many(approx, pts_c, delta)
    except InvalidInputError as exc:
        raise _GeometryRetry(f"radius k={k}: {exc}") from exc

    # 16-point Gauss line integral of the directional derivative along each
    # chord, against the direct difference of potentials
    chord = pts_n - pts_c
    line_residual = 0.0
    if approx.sources.n_sources > 0:
        tgrid = 0.5 * (_GAUSS_X + 1.0)
        nodes = pts_c[:, None, :] + tgrid[None, :, None] * chord[:, None, :]
        g = evaluate_gradient(approx, nodes.reshape(-1, 3)).reshape(len(mids_c), 16, 3)
        deriv = np.einsum("nks,ns->nk", g, chord)
        line = 0.5 * deriv @ _GAUSS_W
        v_ends = evaluate(approx, np.concatenate([pts_n, pts_c]))
        v_n = v_ends[: len(mids_c)]
        v_m = v_ends[len(mids_c):]
        line_residual = float(np.max(np.abs(line - (v_n - v_m))))
        # the Gauss nodes sit inside the half-ball; fold their gradient
        # norms into the sampled sup so the bound dominates the integral
        gs = np.maximum(gs, np.linalg.norm(g, axis=2).max(axis=1))
    else:
        v_n = np.zeros(len(mids_c))
        v_m = np.zeros(len(mids_c))
    # fold the exact chain endpoints into the sampled residual sup; the
    # interpolated trace alone could undershoot them by its lift error
    md = np.maximum(md, np.abs(f(mids_c) - v_m))
    md = np.maximum(md, np.abs(f(sel_s) - v_n))

    rhs = 2.0 * md + delta * gs
    scale = max(float(np.max(np.abs(f.values))), 1.0)
    violations = int(np.count_nonzero(sel_gap > rhs + 1e-9 * scale))

    approx_term = _lp_norm(2.0 * md, ds_c, params.p) / r**params.alpha
    gradient_term = _lp_norm(delta * gs, ds_c, params.p) / r**params.alpha
    lhs_c = _lp_norm(sel_gap, ds_c, params.p) / r**params.alpha
    denom = approx_term + gradient_term
    ratio = lhs_c / denom if denom > 0.0 else 0.0
    return InverseRadius(
        k, r, delta, n, modulus_norm, approx_term, gradient_term, ratio,
        violations, line_residual, adv_gap,
    )


def embedding_check(
    f: CurveFunction,
    params: HolderParams,
    r_levels: int = 10,
    anchor_level: int = 10,
) -> float:
    """Uniform Holder constant of the data at the embedded exponent alpha - 1/p."""
    if not params.p * params.alpha > 1.0:
        raise InvalidInputError("embedding needs p > 1/alpha strictly")
    sem = lp_seminorm(f, params)
    if not math.isfinite(sem.value):
        raise InconsistencyError("class seminorm is not finite")
    return uniform_holder_constant(
        f, params.alpha - 1.0 / params.p, r_levels=r_levels, anchor_level=anchor_level
    )
