"""Local modulus, L^p seminorm, regularity probe, and uniform-class tests.

Derived expectations are checked against independent oracles built here
from closed forms: on a straight segment the Euclidean ball equals the arc
window, and for arc-monotone functions the modulus sup sits at a window
end, so a dense 10x-resolution quadrature of those endpoint values is an
implementation-free reference for the seminorm.
"""

import numpy as np
import pytest

from chordarc.errors import InvalidInputError
from chordarc.functions import (
    ConstantsLedger,
    CurveFunction,
    HolderParams,
    delta_star,
    delta_star_grid,
    lp_seminorm,
    make_curve_function,
    max_delta,
    regularity_constant,
    standard_probes,
    uniform_holder_constant,
)
from chordarc.geometry import generate_curve


def segment_modulus(fn, m, r):
    """Oracle modulus on the unit segment for arc-monotone fn: sup at window ends."""
    lo = np.maximum(m - r, 0.0)
    hi = np.minimum(m + r, 1.0)
    return np.maximum(np.abs(fn(hi) - fn(m)), np.abs(fn(lo) - fn(m)))


def oracle_lp(fn, r, alpha, p, nodes=40960):
    """Dense midpoint quadrature of the seminorm integrand at 10x resolution."""
    ds = 1.0 / nodes
    m = (np.arange(nodes) + 0.5) * ds
    mod = segment_modulus(fn, m, r)
    return (np.sum(mod**p) * ds) ** (1.0 / p) / r**alpha


@pytest.fixture(scope="module")
def unit_segment():
    return generate_curve("segment", length=1.0)


@pytest.fixture(scope="module")
def power06(unit_segment):
    return CurveFunction.from_callable(unit_segment, lambda s: s**0.6)


@pytest.fixture(scope="module")
def linear(unit_segment):
    return CurveFunction.from_callable(unit_segment, lambda s: s)


# -- delta_star ---------------------------------------------------------------------


def test_delta_star_constant_is_zero(unit_segment):
    f = CurveFunction.from_callable(unit_segment, lambda s: np.full_like(s, 3.7))
    for s0 in (0.0, 0.31, 1.0):
        for r in (0.01, 0.5, 1.0):
            assert delta_star(f, s0, r) == 0.0


def test_delta_star_linear_interior_exact(linear):
    # both sides of M reach at least r, so the sup is exactly r
    assert delta_star(linear, 0.5, 0.3) == pytest.approx(0.3, abs=1e-12)
    assert delta_star(linear, 0.4, 0.25) == pytest.approx(0.25, abs=1e-12)


def test_delta_star_power_endpoint_value(power06):
    # monotone growth from the endpoint: sup at arc distance exactly r
    got = delta_star(power06, 0.0, 0.5)
    assert got == pytest.approx(0.5**0.6, rel=1e-6)


def test_delta_star_accepts_curve_point(power06, unit_segment):
    got = delta_star(power06, unit_segment.point(0.0), 0.5)
    assert got == pytest.approx(0.5**0.6, rel=1e-6)


def test_delta_star_rejects_nonpositive_radius(linear):
    with pytest.raises(InvalidInputError):
        delta_star(linear, 0.5, 0.0)
    with pytest.raises(InvalidInputError):
        delta_star(linear, 0.5, -0.1)


def test_delta_star_uses_euclidean_ball_not_arc_ball():
    # on the unit semicircle the radius-1 ball reaches arc 2*arcsin(1/2) > 1
    curve = generate_curve("semicircle", radius=1.0)
    f = CurveFunction.from_callable(curve, lambda s: s)
    got = delta_star(f, 0.0, 1.0)
    assert got == pytest.approx(2.0 * np.arcsin(0.5), rel=1e-6)
    assert got > 1.0 + 0.04


def test_delta_star_monotone_in_radius():
    curve = generate_curve("helix")
    pole = np.array([0.0, 0.0, 2.0])
    f = CurveFunction.from_callable(
        curve, lambda s: np.linalg.norm(curve.point_at(s) - pole, axis=-1) ** 0.7
    )
    rng = np.random.default_rng(421)
    ss = rng.uniform(0.0, curve.total_len, 16)
    prev = None
    for r in curve.total_len * 0.5 ** np.arange(8, -1, -1):
        cur = delta_star_grid(f, ss, float(r))
        if prev is not None:
            assert np.all(cur >= prev - 1e-12)
        prev = cur


def test_delta_star_doubling_transfer():
    # for N on the arc within r of M: delta*(M, r) <= 2 delta*(N, 2r)
    curves = [generate_curve("segment", length=1.0), generate_curve("helix")]
    rng = np.random.default_rng(90405)
    for curve in curves:
        L = curve.total_len
        f = CurveFunction.from_callable(
            curve, lambda s: np.linalg.norm(curve.point_at(s) - np.array([0.3, -0.2, 1.1]), axis=-1) ** 0.5
        )
        for _ in range(40):
            r = float(rng.uniform(0.01, 0.4) * L)
            s_m = float(rng.uniform(0.0, L))
            s_n = float(np.clip(s_m + rng.uniform(-r, r), 0.0, L))
            lhs = delta_star(f, s_m, r)
            rhs = delta_star(f, s_n, 2.0 * r)
            assert lhs <= 2.0 * rhs * (1.0 + 1e-9) + 1e-15


def test_delta_star_refinement_stability():
    # halving the arc step moves the modulus by < 1e-3 relative on the corpus
    seg = generate_curve("segment", length=1.0)
    semi = generate_curve("semicircle", radius=1.0)
    helix = generate_curve("helix")
    corpus = [
        CurveFunction.from_callable(seg, lambda s: s**0.6),
        CurveFunction.from_callable(
            semi, lambda s: np.linalg.norm(semi.point_at(s) - np.array([2.0, 0.0, 0.0]), axis=-1) ** 0.5
        ),
        CurveFunction.from_callable(
            helix, lambda s: np.linalg.norm(helix.point_at(s) - np.array([0.0, 0.0, 2.0]), axis=-1) ** 0.7
        ),
    ]
    rng = np.random.default_rng(77)
    for f in corpus:
        L = f.curve.total_len
        for r in (L / 2.0, L / 8.0, L / 64.0):
            ss = rng.uniform(0.0, L, 12)
            coarse = delta_star_grid(f, ss, r)
            fine = delta_star_grid(f, ss, r, max_step=r / 32.0)
            rel = np.abs(coarse - fine) / np.maximum(fine, 1e-300)
            assert np.all(rel < 1e-3)


# -- max_delta ---------------------------------------------------------------------


def test_max_delta_zero_function(unit_segment):
    F = CurveFunction.from_callable(unit_segment, lambda s: np.zeros_like(s))
    assert max_delta(F, 0.5, 0.2) == 0.0


def test_max_delta_linear(linear):
    assert max_delta(linear, 0.5, 0.1) == pytest.approx(0.6, abs=1e-12)


def test_max_delta_vee(unit_segment):
    F = CurveFunction.from_callable(unit_segment, lambda s: np.abs(s - 0.5))
    assert max_delta(F, 0.5, 0.2) == pytest.approx(0.2, abs=1e-12)


def test_max_delta_dominates_center_value(linear):
    rng = np.random.default_rng(5150)
    for _ in range(20):
        s0 = float(rng.uniform(0.0, 1.0))
        d = float(rng.uniform(0.01, 0.5))
        assert max_delta(linear, s0, d) >= abs(linear(s0)) - 1e-15


# -- lp_seminorm ---------------------------------------------------------------------


def test_lp_seminorm_constant_is_zero(unit_segment):
    f = CurveFunction.from_callable(unit_segment, lambda s: np.full_like(s, -2.0))
    res = lp_seminorm(f, HolderParams(0.5, 2.0, 1.0), r_grid=[0.25, 0.5])
    assert res.value == 0.0
    assert np.all(res.per_r == 0.0)


def test_lp_seminorm_linear_quarter_radius(linear):
    # f(s)=s, alpha=0.5, p=2, r=1/4: modulus is r everywhere, value = r/r^0.5 = 0.5
    res = lp_seminorm(linear, HolderParams(0.5, 2.0, 1.0), r_grid=[0.25])
    ref = oracle_lp(lambda s: s, 0.25, 0.5, 2.0)
    assert ref == pytest.approx(0.5, rel=1e-12)
    assert res.value == pytest.approx(ref, rel=1e-3)


def test_lp_seminorm_power_matches_dense_oracle(power06):
    params = HolderParams(0.6, 2.0, 0.6)
    r_grid = [0.5**k for k in range(1, 9)]
    res = lp_seminorm(power06, params, r_grid=r_grid)
    ref = np.array([oracle_lp(lambda s: s**0.6, r, 0.6, 2.0) for r in r_grid])
    assert np.all(np.abs(res.per_r - ref) / ref < 1e-3)
    assert res.value == pytest.approx(res.per_r.max())
    # per-r values stay bounded by one constant; ratio measured at 5.44
    ratio = res.per_r.max() / res.per_r.min()
    assert ratio == pytest.approx(5.439, rel=0.02)


def test_lp_seminorm_rejects_bad_grids(linear):
    params = HolderParams(0.5, 2.0, 1.0)
    with pytest.raises(InvalidInputError):
        lp_seminorm(linear, params, r_grid=[])
    with pytest.raises(InvalidInputError):
        lp_seminorm(linear, params, r_grid=[0.25, -0.5])
    with pytest.raises(InvalidInputError):
        lp_seminorm(linear, params, r_grid=[0.25], nodes=128)


def test_lp_seminorm_table_roundtrip(power06):
    res = lp_seminorm(power06, HolderParams(0.6, 2.0, 0.6), r_grid=[0.5, 0.25])
    tab = res.table()
    assert set(tab) == {0.5, 0.25}
    assert tab[0.5] == res.per_r[0]


# -- regularity_constant ----------------------------------------------------------------


def test_regularity_constant_linear_interior(linear):
    # interior probes, both sides longer than R: ratio is exactly 1 at eps=1
    probes = [(0.5, 0.5, 0.5**j, 0.5**i) for i in range(2, 7) for j in range(i, 7)]
    rep = regularity_constant(linear, 1.0, probes=probes)
    assert rep.violations == 0
    assert rep.constant == pytest.approx(1.0, rel=1e-9)


def test_regularity_constant_power_standard_probes(power06):
    rep = regularity_constant(power06, 0.6)
    assert rep.violations == 0
    assert rep.informative > 1000
    assert 1.0 <= rep.constant <= 4.0
    assert rep.constant == pytest.approx(1.939, rel=0.02)


def test_regularity_constant_vacuous_for_constants(unit_segment):
    f = CurveFunction.from_callable(unit_segment, lambda s: np.full_like(s, 1.0))
    rep = regularity_constant(f, 0.5)
    assert rep.informative == 0
    assert rep.violations == 0
    assert rep.note == "no informative probes"


def test_regularity_constant_flags_violation(unit_segment):
    # flat on [0, .5], ramp beyond: a probe pair (flat N, ramped M) breaks Eq-style decay
    f = CurveFunction.from_callable(unit_segment, lambda s: np.maximum(s - 0.5, 0.0))
    rep = regularity_constant(f, 0.5, probes=[(0.7, 0.2, 0.05, 0.05)])
    assert rep.violations == 1
    assert rep.informative == 0


def test_regularity_constant_rejects_bad_probes(linear):
    with pytest.raises(InvalidInputError):
        regularity_constant(linear, 0.0)
    with pytest.raises(InvalidInputError):
        regularity_constant(linear, 0.5, probes=[(0.5, 0.5, 0.2, 0.1)])  # r > R
    with pytest.raises(InvalidInputError):
        regularity_constant(linear, 0.5, probes=[])


def test_standard_probes_structure(unit_segment):
    probes = standard_probes(unit_segment)
    arr = np.asarray(probes)
    # 45 dyadic (r, R) pairs to level 8 x 65 level-6 anchors
    assert arr.shape == (45 * 65, 4)
    assert np.all(arr[:, 2] <= arr[:, 3] + 1e-15)
    assert np.all(arr[:, 2] > 0)


# -- uniform_holder_constant ---------------------------------------------------------


def test_uniform_holder_constant_trivial(unit_segment):
    f = CurveFunction.from_callable(unit_segment, lambda s: np.full_like(s, 4.2))
    assert uniform_holder_constant(f, 0.5) == 0.0


def test_uniform_holder_power(power06):
    # sup of delta*/r^0.6 sits at the endpoint anchor where delta* = r^0.6
    assert uniform_holder_constant(power06, 0.6) == pytest.approx(1.0, rel=0.05)


def test_uniform_holder_linear_alpha_half(linear):
    # ratio r/r^0.5 grows with r: sup at r = |L| equals |L|^0.5 = 1
    assert uniform_holder_constant(linear, 0.5) == pytest.approx(1.0, abs=1e-9)


def test_uniform_embedding_bound():
    # finite seminorm controls the uniform constant at exponent alpha - 1/p
    seg = generate_curve("segment", length=1.0)
    semi = generate_curve("semicircle", radius=1.0)
    cases = [
        (CurveFunction.from_callable(seg, lambda s: s**0.6), 0.6, 2.0),
        (CurveFunction.from_callable(seg, lambda s: s**0.8), 0.8, 2.0),
        (
            CurveFunction.from_callable(
                semi, lambda s: np.linalg.norm(semi.point_at(s) - np.array([2.0, 0.0, 0.0]), axis=-1) ** 0.5
            ),
            0.5,
            4.0,
        ),
    ]
    for f, alpha, p in cases:
        semi_val = lp_seminorm(f, HolderParams(alpha, p, alpha)).value
        uni = uniform_holder_constant(f, alpha - 1.0 / p)
        assert np.isfinite(uni)
        assert uni <= 4.0 * semi_val


# -- params, ledger, function specs --------------------------------------------------


def test_holder_params_validation():
    HolderParams(0.5, 2.0, 1.0)  # boundary p*alpha == 1 admitted
    with pytest.raises(InvalidInputError):
        HolderParams(0.0, 3.0, 1.0)
    with pytest.raises(InvalidInputError):
        HolderParams(1.0, 3.0, 1.0)
    with pytest.raises(InvalidInputError):
        HolderParams(0.5, 1.9, 1.0)
    with pytest.raises(InvalidInputError):
        HolderParams(0.5, 3.0, 0.0)
    with pytest.raises(InvalidInputError):
        HolderParams(0.5, 3.0, 1.0, creg=-2.0)


def test_constants_ledger_roundtrip():
    led = ConstantsLedger()
    led.record("b", 1.5708, "chord-arc constant")
    led.record("c2", 0.03)
    assert "b" in led
    assert led.get("b") == pytest.approx(1.5708)
    d = led.as_dict()
    assert d["c2"] == {"value": 0.03, "note": ""}
    other = ConstantsLedger()
    other.record("c5", 2.0)
    led.merge(other)
    assert led.get("c5") == 2.0


def test_constants_ledger_rejects_bad_entries():
    led = ConstantsLedger()
    with pytest.raises(InvalidInputError):
        led.record("bad", 0.0)
    with pytest.raises(InvalidInputError):
        led.record("bad", float("nan"))
    with pytest.raises(InvalidInputError):
        led.get("missing")


def test_make_curve_function_kinds(unit_segment):
    f = make_curve_function(unit_segment, {"kind": "arc-power", "alpha": 0.6})
    assert f(0.25) == pytest.approx(0.25**0.6, rel=1e-9)
    g = make_curve_function(
        unit_segment, {"kind": "dist-power", "point": [0.0, 1.0, 0.0], "alpha": 0.5}
    )
    assert g(0.0) == pytest.approx(1.0, rel=1e-9)
    h = make_curve_function(unit_segment, {"kind": "samples", "values": [0.0, 2.0, 0.0]})
    assert h(0.5) == pytest.approx(2.0, rel=1e-9)
    k = make_curve_function(unit_segment, {"kind": "constant", "value": 1.25})
    assert k(0.77) == 1.25


def test_make_curve_function_rejects_bad_specs(unit_segment):
    bad = [
        {},
        {"kind": "mystery"},
        {"kind": "arc-power"},
        {"kind": "arc-power", "alpha": 0.6, "extra": 1},
        {"kind": "arc-power", "alpha": 1.5},
        {"kind": "dist-power", "point": [0, 0], "alpha": 0.5},
        {"kind": "samples", "values": [1.0]},
        {"kind": "samples", "values": [1.0, float("inf")]},
        {"kind": "constant", "value": float("nan")},
    ]
    for spec in bad:
        with pytest.raises(InvalidInputError):
            make_curve_function(unit_segment, spec)


def test_curve_function_validation(unit_segment):
    with pytest.raises(InvalidInputError):
        CurveFunction(unit_segment, np.zeros(100))  # too few samples
    n = (1 << 14) + 1
    vals = np.zeros(n)
    vals[3] = np.inf
    with pytest.raises(InvalidInputError):
        CurveFunction(unit_segment, vals)
    with pytest.raises(InvalidInputError):
        CurveFunction(unit_segment, np.zeros(n), s_grid=np.zeros(n))
