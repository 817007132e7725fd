import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddsafe.interval import DimensionMismatch, EmptyIntersection, IntervalMatrix, IntervalVector
from ddsafe.overapprox import (
    DataPoint,
    EvidenceSet,
    LipschitzBounds,
    NonTermination,
    StepTooLarge,
    approximate,
    contract,
    estimate_g,
    estimation_error_bound,
    predict_next_state,
)

from oracles import random_quadratic_plant, random_walk


def _iv(lo, hi):
    return IntervalVector([lo], [hi])


def _im(lo, hi):
    return IntervalMatrix([[lo]], [[hi]])


def _scalar_ev(f_bar=0.0, g_bar=0.0, M=1e3, x0=(0.0, 0.0), **kw):
    return EvidenceSet(LipschitzBounds([f_bar], [[g_bar]]), x0, M, **kw)


# data types


def test_datapoint_requires_kinematic_chain():
    DataPoint([1.0, 2.0], [2.0, 5.0], [0.0])
    with pytest.raises(ValueError):
        DataPoint([1.0, 2.0], [2.1, 5.0], [0.0])
    with pytest.raises(DimensionMismatch):
        DataPoint([1.0, 2.0, 3.0], [2.0, 5.0, 1.0], [0.0])


def test_lipschitz_bounds_must_be_nonnegative():
    with pytest.raises(ValueError):
        LipschitzBounds([-1.0], [[1.0]])
    with pytest.raises(DimensionMismatch):
        LipschitzBounds([1.0, 1.0], [[1.0]])


# cover


def test_cover_of_prior_grows_with_distance():
    M = 1e3
    ev = EvidenceSet(LipschitzBounds([0.0], [[1.0]]), [0.0, 0.0], M)
    _, G = ev.cover([2.0, 0.0])
    assert (G.lo[0, 0], G.hi[0, 0]) == (-M - 2, M + 2)


def test_cover_reports_conflicting_entries():
    ev = _scalar_ev(f_bar=1.0)
    ev.add_entry([0.0, 0.0], _iv(0, 0), _im(-1, 1))
    ev.add_entry([1.0, 0.0], _iv(5, 5), _im(-1, 1))
    with pytest.raises(EmptyIntersection) as info:
        ev.cover([0.5, 0.0])
    assert set(info.value.context["entries"]) == {1, 2}


def test_cover_at_evidence_point_is_inside_certificate():
    ev = _scalar_ev(f_bar=2.0, g_bar=3.0)
    ev.add_entry([0.3, -0.2], _iv(1, 2), _im(0.5, 0.7))
    F, G = ev.cover([0.3, -0.2])
    assert F.issubset(_iv(1, 2)) and G.issubset(_im(0.5, 0.7))


# contract


def test_contract_hand_trace():
    d = DataPoint([0.0, 0.0], [0.0, 3.0], [1.0])
    CF, CG = contract(d, _iv(0, 2), _im(0, 4))
    assert (CF.lo[0], CF.hi[0]) == (0, 2)
    assert (CG.lo[0, 0], CG.hi[0, 0]) == (1, 3)


def test_contract_zero_input_keeps_g_prior():
    d = DataPoint([0.0, 0.0], [0.0, 1.5], [0.0])
    CF, CG = contract(d, _iv(-3, 3), _im(-2, 5))
    assert (CF.lo[0], CF.hi[0]) == (1.5, 1.5)
    assert (CG.lo[0, 0], CG.hi[0, 0]) == (-2, 5)


def test_contract_exact_priors_are_fixed():
    d = DataPoint([0.0, 0.0], [0.0, 1.0 + 2.0 * 0.5], [0.5])
    CF, CG = contract(d, _iv(1, 1), _im(2, 2))
    assert (CF.lo[0], CF.hi[0], CG.lo[0, 0], CG.hi[0, 0]) == (1, 1, 2, 2)


def test_contract_detects_contradiction():
    d = DataPoint([0.0, 0.0], [0.0, 100.0], [1.0])
    with pytest.raises(EmptyIntersection):
        contract(d, _iv(0, 1), _im(0, 1))


def test_contract_column_order_stays_sound():
    rng = np.random.default_rng(1)
    for _ in range(200):
        f, g = rng.uniform(-2, 2, 1), rng.uniform(-2, 2, (1, 3))
        u = rng.uniform(-2, 2, 3)
        d = DataPoint([0.0, 0.0], [0.0, float(f[0] + g[0] @ u)], u)
        F = IntervalVector(f - rng.uniform(0, 2, 1), f + rng.uniform(0, 2, 1))
        G = IntervalMatrix(g - rng.uniform(0, 2, (1, 3)), g + rng.uniform(0, 2, (1, 3)))
        for order in ((0, 1, 2), (2, 1, 0), (1, 0, 2)):
            CF, CG = contract(d, F, G, order)
            assert CF.contains(f) and CG.contains(g)
            assert CF.issubset(F) and CG.issubset(G)


# approximate


def test_empty_dataset_leaves_prior():
    M = 50.0
    ev = approximate([], EvidenceSet(LipschitzBounds([1.0], [[2.0]]), [0.0, 0.0], M))
    assert len(ev) == 1 and ev.num_data == 0
    F, G = ev.cover([3.0, 4.0])
    assert (F.lo[0], F.hi[0]) == (-M - 5, M + 5)
    assert (G.lo[0, 0], G.hi[0, 0]) == (-M - 10, M + 10)


def _double_input_data():
    xs = [[0.0, 0.0], [0.5, 0.2], [1.0, -0.3]]
    return [DataPoint(x, [x[1], 2.0 * u], [u], t=i) for i, (x, u) in enumerate(zip(xs, (1, -1, 2)))]


def test_approximate_scalar_plant_contains_truth_and_tightens_per_sweep():
    data = _double_input_data()
    widths = []
    for sweeps in range(1, 6):
        base = _scalar_ev(f_bar=0.5, g_bar=0.5, M=20.0, max_sweeps=sweeps)
        try:
            ev = approximate(data, base)
        except NonTermination as exc:
            ev = exc.evidence
        assert np.all(ev.G_lo[1:] <= 2.0) and np.all(ev.G_hi[1:] >= 2.0)
        widths.append(ev.G_hi[1:, 0, 0] - ev.G_lo[1:, 0, 0])
    assert np.all(np.diff(np.array(widths), axis=0) <= 1e-12)


def test_approximate_is_idempotent_at_fixpoint():
    ev = approximate(_double_input_data(), _scalar_ev(f_bar=0.5, g_bar=0.5, M=20.0))
    again = approximate([], ev)
    for name in ("F_lo", "F_hi", "G_lo", "G_hi"):
        assert np.allclose(getattr(ev, name), getattr(again, name), atol=1e-9, rtol=0)


def test_approximate_does_not_mutate_input_unless_asked():
    base = _scalar_ev(f_bar=0.5, g_bar=0.5, M=20.0)
    approximate(_double_input_data(), base)
    assert len(base) == 1
    approximate(_double_input_data(), base, inplace=True)
    assert len(base) == 4


def test_nontermination_carries_partial_evidence():
    rng = np.random.default_rng(7)
    qp = random_quadratic_plant(rng, 2, 2)
    plant = qp.plant()
    path = random_walk(rng, np.zeros(4), 10)
    data = [plant.measure(x, rng.uniform(-2, 2, 2), t=i) for i, x in enumerate(path)]
    ev = approximate(data, EvidenceSet(plant.bounds, path[0], 50.0))
    assert ev.sweeps_last >= 2
    with pytest.raises(NonTermination) as info:
        approximate(data, EvidenceSet(plant.bounds, path[0], 50.0, max_sweeps=1))
    exc = info.value
    assert exc.sweeps == 1 and exc.residual > 1e-9
    assert len(exc.evidence) == len(data) + 1


def test_approximate_reports_offending_datapoint():
    ev = _scalar_ev(f_bar=0.0, g_bar=0.0, M=1.0)
    bad = [DataPoint([0.0, 0.0], [0.0, 0.5], [0.1]), DataPoint([1.0, 0.0], [0.0, 50.0], [0.1])]
    with pytest.raises(EmptyIntersection) as info:
        approximate(bad, ev)
    assert info.value.context["datapoint"] == 1


def test_evidence_text_round_trip():
    ev = approximate(_double_input_data(), _scalar_ev(f_bar=0.5, g_bar=0.5, M=20.0))
    text = ev.to_text()
    back = EvidenceSet.from_text(text)
    assert back.to_text() == text
    assert np.array_equal(back.G_lo, ev.G_lo) and np.array_equal(back.X, ev.X)
    assert text.splitlines()[0] == "# ddsafe-evidence v1"


# estimate_g


@pytest.mark.parametrize("theta, want", [(0.5, 2.0), (0.0, 3.0), (1.0, 1.0)])
def test_estimate_g_blends_endpoints(theta, want):
    ev = _scalar_ev()
    ev.add_entry([0.0, 0.0], _iv(0, 0), _im(1, 3))
    assert estimate_g([1.0, 1.0], ev, theta)[0, 0] == want


def test_estimate_g_degenerate_and_domain():
    ev = _scalar_ev()
    ev.add_entry([0.0, 0.0], _iv(0, 0), _im(1.25, 1.25))
    for theta in (0.0, 0.3, 1.0):
        assert estimate_g([0.0, 0.0], ev, theta)[0, 0] == 1.25
    with pytest.raises(ValueError):
        estimate_g([0.0, 0.0], ev, 1.5)


# one-step enclosure and error bound


def _known_scalar_ev():
    ev = _scalar_ev()
    ev.add_entry([0.0, 0.0], _iv(0, 0), _im(1, 1))
    return ev


def test_one_step_known_scalar_system():
    enc = predict_next_state([0.0, 0.0], IntervalVector([1.0], [1.0]), 0.1, _known_scalar_ev())
    assert enc.box.lo[1] == pytest.approx(0.1) and enc.box.hi[1] == pytest.approx(0.1)
    assert enc.box.lo[0] == pytest.approx(0.005) and enc.box.hi[0] == pytest.approx(0.005)
    assert enc.box.issubset(enc.rough)


def test_step_too_large_reports_admissible_step():
    ev = _scalar_ev(f_bar=1.0, g_bar=1.0)
    U = IntervalVector([-1.0], [1.0])
    with pytest.raises(StepTooLarge) as info:
        predict_next_state([0.0, 0.0], U, 0.6, ev)
    max_dt = info.value.max_dt
    assert 0 < max_dt < 0.6
    predict_next_state([0.0, 0.0], U, 0.99 * max_dt, ev)
    with pytest.raises(ValueError):
        predict_next_state([0.0, 0.0], U, 0.0, ev)


def test_substeps_allow_long_horizons():
    ev = _scalar_ev(f_bar=1.0, g_bar=1.0)
    ev.add_entry([0.0, 0.0], _iv(-0.1, 0.1), _im(0.9, 1.1))
    U = IntervalVector([-1.0], [1.0])
    enc = predict_next_state([0.0, 0.0], U, 0.6, ev, substeps=8)
    assert np.all(np.isfinite(enc.box.lo)) and enc.box.issubset(enc.rough)


def test_error_bound_without_motion_terms_is_certificate_width():
    ev = _known_scalar_ev()
    ev.add_entry([0.0, 0.0], _iv(-1, 1), _im(0.5, 1.5))
    entry = ev.entry(2)
    bound = estimation_error_bound(entry, IntervalVector([0.5], [1.0]), 0.1, ev)
    assert bound[0, 0] == pytest.approx(1.0)


def test_error_bound_grows_with_step():
    ev = _scalar_ev(f_bar=0.5, g_bar=0.7)
    ev = approximate(_double_input_data(), ev)
    entry = ev.entry(len(ev) - 1)
    U = IntervalVector([-1.0], [2.0])
    bounds = [estimation_error_bound(entry, U, dt, ev)[0, 0] for dt in (0.01, 0.05, 0.1, 0.2)]
    assert np.all(np.diff(bounds) >= 0)


# properties


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 2), st.integers(1, 2))
def test_cover_sound_and_monotone_on_random_plants(seed, n, m):
    rng = np.random.default_rng(seed)
    qp = random_quadratic_plant(rng, n, m)
    plant = qp.plant()
    path = random_walk(rng, rng.uniform(-0.5, 0.5, 2 * n), 6)
    queries = rng.uniform(-1, 1, (5, 2 * n))
    ev = EvidenceSet(plant.bounds, path[0], 50.0)
    prev = [ev.cover(q) for q in queries]
    for i, x in enumerate(path):
        try:
            ev = approximate([plant.measure(x, rng.uniform(-2, 2, m), t=i)], ev)
        except NonTermination as exc:
            ev = exc.evidence
        cur = [ev.cover(q) for q in queries]
        for q, (F, G), (F0, G0) in zip(queries, cur, prev):
            assert F.contains(qp.f(q), tol=1e-9) and G.contains(qp.g(q), tol=1e-9)
            assert F.issubset(F0) and G.issubset(G0)
            for theta in (0.0, 0.25, 1.0):
                assert G.contains(ev.estimate_g(q, theta))
        prev = cur


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3).filter(lambda u: abs(u) > 1e-3),
       st.floats(0, 2), st.floats(0, 2), st.floats(0, 2), st.floats(0, 2))
def test_contract_sound_and_shrinking(f, g, u, a, b, c, d):
    dp = DataPoint([0.0, 0.0], [0.0, f + g * u], [u])
    F, G = _iv(f - a, f + b), _im(g - c, g + d)
    CF, CG = contract(dp, F, G)
    assert CF.contains([f]) and CG.contains([[g]])
    assert CF.issubset(F) and CG.issubset(G)


def test_quadrotor_style_step_contained_with_substeps():
    # a long step split into admissible substeps still encloses the true motion
    A = np.array([[0.1, -0.2]])
    ev = EvidenceSet(LipschitzBounds([float(np.linalg.norm(A))], [[0.0]]), [0.0, 0.0], 10.0)
    ev.add_entry([0.0, 0.0], _iv(0.0, 0.0), _im(1.0, 1.0))
    x = np.array([0.2, -0.1])
    u = 0.7
    h = 1e-4
    y = x.copy()
    for _ in range(int(round(0.5 / h))):
        def fld(z):
            return np.array([z[1], A[0] @ z + u])
        k1 = fld(y)
        k2 = fld(y + h / 2 * k1)
        k3 = fld(y + h / 2 * k2)
        k4 = fld(y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    enc = predict_next_state(x, IntervalVector([u], [u]), 0.5, ev, substeps=math.ceil(0.5 / 0.05))
    assert enc.box.contains(y, tol=0.0)
