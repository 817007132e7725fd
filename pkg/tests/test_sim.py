import dataclasses
import math

import numpy as np
import pytest

from ddsafe.overapprox import LipschitzBounds
from ddsafe.sim import (
    EVENT_HEADER,
    MeasurementSchedule,
    NonFiniteState,
    Plant,
    hover_thrust,
    make_affine_plant,
    make_quadrotor,
    make_reference,
    rk4_step,
    run_closed_loop,
    trajectory_header,
    validate_lipschitz,
)

from oracles import quad_field_batch, rk4_batch


def _double_integrator():
    return Plant(1, 1, lambda x: np.zeros(1), lambda x: np.ones((1, 1)),
                 LipschitzBounds([0.0], [[0.0]]), "double integrator")


# integration


def test_rk4_constant_velocity_is_exact():
    x = rk4_step(_double_integrator(), [0.3, 2.0], [0.0], 0.1)
    assert x[0] == pytest.approx(0.5, abs=1e-15) and x[1] == 2.0


def test_rk4_constant_acceleration_is_exact():
    x = rk4_step(_double_integrator(), [0.0, 0.0], [1.0], 0.1)
    assert x[1] == pytest.approx(0.1, abs=1e-15)
    assert x[0] == pytest.approx(0.005, abs=1e-15)


def test_rk4_rejects_nonfinite_and_bad_step():
    p = _double_integrator()
    with pytest.raises(NonFiniteState):
        rk4_step(p, [0.0, 0.0], [np.inf], 0.1)
    with pytest.raises(ValueError):
        rk4_step(p, [0.0, 0.0], [1.0], 0.0)


def test_quadrotor_free_fall_matches_fine_reference():
    plant = make_quadrotor()
    x0 = np.array([0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    x = x0.copy()
    for _ in range(100):
        x = rk4_step(plant, x, np.zeros(2), 1e-3)
    ref = rk4_batch(quad_field_batch, x0[None], lambda s: np.zeros((1, 2)), np.array([0.1]))[0]
    assert np.allclose(x, ref, atol=1e-10)
    # v_y' = -g - c v_y / m
    c, m, g = 0.25, 1.25, 9.81
    vy = -(g * m / c) * (1 - math.exp(-c / m * 0.1))
    assert x[4] == pytest.approx(vy, rel=1e-9)


def test_free_fall_without_drag_loses_vertical_speed_monotonically():
    plant = make_quadrotor(drag_v=0.0, drag_phi=0.0)
    rng = np.random.default_rng(0)
    x = rng.normal(0, 1, 6)
    vys = [x[4]]
    for _ in range(200):
        x = rk4_step(plant, x, np.zeros(2), 1e-2)
        vys.append(x[4])
    assert np.all(np.diff(vys) < 0)


# plants


def test_quadrotor_hover_and_parameters():
    plant = make_quadrotor()
    u = np.full(2, hover_thrust())
    assert u[0] == pytest.approx(6.13125)
    assert np.allclose(plant.accel(np.zeros(6), u), 0.0, atol=1e-12)
    G = plant.input_matrix(np.zeros(6))
    assert np.allclose(G, [[0, 0], [0.8, 0.8], [-25 / 3, 25 / 3]])
    with pytest.raises(ValueError):
        make_quadrotor(rotor_count=4)


def test_quadrotor_thrust_horizontal_at_right_angle():
    G = make_quadrotor().input_matrix(np.array([0, 0, math.pi / 2, 0, 0, 0]))
    assert np.allclose(G[:2], [[-0.8, -0.8], [0.0, 0.0]], atol=1e-15)


def test_declared_bounds_hold_on_default_box():
    rng = np.random.default_rng(1)
    hi = np.array([1.0, 1.0, math.pi, 5.0, 5.0, 10.0])
    res = validate_lipschitz(make_quadrotor(), -hi, hi, rng, 10_000)
    assert res["ok"]
    bad = make_quadrotor()
    bad = dataclasses.replace(bad, bounds=LipschitzBounds([0.01, 0.01, 0.01], np.full((3, 2), 0.01)))
    assert not validate_lipschitz(bad, -hi, hi, rng, 2000)["ok"]


def test_affine_plant_shapes():
    p = make_affine_plant(np.zeros((2, 4)), np.eye(2))
    assert (p.n, p.m) == (2, 2)
    with pytest.raises(ValueError):
        make_affine_plant(np.zeros((2, 3)), np.eye(2))


def test_measurement_is_consistent():
    plant = make_quadrotor()
    x = np.array([0.1, -0.2, 0.3, 1.0, -1.0, 2.0])
    d = plant.measure(x, np.array([5.0, 6.0]), t=0.1)
    assert np.array_equal(d.x_dot, plant.field(x, [5.0, 6.0]))


# reference


def test_reference_values():
    p, v, a = make_reference(0.0)
    assert np.array_equal(p, [0.0, 0.0])
    p, _, _ = make_reference(math.pi / 3)
    assert p[0] == pytest.approx(0.5)
    ts = np.linspace(0, 20, 20001)
    radius = max(np.linalg.norm(make_reference(t)[0]) for t in ts)
    assert 0.6 < radius <= 0.5 * math.sqrt(2)


# schedule


def test_schedule_validation():
    s = MeasurementSchedule(0.1, 1e-3)
    assert s.stride == 100
    assert not s.is_measurement(0) and s.is_measurement(100) and not s.is_measurement(150)
    with pytest.raises(ValueError):
        MeasurementSchedule(0.1, 0.003)
    with pytest.raises(ValueError):
        MeasurementSchedule(0.0, 1e-3)


# closed loop


def _short(sc, horizon):
    return dataclasses.replace(sc, horizon=horizon)


def test_zero_horizon_logs_initial_row(quad_run):
    sc = _short(quad_run[0], 0.0)
    res = run_closed_loop(sc)
    assert len(res.log.rows) == 1
    assert np.array_equal(res.log.array()[0, 1:7], sc.x0)


def test_runs_are_deterministic(quad_run):
    sc = _short(quad_run[0], 0.5)
    a, b = run_closed_loop(sc), run_closed_loop(sc)
    assert a.log.rows == b.log.rows
    assert a.log.events == b.log.events


def test_log_has_fixed_step_and_schema(quad_run):
    _, res, _ = quad_run
    t = res.log.column("t")
    assert np.allclose(np.diff(t), 1e-3) and np.all(np.diff(t) > 0)
    assert res.log.header == trajectory_header(3, 2)
    assert res.log.header[:11] == ["t", "x1", "x2", "x3", "x4", "x5", "x6", "u1", "u2",
                                   "u_nom1", "u_nom2"]
    assert EVENT_HEADER == ["t", "event_kind", "payload"]


def test_measurements_are_exact_and_reset_switching(quad_run):
    sc = _short(quad_run[0], 0.35)
    seen = []

    def hook(i, t, d, ctrl):
        assert np.array_equal(d.x_dot, sc.plant.field(d.x, d.u))
        seen.append((i, t, ctrl.evidence.num_data, ctrl.state.j, ctrl.state.rho.copy()))

    run_closed_loop(sc, on_measurement=hook)
    assert [s[0] for s in seen] == [1, 2, 3]
    i, t, num, j, rho = seen[0]
    assert t == pytest.approx(0.1) and num == 1 and j == 1 and np.all(rho == 1)


def test_cover_contains_truth_at_every_measurement(quad_run):
    sc, _, snaps = quad_run
    for _, x, ev in snaps:
        F, G = ev.cover(x)
        assert F.contains(sc.plant.drift(x)) and G.contains(sc.plant.input_matrix(x))


def test_disabling_the_filter_is_unsafe(quad_run):
    sc = _short(quad_run[0], 3.0)
    res = run_closed_loop(sc, safety=False)
    assert res.summary["status"] == "safety_violation"
    assert res.summary["mode"] == "none"
    assert any(kind == "safety_violation" for _, kind, _ in res.log.events)
    assert np.array_equal(res.log.column("u1"), res.log.column("u_nom1"))


def test_summary_fields(quad_run):
    s = quad_run[1].summary
    for key in ("min_h", "min_hv", "max_e2", "switch_counts", "max_j", "mean_g_err",
                "final_g_err", "wall_time", "measurements"):
        assert key in s
    assert len(s["switch_counts"]) == 7 and s["measurements"] == 85
