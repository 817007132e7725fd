"""Plants, fixed-step integration, and the closed-loop runner.

The plant's true ``f`` and ``g`` are used only to integrate the motion and to
produce exact derivative measurements; the controller sees nothing but the
datapoints it is handed.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .barrier import EllipsoidBarrier, NonPositiveBarrier, PositionBarrier, ReciprocalBarrier
from .controller import ControllerGains, SafetyController
from .overapprox import DataPoint, EmptyIntersection, EvidenceSet, LipschitzBounds, NonTermination


class NonFiniteState(FloatingPointError):
    pass


class SafetyViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class Plant:
    """``x1' = x2, x2' = drift(x) + input_matrix(x) u``."""

    n: int
    m: int
    drift: Callable
    input_matrix: Callable
    bounds: LipschitzBounds
    label: str = "plant"

    def accel(self, x, u) -> np.ndarray:
        return self.drift(x) + self.input_matrix(x) @ u

    def field(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.concatenate([x[self.n:], self.accel(x, np.asarray(u, dtype=float))])

    def measure(self, x, u, t: float = 0.0) -> DataPoint:
        return DataPoint(x, self.field(x, u), u, t)


# --------------------------------------------------------------------------
# plants


QUAD_DEFAULTS = {"mass": 1.25, "inertia": 0.03, "gravity": 9.81, "arm": 0.5,
                 "drag_v": 0.25, "drag_phi": 0.02255}


def make_quadrotor(**params) -> Plant:
    """Planar quadrotor: state ``(p_x, p_y, phi, v_x, v_y, omega)``, inputs are the two rotor thrusts."""
    unknown = set(params) - set(QUAD_DEFAULTS)
    if unknown:
        raise ValueError(f"unknown quadrotor parameters: {sorted(unknown)}")
    p = {**QUAD_DEFAULTS, **params}
    mass, inertia, grav, arm = p["mass"], p["inertia"], p["gravity"], p["arm"]
    cdv, cdp = p["drag_v"], p["drag_phi"]

    def drift(x):
        return np.array([-cdv * x[3] / mass, -grav - cdv * x[4] / mass, -cdp * x[5] / (2 * inertia)])

    def input_matrix(x):
        s, c = math.sin(x[2]) / mass, math.cos(x[2]) / mass
        t = arm / (2 * inertia)
        return np.array([[-s, -s], [c, c], [-t, t]])

    bounds = LipschitzBounds([cdv / mass, cdv / mass, cdp / (2 * inertia)],
                             [[1 / mass, 1 / mass], [1 / mass, 1 / mass], [0.0, 0.0]])
    return Plant(3, 2, drift, input_matrix, bounds, "quadrotor")


def hover_thrust(**params) -> float:
    p = {**QUAD_DEFAULTS, **params}
    return p["mass"] * p["gravity"] / 2.0


def make_affine_plant(A, B, label: str = "affine") -> Plant:
    """``f(x) = A x`` and constant ``g = B``; Lipschitz bounds are the row norms of ``A``."""
    A = np.array(A, dtype=float)
    B = np.array(B, dtype=float)
    n, m = B.shape
    if A.shape != (n, 2 * n):
        raise ValueError(f"A must be {n}x{2 * n}, got {A.shape}")
    bounds = LipschitzBounds(np.linalg.norm(A, axis=1), np.zeros((n, m)))
    return Plant(n, m, lambda x: A @ x, lambda x: B, bounds, label)


def validate_lipschitz(plant: Plant, box_lo, box_hi, rng: np.random.Generator,
                       pairs: int = 10_000) -> dict:
    """Sample pairs in the operating box and compare observed slopes with the declared bounds."""
    lo, hi = np.asarray(box_lo, float), np.asarray(box_hi, float)
    X = rng.uniform(lo, hi, (pairs, lo.size))
    Y = rng.uniform(lo, hi, (pairs, lo.size))
    d = np.linalg.norm(X - Y, axis=1)
    fx = np.array([plant.drift(x) for x in X])
    fy = np.array([plant.drift(y) for y in Y])
    gx = np.array([plant.input_matrix(x) for x in X])
    gy = np.array([plant.input_matrix(y) for y in Y])
    with np.errstate(divide="ignore", invalid="ignore"):
        f_slope = np.nanmax(np.abs(fx - fy) / d[:, None], axis=0)
        g_slope = np.nanmax(np.abs(gx - gy) / d[:, None, None], axis=0)
    ok = bool(np.all(f_slope <= plant.bounds.f_bar + 1e-9) and np.all(g_slope <= plant.bounds.g_bar + 1e-9))
    return {"ok": ok, "f_slope": f_slope, "g_slope": g_slope}


# --------------------------------------------------------------------------
# nominal controllers


def sinusoid_reference(t: float, amp=(0.5, 0.5), freq=(1.5, 0.75)):
    """Position, velocity and acceleration of ``p_i(t) = amp_i sin(freq_i t)``."""
    a, w = np.asarray(amp, float), np.asarray(freq, float)
    return a * np.sin(w * t), a * w * np.cos(w * t), -a * w * w * np.sin(w * t)


make_reference = sinusoid_reference


@dataclass(frozen=True)
class QuadrotorTracker:
    """Cascaded PD: position error to desired acceleration, then thrust and attitude, then torque."""

    kp: float = 6.0
    kd: float = 4.0
    k_phi: float = 60.0
    k_omega: float = 12.0
    amp: tuple = (0.5, 0.5)
    freq: tuple = (1.5, 0.75)
    max_tilt: float = 0.6
    params: dict = field(default_factory=dict)

    def __call__(self, x, t):
        p = {**QUAD_DEFAULTS, **self.params}
        pr, vr, ar = sinusoid_reference(t, self.amp, self.freq)
        pos, vel = x[:2], x[3:5]
        drag = p["drag_v"] * vel / p["mass"]
        acc = ar + self.kp * (pr - pos) + self.kd * (vr - vel) + drag
        ax, ay = acc[0], acc[1] + p["gravity"]
        thrust = p["mass"] * math.hypot(ax, ay)
        phi_d = float(np.clip(math.atan2(-ax, ay), -self.max_tilt, self.max_tilt))
        alpha = self.k_phi * (phi_d - x[2]) - self.k_omega * x[5]
        diff = 2 * p["inertia"] / p["arm"] * alpha
        return np.array([(thrust - diff) / 2.0, (thrust + diff) / 2.0])


@dataclass(frozen=True)
class LinearFeedback:
    """``u = offset + K x``."""

    offset: np.ndarray
    K: np.ndarray

    def __call__(self, x, t):
        return np.asarray(self.offset, float) + np.asarray(self.K, float) @ x


# --------------------------------------------------------------------------
# integration


def rk4_step(plant: Plant, x, u, dt: float) -> np.ndarray:
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    k1 = plant.field(x, u)
    k2 = plant.field(x + 0.5 * dt * k1, u)
    k3 = plant.field(x + 0.5 * dt * k2, u)
    k4 = plant.field(x + dt * k3, u)
    out = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise NonFiniteState(f"state became non-finite: {out}")
    return out


@dataclass(frozen=True)
class MeasurementSchedule:
    period: float
    dt: float

    def __post_init__(self):
        if not self.period > 0 or not self.dt > 0:
            raise ValueError("period and dt must be positive")
        k = self.period / self.dt
        if abs(k - round(k)) > 1e-9 * max(1.0, k):
            raise ValueError(f"measurement period {self.period} is not a multiple of dt {self.dt}")

    @property
    def stride(self) -> int:
        return int(round(self.period / self.dt))

    def is_measurement(self, k: int) -> bool:
        return k > 0 and k % self.stride == 0


# --------------------------------------------------------------------------
# scenario and log


@dataclass
class Scenario:
    name: str
    plant: Plant
    position_barrier: PositionBarrier
    h_v: EllipsoidBarrier
    gains: ControllerGains
    nominal: Callable
    x0: np.ndarray
    dt: float = 1e-3
    horizon: float = 8.5
    period: float = 0.1
    mode: str = "adaptive"
    prior_magnitude: float = 1e3
    fix_tol: float = 1e-9
    max_sweeps: int = 100
    seed: int = 0
    beta_v: ReciprocalBarrier = field(default_factory=ReciprocalBarrier)

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.dt))


def trajectory_header(n: int, m: int) -> list[str]:
    cols = ["t"] + [f"x{i + 1}" for i in range(2 * n)] + [f"u{i + 1}" for i in range(m)]
    cols += [f"u_nom{i + 1}" for i in range(m)]
    cols += ["h", "h_v", "sigma_v", "j"] + [f"rho{i + 1}" for i in range(2 * n + 1)]
    cols += ["trigger_norm", "wd_F_max", "wd_G_max", "g_err", "authority_ok", "events"]
    return cols


EVENT_HEADER = ["t", "event_kind", "payload"]


@dataclass
class TrajectoryLog:
    n: int
    m: int
    rows: list = field(default_factory=list)
    events: list = field(default_factory=list)

    @property
    def header(self) -> list[str]:
        return trajectory_header(self.n, self.m)

    def column(self, name: str) -> np.ndarray:
        k = self.header.index(name)
        return np.array([r[k] for r in self.rows], dtype=float)

    def array(self) -> np.ndarray:
        return np.array([r[:-1] for r in self.rows], dtype=float)

    def add_event(self, t: float, kind: str, payload: dict) -> None:
        self.events.append((t, kind, payload))

    def write(self, traj_path, events_path) -> None:
        with open(traj_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header)
            for r in self.rows:
                w.writerow([_fmt(v) for v in r])
        with open(events_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(EVENT_HEADER)
            for t, kind, payload in self.events:
                w.writerow([_fmt(t), kind, json.dumps(payload, default=_jsonable, sort_keys=True)])


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    return repr(float(v))


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    return str(o)


@dataclass
class RunResult:
    log: TrajectoryLog
    summary: dict
    evidence: EvidenceSet | None

    @property
    def ok(self) -> bool:
        return self.summary["status"] == "ok"


def run_closed_loop(sc: Scenario, *, safety: bool = True, on_measurement=None,
                    record_truth: bool = True) -> RunResult:
    """Integrate the closed loop over ``[0, horizon]`` and log every control tick.

    A measurement ``(x, x_dot, u)`` is taken at every multiple of ``period``
    (excluding ``t = 0``), using the input applied over the preceding step.
    ``on_measurement(i, t, datapoint, controller)`` is called after each
    ingestion.
    """
    start = time.perf_counter()
    plant = sc.plant
    n, m = plant.n, plant.m
    sched = MeasurementSchedule(sc.period, sc.dt)
    mode = sc.mode if safety else "none"
    ev = None
    if mode in ("adaptive", "local"):
        ev = EvidenceSet(plant.bounds, sc.x0, sc.prior_magnitude, fix_tol=sc.fix_tol,
                         max_sweeps=sc.max_sweeps)
    ctrl = SafetyController(sc.gains, sc.h_v, ev, mode, beta_v=sc.beta_v, seed=sc.seed)
    log = TrajectoryLog(n, m)
    x = np.asarray(sc.x0, dtype=float).copy()
    u_last = np.asarray(sc.nominal(x, 0.0), dtype=float)
    status, errors = "ok", []
    min_h = min_hv = math.inf
    max_e2 = 0.0
    g_errs = []
    n_meas = 0
    prev_rho = ctrl.state.rho.copy()
    switch_counts = np.zeros(2 * n + 1, dtype=int)
    max_j = 1
    N = sc.steps
    for k in range(N + 1):
        t = k * sc.dt
        if sched.is_measurement(k):
            d = plant.measure(x, u_last, t)
            n_meas += 1
            try:
                for e in ctrl.on_measurement(d):
                    log.add_event(t, e.pop("kind"), e)
            except NonTermination as exc:
                # the partial iterate is still a valid enclosure; keep going with it
                log.add_event(t, "non_termination", {"residual": exc.residual, "sweeps": exc.sweeps})
                ctrl.state.reset()
            except EmptyIntersection as exc:
                errors.append(f"t={t:.6g}: {type(exc).__name__}: {exc}")
                log.add_event(t, "estimator_error", {"error": str(exc)})
                status = "error"
                break
            if on_measurement is not None:
                on_measurement(n_meas, t, d, ctrl)
        u_nom = np.asarray(sc.nominal(x, t), dtype=float)
        h = float(sc.position_barrier.value(x[:n]))
        try:
            hv = sc.h_v.value(x)
            e2 = float(np.linalg.norm(sc.h_v.error(x)))
        except NonPositiveBarrier:
            hv, e2 = math.nan, math.nan
        tags = []
        try:
            u, diag = ctrl.tick(x, u_nom)
        except NonPositiveBarrier as exc:
            u, diag = u_nom.copy(), {"sigma_v": math.nan, "events": [], "trigger_norm": math.nan}
            tags.append("barrier_domain")
            log.add_event(t, "barrier_domain", {"h": exc.h})
        for e in diag["events"]:
            e = dict(e)
            kind = e.pop("kind")
            tags.append(kind)
            log.add_event(t, kind, e)
        rho = ctrl.state.rho
        switch_counts += (prev_rho == 1) & (rho == 0)
        prev_rho = rho.copy()
        max_j = max(max_j, ctrl.state.j)
        if not (h > 0 and hv > 0):
            if status == "ok":
                status = "safety_violation"
            tags.append("safety_violation")
            log.add_event(t, "safety_violation", {"h": h, "h_v": hv})
        min_h = min(min_h, h)
        min_hv = min(min_hv, hv) if not math.isnan(hv) else -math.inf
        if not math.isnan(e2):
            max_e2 = max(max_e2, e2)
        wdF = wdG = g_err = math.nan
        authority_ok = 0
        if ev is not None and ev.num_data > 0:
            F, G = ev.cover(x)
            wdF, wdG = float(F.width().max()), float(G.width().max())
            if record_truth:
                g_err = float(np.linalg.norm(ctrl.g_hat(x) - plant.input_matrix(x)))
                g_errs.append(g_err)
            s = diag.get("sigma_v", math.nan)
            if not math.isnan(hv) and s > 0:
                bound = float(np.linalg.norm(G.width()))
                authority_ok = int(bound * np.linalg.norm(sc.h_v.grad_x2(x)) < sc.gains.eps_lo * s)
        log.rows.append([t, *x, *u, *u_nom, h, hv, diag.get("sigma_v", math.nan), ctrl.state.j,
                         *rho, diag.get("trigger_norm", math.nan), wdF, wdG, g_err, authority_ok,
                         ";".join(tags)])
        if k == N:
            break
        try:
            x = rk4_step(plant, x, u, sc.dt)
        except NonFiniteState as exc:
            errors.append(f"t={t:.6g}: NonFiniteState: {exc}")
            log.add_event(t, "non_finite_state", {"error": str(exc)})
            status = "error"
            break
        u_last = np.asarray(u, dtype=float)
    summary = {
        "scenario": sc.name,
        "mode": mode,
        "status": status,
        "rows": len(log.rows),
        "min_h": min_h,
        "min_hv": min_hv,
        "max_e2": max_e2,
        "switch_counts": switch_counts.tolist(),
        "max_j": max_j,
        "measurements": n_meas,
        "mean_g_err": float(np.mean(g_errs)) if g_errs else None,
        "final_g_err": g_errs[-1] if g_errs else None,
        "wall_time": time.perf_counter() - start,
        "errors": errors,
    }
    return RunResult(log, summary, ev)
