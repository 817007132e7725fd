"""Scenario files: YAML in, validated dataclasses and a runnable scenario out."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .barrier import (
    ReciprocalBarrier,
    ReferenceVelocity,
    gradient_floor_in_band,
    make_sphere_barrier,
    make_velocity_barrier,
)
from .controller import MODES, ControllerGains
from .sim import (
    LinearFeedback,
    QuadrotorTracker,
    Scenario,
    make_affine_plant,
    make_quadrotor,
    validate_lipschitz,
)


class ParseError(ValueError):
    def __init__(self, message: str, *, line: int | None = None, field: str | None = None):
        where = []
        if field:
            where.append(f"field {field!r}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.field = field


class ValidationFailed(ValueError):
    def __init__(self, failures: list):
        super().__init__("scenario failed validation:\n" + "\n".join(f"  - {f}" for f in failures))
        self.failures = failures


@dataclass
class PlantConfig:
    kind: str = "quadrotor"
    params: dict = field(default_factory=dict)
    A: list | None = None
    B: list | None = None
    box_lo: list | None = None
    box_hi: list | None = None


@dataclass
class BarrierConfig:
    r2: float = 0.36
    selector: list = field(default_factory=lambda: [0, 1])
    beta: str = "inverse"
    band: float | None = None


@dataclass
class VelocityBarrierConfig:
    radius: float | None = 10.0
    A: list | None = None
    beta: str = "inverse"


@dataclass
class GainsConfig:
    kappa_x: float = 1.0
    mu_x: float = 0.1
    kappa_v: float = 100.0
    mu_v: float = 100.0
    eps_lo: float = 0.05
    eps_hi: float = 5.0
    gamma: list = field(default_factory=list)
    theta: float = 0.5
    switch: str = "linear"
    budget: int = 500


@dataclass
class ScheduleConfig:
    period: float = 0.1
    horizon: float = 8.5
    dt: float = 1e-3


@dataclass
class NominalConfig:
    kind: str = "quadrotor_tracker"
    kp: float = 6.0
    kd: float = 4.0
    k_phi: float = 60.0
    k_omega: float = 12.0
    amp: list = field(default_factory=lambda: [0.5, 0.5])
    freq: list = field(default_factory=lambda: [1.5, 0.75])
    max_tilt: float = 0.6
    offset: list | None = None
    K: list | None = None


@dataclass
class EstimatorConfig:
    prior_magnitude: float = 1e3
    fix_tol: float = 1e-9
    max_sweeps: int = 100


@dataclass
class ScenarioConfig:
    name: str
    initial_state: list
    plant: PlantConfig = field(default_factory=PlantConfig)
    barrier: BarrierConfig = field(default_factory=BarrierConfig)
    velocity_barrier: VelocityBarrierConfig = field(default_factory=VelocityBarrierConfig)
    gains: GainsConfig = field(default_factory=GainsConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    nominal: NominalConfig = field(default_factory=NominalConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    mode: str = "adaptive"
    seed: int = 0
    output_dir: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)


_SECTIONS = {
    "plant": PlantConfig, "barrier": BarrierConfig, "velocity_barrier": VelocityBarrierConfig,
    "gains": GainsConfig, "schedule": ScheduleConfig, "nominal": NominalConfig,
    "estimator": EstimatorConfig,
}


# --------------------------------------------------------------------------
# parsing


def _line_map(text: str) -> dict:
    """Dotted key path -> 1-based line number, from the YAML node tree."""
    out = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return out

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}.{k.value}" if prefix else str(k.value)
                out[path] = k.start_mark.line + 1
                walk(v, path)

    if root is not None:
        walk(root, "")
    return out


_NUMERIC = (int, float)


def _coerce(value, default, path, lines):
    """Light type check against the dataclass default."""
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, _NUMERIC) and not isinstance(value, bool)
        if ok:
            value = float(value)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    elif isinstance(default, dict):
        ok = isinstance(value, dict)
    else:
        ok = True
    if not ok:
        raise ParseError(f"expected {type(default).__name__}, got {type(value).__name__}",
                         line=lines.get(path), field=path)
    return value


def _build(cls, data, prefix, lines):
    if not isinstance(data, dict):
        raise ParseError("expected a mapping", line=lines.get(prefix), field=prefix or None)
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            path = f"{prefix}.{key}" if prefix else key
            raise ParseError("unknown key", line=lines.get(path), field=path)
    kwargs = {}
    proto = None
    for name, f in known.items():
        path = f"{prefix}.{name}" if prefix else name
        if name not in data:
            continue
        value = data[name]
        if name in _SECTIONS and cls is ScenarioConfig:
            kwargs[name] = _build(_SECTIONS[name], value or {}, path, lines)
            continue
        if proto is None:
            proto = cls(name="", initial_state=[]) if cls is ScenarioConfig else cls()
        default = getattr(proto, name, None) if proto is not None else None
        kwargs[name] = _coerce(value, default, path, lines)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ParseError(str(exc), field=prefix or None) from None


def parse_config(text: str) -> ScenarioConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ParseError(f"invalid YAML: {getattr(exc, 'problem', exc)}",
                         line=None if mark is None else mark.line + 1) from None
    lines = _line_map(text)
    if not isinstance(data, dict):
        raise ParseError("scenario file must be a mapping")
    for key in ("name", "initial_state"):
        if key not in data:
            raise ParseError("missing required key", field=key)
    cfg = _build(ScenarioConfig, data, "", lines)
    if not isinstance(cfg.name, str):
        raise ParseError("expected str", line=lines.get("name"), field="name")
    if not isinstance(cfg.initial_state, list) or not all(
            isinstance(v, _NUMERIC) and not isinstance(v, bool) for v in cfg.initial_state):
        raise ParseError("expected a list of numbers", line=lines.get("initial_state"),
                         field="initial_state")
    cfg.initial_state = [float(v) for v in cfg.initial_state]
    return cfg


def load_config(path) -> ScenarioConfig:
    return parse_config(Path(path).read_text())


# --------------------------------------------------------------------------
# building and validation


def build_plant(cfg: PlantConfig):
    if cfg.kind == "quadrotor":
        return make_quadrotor(**cfg.params)
    if cfg.kind == "affine":
        if cfg.A is None or cfg.B is None:
            raise ValueError("affine plant needs A and B")
        return make_affine_plant(cfg.A, cfg.B)
    raise ValueError(f"unknown plant kind {cfg.kind!r}")


def default_box(cfg: PlantConfig, n: int):
    if cfg.box_lo is not None and cfg.box_hi is not None:
        return np.asarray(cfg.box_lo, float), np.asarray(cfg.box_hi, float)
    if cfg.kind == "quadrotor":
        hi = np.array([1.0, 1.0, math.pi, 5.0, 5.0, 10.0])
        return -hi, hi
    hi = np.full(2 * n, 2.0)
    return -hi, hi


def build_nominal(cfg: NominalConfig, plant_cfg: PlantConfig, n: int, m: int):
    if cfg.kind == "quadrotor_tracker":
        return QuadrotorTracker(cfg.kp, cfg.kd, cfg.k_phi, cfg.k_omega, tuple(cfg.amp),
                                tuple(cfg.freq), cfg.max_tilt, dict(plant_cfg.params))
    if cfg.kind in ("linear", "constant"):
        offset = np.zeros(m) if cfg.offset is None else np.asarray(cfg.offset, float)
        K = np.zeros((m, 2 * n)) if cfg.K is None or cfg.kind == "constant" else np.asarray(cfg.K, float)
        if offset.shape != (m,) or K.shape != (m, 2 * n):
            raise ValueError(f"nominal offset/K must be ({m},) and ({m}, {2 * n})")
        return LinearFeedback(offset, K)
    raise ValueError(f"unknown nominal controller kind {cfg.kind!r}")


def build_scenario(cfg: ScenarioConfig) -> Scenario:
    plant = build_plant(cfg.plant)
    n, m = plant.n, plant.m
    g = cfg.gains
    gains = ControllerGains(g.kappa_x, g.kappa_v, g.mu_x, g.mu_v, g.eps_lo, g.eps_hi,
                            tuple(g.gamma), g.theta, g.switch, g.budget)
    pb = make_sphere_barrier(cfg.barrier.r2, cfg.barrier.selector, n)
    ref = ReferenceVelocity(pb, gains.kappa_x, gains.switch_x, ReciprocalBarrier(cfg.barrier.beta))
    vb = cfg.velocity_barrier
    hv = make_velocity_barrier(vb.radius if vb.A is None else np.asarray(vb.A, float), ref)
    return Scenario(
        name=cfg.name, plant=plant, position_barrier=pb, h_v=hv, gains=gains,
        nominal=build_nominal(cfg.nominal, cfg.plant, n, m),
        x0=np.asarray(cfg.initial_state, float), dt=cfg.schedule.dt,
        horizon=cfg.schedule.horizon, period=cfg.schedule.period, mode=cfg.mode,
        prior_magnitude=cfg.estimator.prior_magnitude, fix_tol=cfg.estimator.fix_tol,
        max_sweeps=cfg.estimator.max_sweeps, seed=cfg.seed,
        beta_v=ReciprocalBarrier(vb.beta))


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""


def run_checks(cfg: ScenarioConfig, *, lipschitz_pairs: int = 10_000) -> list[Check]:
    """Every load-time assumption check, each reported pass/fail with its measured value."""
    checks: list[Check] = []

    def add(name, ok, detail=""):
        checks.append(Check(name, bool(ok), detail))

    g, s = cfg.gains, cfg.schedule
    add("safe set has nonempty interior", cfg.barrier.r2 > 0, f"r2={cfg.barrier.r2}")
    add("hysteresis band nonempty", g.eps_lo < g.eps_hi, f"eps_lo={g.eps_lo}, eps_hi={g.eps_hi}")
    add("gamma above eps_lo", all(x > g.eps_lo for x in g.gamma), f"gamma={g.gamma or 'eps_hi'}")
    add("positive switch widths", g.mu_x > 0 and g.mu_v > 0, f"mu_x={g.mu_x}, mu_v={g.mu_v}")
    add("nonnegative gains", g.kappa_x >= 0 and g.kappa_v >= 0, f"kappa_x={g.kappa_x}, kappa_v={g.kappa_v}")
    add("theta in [0, 1]", 0 <= g.theta <= 1, f"theta={g.theta}")
    add("switch kind known", g.switch in ("linear", "cosine"), g.switch)
    add("reciprocal barriers known",
        {cfg.barrier.beta, cfg.velocity_barrier.beta} <= {"inverse", "log-ratio"},
        f"{cfg.barrier.beta}/{cfg.velocity_barrier.beta}")
    add("controller mode known", cfg.mode in MODES, cfg.mode)
    ratio = s.period / s.dt if s.dt > 0 else math.nan
    add("schedule consistent",
        s.dt > 0 and s.period > 0 and s.horizon >= 0 and abs(ratio - round(ratio)) <= 1e-9 * max(1, ratio),
        f"dt={s.dt}, period={s.period}, horizon={s.horizon}")
    add("prior magnitude positive", cfg.estimator.prior_magnitude > 0,
        f"M={cfg.estimator.prior_magnitude}")
    try:
        plant = build_plant(cfg.plant)
    except (ValueError, TypeError) as exc:
        add("plant builds", False, str(exc))
        return checks
    n, m = plant.n, plant.m
    add("plant builds", True, f"{plant.label}, n={n}, m={m}")
    x0 = np.asarray(cfg.initial_state, float)
    add("initial state dimension", x0.size == 2 * n, f"len={x0.size}, expected {2 * n}")
    sel = cfg.barrier.selector
    add("selector indices valid", bool(sel) and all(isinstance(i, int) and 0 <= i < n for i in sel)
        and len(set(sel)) == len(sel), f"selector={sel}")
    if not all(c.ok for c in checks):
        return checks
    try:
        sc = build_scenario(cfg)
    except (ValueError, TypeError) as exc:
        add("scenario builds", False, str(exc))
        return checks
    rng = np.random.default_rng(cfg.seed)
    h0 = float(sc.position_barrier.value(x0[:n]))
    add("initial position inside safe set", h0 > 0, f"h(x1(0))={h0:.6g}")
    if h0 > 0:
        hv0 = sc.h_v.value(x0)
        add("initial velocity barrier positive", hv0 > 0, f"h_v(x(0))={hv0:.6g}")
    lo, hi = default_box(cfg.plant, n)
    lip = validate_lipschitz(plant, lo, hi, rng, lipschitz_pairs)
    add("declared Lipschitz bounds hold on operating box", lip["ok"],
        f"max |df|/|dx|={np.round(lip['f_slope'], 4).tolist()}, "
        f"max |dg|/|dx|={np.round(lip['g_slope'], 4).tolist()}")
    nu = cfg.barrier.band if cfg.barrier.band is not None else 2 * g.mu_x
    eps_h = gradient_floor_in_band(sc.position_barrier, nu, rng)
    add("gradient bounded away from zero near the boundary", eps_h > 0,
        f"min |grad h| on 0<h<={nu:g}: {eps_h:.4g}")
    if cfg.mode == "square":
        ok = m == n
        detail = f"m={m}, n={n}"
        if ok:
            X = rng.uniform(lo, hi, (200, 2 * n))
            lam = min(np.linalg.eigvalsh(plant.input_matrix(x) + plant.input_matrix(x).T).min() for x in X)
            ok = lam > 0
            detail += f", min eig(g + g^T) sampled={lam:.4g}"
        add("square law applicable", ok, detail)
    return checks


def validate(cfg: ScenarioConfig, **kw) -> list[Check]:
    checks = run_checks(cfg, **kw)
    failures = [f"{c.name}: {c.detail}" for c in checks if not c.ok]
    if failures:
        raise ValidationFailed(failures)
    return checks
