"""Barrier-based feedback laws and the barrier-switching state machine.

Three laws are provided:

* :func:`control_local` divides by ``||g_hat^T grad_x2 h_v||^2`` and refuses to
  run when that norm is too small.
* :func:`control_square` needs no estimate at all but requires ``m == n`` and
  ``g + g^T`` positive definite.
* :class:`SafetyController` in ``adaptive`` mode swaps in nested ellipsoidal
  barriers whenever the active one loses controllability, with a hysteresis
  band ``(eps_lo, eps_hi)`` deciding when to fall back.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .barrier import (
    EllipsoidBarrier,
    NonPositiveBarrier,
    ReciprocalBarrier,
    SwitchFunction,
    beta_eval,
)
from .interval import DimensionMismatch
from .overapprox import DataPoint, EvidenceSet, approximate

log = logging.getLogger(__name__)


class ControllabilityLoss(RuntimeError):
    def __init__(self, message: str, *, norm: float):
        super().__init__(message)
        self.norm = norm


class BarrierSynthesisFailed(RuntimeError):
    def __init__(self, message: str, *, best=None, failed: str = "", best_score: float = -math.inf):
        super().__init__(message)
        self.best = best
        self.failed = failed
        self.best_score = best_score


class IndexOverflow(RuntimeError):
    def __init__(self, message: str, *, state: dict | None = None):
        super().__init__(message)
        self.state = state or {}


@dataclass(frozen=True)
class ControllerGains:
    kappa_x: float
    kappa_v: float
    mu_x: float
    mu_v: float
    eps_lo: float
    eps_hi: float
    gamma: tuple = ()
    theta: float = 0.5
    switch_kind: str = "linear"
    budget: int = 500

    def __post_init__(self):
        for name in ("kappa_x", "kappa_v", "mu_x", "mu_v", "eps_lo", "eps_hi"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be nonnegative")
        if not self.eps_lo < self.eps_hi:
            raise ValueError(f"empty hysteresis band: eps_lo={self.eps_lo} >= eps_hi={self.eps_hi}")
        gamma = tuple(float(g) for g in self.gamma)
        if any(g <= self.eps_lo for g in gamma):
            raise ValueError("every gamma_j must exceed eps_lo")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        object.__setattr__(self, "gamma", gamma)

    def gamma_for(self, j: int) -> float:
        """Threshold for the barrier with (1-based) index ``j >= 2``; defaults to ``eps_hi``."""
        k = j - 2
        return self.gamma[k] if 0 <= k < len(self.gamma) else self.eps_hi

    @property
    def switch_x(self) -> SwitchFunction:
        return SwitchFunction(self.mu_x, self.switch_kind)

    @property
    def switch_v(self) -> SwitchFunction:
        return SwitchFunction(self.mu_v, self.switch_kind)


# --------------------------------------------------------------------------
# fixed laws


def control_local(x, g_hat, u_nom, gains: ControllerGains, hv_spec: EllipsoidBarrier,
                  beta_v: ReciprocalBarrier | None = None):
    """``u = u_nom - kappa_v sigma(h_v) beta'(h_v) w / ||w||^2`` with ``w = g_hat^T grad_x2 h_v``."""
    beta_v = beta_v or ReciprocalBarrier()
    u_nom = np.asarray(u_nom, dtype=float)
    hv = hv_spec.value(x)
    _, dbeta, _ = beta_eval(hv, beta_v)
    s = gains.switch_v(hv)
    w = np.asarray(g_hat, dtype=float).T @ hv_spec.grad_x2(x)
    nw = float(np.linalg.norm(w))
    diag = {"h_v": hv, "sigma_v": s, "trigger_norm": nw}
    if s == 0.0:
        return u_nom.copy(), diag
    if nw <= gains.eps_lo:
        raise ControllabilityLoss(f"||g_hat^T grad h_v|| = {nw:.3g} <= {gains.eps_lo:g}", norm=nw)
    return u_nom - gains.kappa_v * s * dbeta * w / (nw * nw), diag


def control_square(x, u_nom, gains: ControllerGains, hv_spec: EllipsoidBarrier,
                   beta_v: ReciprocalBarrier | None = None) -> np.ndarray:
    """``u = u_nom - kappa_v sigma(h_v) beta'(h_v) grad_x2 h_v`` (data-free, needs m == n)."""
    beta_v = beta_v or ReciprocalBarrier()
    u_nom = np.asarray(u_nom, dtype=float)
    if u_nom.size != hv_spec.n:
        raise DimensionMismatch(f"square law needs m == n, got m={u_nom.size}, n={hv_spec.n}")
    hv = hv_spec.value(x)
    _, dbeta, _ = beta_eval(hv, beta_v)
    s = gains.switch_v(hv)
    if s == 0.0:
        return u_nom.copy()
    return u_nom - gains.kappa_v * s * dbeta * hv_spec.grad_x2(x)


# --------------------------------------------------------------------------
# ellipsoid geometry


def min_over_ellipsoids(h: EllipsoidBarrier, centers, L) -> np.ndarray:
    """``min h_e`` over each ellipsoid ``{c + L z : ||z|| <= 1}`` (batched).

    ``h`` is concave in ``e``, so this is a trust-region subproblem solved
    exactly by an eigen-decomposition plus bisection on the secular equation.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    L = np.asarray(L, dtype=float)
    if L.ndim == 2:
        L = L[None]
    Q, b = h.Q, h.b
    H = 2.0 * np.einsum("bji,jk,bkl->bil", L, Q, L)
    g = np.einsum("bji,bj->bi", L, 2.0 * centers @ Q + b)
    base = h.value_e(centers)
    lam, V = np.linalg.eigh(H)
    gt = np.einsum("bji,bj->bi", V, g)
    lo = -lam[:, 0]
    scale = np.maximum(np.abs(lam).max(axis=1), 1e-300)
    degenerate = np.abs(lam + lo[:, None]) <= 1e-12 * scale[:, None]
    gnorm = np.linalg.norm(g, axis=1)
    # hard case: the gradient has no component on the bottom eigenspace and the
    # remaining components alone do not reach the sphere
    gt_rest = np.where(degenerate, 0.0, gt)
    with np.errstate(divide="ignore", invalid="ignore"):
        z_at_lo = np.where(degenerate, 0.0, -gt_rest / (lam + lo[:, None]))
    hard = (np.abs(np.where(degenerate, gt, 0.0)).max(axis=1) <= 1e-12 * np.maximum(gnorm, 1.0)) \
        & (np.sum(z_at_lo ** 2, axis=1) <= 1.0)
    a = lo.copy()
    c = lo + gnorm + 1e-300
    for _ in range(200):
        mid = 0.5 * (a + c)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.sum((gt / (lam + mid[:, None])) ** 2, axis=1)
        too_big = r > 1.0
        a = np.where(too_big, mid, a)
        c = np.where(too_big, c, mid)
    lam_star = c
    with np.errstate(divide="ignore", invalid="ignore"):
        z = -gt / (lam + lam_star[:, None])
    z = np.where(np.isfinite(z), z, 0.0)
    if hard.any():
        zh = z_at_lo[hard]
        fill = np.sqrt(np.maximum(0.0, 1.0 - np.sum(zh ** 2, axis=1)))
        first = degenerate[hard] & (np.cumsum(degenerate[hard], axis=1) == 1)
        zh = np.where(first, fill[:, None], zh)
        z[hard] = zh
    val = np.sum(0.5 * lam * z ** 2 + gt * z, axis=1)
    return base + val


@dataclass(frozen=True)
class NextBarrierCheck:
    contained: bool
    positive_at_switch: bool
    steep_enough: bool
    min_on_new_set: float
    value_at_switch: float
    gradient_norm: float

    @property
    def ok(self) -> bool:
        return self.contained and self.positive_at_switch and self.steep_enough

    def first_failure(self) -> str:
        for name in ("contained", "positive_at_switch", "steep_enough"):
            if not getattr(self, name):
                return name
        return ""


def check_next_barrier(h_next: EllipsoidBarrier, h_j: EllipsoidBarrier, x_c, g_hat,
                       gamma: float) -> NextBarrierCheck:
    """Evaluate the three acceptance conditions for a replacement barrier.

    Containment ``{h_next >= 0} in Int{h_j >= 0}`` is certified by showing the
    minimum of ``h_j`` over the new ellipsoid is positive.
    """
    P = h_next.shape_matrix
    lam, V = np.linalg.eigh(P)
    L = V @ np.diag(1.0 / np.sqrt(lam))
    m = float(min_over_ellipsoids(h_j, h_next.center, L)[0])
    e = h_next.error(x_c)
    val = float(h_next.value_e(e))
    gn = float(np.linalg.norm(np.asarray(g_hat).T @ h_next.grad_e(e)))
    return NextBarrierCheck(m > 0.0, val > 0.0, gn >= gamma, m, val, gn)


def find_next_barrier(x_c, g_hat, h_j: EllipsoidBarrier, gamma_next: float, budget: int = 500,
                      rng: np.random.Generator | None = None, *, min_axis_fraction: float = 0.05,
                      description: str = "") -> EllipsoidBarrier:
    """Randomized search for an ellipsoid nested in ``h_j`` that is steep along ``g_hat`` at ``x_c``.

    Candidates are ``h(e) = s (1 - (e - c)^T P (e - c))`` with ``P = R diag(a)^-2 R^T``.
    The first axis ``R[:, 0]`` is drawn around the leading left singular vector
    of ``g_hat``; ``x_c`` sits on that axis at fraction ``rho`` of the semi-axis
    ``a[0]``; the scale ``s`` is the minimum of ``h_j`` over the ellipsoid, so a
    positive ``s`` certifies containment and makes ``h <= h_j`` on the new set.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    G = np.asarray(g_hat, dtype=float)
    n = h_j.n
    if G.shape[0] != n:
        raise DimensionMismatch(f"g_hat must have {n} rows, got {G.shape}")
    e_c = h_j.error(x_c)
    if not h_j.value_e(e_c) > 0.0:
        raise NonPositiveBarrier("switch point lies outside the current barrier set",
                                 h=float(h_j.value_e(e_c)))
    semi = 1.0 / np.sqrt(np.linalg.eigvalsh(h_j.shape_matrix))
    a_min, a_max = min_axis_fraction * semi.min(), semi.max()
    U, _, _ = np.linalg.svd(G)
    lead = U[:, 0]
    B = int(budget)
    tau = rng.uniform(0.0, 0.6, B)
    w1 = lead[None, :] + tau[:, None] * rng.standard_normal((B, n))
    w1 /= np.linalg.norm(w1, axis=1, keepdims=True)
    w1 *= rng.choice([-1.0, 1.0], B)[:, None]
    frame = np.concatenate([w1[:, :, None], rng.standard_normal((B, n, n - 1))], axis=2)
    R, _ = np.linalg.qr(frame)
    R *= np.sign(np.einsum("bi,bi->b", R[:, :, 0], w1))[:, None, None]
    axes = np.exp(rng.uniform(math.log(a_min), math.log(a_max), (B, n)))
    rho = rng.uniform(0.3, 0.95, B)
    centers = e_c[None, :] - (rho * axes[:, 0])[:, None] * R[:, :, 0]
    L = R * axes[:, None, :]
    s = min_over_ellipsoids(h_j, centers, L)
    score = 2.0 * s * rho / axes[:, 0] * np.linalg.norm(R[:, :, 0] @ G, axis=1)
    feasible = (s > 0.0) & (score >= gamma_next)
    if not feasible.any():
        k = int(np.argmax(np.where(s > 0.0, score, -np.inf))) if (s > 0.0).any() else int(np.argmax(s))
        failed = "contained" if s[k] <= 0.0 else "steep_enough"
        raise BarrierSynthesisFailed(
            f"no nested ellipsoid reached gradient norm {gamma_next:g} in {B} candidates "
            f"(best {score[k]:.4g}, failing condition: {failed})",
            best={"center": centers[k], "axes": axes[k], "frame": R[k], "scale": float(s[k])},
            failed=failed, best_score=float(score[k]))
    k = int(np.argmax(np.where(feasible, score, -np.inf)))
    P = (R[k] / axes[k] ** 2) @ R[k].T
    P = 0.5 * (P + P.T)
    h_next = EllipsoidBarrier.from_shape(P, centers[k], float(s[k]), h_j.reference,
                                         description or "synthesized ellipsoid")
    check = check_next_barrier(h_next, h_j, x_c, G, gamma_next)
    if not check.ok:
        raise BarrierSynthesisFailed(f"selected candidate failed re-check ({check.first_failure()})",
                                     failed=check.first_failure(), best_score=float(score[k]))
    return h_next


# --------------------------------------------------------------------------
# switching state machine


@dataclass
class AdaptationState:
    """Active barrier index ``j`` (1-based), flags ``rho`` and the barrier stack."""

    barriers: list
    capacity: int
    j: int = 1
    rho: np.ndarray = None
    x_c: np.ndarray | None = None

    def __post_init__(self):
        if self.rho is None:
            self.rho = np.ones(self.capacity, dtype=int)

    @classmethod
    def fresh(cls, h_v: EllipsoidBarrier) -> AdaptationState:
        return cls([h_v], 2 * h_v.n + 1)

    @property
    def active(self) -> EllipsoidBarrier:
        return self.barriers[self.j - 1]

    def reset(self) -> list:
        """Back to ``h_v`` with every flag raised; returns the discarded barriers."""
        dropped = self.barriers[1:]
        del self.barriers[1:]
        self.j = 1
        self.rho[:] = 1
        self.x_c = None
        return dropped

    def snapshot(self) -> dict:
        return {"j": self.j, "rho": self.rho.tolist(),
                "x_c": None if self.x_c is None else self.x_c.tolist()}


def _event(kind, st, before, norm, **extra):
    ev = {"kind": kind, "j_before": before, "j_after": st.j, "rho": st.rho.tolist(),
          "trigger_norm": norm}
    ev.update(extra)
    return ev


def adaptation_step(x, g_hat, st: AdaptationState, gains: ControllerGains,
                    beta: ReciprocalBarrier | None = None, rng: np.random.Generator | None = None,
                    *, strict: bool = False):
    """One control tick of the barrier-switching machine.

    Returns ``(u_b, st, events)``; ``u_b`` is ``beta_j'(h_j) w_j / ||w_j||^2``
    for the active barrier ``j``. Synthesis failures and index overflow are
    reported as events unless ``strict`` is set, in which case they raise.
    """
    beta = beta or ReciprocalBarrier()
    G = np.asarray(g_hat, dtype=float)
    x = np.asarray(x, dtype=float)
    events = []

    def norm_of(k):
        return float(np.linalg.norm(G.T @ st.barriers[k - 1].grad_x2(x)))

    # the state may have left a synthesized set; rebuild it or drop back
    while st.j > 1 and not st.active.value(x) > 0.0:
        before = st.j
        parent = st.barriers[st.j - 2]
        try:
            h_new = find_next_barrier(x, G, parent, gains.gamma_for(st.j), gains.budget, rng)
            st.barriers[st.j - 1] = h_new
            del st.barriers[st.j:]
            st.x_c = x.copy()
            events.append(_event("resynthesize", st, before, norm_of(st.j),
                                 check=check_next_barrier(h_new, parent, x, G,
                                                          gains.gamma_for(st.j)).ok))
            break
        except (BarrierSynthesisFailed, NonPositiveBarrier) as exc:
            del st.barriers[st.j - 1:]
            st.j -= 1
            st.rho[st.j - 1:] = 1
            events.append(_event("fallback", st, before, norm_of(st.j), reason=str(exc)))

    nj = norm_of(st.j)
    if nj <= gains.eps_lo and st.rho[st.j - 1] == 1:
        before = st.j
        if st.j + 1 > st.capacity:
            msg = f"barrier index would exceed {st.capacity}"
            if strict:
                raise IndexOverflow(msg, state={"x": x.tolist(), **st.snapshot()})
            events.append(_event("index_overflow", st, before, nj, x=x.tolist()))
        else:
            st.rho[st.j - 1] = 0
            st.x_c = x.copy()
            try:
                h_new = find_next_barrier(x, G, st.active, gains.gamma_for(st.j + 1),
                                          gains.budget, rng)
            except BarrierSynthesisFailed as exc:
                if strict:
                    raise
                events.append(_event("synthesis_failed", st, before, nj, reason=str(exc)))
            else:
                del st.barriers[st.j:]
                st.barriers.append(h_new)
                st.j += 1
                events.append(_event("switch_up", st, before, nj,
                                     check=check_next_barrier(h_new, st.barriers[-2], x, G,
                                                              gains.gamma_for(st.j)).ok))
                nj = norm_of(st.j)
    for i in range(1, st.j):
        ni = norm_of(i)
        if ni > gains.eps_hi and st.rho[i - 1] == 0:
            before = st.j
            st.rho[i - 1] = 1
            st.j = i
            st.rho[i:] = 1
            del st.barriers[i:]
            events.append(_event("switch_down", st, before, ni, flag=i))
            nj = ni
            break
    else:
        # a failed synthesis leaves the top flag lowered with nothing above it
        if st.rho[st.j - 1] == 0 and len(st.barriers) == st.j and nj > gains.eps_hi:
            st.rho[st.j - 1] = 1
            events.append(_event("switch_down", st, st.j, nj, flag=st.j))

    h = st.active.value(x)
    _, dbeta, _ = beta_eval(h, beta)
    w = G.T @ st.active.grad_x2(x)
    denom = max(float(w @ w), gains.eps_lo ** 2)
    return dbeta * w / denom, st, events


# --------------------------------------------------------------------------
# composed controller


MODES = ("adaptive", "local", "square", "none")


class SafetyController:
    """Estimator plus safety law, driven once per control tick.

    ``tick`` returns the safe input; ``on_measurement`` ingests one datapoint,
    refreshes the evidence, and resets the switching machine.
    """

    def __init__(self, gains: ControllerGains, h_v: EllipsoidBarrier, evidence: EvidenceSet | None,
                 mode: str = "adaptive", *, beta_v: ReciprocalBarrier | None = None,
                 seed: int = 0):
        if mode not in MODES:
            raise ValueError(f"unknown controller mode {mode!r}")
        self.gains = gains
        self.h_v = h_v
        self.evidence = evidence
        self.mode = mode
        self.beta_v = beta_v or ReciprocalBarrier()
        self.rng = np.random.default_rng(seed)
        n = h_v.n
        m = evidence.m if evidence is not None else n
        self.g0 = self.rng.standard_normal((n, m))
        self.state = AdaptationState.fresh(h_v)

    def g_hat(self, x) -> np.ndarray:
        if self.evidence is None or self.evidence.num_data == 0:
            return self.g0
        return self.evidence.estimate_g(x, self.gains.theta)

    def on_measurement(self, d: DataPoint) -> list:
        events = []
        if self.evidence is not None:
            approximate([d], self.evidence, inplace=True)
            events.append({"kind": "measurement", "entries": len(self.evidence),
                           "sweeps": self.evidence.sweeps_last})
        dropped = self.state.reset()
        if dropped:
            events.append({"kind": "reset", "discarded": [
                {"Q": h.Q.tolist(), "b": h.b.tolist(), "c": h.c} for h in dropped]})
        return events

    def tick(self, x, u_nom):
        """Return ``(u, diag)``; ``diag['events']`` lists switching events."""
        x = np.asarray(x, dtype=float)
        u_nom = np.asarray(u_nom, dtype=float)
        hv = self.h_v.value(x)
        s = self.gains.switch_v(hv)
        diag = {"h_v": hv, "sigma_v": s, "events": [], "trigger_norm": math.nan}
        if self.mode == "none":
            return u_nom.copy(), diag
        if self.mode == "square":
            return control_square(x, u_nom, self.gains, self.h_v, self.beta_v), diag
        G = self.g_hat(x)
        diag["g_hat"] = G
        if self.mode == "local":
            try:
                u, d = control_local(x, G, u_nom, self.gains, self.h_v, self.beta_v)
                diag.update(d)
                return u, diag
            except ControllabilityLoss as exc:
                diag["events"].append({"kind": "controllability_loss", "trigger_norm": exc.norm})
                w = G.T @ self.h_v.grad_x2(x)
                _, dbeta, _ = beta_eval(hv, self.beta_v)
                u_b = dbeta * w / self.gains.eps_lo ** 2
                diag["trigger_norm"] = exc.norm
                return u_nom - self.gains.kappa_v * s * u_b, diag
        if s == 0.0:
            diag["trigger_norm"] = float(np.linalg.norm(G.T @ self.state.active.grad_x2(x)))
            return u_nom.copy(), diag
        u_b, _, events = adaptation_step(x, G, self.state, self.gains, self.beta_v, self.rng)
        diag["events"] = events
        diag["trigger_norm"] = float(np.linalg.norm(G.T @ self.state.active.grad_x2(x)))
        return u_nom - self.gains.kappa_v * s * u_b, diag
