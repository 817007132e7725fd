"""Set-membership over-approximation of the unknown drift and input matrix.

The plant is ``x1' = x2, x2' = f(x) + g(x) u`` with ``x`` in R^{2n}. Only the
``n`` dynamic rows are estimated; the kinematic rows are known exactly.

An :class:`EvidenceSet` holds interval certificates ``(x^j, C_F^j, C_G^j)``.
Lipschitz cones around those certificates give enclosures of ``f`` and ``g``
at any state (:func:`cover`); measured derivatives shrink the certificates
(:func:`contract`); :func:`approximate` runs both to a fixpoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .interval import (
    DimensionMismatch,
    EmptyIntersection,
    IntervalMatrix,
    IntervalVector,
    intersect_endpoints,
    mat_vec,
)

DEFAULT_PRIOR = 1e3
DEFAULT_FIX_TOL = 1e-9
DEFAULT_MAX_SWEEPS = 100
DEFAULT_THETA = 0.5


class NonTermination(RuntimeError):
    """The fixpoint sweep did not settle within ``max_sweeps``.

    ``evidence`` holds the last (still sound) iterate.
    """

    def __init__(self, message: str, *, residual: float, sweeps: int, evidence=None):
        super().__init__(message)
        self.residual = residual
        self.sweeps = sweeps
        self.evidence = evidence


class StepTooLarge(ValueError):
    def __init__(self, message: str, *, max_dt: float):
        super().__init__(message)
        self.max_dt = max_dt


@dataclass(frozen=True)
class DataPoint:
    """One measurement ``(x, x_dot, u)`` taken at time ``t``."""

    x: np.ndarray
    x_dot: np.ndarray
    u: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        x = np.array(self.x, dtype=float).reshape(-1)
        xd = np.array(self.x_dot, dtype=float).reshape(-1)
        u = np.array(self.u, dtype=float).reshape(-1)
        if x.size % 2 or x.size == 0:
            raise DimensionMismatch(f"state must have even length 2n, got {x.size}")
        if xd.shape != x.shape:
            raise DimensionMismatch(f"x_dot shape {xd.shape} != x shape {x.shape}")
        n = x.size // 2
        if not np.allclose(xd[:n], x[n:], rtol=0.0, atol=1e-9):
            raise ValueError("x_dot[:n] must equal x[n:] (kinematic chain x1' = x2)")
        for name, v in (("x", x), ("x_dot", xd), ("u", u)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        object.__setattr__(self, "t", float(self.t))

    @property
    def n(self) -> int:
        return self.x.size // 2

    @property
    def accel(self) -> np.ndarray:
        """The dynamic rows ``x2'`` of the derivative."""
        return self.x_dot[self.n:]


@dataclass(frozen=True)
class LipschitzBounds:
    f_bar: np.ndarray
    g_bar: np.ndarray

    def __post_init__(self):
        f = np.array(self.f_bar, dtype=float).reshape(-1)
        g = np.array(self.g_bar, dtype=float)
        if g.ndim != 2 or g.shape[0] != f.size:
            raise DimensionMismatch(f"g_bar must be ({f.size}, m), got {g.shape}")
        if (f < 0).any() or (g < 0).any() or not (np.isfinite(f).all() and np.isfinite(g).all()):
            raise ValueError("Lipschitz bounds must be finite and nonnegative")
        f.setflags(write=False)
        g.setflags(write=False)
        object.__setattr__(self, "f_bar", f)
        object.__setattr__(self, "g_bar", g)

    @property
    def n(self) -> int:
        return self.f_bar.size

    @property
    def m(self) -> int:
        return self.g_bar.shape[1]

    def row_constants(self, U: IntervalVector) -> np.ndarray:
        """Lipschitz constant of ``x -> f_k(x) + g_k(x) u`` uniformly over ``u`` in ``U``."""
        return self.f_bar + self.g_bar @ U.mag()

    def lifted(self, U: IntervalVector) -> np.ndarray:
        """Row constants of the full 2n-dimensional field; kinematic rows have constant 1."""
        return np.concatenate([np.ones(self.n), self.row_constants(U)])


@dataclass(frozen=True)
class EvidenceEntry:
    x: np.ndarray
    C_F: IntervalVector
    C_G: IntervalMatrix
    data: DataPoint | None = None


@dataclass(frozen=True)
class StateEnclosure:
    box: IntervalVector
    rough: IntervalVector


def _meet(lo_all, hi_all, which):
    """Intersect the per-entry enclosures stacked along axis 0."""
    lo, hi = lo_all.max(axis=0), hi_all.min(axis=0)
    try:
        return intersect_endpoints(lo, hi, lo, hi)
    except EmptyIntersection as exc:
        idx = exc.index
        j_lo = int(np.argmax(lo_all[(slice(None),) + idx]))
        j_hi = int(np.argmin(hi_all[(slice(None),) + idx]))
        raise EmptyIntersection(
            f"inconsistent evidence for {which}{list(idx)}: entries {j_lo} and {j_hi} "
            "cannot both hold under the declared Lipschitz bounds",
            index=idx, lo=exc.lo, hi=exc.hi,
            context={"component": which, "entries": (j_lo, j_hi)}) from None


class EvidenceSet:
    """Interval certificates of ``f`` and ``g`` at visited states.

    Entry 0 is the prior ``[-M, M]`` placed at ``x0``; later entries carry the
    datapoint that produced them so sweeps can re-contract them.
    """

    def __init__(self, bounds: LipschitzBounds, x0, prior_magnitude: float = DEFAULT_PRIOR,
                 *, fix_tol: float = DEFAULT_FIX_TOL, max_sweeps: int = DEFAULT_MAX_SWEEPS,
                 order: Sequence[int] | None = None):
        x0 = np.asarray(x0, dtype=float).reshape(-1)
        if x0.size != 2 * bounds.n:
            raise DimensionMismatch(f"x0 must have length {2 * bounds.n}, got {x0.size}")
        if not prior_magnitude > 0:
            raise ValueError("prior magnitude M must be positive")
        self.bounds = bounds
        self.prior_magnitude = float(prior_magnitude)
        self.fix_tol = float(fix_tol)
        self.max_sweeps = int(max_sweeps)
        self.order = None if order is None else tuple(int(o) for o in order)
        n, m = bounds.n, bounds.m
        M = self.prior_magnitude
        self.X = x0[None, :].copy()
        self.F_lo = np.full((1, n), -M)
        self.F_hi = np.full((1, n), M)
        self.G_lo = np.full((1, n, m), -M)
        self.G_hi = np.full((1, n, m), M)
        self.data: list[DataPoint | None] = [None]
        self.sweeps_last = 0

    @property
    def n(self) -> int:
        return self.bounds.n

    @property
    def m(self) -> int:
        return self.bounds.m

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def num_data(self) -> int:
        return sum(d is not None for d in self.data)

    def entry(self, k: int) -> EvidenceEntry:
        return EvidenceEntry(self.X[k].copy(),
                             IntervalVector(self.F_lo[k], self.F_hi[k], check=False),
                             IntervalMatrix(self.G_lo[k], self.G_hi[k], check=False),
                             self.data[k])

    @property
    def entries(self) -> list[EvidenceEntry]:
        return [self.entry(k) for k in range(len(self))]

    def copy(self) -> EvidenceSet:
        new = object.__new__(EvidenceSet)
        new.__dict__.update(self.__dict__)
        for name in ("X", "F_lo", "F_hi", "G_lo", "G_hi"):
            setattr(new, name, getattr(self, name).copy())
        new.data = list(self.data)
        return new

    # queries ----------------------------------------------------------------

    def cover(self, x) -> tuple[IntervalVector, IntervalMatrix]:
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.size != self.X.shape[1]:
            raise DimensionMismatch(f"query must have length {self.X.shape[1]}, got {x.size}")
        d = np.sqrt(np.sum((self.X - x) ** 2, axis=1))
        return self._cover_from_dist(d)

    def cover_box(self, box: IntervalVector) -> tuple[IntervalVector, IntervalMatrix]:
        """Enclosures valid for every state in ``box`` (uses the farthest distance)."""
        lo, hi = box.lo, box.hi
        far = np.maximum(np.abs(self.X - lo), np.abs(self.X - hi))
        d = np.sqrt(np.sum(far ** 2, axis=1))
        return self._cover_from_dist(d)

    def _cover_from_dist(self, d):
        fb, gb = self.bounds.f_bar, self.bounds.g_bar
        rf = d[:, None] * fb[None, :]
        rg = d[:, None, None] * gb[None, :, :]
        flo_all, fhi_all = self.F_lo - rf, self.F_hi + rf
        glo_all, ghi_all = self.G_lo - rg, self.G_hi + rg
        flo, fhi = _meet(flo_all, fhi_all, "F")
        glo, ghi = _meet(glo_all, ghi_all, "G")
        return (IntervalVector(flo, fhi, check=False), IntervalMatrix(glo, ghi, check=False))

    def estimate_g(self, x, theta: float = DEFAULT_THETA) -> np.ndarray:
        return estimate_g(x, self, theta)

    # mutation -----------------------------------------------------------------

    def _append(self, x, CF: IntervalVector, CG: IntervalMatrix, data: DataPoint | None):
        self.X = np.vstack([self.X, np.asarray(x, dtype=float)[None, :]])
        self.F_lo = np.vstack([self.F_lo, CF.lo[None]])
        self.F_hi = np.vstack([self.F_hi, CF.hi[None]])
        self.G_lo = np.concatenate([self.G_lo, CG.lo[None]], axis=0)
        self.G_hi = np.concatenate([self.G_hi, CG.hi[None]], axis=0)
        self.data.append(data)

    def add_entry(self, x, C_F: IntervalVector, C_G: IntervalMatrix) -> None:
        """Insert an externally certified entry (no datapoint attached)."""
        if C_F.shape != (self.n,) or C_G.shape != (self.n, self.m):
            raise DimensionMismatch("certificate shapes do not match the evidence set")
        self._append(np.asarray(x, dtype=float).reshape(-1), C_F, C_G, None)

    def update(self, datapoint: DataPoint) -> EvidenceSet:
        """Incremental mode: ingest one datapoint and re-sweep to the fixpoint."""
        return approximate([datapoint], self, inplace=True)

    # serialization ----------------------------------------------------------

    def to_text(self) -> str:
        """Line format: ``x[0..2n) F_lo F_hi (per k) G_lo G_hi (row-major)``."""
        lines = ["# ddsafe-evidence v1",
                 f"# n={self.n} m={self.m} M={self.prior_magnitude!r} "
                 f"fix_tol={self.fix_tol!r} max_sweeps={self.max_sweeps}",
                 "# f_bar " + " ".join(repr(float(v)) for v in self.bounds.f_bar),
                 "# g_bar " + " ".join(repr(float(v)) for v in self.bounds.g_bar.ravel())]
        for k in range(len(self)):
            vals = list(self.X[k])
            vals += list(np.stack([self.F_lo[k], self.F_hi[k]], axis=-1).ravel())
            vals += list(np.stack([self.G_lo[k], self.G_hi[k]], axis=-1).ravel())
            lines.append(" ".join(repr(float(v)) for v in vals))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> EvidenceSet:
        header: dict[str, str] = {}
        f_bar = g_bar = None
        rows = []
        for raw in text.splitlines():
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("f_bar"):
                    f_bar = [float(v) for v in body.split()[1:]]
                elif body.startswith("g_bar"):
                    g_bar = [float(v) for v in body.split()[1:]]
                elif "=" in body:
                    header.update(kv.split("=", 1) for kv in body.split())
                continue
            rows.append([float(v) for v in line.split()])
        n, m = int(header["n"]), int(header["m"])
        bounds = LipschitzBounds(np.array(f_bar), np.array(g_bar).reshape(n, m))
        width = 2 * n + 2 * n + 2 * n * m
        if not rows or any(len(r) != width for r in rows):
            raise ValueError(f"every evidence line needs {width} numbers")
        arr = np.array(rows)
        ev = cls(bounds, arr[0, :2 * n], float(header["M"]),
                 fix_tol=float(header.get("fix_tol", DEFAULT_FIX_TOL)),
                 max_sweeps=int(header.get("max_sweeps", DEFAULT_MAX_SWEEPS)))
        K = arr.shape[0]
        fpart = arr[:, 2 * n:4 * n].reshape(K, n, 2)
        gpart = arr[:, 4 * n:].reshape(K, n, m, 2)
        ev.X = arr[:, :2 * n].copy()
        ev.F_lo, ev.F_hi = fpart[..., 0].copy(), fpart[..., 1].copy()
        ev.G_lo, ev.G_hi = gpart[..., 0].copy(), gpart[..., 1].copy()
        ev.data = [None] * K
        return ev


# --------------------------------------------------------------------------
# contraction


def contract(d: DataPoint, F_prior: IntervalVector, G_prior: IntervalMatrix,
             order: Sequence[int] | None = None) -> tuple[IntervalVector, IntervalMatrix]:
    """Tighten prior enclosures of ``f(x)`` and ``g(x)`` with one measurement.

    Columns are processed in ``order`` (default ``0..m-1``).
    """
    n, m = G_prior.shape
    if F_prior.shape != (n,) or d.accel.shape != (n,) or d.u.shape != (m,):
        raise DimensionMismatch("datapoint and prior dimensions do not conform")
    flo, fhi, glo, ghi = _contract_arrays(
        d.accel[None], d.u[None], F_prior.lo[None], F_prior.hi[None],
        G_prior.lo[None], G_prior.hi[None], order)
    return (IntervalVector(flo[0], fhi[0], check=False),
            IntervalMatrix(glo[0], ghi[0], check=False))


def _contract_arrays(acc, u, Flo, Fhi, Glo, Ghi, order=None):
    """Batched contraction; leading axis indexes datapoints."""
    B, n, m = Glo.shape
    order = tuple(range(m)) if order is None else tuple(order)
    ucol = u[:, None, :]
    # products G_kl * u_l as intervals (u is a real number)
    plo = np.minimum(Glo * ucol, Ghi * ucol)
    phi = np.maximum(Glo * ucol, Ghi * ucol)
    ylo, yhi = plo.sum(axis=2), phi.sum(axis=2)
    cflo, cfhi = intersect_endpoints(Flo, Fhi, acc - yhi, acc - ylo)
    slo, shi = intersect_endpoints(acc - cfhi, acc - cflo, ylo, yhi)
    cglo, cghi = Glo.copy(), Ghi.copy()
    for pos, l in enumerate(order):
        rest = list(order[pos + 1:])
        rlo = plo[:, :, rest].sum(axis=2) if rest else np.zeros((B, n))
        rhi = phi[:, :, rest].sum(axis=2) if rest else np.zeros((B, n))
        ul = u[:, l][:, None]
        nz = ul != 0.0
        # (s - R) ∩ G_l u_l
        tlo, thi = intersect_endpoints(slo - rhi, shi - rlo, plo[:, :, l], phi[:, :, l])
        with np.errstate(divide="ignore", invalid="ignore"):
            qlo = np.where(ul > 0, tlo / ul, thi / ul)
            qhi = np.where(ul > 0, thi / ul, tlo / ul)
        qlo = np.where(nz, qlo, Glo[:, :, l])
        qhi = np.where(nz, qhi, Ghi[:, :, l])
        # keep the result inside the prior despite round-off in the division
        qlo, qhi = intersect_endpoints(qlo, qhi, Glo[:, :, l], Ghi[:, :, l])
        cglo[:, :, l], cghi[:, :, l] = qlo, qhi
        # s <- (s - C_G u_l) ∩ R
        clo = np.minimum(qlo * ul, qhi * ul)
        chi = np.maximum(qlo * ul, qhi * ul)
        slo, shi = intersect_endpoints(slo - chi, shi - clo, rlo, rhi)
    return cflo, cfhi, cglo, cghi


# --------------------------------------------------------------------------
# fixpoint


def approximate(dataset: Iterable[DataPoint], ev: EvidenceSet, *, inplace: bool = False) -> EvidenceSet:
    """Append ``dataset`` to the evidence and sweep until no endpoint moves.

    Each new datapoint is contracted against the cover computed from the
    evidence gathered so far; afterwards every data-backed entry is
    re-contracted against the cover of the full set, repeatedly, until the
    largest endpoint change is at most ``ev.fix_tol``.
    """
    out = ev if inplace else ev.copy()
    dataset = list(dataset)
    for idx, d in enumerate(dataset):
        if d.x.size != out.X.shape[1] or d.u.size != out.m:
            raise DimensionMismatch(f"datapoint {idx} has the wrong dimensions")
        try:
            F, G = out.cover(d.x)
            CF, CG = contract(d, F, G, out.order)
        except EmptyIntersection as exc:
            exc.context.update(datapoint=idx, t=d.t)
            raise
        out._append(d.x, CF, CG, d)
    _sweep_to_fixpoint(out)
    return out


def _sweep_to_fixpoint(ev: EvidenceSet) -> None:
    rows = np.array([k for k, d in enumerate(ev.data) if d is not None], dtype=int)
    ev.sweeps_last = 0
    if rows.size == 0:
        return
    pts = [ev.data[k] for k in rows]
    acc = np.stack([p.accel for p in pts])
    u = np.stack([p.u for p in pts])
    Xq = ev.X[rows]
    D = np.sqrt(np.sum((ev.X[:, None, :] - Xq[None, :, :]) ** 2, axis=2))  # (K, R)
    rf = D[:, :, None] * ev.bounds.f_bar[None, None, :]
    rg = D[:, :, None, None] * ev.bounds.g_bar[None, None, :, :]
    residual = math.inf
    for sweep in range(1, ev.max_sweeps + 1):
        flo = (ev.F_lo[:, None, :] - rf).max(axis=0)
        fhi = (ev.F_hi[:, None, :] + rf).min(axis=0)
        glo = (ev.G_lo[:, None] - rg).max(axis=0)
        ghi = (ev.G_hi[:, None] + rg).min(axis=0)
        try:
            flo, fhi = intersect_endpoints(flo, fhi, flo, fhi)
            glo, ghi = intersect_endpoints(glo, ghi, glo, ghi)
            cflo, cfhi, cglo, cghi = _contract_arrays(acc, u, flo, fhi, glo, ghi, ev.order)
        except EmptyIntersection as exc:
            bad = int(rows[exc.index[0]]) if exc.index else -1
            exc.context.update(entry=bad, sweep=sweep)
            if bad >= 0 and ev.data[bad] is not None:
                exc.context["t"] = ev.data[bad].t
            raise
        residual = max(
            float(np.max(np.abs(cflo - ev.F_lo[rows]))), float(np.max(np.abs(cfhi - ev.F_hi[rows]))),
            float(np.max(np.abs(cglo - ev.G_lo[rows]))), float(np.max(np.abs(cghi - ev.G_hi[rows]))))
        ev.F_lo[rows], ev.F_hi[rows] = cflo, cfhi
        ev.G_lo[rows], ev.G_hi[rows] = cglo, cghi
        ev.sweeps_last = sweep
        if residual <= ev.fix_tol:
            return
    raise NonTermination(
        f"evidence not invariant after {ev.max_sweeps} sweeps (residual {residual:.3g})",
        residual=residual, sweeps=ev.max_sweeps, evidence=ev)


# --------------------------------------------------------------------------
# point estimate


def cover(x, ev: EvidenceSet) -> tuple[IntervalVector, IntervalMatrix]:
    return ev.cover(x)


def estimate_g(x, ev: EvidenceSet, theta: float = DEFAULT_THETA) -> np.ndarray:
    """``theta * lower + (1 - theta) * upper`` of the cover of ``g`` at ``x``."""
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta must lie in [0, 1], got {theta}")
    _, G = ev.cover(x)
    return theta * G.lo + (1.0 - theta) * G.hi


# --------------------------------------------------------------------------
# one-step reachability


def _as_box(x) -> IntervalVector:
    if isinstance(x, IntervalVector):
        return x
    return IntervalVector.point(np.asarray(x, dtype=float).reshape(-1))


def _field(ev: EvidenceSet, X: IntervalVector, U: IntervalVector) -> IntervalVector:
    n = ev.n
    F, G = ev.cover_box(X) if np.any(X.width() > 0) else ev.cover(X.lo)
    dyn = F + mat_vec(G, U)
    return IntervalVector(np.concatenate([X.lo[n:], dyn.lo]),
                          np.concatenate([X.hi[n:], dyn.hi]), check=False)


def _one_step(X: IntervalVector, U: IntervalVector, dt: float, ev: EvidenceSet):
    n = ev.n
    N = 2 * n
    L = ev.bounds.lifted(U)
    beta = float(np.linalg.norm(L))
    q = math.sqrt(N) * beta * dt
    if q >= 1.0:
        max_dt = 1.0 / (math.sqrt(N) * beta)
        raise StepTooLarge(f"step {dt:g} violates sqrt(2n)*beta*dt < 1 (max admissible dt "
                           f"{max_dt:.6g})", max_dt=max_dt)
    hX = _field(ev, X, U)
    r = dt * hX.inf_norm() / (1.0 - q)
    S = X + IntervalVector(np.full(N, -r), np.full(N, r), check=False)
    hS = _field(ev, S, U)
    Ldyn = L[n:]
    spread = Ldyn * float(np.sum(hS.mag()))
    half = 0.5 * dt * dt
    kin_lo = X.lo[:n] + np.minimum(X.lo[n:] * dt, X.hi[n:] * dt) + hS.lo[n:] * half
    kin_hi = X.hi[:n] + np.maximum(X.lo[n:] * dt, X.hi[n:] * dt) + hS.hi[n:] * half
    dyn_lo = X.lo[n:] + hX.lo[n:] * dt - spread * half
    dyn_hi = X.hi[n:] + hX.hi[n:] * dt + spread * half
    box = IntervalVector(np.concatenate([kin_lo, dyn_lo]), np.concatenate([kin_hi, dyn_hi]),
                         check=False)
    blo, bhi = intersect_endpoints(box.lo, box.hi, S.lo, S.hi)
    box = IntervalVector(blo, bhi, check=False)
    # K = J * (h(X,U) + r * H) with H_k = L_k [-sqrt N, sqrt N]
    rad = r * math.sqrt(N) * L
    v = IntervalVector(hX.lo - rad, hX.hi + rad, check=False)
    kspread = Ldyn * float(np.sum(v.mag()))
    K = IntervalVector(np.concatenate([v.lo[n:], -kspread]), np.concatenate([v.hi[n:], kspread]),
                       check=False)
    return box, S, hX, K


def min_substeps(x, U: IntervalVector, dt: float, ev: EvidenceSet, margin: float = 0.5) -> int:
    """Smallest substep count keeping ``sqrt(2n)*beta*dt/k`` at or below ``margin``."""
    beta = float(np.linalg.norm(ev.bounds.lifted(U)))
    q = math.sqrt(2 * ev.n) * beta * dt
    return max(1, math.ceil(q / margin))


def predict_next_state(x, U: IntervalVector, dt: float, ev: EvidenceSet,
                       substeps: int = 1) -> StateEnclosure:
    """Box containing ``x(t + dt)`` for every input signal valued in ``U``.

    ``x`` may be a point or a box. With ``substeps > 1`` the step is split and
    boxes are chained; ``rough`` is then the hull of the per-substep a priori
    enclosures.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    U = _as_box(U)
    if U.shape != (ev.m,):
        raise DimensionMismatch(f"input box must have length {ev.m}")
    X = _as_box(x)
    h = dt / substeps
    rough = None
    for _ in range(substeps):
        X, S, _, _ = _one_step(X, U, h, ev)
        rough = S if rough is None else rough.hull(S)
    return StateEnclosure(X, rough)


def displacement_bound(x, U: IntervalVector, dt: float, ev: EvidenceSet, substeps: int = 1) -> float:
    """Upper bound on ``||x(t + dt) - x(t)||``."""
    U = _as_box(U)
    X = _as_box(x)
    h = dt / substeps
    total = 0.0
    for _ in range(substeps):
        nxt, _, hX, K = _one_step(X, U, h, ev)
        total += hX.norm2().hi * h + K.norm2().hi * h * h / 2.0
        X = nxt
    return total


def estimation_error_bound(entry: EvidenceEntry, U: IntervalVector, dt: float, ev: EvidenceSet,
                           substeps: int = 1) -> np.ndarray:
    """Bound on ``|g_hat_kl(x_next) - g_kl(x_next)|`` one step after ``entry``.

    ``wd(C_G) + 2 g_bar * D`` where ``D`` bounds the distance travelled; with a
    single substep ``D = ||h(x,U)|| dt + ||K|| dt^2 / 2``.
    """
    D = displacement_bound(entry.x, U, dt, ev, substeps)
    return entry.C_G.width() + 2.0 * ev.bounds.g_bar * D
