"""Closed real intervals and their componentwise vector/matrix aggregates.

Endpoints are plain floats (no directed rounding). Containment checks and
intersections accept an absolute slack of ``TOL`` scaled by the endpoint
magnitude, so evidence that is consistent up to round-off does not trip
an ``EmptyIntersection``.

Scalar work goes through :class:`Interval`; anything on the hot path of the
estimator uses :class:`IntervalArray` (numpy-backed ``lo``/``hi`` arrays), with
:class:`IntervalVector` and :class:`IntervalMatrix` as shape-checked views.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

TOL = 1e-9

Real = Union[int, float]


class EmptyIntersection(ValueError):
    """Two intervals that should share a point do not.

    Raised where evidence contradicts itself (e.g. data that violates the
    declared Lipschitz bounds). ``index`` is the first offending array index
    (``()`` for scalars); callers may attach more context via ``context``.
    """

    def __init__(self, message: str, *, index: tuple = (), lo: float = math.nan,
                 hi: float = math.nan, context: dict | None = None):
        super().__init__(message)
        self.index = index
        self.lo = lo
        self.hi = hi
        self.context = dict(context or {})

    def __str__(self) -> str:
        base = super().__str__()
        if self.context:
            extra = ", ".join(f"{k}={v}" for k, v in self.context.items())
            return f"{base} ({extra})"
        return base


class DimensionMismatch(ValueError):
    pass


def _slack(lo, hi):
    return TOL * np.maximum(1.0, np.maximum(np.abs(lo), np.abs(hi)))


@dataclass(frozen=True)
class Interval:
    """A closed interval ``[lo, hi]`` with ``lo <= hi``."""

    lo: float
    hi: float

    def __post_init__(self):
        lo, hi = float(self.lo), float(self.hi)
        if math.isnan(lo) or math.isnan(hi):
            raise ValueError("interval endpoints must not be NaN")
        if lo > hi:
            raise ValueError(f"invalid interval [{lo}, {hi}]: lo > hi")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def point(cls, x: Real) -> Interval:
        return cls(x, x)

    @classmethod
    def symmetric(cls, r: Real) -> Interval:
        return cls(-abs(r), abs(r))

    def __iter__(self):
        yield self.lo
        yield self.hi

    def __add__(self, other) -> Interval:
        o = _as_interval(other)
        return Interval(self.lo + o.lo, self.hi + o.hi)

    __radd__ = __add__

    def __neg__(self) -> Interval:
        return Interval(-self.hi, -self.lo)

    def __sub__(self, other) -> Interval:
        o = _as_interval(other)
        return Interval(self.lo - o.hi, self.hi - o.lo)

    def __rsub__(self, other) -> Interval:
        return _as_interval(other) - self

    def __mul__(self, other) -> Interval:
        o = _as_interval(other)
        p = (self.lo * o.lo, self.lo * o.hi, self.hi * o.lo, self.hi * o.hi)
        return Interval(min(p), max(p))

    __rmul__ = __mul__

    def scale(self, c: Real) -> Interval:
        c = float(c)
        a, b = self.lo * c, self.hi * c
        return Interval(min(a, b), max(a, b))

    @property
    def width(self) -> float:
        return self.hi - self.lo

    @property
    def mid(self) -> float:
        return 0.5 * (self.lo + self.hi)

    @property
    def mag(self) -> float:
        return max(abs(self.lo), abs(self.hi))

    def contains(self, x: Real, tol: float = TOL) -> bool:
        s = tol * max(1.0, abs(self.lo), abs(self.hi))
        return self.lo - s <= x <= self.hi + s

    def issubset(self, other: Interval, tol: float = TOL) -> bool:
        return other.contains(self.lo, tol) and other.contains(self.hi, tol)

    def intersect(self, other: Interval) -> Interval:
        return intersect(self, other)

    def hull(self, other: Interval) -> Interval:
        return Interval(min(self.lo, other.lo), max(self.hi, other.hi))

    def __repr__(self) -> str:
        return f"[{self.lo:.6g}, {self.hi:.6g}]"


def _as_interval(x) -> Interval:
    if isinstance(x, Interval):
        return x
    return Interval(x, x)


def add(a: Interval, b: Interval) -> Interval:
    return a + b


def mul(a: Interval, b: Interval) -> Interval:
    return a * b


def intersect(a: Interval, b: Interval) -> Interval:
    lo, hi = max(a.lo, b.lo), min(a.hi, b.hi)
    if lo > hi:
        if lo - hi > TOL * max(1.0, abs(lo), abs(hi)):
            raise EmptyIntersection(f"{a!r} and {b!r} are disjoint", lo=lo, hi=hi)
        lo = hi = 0.5 * (lo + hi)
    return Interval(lo, hi)


def width(a: Interval) -> float:
    return a.width


def mag(a: Interval) -> float:
    """Magnitude ``max(|lo|, |hi|)``."""
    return a.mag


abs_ = mag


def inf_norm(v: IntervalVector | Sequence[Interval]) -> float:
    if isinstance(v, IntervalArray):
        return v.inf_norm()
    return max((iv.mag for iv in v), default=0.0)


class IntervalArray:
    """An array of intervals stored as two float arrays of equal shape."""

    __slots__ = ("lo", "hi")
    _ndim: int | None = None

    def __init__(self, lo, hi=None, *, check: bool = True):
        lo = np.array(lo, dtype=float)
        hi = lo.copy() if hi is None else np.array(hi, dtype=float)
        if lo.shape != hi.shape:
            raise DimensionMismatch(f"endpoint shapes differ: {lo.shape} vs {hi.shape}")
        if self._ndim is not None and lo.ndim != self._ndim:
            raise DimensionMismatch(
                f"{type(self).__name__} needs ndim={self._ndim}, got shape {lo.shape}")
        if check:
            if np.isnan(lo).any() or np.isnan(hi).any():
                raise ValueError("interval endpoints must not be NaN")
            bad = lo > hi
            if bad.any():
                idx = tuple(int(i) for i in np.argwhere(bad)[0])
                raise ValueError(f"invalid interval at {idx}: [{lo[idx]}, {hi[idx]}]")
        self.lo = lo
        self.hi = hi

    # construction helpers -------------------------------------------------

    @classmethod
    def point(cls, x) -> IntervalArray:
        x = np.asarray(x, dtype=float)
        return _wrap(x.copy(), x.copy())

    @classmethod
    def from_intervals(cls, items) -> IntervalArray:
        arr = np.asarray([[iv.lo, iv.hi] for iv in _flatten(items)], dtype=float)
        shape = _nested_shape(items)
        return _wrap(arr[:, 0].reshape(shape), arr[:, 1].reshape(shape))

    @classmethod
    def hull_of(cls, points) -> IntervalArray:
        p = np.asarray(points, dtype=float)
        return _wrap(p.min(axis=0), p.max(axis=0))

    @classmethod
    def full(cls, shape, lo: float, hi: float) -> IntervalArray:
        return _wrap(np.full(shape, float(lo)), np.full(shape, float(hi)))

    # container protocol ---------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.lo.shape

    @property
    def ndim(self) -> int:
        return self.lo.ndim

    def __len__(self) -> int:
        return len(self.lo)

    def __getitem__(self, idx):
        lo, hi = self.lo[idx], self.hi[idx]
        if np.ndim(lo) == 0:
            return Interval(float(lo), float(hi))
        return _wrap(lo.copy(), hi.copy())

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def copy(self) -> IntervalArray:
        return _wrap(self.lo.copy(), self.hi.copy())

    def tolist(self) -> list:
        return np.stack([self.lo, self.hi], axis=-1).tolist()

    # arithmetic -----------------------------------------------------------

    def __add__(self, other) -> IntervalArray:
        olo, ohi = _endpoints(other)
        return _wrap(self.lo + olo, self.hi + ohi)

    __radd__ = __add__

    def __neg__(self) -> IntervalArray:
        return _wrap(-self.hi, -self.lo)

    def __sub__(self, other) -> IntervalArray:
        olo, ohi = _endpoints(other)
        return _wrap(self.lo - ohi, self.hi - olo)

    def __rsub__(self, other) -> IntervalArray:
        olo, ohi = _endpoints(other)
        return _wrap(olo - self.hi, ohi - self.lo)

    def __mul__(self, other) -> IntervalArray:
        olo, ohi = _endpoints(other)
        lo, hi = _mul_endpoints(self.lo, self.hi, olo, ohi)
        return _wrap(lo, hi)

    __rmul__ = __mul__

    def intersect(self, other) -> IntervalArray:
        olo, ohi = _endpoints(other)
        lo, hi = intersect_endpoints(self.lo, self.hi, olo, ohi)
        return _wrap(lo, hi)

    def hull(self, other) -> IntervalArray:
        olo, ohi = _endpoints(other)
        return _wrap(np.minimum(self.lo, olo), np.maximum(self.hi, ohi))

    # measures -------------------------------------------------------------

    def width(self) -> np.ndarray:
        return self.hi - self.lo

    def mid(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def mag(self) -> np.ndarray:
        return np.maximum(np.abs(self.lo), np.abs(self.hi))

    def mig(self) -> np.ndarray:
        """Smallest absolute value attained in each entry."""
        straddle = (self.lo <= 0.0) & (self.hi >= 0.0)
        return np.where(straddle, 0.0, np.minimum(np.abs(self.lo), np.abs(self.hi)))

    def inf_norm(self) -> float:
        return float(self.mag().max(initial=0.0))

    def norm2(self) -> Interval:
        """Exact range of the Euclidean norm over the box."""
        return Interval(float(np.sqrt(np.sum(self.mig() ** 2))),
                        float(np.sqrt(np.sum(self.mag() ** 2))))

    def contains(self, points, tol: float = TOL) -> bool:
        p = np.asarray(points, dtype=float)
        s = tol * np.maximum(1.0, self.mag())
        return bool(np.all((self.lo - s <= p) & (p <= self.hi + s)))

    def issubset(self, other, tol: float = TOL) -> bool:
        olo, ohi = _endpoints(other)
        s = tol * np.maximum(1.0, np.maximum(np.abs(olo), np.abs(ohi)))
        return bool(np.all((olo - s <= self.lo) & (self.hi <= ohi + s)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, IntervalArray):
            return NotImplemented
        return (self.shape == other.shape and np.array_equal(self.lo, other.lo)
                and np.array_equal(self.hi, other.hi))

    __hash__ = None

    def __repr__(self) -> str:
        body = np.array2string(np.stack([self.lo, self.hi], axis=-1), precision=6,
                               separator=", ")
        return f"{type(self).__name__}({body})"


class IntervalVector(IntervalArray):
    __slots__ = ()
    _ndim = 1


class IntervalMatrix(IntervalArray):
    __slots__ = ()
    _ndim = 2


def _wrap(lo, hi) -> IntervalArray:
    lo = np.asarray(lo, dtype=float)
    cls = {1: IntervalVector, 2: IntervalMatrix}.get(lo.ndim, IntervalArray)
    return cls(lo, hi, check=False)


def _endpoints(x):
    if isinstance(x, IntervalArray):
        return x.lo, x.hi
    if isinstance(x, Interval):
        return x.lo, x.hi
    a = np.asarray(x, dtype=float)
    return a, a


def _mul_endpoints(alo, ahi, blo, bhi):
    p1, p2, p3, p4 = alo * blo, alo * bhi, ahi * blo, ahi * bhi
    lo = np.minimum(np.minimum(p1, p2), np.minimum(p3, p4))
    hi = np.maximum(np.maximum(p1, p2), np.maximum(p3, p4))
    return lo, hi


def intersect_endpoints(alo, ahi, blo, bhi):
    """Intersect endpoint arrays, collapsing round-off gaps; raise on real ones."""
    lo = np.maximum(alo, blo)
    hi = np.minimum(ahi, bhi)
    gap = lo - hi
    if np.any(gap > 0.0):
        bad = gap > _slack(lo, hi)
        if np.any(bad):
            idx = tuple(int(i) for i in np.argwhere(np.atleast_1d(bad))[0])
            if np.ndim(bad) == 0:
                idx = ()
            raise EmptyIntersection(
                f"empty intersection at index {idx}",
                index=idx, lo=float(np.asarray(lo)[idx]), hi=float(np.asarray(hi)[idx]))
        mid = 0.5 * (lo + hi)
        tiny = gap > 0.0
        lo = np.where(tiny, mid, lo)
        hi = np.where(tiny, mid, hi)
    return lo, hi


def mat_vec(G: IntervalMatrix, u) -> IntervalVector:
    """``G @ u`` for a real or interval vector ``u``."""
    if G.ndim != 2:
        raise DimensionMismatch(f"expected an interval matrix, got shape {G.shape}")
    ulo, uhi = _endpoints(u)
    ulo, uhi = np.atleast_1d(ulo), np.atleast_1d(uhi)
    if ulo.shape != (G.shape[1],):
        raise DimensionMismatch(f"cannot multiply {G.shape} matrix by vector of shape {ulo.shape}")
    lo, hi = _mul_endpoints(G.lo, G.hi, ulo[None, :], uhi[None, :])
    return IntervalVector(lo.sum(axis=1), hi.sum(axis=1), check=False)


def _flatten(items) -> Iterable[Interval]:
    if isinstance(items, Interval):
        yield items
        return
    for it in items:
        yield from _flatten(it)


def _nested_shape(items) -> tuple:
    shape = []
    cur = items
    while not isinstance(cur, Interval):
        shape.append(len(cur))
        cur = cur[0]
    return tuple(shape)
