"""Reciprocal barriers, the activation switch, and concrete safe sets.

Position barriers are functions of ``x1`` only. Velocity barriers are
functions of the tracking error ``e2 = x2 - x2_ref(x1)``, where ``x2_ref`` is
the backstepping reference built from a position barrier.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .interval import DimensionMismatch


class NonPositiveBarrier(ValueError):
    """A reciprocal barrier was evaluated at ``h <= 0`` (the safe set was left)."""

    def __init__(self, message: str, *, h: float):
        super().__init__(message)
        self.h = h


class NotPositiveDefinite(ValueError):
    pass


# --------------------------------------------------------------------------
# activation switch


@dataclass(frozen=True)
class SwitchFunction:
    """Ramp from 1 (at ``s <= 0``) down to 0 (at ``s >= mu``).

    ``kind="linear"`` uses ``1 - s/mu`` on the ramp; ``"cosine"`` uses
    ``(1 + cos(pi s / mu)) / 2``, which is C1 at both ends.
    """

    mu: float
    kind: str = "linear"

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if self.kind not in ("linear", "cosine"):
            raise ValueError(f"unknown switch kind {self.kind!r}")

    def __call__(self, s: float) -> float:
        return sigma(s, self)

    def derivative(self, s: float) -> float:
        if s <= 0.0 or s >= self.mu:
            return 0.0
        if self.kind == "linear":
            return -1.0 / self.mu
        return -0.5 * math.pi / self.mu * math.sin(math.pi * s / self.mu)


def sigma(s: float, sw: SwitchFunction) -> float:
    if s >= sw.mu:
        return 0.0
    if s <= 0.0:
        return 1.0
    if sw.kind == "linear":
        return 1.0 - s / sw.mu
    return 0.5 * (1.0 + math.cos(math.pi * s / sw.mu))


# --------------------------------------------------------------------------
# reciprocal barriers


@dataclass(frozen=True)
class ReciprocalBarrier:
    """``beta(h)`` blowing up as ``h -> 0+``: ``inverse`` is ``1/h``,
    ``log-ratio`` is ``-ln(h / (1 + h))``."""

    kind: str = "inverse"

    def __post_init__(self):
        if self.kind not in ("inverse", "log-ratio"):
            raise ValueError(f"unknown reciprocal barrier {self.kind!r}")

    def value(self, h: float) -> float:
        return beta_eval(h, self)[0]

    def d1(self, h: float) -> float:
        return beta_eval(h, self)[1]

    def d2(self, h: float) -> float:
        return beta_eval(h, self)[2]


def beta_eval(h: float, b: ReciprocalBarrier) -> tuple[float, float, float]:
    """``(beta, dbeta/dh, d2beta/dh2)`` at ``h > 0``."""
    h = float(h)
    if not h > 0.0:
        raise NonPositiveBarrier(f"barrier value {h:g} is not positive", h=h)
    if b.kind == "inverse":
        return 1.0 / h, -1.0 / h ** 2, 2.0 / h ** 3
    q = h * (1.0 + h)
    return -math.log(h / (1.0 + h)), -1.0 / q, (2.0 * h + 1.0) / q ** 2


# --------------------------------------------------------------------------
# position barriers


@dataclass(frozen=True)
class PositionBarrier:
    """``h(x1) = level - (p - center)^T A (p - center)`` with ``p = x1[selector]``.

    Coordinates outside ``selector`` do not enter ``h``; the set ``{h >= 0}``
    is bounded in the selected coordinates.
    """

    n: int
    selector: tuple
    A: np.ndarray
    center: np.ndarray
    level: float
    description: str = ""

    def __post_init__(self):
        sel = tuple(int(i) for i in self.selector)
        if not sel or len(set(sel)) != len(sel) or min(sel) < 0 or max(sel) >= self.n:
            raise ValueError(f"selector {sel} is not a set of indices below n={self.n}")
        A = np.array(self.A, dtype=float).reshape(len(sel), len(sel))
        c = np.array(self.center, dtype=float).reshape(len(sel))
        if not np.allclose(A, A.T):
            raise NotPositiveDefinite("position barrier matrix must be symmetric")
        if np.linalg.eigvalsh(A).min() <= 0.0:
            raise NotPositiveDefinite("position barrier matrix must be positive definite")
        if not self.level > 0:
            raise ValueError("barrier level must be positive")
        for v in (A, c):
            v.setflags(write=False)
        object.__setattr__(self, "selector", sel)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "level", float(self.level))

    def _d(self, x1):
        x1 = np.asarray(x1, dtype=float)
        if x1.shape[-1] != self.n:
            raise DimensionMismatch(f"expected x1 of length {self.n}, got {x1.shape}")
        return x1[..., list(self.selector)] - self.center

    def value(self, x1) -> float:
        d = self._d(x1)
        return self.level - np.einsum("...i,ij,...j->...", d, self.A, d)

    __call__ = value

    def grad(self, x1) -> np.ndarray:
        d = self._d(x1)
        g = np.zeros(np.shape(x1), dtype=float)
        g[..., list(self.selector)] = -2.0 * d @ self.A
        return g

    def hessian(self, x1) -> np.ndarray:
        H = np.zeros((self.n, self.n))
        idx = np.ix_(self.selector, self.selector)
        H[idx] = -2.0 * self.A
        return H

    def sample_interior(self, rng: np.random.Generator, count: int, spread: float = 0.0) -> np.ndarray:
        """Uniform samples of ``{h > 0}`` in the selected coordinates; other coordinates get
        ``N(0, spread^2)``."""
        k = len(self.selector)
        direction = rng.standard_normal((count, k))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        radius = rng.random(count) ** (1.0 / k)
        L = np.linalg.cholesky(np.linalg.inv(self.A))
        p = self.center + math.sqrt(self.level) * (radius[:, None] * direction) @ L.T
        x1 = spread * rng.standard_normal((count, self.n))
        x1[:, list(self.selector)] = p
        return x1


def make_sphere_barrier(r2: float, selector: Sequence[int], n: int | None = None,
                        center=None) -> PositionBarrier:
    """``h(x1) = r2 - sum_{i in selector} (x1_i - c_i)^2``."""
    if not r2 > 0:
        raise ValueError(f"squared radius must be positive, got {r2}")
    sel = tuple(int(i) for i in selector)
    n = max(sel) + 1 if n is None else n
    c = np.zeros(len(sel)) if center is None else center
    return PositionBarrier(n, sel, np.eye(len(sel)), c, r2,
                           description=f"sphere r2={r2:g} on {list(sel)}")


def make_ellipsoid_barrier(A, selector: Sequence[int], n: int, center=None,
                           level: float = 1.0) -> PositionBarrier:
    sel = tuple(int(i) for i in selector)
    c = np.zeros(len(sel)) if center is None else center
    return PositionBarrier(n, sel, A, c, level, description=f"ellipsoid on {list(sel)}")


# --------------------------------------------------------------------------
# backstepping reference


@dataclass(frozen=True)
class ReferenceVelocity:
    """``x2_ref(x1) = -kappa_x * sigma(h) * beta'(h) * grad h(x1)``."""

    barrier: PositionBarrier
    kappa_x: float
    switch: SwitchFunction
    beta: ReciprocalBarrier = field(default_factory=ReciprocalBarrier)

    def _gain(self, h):
        s = self.switch(h)
        if s == 0.0:
            return 0.0, 0.0
        _, d1, d2 = beta_eval(h, self.beta)
        return s * d1, self.switch.derivative(h) * d1 + s * d2

    def __call__(self, x1) -> np.ndarray:
        h = float(self.barrier.value(x1))
        if not h > 0.0:
            raise NonPositiveBarrier(f"position barrier h={h:g} is not positive", h=h)
        k, _ = self._gain(h)
        return -self.kappa_x * k * self.barrier.grad(x1)

    def jacobian(self, x1) -> np.ndarray:
        """``d x2_ref / d x1`` (n x n)."""
        h = float(self.barrier.value(x1))
        if not h > 0.0:
            raise NonPositiveBarrier(f"position barrier h={h:g} is not positive", h=h)
        k, dk = self._gain(h)
        gh = self.barrier.grad(x1)
        return -self.kappa_x * (dk * np.outer(gh, gh) + k * self.barrier.hessian(x1))


@dataclass(frozen=True)
class ZeroReference:
    """``x2_ref = 0``: the velocity barrier then constrains ``x2`` directly."""

    n: int

    def __call__(self, x1) -> np.ndarray:
        return np.zeros(self.n)

    def jacobian(self, x1) -> np.ndarray:
        return np.zeros((self.n, self.n))


def x2_reference(x1, kappa_x: float, h_spec: PositionBarrier, switch: SwitchFunction,
                 beta: ReciprocalBarrier | None = None) -> np.ndarray:
    return ReferenceVelocity(h_spec, kappa_x, switch, beta or ReciprocalBarrier())(x1)


# --------------------------------------------------------------------------
# velocity barriers


@dataclass(frozen=True)
class EllipsoidBarrier:
    """``h(x) = e^T Q e + b^T e + c`` in the tracking error ``e = x2 - x2_ref(x1)``.

    ``Q`` must be negative definite so ``{h >= 0}`` is a bounded ellipsoid in ``e``.
    """

    Q: np.ndarray
    b: np.ndarray
    c: float
    reference: object
    description: str = ""

    def __post_init__(self):
        Q = np.array(self.Q, dtype=float)
        n = Q.shape[0]
        b = np.array(self.b, dtype=float).reshape(n)
        if Q.shape != (n, n):
            raise DimensionMismatch(f"Q must be square, got {Q.shape}")
        Q = 0.5 * (Q + Q.T)
        if np.linalg.eigvalsh(Q).max() >= 0.0:
            raise NotPositiveDefinite("quadratic part of an ellipsoid barrier must be negative definite")
        Q.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", float(self.c))

    @classmethod
    def from_shape(cls, P, center, scale: float, reference, description: str = "") -> EllipsoidBarrier:
        """``h = scale * (1 - (e - center)^T P (e - center))``."""
        P = np.asarray(P, dtype=float)
        c0 = np.asarray(center, dtype=float)
        return cls(-scale * P, 2.0 * scale * P @ c0, scale * (1.0 - c0 @ P @ c0), reference,
                   description)

    @property
    def n(self) -> int:
        return self.b.size

    @property
    def center(self) -> np.ndarray:
        """Error at which ``h`` peaks."""
        return np.linalg.solve(-2.0 * self.Q, self.b)

    @property
    def peak(self) -> float:
        return float(self.value_e(self.center))

    @property
    def shape_matrix(self) -> np.ndarray:
        """``P`` with ``{h >= 0} = {(e - center)^T P (e - center) <= 1}``."""
        return -self.Q / self.peak

    def error(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        n = self.n
        if x.shape[-1] != 2 * n:
            raise DimensionMismatch(f"expected state of length {2 * n}, got {x.shape}")
        return x[n:] - self.reference(x[:n])

    def value_e(self, e) -> float:
        e = np.asarray(e, dtype=float)
        return np.einsum("...i,ij,...j->...", e, self.Q, e) + e @ self.b + self.c

    def grad_e(self, e) -> np.ndarray:
        return 2.0 * np.asarray(e, dtype=float) @ self.Q + self.b

    def value(self, x) -> float:
        return float(self.value_e(self.error(x)))

    __call__ = value

    def grad_x2(self, x) -> np.ndarray:
        return self.grad_e(self.error(x))

    def grad_x1(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        J = self.reference.jacobian(x[:self.n])
        return -J.T @ self.grad_x2(x)

    def grad(self, x) -> np.ndarray:
        return np.concatenate([self.grad_x1(x), self.grad_x2(x)])


def make_velocity_barrier(bound, reference) -> EllipsoidBarrier:
    """``h_v = c - e^T A e``.

    ``bound`` is either a scalar radius ``R`` (``A = I``, ``c = R^2``) or a
    symmetric positive definite matrix ``A`` (``c = 1``).
    """
    n = reference.n if hasattr(reference, "n") else reference.barrier.n
    if np.ndim(bound) == 0:
        R = float(bound)
        if not R > 0:
            raise NotPositiveDefinite(f"velocity bound radius must be positive, got {R}")
        A, c, desc = np.eye(n), R * R, f"velocity bound |e2| < {R:g}"
    else:
        A = np.asarray(bound, dtype=float)
        if A.shape != (n, n):
            raise DimensionMismatch(f"A_v must be {n}x{n}, got {A.shape}")
        if not np.allclose(A, A.T) or np.linalg.eigvalsh(A).min() <= 0.0:
            raise NotPositiveDefinite("A_v must be symmetric positive definite")
        c, desc = 1.0, "velocity bound e2^T A e2 < 1"
    return EllipsoidBarrier(-A, np.zeros(n), c, reference, desc)


# --------------------------------------------------------------------------
# scenario-time checks


def gradient_floor_in_band(barrier: PositionBarrier, nu: float, rng: np.random.Generator,
                           samples: int = 10_000) -> float:
    """Smallest ``||grad h||`` found on ``{0 < h <= nu}`` by sampling."""
    x1 = barrier.sample_interior(rng, samples)
    h = barrier.value(x1)
    band = (h > 0.0) & (h <= nu)
    if not band.any():
        return math.inf
    return float(np.linalg.norm(barrier.grad(x1[band]), axis=1).min())
