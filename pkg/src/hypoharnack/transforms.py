"""Convex scalar transforms Phi with closed-form Phi, Phi' and Phi''."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def bump(s):
    """Mollifier profile (15/16)(1 - s^2)^2 on [-1, 1]; unit mass."""
    s = np.asarray(s, dtype=float)
    return np.where(np.abs(s) < 1, 15.0 / 16.0 * (1 - s**2) ** 2, 0.0)


def bump_cdf(s):
    s = np.clip(np.asarray(s, dtype=float), -1.0, 1.0)
    return np.clip(15.0 / 16.0 * (s - 2 * s**3 / 3 + s**5 / 5) + 0.5, 0.0, 1.0)


def _ramp(s):
    """Integral of bump_cdf from -1: the mollified positive part at unit width."""
    s = np.asarray(s, dtype=float)
    sc = np.clip(s, -1.0, 1.0)
    inner = 15.0 / 16.0 * (sc**2 / 2 - sc**4 / 6 + sc**6 / 30) + sc / 2 + 5.0 / 32.0
    return np.where(s <= -1, 0.0, np.where(s >= 1, s, np.maximum(inner, 0.0)))


@dataclass(frozen=True)
class SmoothedTruncation:
    """K_{eps,h} = rho_eps * (z - h)_+ for the polynomial mollifier above."""

    eps: float
    h: float = 0.0

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")

    def eval(self, z):
        s = (np.asarray(z, dtype=float) - self.h) / self.eps
        return self.eps * _ramp(s), bump_cdf(s), bump(s) / self.eps

    def __call__(self, z):
        return self.eps * _ramp((np.asarray(z, dtype=float) - self.h) / self.eps)

    @property
    def peak_curvature(self) -> float:
        return 15.0 / (16.0 * self.eps)

    @property
    def max_error(self) -> float:
        """sup |K - (z - h)_+|, attained at z = h."""
        return 5.0 * self.eps / 32.0


@dataclass(frozen=True)
class LogTransform:
    """G_delta(z) = G((z + delta)/(1 + delta)) with G(y) = (-log y + y - 1) for y <= 1, else 0."""

    delta: float

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")

    def eval(self, z):
        z = np.asarray(z, dtype=float)
        if np.any(z < 0):
            raise ValueError("log transform is only evaluated at z >= 0")
        k = 1.0 / (1.0 + self.delta)
        y = (z + self.delta) * k
        low = y < 1
        ys = np.where(low, y, 1.0)
        G = np.where(low, -np.log(ys) + ys - 1, 0.0)
        G1 = np.where(low, 1 - 1 / ys, 0.0) * k
        G2 = np.where(low, 1 / ys**2, 0.0) * k**2
        return G, G1, G2

    def __call__(self, z):
        return self.eval(z)[0]

    @property
    def at_zero(self) -> float:
        y = self.delta / (1 + self.delta)
        return -math.log(y) + y - 1

    def level_for(self, value: float, iterations: int = 60) -> float:
        """The z in (0, 1) with G_delta(z) = value, by bisection (G_delta is decreasing there)."""
        if not 0 < value < self.at_zero:
            raise ValueError("value must lie strictly between 0 and G_delta(0)")
        lo, hi = 0.0, 1.0
        for _ in range(iterations):
            mid = 0.5 * (lo + hi)
            if float(self(mid)) > value:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)


def log_profile(y):
    """The unshifted G(y) with derivatives, for y in (0, 1]."""
    y = np.asarray(y, dtype=float)
    return -np.log(y) + y - 1, 1 - 1 / y, 1 / y**2


@dataclass(frozen=True)
class SmoothedSquare:
    """K_{eps,0}(z)^2: a C^2 convex nondecreasing version of z^2 1_{z>0}."""

    eps: float

    def eval(self, z):
        K, K1, K2 = SmoothedTruncation(self.eps, 0.0).eval(z)
        return K**2, 2 * K * K1, 2 * K1**2 + 2 * K * K2

    def __call__(self, z):
        return self.eval(z)[0]


@dataclass(frozen=True)
class Identity:
    def eval(self, z):
        z = np.asarray(z, dtype=float)
        return z.copy(), np.ones_like(z), np.zeros_like(z)

    def __call__(self, z):
        return np.asarray(z, dtype=float).copy()
