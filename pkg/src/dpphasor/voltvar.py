"""Piecewise-linear volt-var curves for smart inverters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dpphasor.errors import InputError


@dataclass(frozen=True)
class VoltVarCurve:
    """Injection angle as a piecewise-linear function of voltage magnitude.

    ``breakpoints`` is a sequence of ``(|v| p.u., angle rad)`` pairs with
    strictly increasing magnitudes. Outside the breakpoint range the curve is
    held flat. The slope at a breakpoint is taken from the right segment.
    """

    breakpoints: tuple[tuple[float, float], ...]

    def __post_init__(self):
        pts = tuple((float(u), float(a)) for u, a in self.breakpoints)
        if len(pts) < 1:
            raise InputError("volt-var curve needs at least one breakpoint")
        mags = np.array([u for u, _ in pts])
        angles = np.array([a for _, a in pts])
        if np.any(np.diff(mags) <= 0):
            raise InputError("volt-var magnitudes must be strictly increasing")
        if np.any(np.abs(angles) > np.pi / 2 + 1e-12):
            raise InputError("volt-var angles must lie in [-pi/2, pi/2]")
        if not np.all(np.isfinite(mags)) or not np.all(np.isfinite(angles)):
            raise InputError("volt-var breakpoints must be finite")
        object.__setattr__(self, "breakpoints", pts)

    @property
    def magnitudes(self) -> np.ndarray:
        return np.array([u for u, _ in self.breakpoints])

    @property
    def angles(self) -> np.ndarray:
        return np.array([a for _, a in self.breakpoints])

    def slopes(self) -> np.ndarray:
        """Slope of each interior segment (length ``len(breakpoints) - 1``)."""
        return np.diff(self.angles) / np.diff(self.magnitudes)

    def angle(self, u):
        return np.interp(u, self.magnitudes, self.angles)

    def slope(self, u):
        u = np.asarray(u, dtype=float)
        x = self.magnitudes
        s = np.concatenate([[0.0], self.slopes(), [0.0]])
        # right-continuous segment index: breakpoint x[i] belongs to segment i
        idx = np.searchsorted(x, u, side="right")
        return s[idx]

    def max_abs_slope(self, lo: float = -np.inf, hi: float = np.inf) -> float:
        """Largest |slope| over segments intersecting ``[lo, hi]``."""
        x = self.magnitudes
        s = self.slopes()
        best = 0.0
        for i, si in enumerate(s):
            if x[i + 1] > lo and x[i] < hi:
                best = max(best, abs(si))
        return best

    def to_list(self) -> list[list[float]]:
        return [[u, a] for u, a in self.breakpoints]


def flat_curve(angle: float = 0.0) -> VoltVarCurve:
    return VoltVarCurve(((1.0, angle),))
