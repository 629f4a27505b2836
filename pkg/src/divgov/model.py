"""Watt-governor model in Lurie form.

State x = (x1, x2, x3): governor coordinate, its velocity, and the drive
variable. Off the switching surface x2 = 0 the dynamics are

    x1' = x2
    x2' = -A x1 - B x2 + x3 + 0.5 phi
    x3' = -x1 - C x3

with the dry-friction relay phi = -sign(x2) (friction opposes motion; see
:func:`relay`). ``G`` carries the friction gain ``k`` (0.5 by default).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MARGINAL_TOL = 1e-10
MEMBERSHIP_TOL = 1e-9


@dataclass(frozen=True)
class GovernorParams:
    A: float
    B: float
    C: float = 0.0
    k: float = 0.5

    def __post_init__(self):
        for name in ("A", "B", "C", "k"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.A <= 0 or self.B <= 0:
            raise ValueError(f"A and B must be positive, got A={self.A}, B={self.B}")
        if self.C < 0 or self.k < 0:
            raise ValueError(f"C and k must be non-negative, got C={self.C}, k={self.k}")

    def as_dict(self):
        return {"A": self.A, "B": self.B, "C": self.C, "k": self.k}


@dataclass(frozen=True)
class LurieSystem:
    """x' = H x + G phi(L x)."""

    params: GovernorParams
    H: np.ndarray
    G: np.ndarray
    L: np.ndarray  # row functional, sigma = L @ x = x2

    @property
    def A(self):
        return self.params.A

    @property
    def B(self):
        return self.params.B

    @property
    def C(self):
        return self.params.C

    @property
    def k(self):
        return self.params.k

    def sigma(self, x):
        return float(self.L @ np.asarray(x, dtype=float))


def build_system(params: GovernorParams) -> LurieSystem:
    A, B, C, k = params.A, params.B, params.C, params.k
    if A <= 0 or B <= 0:
        raise ValueError("A and B must be positive")
    H = np.array([[0.0, 1.0, 0.0], [-A, -B, 1.0], [-1.0, 0.0, -C]])
    G = np.array([0.0, k, 0.0])
    L = np.array([0.0, 1.0, 0.0])
    for arr in (H, G, L):
        arr.flags.writeable = False
    return LurieSystem(params, H, G, L)


def relay(x2: float) -> float:
    """Dry-friction relay value off the surface: -sign(x2).

    With ``G = (0, k, 0)`` this gives x2' = ... - k sign(x2), i.e. friction
    opposing the velocity, which is what makes the band
    ``|A x1 - x3| <= k`` on x2 = 0 attracting.
    """
    if x2 > 0:
        return -1.0
    if x2 < 0:
        return 1.0
    return 0.0


def vector_field(sys: LurieSystem, x, phi: float) -> np.ndarray:
    """Right-hand side ``H x + G phi`` for a given relay value ``phi``."""
    if abs(phi) > 1.0 + 1e-12:
        raise ValueError(f"relay value must lie in [-1, 1], got {phi}")
    x1, x2, x3 = (float(v) for v in x)
    A, B, C, k = sys.A, sys.B, sys.C, sys.k
    return np.array([x2, -A * x1 - B * x2 + x3 + k * phi, -x1 - C * x3])


@dataclass(frozen=True)
class StationarySet:
    """Segment of Filippov equilibria {x2 = 0, x1 = -C x3, |x3| <= k/(1+AC)}."""

    params: GovernorParams

    @property
    def half_length(self) -> float:
        p = self.params
        return p.k / (1.0 + p.A * p.C)

    def endpoints(self) -> np.ndarray:
        h = self.half_length
        C = self.params.C
        return np.array([[C * h, 0.0, -h], [-C * h, 0.0, h]])

    def midpoint(self) -> np.ndarray:
        return np.zeros(3)

    def contains(self, x, tol: float = MEMBERSHIP_TOL) -> bool:
        x1, x2, x3 = (float(v) for v in x)
        p = self.params
        return (
            abs(x2) <= tol
            and abs(x1 + p.C * x3) <= tol
            and abs(p.A * x1 - x3) <= p.k + tol
        )

    def distance(self, x) -> float:
        """Euclidean distance from ``x`` to the segment."""
        x = np.asarray(x, dtype=float)
        a, b = self.endpoints()
        d = b - a
        n2 = float(d @ d)
        if n2 == 0.0:
            return float(np.linalg.norm(x - a))
        s = min(1.0, max(0.0, float((x - a) @ d) / n2))
        return float(np.linalg.norm(x - (a + s * d)))

    def sample(self, n: int) -> np.ndarray:
        a, b = self.endpoints()
        s = np.linspace(0.0, 1.0, n)[:, None]
        return a + s * (b - a)

    def describe(self) -> str:
        p = self.params
        return f"{{x2=0, x1=-{p.C:g}*x3, |x3| <= {self.half_length:g}}}"


def stationary_set(params: GovernorParams) -> StationarySet:
    return StationarySet(params)


def characteristic_coefficients(params: GovernorParams):
    """Coefficients (1, a2, a1, a0) of det(lambda I - H)."""
    A, B, C = params.A, params.B, params.C
    return (1.0, B + C, A + B * C, A * C + 1.0)


def cubic_roots(a2: float, a1: float, a0: float) -> np.ndarray:
    """Roots of l^3 + a2 l^2 + a1 l + a0, closed form polished by Newton."""
    # depressed cubic t^3 + p t + q with l = t - a2/3
    p = a1 - a2 * a2 / 3.0
    q = 2.0 * a2**3 / 27.0 - a2 * a1 / 3.0 + a0
    disc = (q / 2.0) ** 2 + (p / 3.0) ** 3
    shift = -a2 / 3.0
    if disc > 0:
        sq = math.sqrt(disc)
        u = math.copysign(abs(-q / 2.0 + sq) ** (1 / 3), -q / 2.0 + sq)
        v = math.copysign(abs(-q / 2.0 - sq) ** (1 / 3), -q / 2.0 - sq)
        w = complex(-0.5, math.sqrt(3) / 2.0)
        roots = [u + v, u * w + v * w.conjugate(), u * w.conjugate() + v * w]
    else:
        r = math.sqrt(max(-p / 3.0, 0.0))
        if r == 0.0:
            roots = [0.0, 0.0, 0.0]
        else:
            arg = max(-1.0, min(1.0, (-q / 2.0) / r**3))
            th = math.acos(arg)
            roots = [2 * r * math.cos((th - 2 * math.pi * j) / 3.0) for j in range(3)]
    out = []
    for z in roots:
        z = complex(z) + shift
        for _ in range(6):
            f = ((z + a2) * z + a1) * z + a0
            df = (3 * z + 2 * a2) * z + a1
            if df == 0:
                break
            dz = f / df
            z -= dz
            if abs(dz) <= 1e-16 * max(1.0, abs(z)):
                break
        out.append(z)
    out = np.array(out, dtype=complex)
    # tidy conjugate pair / tiny imaginary parts
    out.imag[np.abs(out.imag) < 1e-13 * max(1.0, np.max(np.abs(out)))] = 0.0
    return out[np.lexsort((out.imag, out.real))]


@dataclass(frozen=True)
class HurwitzVerdict:
    verdict: str  # "stable" | "marginal" | "unstable"
    spectrum: np.ndarray
    routh_margin: float  # a2*a1 - a0


def hurwitz_test(params: GovernorParams, tol: float = MARGINAL_TOL) -> HurwitzVerdict:
    """Routh-Hurwitz verdict for the linear part H.

    The cubic has positive coefficients for admissible parameters, so H is
    Hurwitz iff (B+C)(A+BC) > AC+1. For C = 0 this reduces to AB > 1.
    """
    _, a2, a1, a0 = characteristic_coefficients(params)
    margin = a2 * a1 - a0
    if abs(margin) <= tol:
        verdict = "marginal"
    elif margin > 0:
        verdict = "stable"
    else:
        verdict = "unstable"
    return HurwitzVerdict(verdict, cubic_roots(a2, a1, a0), margin)
