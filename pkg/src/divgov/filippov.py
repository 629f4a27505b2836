"""Event-driven integration of the governor in the Filippov sense.

Off the surface x2 = 0 each half-space is a smooth linear field, integrated
with an adaptive Dormand-Prince 5(4) pair. Crossings of x2 = 0 are located by
bisection on the step length (re-stepping from the last accepted point), then
either continued transversally or switched into sliding motion, where the
equivalent relay value keeps x2' = 0:

    x1' = 0,  x2' = 0,  x3' = -x1 - C x3,   phi_eq = (A x1 - x3) / k.

Sliding ends when |A x1 - x3| reaches k.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from divgov.model import LurieSystem

ABOVE = 1
BELOW = -1
SLIDING = 0
MODE_NAMES = {ABOVE: "above", BELOW: "below", SLIDING: "sliding"}

# Dormand-Prince 5(4) tableau
_C2, _C3, _C4, _C5 = 1 / 5, 3 / 10, 4 / 5, 8 / 9
_A21 = 1 / 5
_A31, _A32 = 3 / 40, 9 / 40
_A41, _A42, _A43 = 44 / 45, -56 / 15, 32 / 9
_A51, _A52, _A53, _A54 = 19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729
_A61, _A62, _A63, _A64, _A65 = 9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656
_B1, _B3, _B4, _B5, _B6 = 35 / 384, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84
# b - b_hat
_E1, _E3, _E4, _E5, _E6, _E7 = (
    71 / 57600,
    -71 / 16695,
    71 / 1920,
    -17253 / 339200,
    22 / 525,
    -1 / 40,
)

BISECTION_CAP = 60


@dataclass(frozen=True)
class IntegratorConfig:
    rel_tol: float = 1e-8
    abs_tol: float = 1e-10
    event_tol: float = 1e-10
    max_time: float = 500.0
    max_steps: int = 2_000_000
    escape_radius: float = 1e8
    initial_step: float = 1e-3

    def __post_init__(self):
        if min(self.rel_tol, self.abs_tol, self.event_tol) <= 0:
            raise ValueError("tolerances must be positive")
        if not self.max_time > 0:
            raise ValueError("max_time must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


@dataclass(frozen=True)
class Event:
    time: float
    kind: str  # crossing | sliding-entry | sliding-exit | termination
    state: tuple
    direction: int = 0  # crossings and sliding exits: +1 upward (x2 becomes > 0), -1 downward


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    modes: np.ndarray
    events: list = field(default_factory=list)
    status: str = "complete"  # complete | budget | diverged | stopped
    escape_time: Optional[float] = None

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    @property
    def final_mode(self) -> int:
        return int(self.modes[-1])

    def crossings(self, direction: int = 1):
        return [e for e in self.events if e.kind == "crossing" and e.direction == direction]

    def departures(self, direction: int = 1):
        """Events where the motion leaves x2 = 0 towards ``sign(x2) = direction``.

        Transversal crossings and sliding exits both count; this is the
        Poincare section used for cycle detection.
        """
        return [
            e
            for e in self.events
            if e.kind in ("crossing", "sliding-exit") and e.direction == direction
        ]

    def mode_labels(self):
        return [MODE_NAMES[int(m)] for m in self.modes]

    def sliding_mask(self) -> np.ndarray:
        return self.modes == SLIDING


def sliding_dynamics(sys: LurieSystem, x, event_tol: float = 1e-10):
    """Sliding vector field and equivalent relay value at ``x``.

    Returns ``(rhs, phi_eq)``. Raises ``ValueError`` if ``x`` is not on the
    attracting band of the surface, i.e. the motion there is a transversal
    crossing rather than sliding.
    """
    x1, x2, x3 = (float(v) for v in x)
    A, C, k = sys.A, sys.C, sys.k
    if abs(x2) > event_tol:
        raise ValueError(f"not on the switching surface: x2={x2}")
    s = A * x1 - x3
    if abs(s) > k:
        raise ValueError(f"|A x1 - x3| = {abs(s)} > k = {k}: transversal crossing, no sliding")
    phi_eq = s / k if k > 0 else 0.0
    phi_eq = max(-1.0, min(1.0, phi_eq))
    return np.array([0.0, 0.0, -x1 - C * x3]), phi_eq


def _rhs_factory(sys: LurieSystem):
    A, B, C, k = sys.A, sys.B, sys.C, sys.k

    def rhs(x1, x2, x3, mode):
        if mode == SLIDING:
            return 0.0, 0.0, -x1 - C * x3
        # relay phi = -mode
        return x2, -A * x1 - B * x2 + x3 - k * mode, -x1 - C * x3

    return rhs


def _dp_step(rhs, x, h, mode, rtol, atol):
    x1, x2, x3 = x
    k1 = rhs(x1, x2, x3, mode)
    k2 = rhs(*(x[i] + h * _A21 * k1[i] for i in range(3)), mode)
    k3 = rhs(*(x[i] + h * (_A31 * k1[i] + _A32 * k2[i]) for i in range(3)), mode)
    k4 = rhs(*(x[i] + h * (_A41 * k1[i] + _A42 * k2[i] + _A43 * k3[i]) for i in range(3)), mode)
    k5 = rhs(
        *(x[i] + h * (_A51 * k1[i] + _A52 * k2[i] + _A53 * k3[i] + _A54 * k4[i]) for i in range(3)),
        mode,
    )
    k6 = rhs(
        *(
            x[i] + h * (_A61 * k1[i] + _A62 * k2[i] + _A63 * k3[i] + _A64 * k4[i] + _A65 * k5[i])
            for i in range(3)
        ),
        mode,
    )
    y = tuple(
        x[i] + h * (_B1 * k1[i] + _B3 * k3[i] + _B4 * k4[i] + _B5 * k5[i] + _B6 * k6[i])
        for i in range(3)
    )
    k7 = rhs(*y, mode)
    acc = 0.0
    for i in range(3):
        e = h * (
            _E1 * k1[i] + _E3 * k3[i] + _E4 * k4[i] + _E5 * k5[i] + _E6 * k6[i] + _E7 * k7[i]
        )
        sc = atol + rtol * max(abs(x[i]), abs(y[i]))
        acc += (e / sc) ** 2
    return y, math.sqrt(acc / 3.0)


def _classify_on_surface(sys, x1, x3):
    s = x3 - sys.A * x1
    if abs(s) <= sys.k:
        return SLIDING
    return ABOVE if s > 0 else BELOW


def integrate(
    sys: LurieSystem,
    x0,
    cfg: IntegratorConfig = IntegratorConfig(),
    stop: Optional[Callable[[float, np.ndarray, int], bool]] = None,
) -> Trajectory:
    """Integrate from ``x0`` over ``[0, cfg.max_time]``.

    ``stop(t, x, mode)`` is checked after every accepted step; returning True
    ends the run with status ``"stopped"``.
    """
    x = tuple(float(v) for v in x0)
    if not all(math.isfinite(v) for v in x):
        raise ValueError("initial state must be finite")
    rhs = _rhs_factory(sys)
    A, k = sys.A, sys.k
    rtol, atol, etol = cfg.rel_tol, cfg.abs_tol, cfg.event_tol
    T = cfg.max_time

    if abs(x[1]) <= etol:
        x = (x[0], 0.0, x[2])
        mode = _classify_on_surface(sys, x[0], x[2])
    else:
        mode = ABOVE if x[1] > 0 else BELOW

    times, states, modes, events = [0.0], [x], [mode], []
    if mode == SLIDING:
        events.append(Event(0.0, "sliding-entry", x))
    t = 0.0
    h = min(cfg.initial_step, T)
    steps = 0
    last_exit = -math.inf
    status = "complete"
    escape_time = None

    def crossed(y, m):
        if m == SLIDING:
            return abs(A * y[0] - y[2]) > k
        return y[1] * m <= 0.0

    while t < T:
        if steps >= cfg.max_steps:
            status = "budget"
            break
        steps += 1
        h = min(h, T - t)
        y, err = _dp_step(rhs, x, h, mode, rtol, atol)
        if not (err <= 1.0):
            if not math.isfinite(err):
                if not all(math.isfinite(v) for v in y):
                    h *= 0.1
                    if h < 1e-14 * max(1.0, t):
                        status = "diverged"
                        escape_time = t
                        break
                    continue
            h *= max(0.2, 0.9 * err ** -0.2)
            continue
        factor = 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * err ** -0.2))

        if crossed(y, mode):
            lo, hi = 0.0, h
            y_hi = y
            for _ in range(BISECTION_CAP):
                if hi - lo <= etol:
                    break
                mid = 0.5 * (lo + hi)
                y_mid, _ = _dp_step(rhs, x, mid, mode, rtol, atol)
                if crossed(y_mid, mode):
                    hi, y_hi = mid, y_mid
                else:
                    lo = mid
            t += hi
            if mode == SLIDING:
                s = y_hi[2] - A * y_hi[0]
                x = (y_hi[0], 0.0, y_hi[2])
                mode = ABOVE if s > 0 else BELOW
                last_exit = t
                events.append(Event(t, "sliding-exit", x, direction=mode))
            else:
                x = (y_hi[0], 0.0, y_hi[2])
                new = _classify_on_surface(sys, x[0], x[2])
                if new != SLIDING and t - last_exit <= 10.0 * etol:
                    # chattering at the band edge: stay on the surface
                    x = (x[0], 0.0, A * x[0] + math.copysign(k, x[2] - A * x[0]))
                    new = SLIDING
                if new == SLIDING:
                    events.append(Event(t, "sliding-entry", x))
                else:
                    events.append(Event(t, "crossing", x, direction=new))
                mode = new
            # restart cautiously after a switch
            h = max(min(h, hi if hi > 0 else h), 1e-8)
        else:
            t += h
            x = y
            h *= factor

        times.append(t)
        states.append(x)
        modes.append(mode)

        r2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2]
        if not math.isfinite(r2) or r2 > cfg.escape_radius**2:
            status = "diverged"
            escape_time = t
            break
        if stop is not None and stop(t, np.asarray(x), mode):
            status = "stopped"
            break

    events.append(Event(t, "termination", x))
    return Trajectory(
        times=np.asarray(times),
        states=np.asarray(states, dtype=float),
        modes=np.asarray(modes, dtype=int),
        events=events,
        status=status,
        escape_time=escape_time,
    )
