"""Multi-start search for oscillations coexisting with the stationary set.

Every start is integrated and labelled ``stationary``, ``cycle``,
``divergent`` or ``undecided``. When both stationary and non-stationary
starts are present, the basin boundary between them is located by bisection
along the segment joining the closest such pair. A trajectory started on
that boundary shadows the periodic orbit separating the basins. The orbit
is then polished by Newton's method on the return map of the section
``{x2 = 0, moving upward}``.

A periodic orbit found next to a locally attracting stationary set is
reported as a hidden oscillation.

Convergence to the stationary set is slow when C = 0: each pass along the
surface shrinks the distance by a fixed factor, but a pass takes time
proportional to 1/distance. A trajectory therefore also counts as
stationary once its successive sliding entries contract geometrically
inside the friction band, or (C > 0) once it slides towards a sliding
equilibrium that lies inside the band.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from divgov.filippov import ABOVE, BELOW, SLIDING, IntegratorConfig, Trajectory, integrate
from divgov.model import GovernorParams, build_system, stationary_set

TOL_SET = 1e-4
TOL_CYCLE = 1e-5
DIVERGENCE_CAP = 1e4
HORIZON = 500.0
MIN_RETURNS = 5
CONTRACTING_ENTRIES = 4

OUTCOMES = ("stationary", "cycle", "divergent", "undecided")


@dataclass(frozen=True)
class StartSpec:
    grid_n: int = 5
    grid_half_width: float = 5.0
    n_random: int = 50
    random_radius: float = 10.0
    near_offset: Optional[float] = None  # default: tol_set / 2
    seed: int = 0


@dataclass(frozen=True)
class HuntConfig:
    integrator: IntegratorConfig = IntegratorConfig(max_time=HORIZON, escape_radius=DIVERGENCE_CAP)
    tol_set: float = TOL_SET
    tol_cycle: float = TOL_CYCLE
    cap: float = DIVERGENCE_CAP
    min_returns: int = MIN_RETURNS
    bisection_iters: int = 48
    newton_iters: int = 30
    refine_tolerances: tuple = ((1e-10, 1e-12),)  # extra (rel_tol, abs_tol) for the period check
    workers: int = 1


# ---------------------------------------------------------------------------
# trajectory classification


def _sliding_locked(params: GovernorParams, x) -> bool:
    """Sliding at C > 0 towards an equilibrium inside the band never exits."""
    if params.C <= 0:
        return False
    x1 = float(x[0])
    eq = -x1 / params.C
    return abs(params.A * x1 - eq) <= params.k


def _contracting(dists, n=CONTRACTING_ENTRIES, radius=None) -> bool:
    if len(dists) < n:
        return False
    tail = dists[-n:]
    if radius is not None and tail[-1] > radius:
        return False
    return all(b < a for a, b in zip(tail, tail[1:]))


def _section_converged(points, m, tol) -> bool:
    if len(points) < m:
        return False
    P = np.asarray(points[-m:])
    diff = P[:, None, :] - P[None, :, :]
    return float(np.max(np.sqrt(np.sum(diff * diff, axis=-1)))) <= tol


def _speed(params: GovernorParams, x, mode) -> float:
    x1, x2, x3 = (float(v) for v in x)
    if mode == SLIDING:
        return abs(-x1 - params.C * x3)
    A, B, C, k = params.A, params.B, params.C, params.k
    return math.sqrt(x2 * x2 + (-A * x1 - B * x2 + x3 - k * mode) ** 2 + (-x1 - C * x3) ** 2)


class _Watcher:
    """Incremental version of :func:`classify_trajectory` used to stop runs early."""

    def __init__(self, params, tol_set, tol_cycle, min_returns, stop_on=("stationary", "cycle")):
        self.params = params
        self.set = stationary_set(params)
        self.tol_set = tol_set
        self.tol_cycle = tol_cycle
        self.m = min_returns
        self.stop_on = stop_on
        self.prev = None
        self.entries = []
        self.section = []
        self.verdict = None

    def __call__(self, t, x, mode):
        prev, self.prev = self.prev, mode
        if mode == SLIDING:
            if prev is not None and prev != SLIDING:
                self.entries.append(self.set.distance(x))
            if "stationary" in self.stop_on:
                d = self.set.distance(x)
                if (d <= self.tol_set and _speed(self.params, x, mode) <= self.tol_set) or _sliding_locked(
                    self.params, x
                ):
                    self.verdict = "stationary"
                    return True
                if _contracting(self.entries, radius=self.params.k):
                    self.verdict = "stationary"
                    return True
        elif prev is not None and prev != mode:
            if prev == BELOW and mode == ABOVE:
                self.entries.clear()  # transversal crossing breaks a contraction run
            if mode == ABOVE:
                self.section.append((float(x[0]), float(x[2])))
                if "cycle" in self.stop_on and _section_converged(self.section, self.m, self.tol_cycle):
                    if self.set.distance(x) > 10 * self.tol_set:
                        self.verdict = "cycle"
                        return True
            elif prev == ABOVE and mode == BELOW:
                self.entries.clear()
        return False


def section_points(traj: Trajectory):
    ev = traj.departures(+1)
    return [(e.state[0], e.state[2]) for e in ev], [e.time for e in ev]


def classify_trajectory(
    traj: Trajectory,
    params: GovernorParams,
    tol_set: float = TOL_SET,
    tol_cycle: float = TOL_CYCLE,
    cap: float = DIVERGENCE_CAP,
    min_returns: int = MIN_RETURNS,
) -> str:
    if traj.status == "diverged" or not np.all(np.isfinite(traj.states)):
        return "divergent"
    if float(np.max(np.linalg.norm(traj.states, axis=1))) > cap:
        return "divergent"
    S = stationary_set(params)
    x = traj.final_state
    mode = traj.final_mode
    if mode == SLIDING:
        if S.distance(x) <= tol_set and _speed(params, x, mode) <= tol_set:
            return "stationary"
        if _sliding_locked(params, x):
            return "stationary"
        # sliding entries since the last transversal crossing
        dists = []
        for e in traj.events:
            if e.kind == "crossing":
                dists = []
            elif e.kind == "sliding-entry":
                dists.append(S.distance(e.state))
        if _contracting(dists, radius=params.k):
            return "stationary"
    pts, _ = section_points(traj)
    if _section_converged(pts, min_returns, tol_cycle) and S.distance(x) > 10 * tol_set:
        return "cycle"
    return "undecided"


# ---------------------------------------------------------------------------
# cycles


@dataclass
class CycleEstimate:
    period: float
    amplitude: float
    period_std: float
    amplitude_std: float
    section_points: list
    section_point: Optional[tuple] = None  # Newton-refined fixed point of the return map
    multipliers: Optional[list] = None
    stability: Optional[str] = None  # attracting | saddle | repelling
    period_refined: dict = field(default_factory=dict)

    def as_dict(self):
        return {
            "period": self.period,
            "amplitude": self.amplitude,
            "period_std": self.period_std,
            "amplitude_std": self.amplitude_std,
            "section_points": [list(p) for p in self.section_points],
            "section_point": list(self.section_point) if self.section_point is not None else None,
            "multipliers": self.multipliers,
            "stability": self.stability,
            "period_refined": self.period_refined,
        }


def estimate_cycle(section_pts, crossing_times, traj: Optional[Trajectory] = None, tol: float = TOL_CYCLE) -> CycleEstimate:
    """Period and amplitude from converged section returns.

    Needs at least five returns whose section points agree to ``tol``.
    Period is the mean of the last four return intervals; amplitude is the
    largest |x2| over the final period (from ``traj`` samples when given).
    """
    if len(section_pts) < MIN_RETURNS or len(crossing_times) < MIN_RETURNS:
        raise ValueError(f"need at least {MIN_RETURNS} section returns, got {len(section_pts)}")
    if not _section_converged(section_pts, MIN_RETURNS, tol):
        raise ValueError("section points have not converged")
    times = np.asarray(crossing_times[-MIN_RETURNS:], dtype=float)
    dt = np.diff(times)
    period = float(dt.mean())
    period_std = float(dt.std())
    amplitude, amp_std = math.nan, math.nan
    if traj is not None:
        amps = []
        for a, b in zip(times[:-1], times[1:]):
            sel = (traj.times >= a) & (traj.times <= b)
            if sel.any():
                amps.append(float(np.max(np.abs(traj.states[sel, 1]))))
        if amps:
            amplitude, amp_std = amps[-1], float(np.std(amps))
    return CycleEstimate(period, amplitude, period_std, amp_std, [tuple(p) for p in section_pts[-MIN_RETURNS:]])


def return_map(params: GovernorParams, p, cfg: IntegratorConfig, max_time: float = 200.0, min_time: float = 1e-6):
    """Next upward departure from x2 = 0 starting at ``(p[0], 0, p[1])``.

    Departures before ``min_time`` are ignored, so a start on the edge of the
    friction band does not return to itself immediately.
    Returns ``(point, return_time)`` or ``None`` if no return happens.
    """
    sys = build_system(params)
    w = _Watcher(params, 0.0, 0.0, 1, stop_on=())
    hit = {}

    def stop(t, x, mode):
        prev = w.prev
        w.prev = mode
        if prev is not None and prev != ABOVE and mode == ABOVE and t > min_time:
            hit["t"] = t
            hit["x"] = (float(x[0]), float(x[2]))
            return True
        return False

    x0 = (float(p[0]), 0.0, float(p[1]))
    traj = integrate(sys, x0, replace(cfg, max_time=max_time), stop=stop)
    if "t" not in hit or traj.status == "diverged":
        return None
    return np.array(hit["x"]), hit["t"]


def refine_cycle(params: GovernorParams, p0, cfg: IntegratorConfig, iters: int = 30, tol: float = 1e-9, sliding: bool = False):
    """Newton iteration on ``P(p) - p`` with a finite-difference Jacobian.

    With ``sliding`` the section point is a sliding exit, which always sits on
    the band edge ``x3 = A x1 + k``; the map is then one-dimensional in x1.
    Returns ``(p, period, jacobian)`` or ``None`` when Newton fails.
    """
    A, k = params.A, params.k
    if sliding:
        lift = lambda u: np.array([u[0], A * u[0] + k])
        u = np.array([float(p0[0])])
    else:
        lift = lambda u: u
        u = np.asarray(p0, dtype=float).copy()
    n = u.size

    def P(u):
        r = return_map(params, lift(u), cfg)
        if r is None:
            return None
        return (r[0][:1] if sliding else r[0]), r[1]

    scale = max(1.0, float(np.max(np.abs(lift(u)))))
    for _ in range(iters):
        r0 = P(u)
        if r0 is None:
            return None
        Pu, T = r0
        res = Pu - u
        h = 1e-6 * scale
        J = np.empty((n, n))
        for j in range(n):
            e = np.zeros(n)
            e[j] = h
            rp, rm = P(u + e), P(u - e)
            if rp is None or rm is None:
                return None
            J[:, j] = (rp[0] - rm[0]) / (2 * h)
        if float(np.linalg.norm(res)) <= tol * scale:
            break
        try:
            du = np.linalg.solve(J - np.eye(n), -res)
        except np.linalg.LinAlgError:
            return None
        # damp steps that would leave the upward-crossing part of the section
        lam = 1.0
        for _ in range(20):
            q = lift(u + lam * du)
            if sliding or q[1] - A * q[0] > k:
                break
            lam *= 0.5
        u = u + lam * du
    else:
        r0 = P(u)
        if r0 is None or float(np.linalg.norm(r0[0] - u)) > 10 * tol * scale:
            return None
        T = r0[1]
    if sliding:
        J = np.array([[J[0, 0], 0.0], [A * J[0, 0], 0.0]])
    return lift(u), T, J


def _stability(mult):
    mags = [abs(m) for m in mult]
    if all(m < 1 for m in mags):
        return "attracting"
    if all(m > 1 for m in mags):
        return "repelling"
    return "saddle"


# ---------------------------------------------------------------------------
# hunt


@dataclass
class StartOutcome:
    index: int
    x0: tuple
    outcome: str
    source: str  # grid | random | near-set | boundary | cycle

    def as_dict(self):
        return {"index": self.index, "x0": list(self.x0), "outcome": self.outcome, "source": self.source}


@dataclass
class OscillationReport:
    params: GovernorParams
    starts: list
    cycle: Optional[CycleEstimate]
    hidden: bool
    warning: Optional[str] = None
    boundary: dict = field(default_factory=dict)

    def counts(self):
        c = {k: 0 for k in OUTCOMES}
        for s in self.starts:
            c[s.outcome] += 1
        return c

    def as_dict(self):
        return {
            "params": self.params.as_dict(),
            "hidden": self.hidden,
            "counts": self.counts(),
            "cycle": self.cycle.as_dict() if self.cycle else None,
            "warning": self.warning,
            "boundary": self.boundary,
            "starts": [s.as_dict() for s in self.starts],
        }


def build_starts(params: GovernorParams, spec: StartSpec = StartSpec(), tol_set: float = TOL_SET):
    starts = []
    g = np.linspace(-spec.grid_half_width, spec.grid_half_width, spec.grid_n)
    for a in g:
        for b in g:
            for c in g:
                starts.append(((float(a), float(b), float(c)), "grid"))
    rng = np.random.default_rng(spec.seed)
    for _ in range(spec.n_random):
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        r = spec.random_radius * rng.random() ** (1 / 3)
        starts.append((tuple(float(v) for v in u * r), "random"))
    d = spec.near_offset if spec.near_offset is not None else 0.5 * tol_set
    mid = stationary_set(params).midpoint()
    for i in range(3):
        for s in (1.0, -1.0):
            x = mid.copy()
            x[i] += s * d
            starts.append((tuple(float(v) for v in x), "near-set"))
    return starts


def _run_start(args):
    params, x0, cfg = args
    sys = build_system(params)
    w = _Watcher(params, cfg.tol_set, cfg.tol_cycle, cfg.min_returns)
    traj = integrate(sys, x0, cfg.integrator, stop=w)
    if w.verdict is not None:
        return w.verdict
    return classify_trajectory(traj, params, cfg.tol_set, cfg.tol_cycle, cfg.cap, cfg.min_returns)


def _map(fn, items, workers):
    if workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))
    return [fn(it) for it in items]


def locate_boundary(params: GovernorParams, x_in, x_out, cfg: HuntConfig):
    """Bisect the segment ``x_in -> x_out`` for the edge of the stationary basin."""
    lo, hi = 0.0, 1.0
    a, b = np.asarray(x_in, float), np.asarray(x_out, float)
    for _ in range(cfg.bisection_iters):
        mid = 0.5 * (lo + hi)
        x = tuple(a + mid * (b - a))
        if _run_start((params, x, cfg)) == "stationary":
            lo = mid
        else:
            hi = mid
    return tuple(float(v) for v in a + hi * (b - a)), hi - lo


def _cycle_from_boundary(params, x_b, cfg: HuntConfig):
    sys = build_system(params)
    traj = integrate(sys, x_b, cfg.integrator)
    ev = traj.departures(+1)
    if len(ev) < 3:
        return None
    pts = np.array([(e.state[0], e.state[2]) for e in ev])
    drift = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    i = int(np.argmin(drift))
    sliding = ev[i].kind == "sliding-exit"
    found = refine_cycle(params, pts[i], cfg.integrator, cfg.newton_iters, sliding=sliding)
    return None if found is None else found + (sliding,)


def _cycle_record(params, p, cfg: HuntConfig, J):
    """Integrate a few periods from a refined section point and summarise."""
    sys = build_system(params)
    x0 = (float(p[0]), 0.0, float(p[1]))
    count = {"n": 0}
    m = cfg.min_returns

    def stop(t, x, mode, _prev=[None]):
        prev, _prev[0] = _prev[0], mode
        if prev is not None and prev != ABOVE and mode == ABOVE:
            count["n"] += 1
            return count["n"] >= m
        return False

    traj = integrate(sys, x0, cfg.integrator, stop=stop)
    pts, times = section_points(traj)
    pts = [tuple(p)] + pts
    times = [0.0] + times
    outcome = classify_trajectory(traj, params, cfg.tol_set, cfg.tol_cycle, cfg.cap, m)
    if not (outcome == "cycle" or _section_converged(pts, m, cfg.tol_cycle)):
        return outcome, None
    est = estimate_cycle(pts, times, traj, cfg.tol_cycle)
    mult = np.linalg.eigvals(J)
    est.section_point = (float(p[0]), float(p[1]))
    est.multipliers = [[float(z.real), float(z.imag)] for z in mult]
    est.stability = _stability(mult)
    return "cycle", est


def hunt(params: GovernorParams, start_spec: StartSpec = StartSpec(), cfg: HuntConfig = HuntConfig()) -> OscillationReport:
    starts = build_starts(params, start_spec, cfg.tol_set)
    outcomes = _map(_run_start, [(params, x0, cfg) for x0, _ in starts], cfg.workers)
    report_starts = [StartOutcome(i, x0, o, src) for i, ((x0, src), o) in enumerate(zip(starts, outcomes))]

    cycle = None
    boundary = {}
    direct = [s for s in report_starts if s.outcome == "cycle"]
    if direct:
        sys = build_system(params)
        traj = integrate(sys, direct[0].x0, cfg.integrator)
        pts, times = section_points(traj)
        try:
            cycle = estimate_cycle(pts, times, traj, cfg.tol_cycle)
        except ValueError:
            cycle = None

    stat = [s for s in report_starts if s.outcome == "stationary" and s.source != "near-set"]
    stat = stat or [s for s in report_starts if s.outcome == "stationary"]
    other = [s for s in report_starts if s.outcome in ("divergent", "undecided")]
    if cycle is None and stat and other:
        X_in = np.array([s.x0 for s in stat])
        X_out = np.array([s.x0 for s in other])
        d = np.linalg.norm(X_in[:, None, :] - X_out[None, :, :], axis=-1)
        i, j = np.unravel_index(int(np.argmin(d)), d.shape)
        x_b, width = locate_boundary(params, stat[i].x0, other[j].x0, cfg)
        boundary = {"start": list(x_b), "bracket": width, "from": stat[i].index, "to": other[j].index}
        report_starts.append(
            StartOutcome(len(report_starts), x_b, _run_start((params, x_b, cfg)), "boundary")
        )
        found = _cycle_from_boundary(params, x_b, cfg)
        if found is not None:
            p, T, J, sliding = found
            outcome, est = _cycle_record(params, p, cfg, J)
            x_c = (float(p[0]), 0.0, float(p[1]))
            report_starts.append(StartOutcome(len(report_starts), x_c, outcome, "cycle"))
            if est is not None:
                for rt, at in cfg.refine_tolerances:
                    fine = replace(cfg.integrator, rel_tol=rt, abs_tol=at)
                    again = refine_cycle(params, p, fine, cfg.newton_iters, sliding=sliding)
                    if again is not None:
                        est.period_refined[f"{rt:g}"] = again[1]
                est.period_refined.setdefault(f"{cfg.integrator.rel_tol:g}", T)
                cycle = est

    near_stationary = any(s.outcome == "stationary" and s.source == "near-set" for s in report_starts)
    has_cycle = any(s.outcome == "cycle" for s in report_starts)
    hidden = bool(near_stationary and has_cycle)
    warning = None
    if all(s.outcome == "undecided" for s in report_starts):
        warning = "all starts undecided"
    return OscillationReport(params, report_starts, cycle, hidden, warning, boundary)
