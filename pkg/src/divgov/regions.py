"""Stability-region maps over (A, B) and (A, B, C).

Each cell gets up to four independent verdicts (LMI certificate, W-form
sign check, Hurwitz test of the linear part, multi-start simulation), fused
into a single class by a fixed precedence ladder:

1. verified global certificate (LMI feasible or W-form holds) -> GloballyStable
2. simulation finds a cycle next to an attracting stationary set
   -> LocallyStableWithOscillation
3. simulation diverges, or the linear part is not Hurwitz -> Unstable
4. anything else -> Undetermined

A failed sufficient condition is never read as instability on its own.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from divgov.divergence import build_w_form, form_nonpositive_on_sheet
from divgov.lmi import LmiProblem, solve_feasibility_batch
from divgov.model import GovernorParams, build_system, hurwitz_test
from divgov.oscillations import HuntConfig, StartSpec, hunt

CLASSES = ("GloballyStable", "LocallyStableWithOscillation", "Unstable", "Undetermined")
METHODS = ("lmi", "wform", "hurwitz", "sim")
SIM_MODES = ("off", "boundary", "all")


@dataclass(frozen=True)
class Axis:
    name: str
    min: float
    max: float
    step: float

    def __post_init__(self):
        if self.name not in ("A", "B", "C"):
            raise ValueError(f"axis name must be A, B or C, got {self.name!r}")
        if not (math.isfinite(self.min) and math.isfinite(self.max) and math.isfinite(self.step)):
            raise ValueError("axis bounds must be finite")
        if self.step <= 0 or self.max < self.min:
            raise ValueError("axis needs step > 0 and max >= min")

    @property
    def size(self) -> int:
        return int(math.floor((self.max - self.min) / self.step + 1e-9)) + 1

    def values(self) -> np.ndarray:
        return np.round(self.min + self.step * np.arange(self.size), 10)

    def as_dict(self):
        return {"name": self.name, "min": self.min, "max": self.max, "step": self.step}


@dataclass
class CellVerdict:
    A: float
    B: float
    C: float
    lmi: str = "skipped"  # feasible | infeasible | undetermined | skipped
    w_form: str = "skipped"  # holds | fails | skipped
    hurwitz: str = "skipped"  # stable | marginal | unstable | skipped
    simulation: str = "skipped"  # converges-all | coexistence | diverges | inconclusive | skipped
    fused: str = "Undetermined"
    provenance: str = ""

    def as_dict(self):
        return {
            "A": self.A,
            "B": self.B,
            "C": self.C,
            "lmi": self.lmi,
            "w_form": self.w_form,
            "hurwitz": self.hurwitz,
            "simulation": self.simulation,
            "fused": self.fused,
            "provenance": self.provenance,
        }


@dataclass
class RegionGrid:
    axes: list
    cells: np.ndarray  # object array of CellVerdict, one dimension per axis
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        shape = tuple(a.size for a in self.axes)
        if self.cells.shape != shape:
            raise ValueError(f"cell array shape {self.cells.shape} does not match axes {shape}")

    @property
    def shape(self):
        return self.cells.shape

    def flat(self):
        return list(self.cells.ravel())

    def field(self, name: str) -> np.ndarray:
        out = np.empty(self.cells.shape, dtype=object)
        for idx, c in np.ndenumerate(self.cells):
            out[idx] = getattr(c, name)
        return out

    def mask(self, name: str, value: str) -> np.ndarray:
        return self.field(name) == value

    def counts(self, name: str = "fused"):
        vals = self.field(name).ravel()
        out = {}
        for v in vals:
            out[v] = out.get(v, 0) + 1
        return dict(sorted(out.items()))


@dataclass(frozen=True)
class RegionConfig:
    alpha: float = 0.0
    k: float = 0.5
    eps_pd: float = 1e-6
    eps_nd: float = 1e-8
    seed: int = 0
    simulate: str = "boundary"
    max_sim_cells: int = 32
    sim_starts: StartSpec = StartSpec(grid_n=3, n_random=10)
    sim_hunt: HuntConfig = HuntConfig(refine_tolerances=(), bisection_iters=30)
    workers: int = 1

    def __post_init__(self):
        if self.simulate not in SIM_MODES:
            raise ValueError(f"simulate must be one of {SIM_MODES}")
        if self.alpha < 0 or self.k < 0:
            raise ValueError("alpha and k must be non-negative")
        if self.workers < 1 or self.max_sim_cells < 0:
            raise ValueError("workers >= 1 and max_sim_cells >= 0 required")

    def as_dict(self):
        return {
            "alpha": self.alpha,
            "k": self.k,
            "eps_pd": self.eps_pd,
            "eps_nd": self.eps_nd,
            "seed": self.seed,
            "simulate": self.simulate,
            "max_sim_cells": self.max_sim_cells,
        }


# ---------------------------------------------------------------------------
# fusion


def fuse(cell: CellVerdict):
    """Return ``(class, provenance)`` following the precedence ladder."""
    if cell.lmi == "feasible":
        return "GloballyStable", "lmi"
    if cell.w_form == "holds":
        return "GloballyStable", "wform"
    # coexistence already includes observed local convergence
    if cell.simulation == "coexistence":
        return "LocallyStableWithOscillation", "sim"
    if cell.simulation == "diverges":
        return "Unstable", "sim"
    if cell.simulation == "converges-all":
        # no certificate, no counterexample: keep both verdicts on record
        return "Undetermined", f"sim=converges-all+hurwitz={cell.hurwitz}"
    if cell.lmi == "undetermined":
        return "Undetermined", "lmi"
    if cell.hurwitz == "unstable":
        return "Unstable", "hurwitz"
    return "Undetermined", "+".join(
        f"{n}={v}" for n, v in (("lmi", cell.lmi), ("wform", cell.w_form), ("hurwitz", cell.hurwitz), ("sim", cell.simulation))
        if v != "skipped"
    )


def simulation_verdict(report) -> str:
    c = report.counts()
    if c["stationary"] and c["cycle"]:
        return "coexistence"
    if c["stationary"] == len(report.starts):
        return "converges-all"
    if c["divergent"] and not c["cycle"]:
        return "diverges"
    return "inconclusive"


def _sim_cell(args):
    params, cfg = args
    rep = hunt(params, replace(cfg.sim_starts, seed=cfg.seed), cfg.sim_hunt)
    return simulation_verdict(rep)


def _wform(params, alpha):
    holds, _ = form_nonpositive_on_sheet(build_w_form(params, alpha).W)
    return "holds" if holds else "fails"


def _hurwitz(params):
    return hurwitz_test(params).verdict


def _uncertified(cell):
    return cell.lmi != "feasible" and cell.w_form != "holds"


def _disagreement(cell):
    """Cells where the certificates and the linearisation do not settle the class."""
    if cell.lmi == "undetermined":
        return True
    return _uncertified(cell) and cell.hurwitz in ("stable", "marginal")


def near_boundary(cells: np.ndarray) -> np.ndarray:
    """Uncertified cells that disagree with the linearisation or touch a certified cell."""
    cert = np.vectorize(lambda c: not _uncertified(c), otypes=[bool])(cells)
    out = np.vectorize(_disagreement, otypes=[bool])(cells)
    for ax in range(cells.ndim):
        n = cells.shape[ax]
        if n < 2:
            continue
        lo = [slice(None)] * cells.ndim
        hi = [slice(None)] * cells.ndim
        lo[ax], hi[ax] = slice(0, n - 1), slice(1, n)
        out[tuple(lo)] |= cert[tuple(hi)] & ~cert[tuple(lo)]
        out[tuple(hi)] |= cert[tuple(lo)] & ~cert[tuple(hi)]
    return out


def _thin(idx, cap):
    """At most ``cap`` evenly spaced entries of ``idx`` (deterministic)."""
    if len(idx) <= cap:
        return list(idx)
    pick = np.unique(np.round(np.linspace(0, len(idx) - 1, cap)).astype(int))
    return [idx[i] for i in pick]


def evaluate_cells(params_list, methods, cfg: RegionConfig, shape=None):
    """Evaluate every cell; returns a list of CellVerdict in input order.

    ``shape`` lets the near-boundary selection for simulation see grid
    neighbours; without it only cells in disagreement are simulated.
    """
    methods = set(methods)
    unknown = methods - set(METHODS)
    if not methods or unknown:
        raise ValueError(f"methods must be a nonempty subset of {METHODS}")
    cells = [CellVerdict(p.A, p.B, p.C) for p in params_list]
    if "lmi" in methods:
        probs = [LmiProblem(build_system(p), cfg.eps_pd, cfg.eps_nd) for p in params_list]
        for cell, res in zip(cells, solve_feasibility_batch(probs, seed=cfg.seed)):
            cell.lmi = res.verdict
    for cell, p in zip(cells, params_list):
        if "wform" in methods:
            try:
                cell.w_form = _wform(p, cfg.alpha)
            except (ValueError, np.linalg.LinAlgError):
                cell.w_form = "fails"
        cell.hurwitz = _hurwitz(p)
    if "sim" in methods or cfg.simulate != "off":
        if cfg.simulate == "all" or "sim" in methods and cfg.simulate == "off":
            todo = list(range(len(cells)))
        elif shape is not None:
            arr = np.empty(len(cells), dtype=object)
            arr[:] = cells
            todo = list(np.flatnonzero(near_boundary(arr.reshape(shape)).ravel()))
        else:
            todo = [i for i, c in enumerate(cells) if _disagreement(c)]
        if cfg.simulate != "all":
            todo = _thin(todo, cfg.max_sim_cells)
        verdicts = _pool_map(_sim_cell, [(params_list[i], cfg) for i in todo], cfg.workers)
        for i, v in zip(todo, verdicts):
            cells[i].simulation = v
    for cell in cells:
        cell.fused, cell.provenance = fuse(cell)
    return cells


def _pool_map(fn, items, workers):
    if workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, items))
    return [fn(it) for it in items]


def _meta(cfg, methods, extra=None):
    m = {"alpha": cfg.alpha, "k": cfg.k, "methods": sorted(methods), "tolerances": {"eps_pd": cfg.eps_pd, "eps_nd": cfg.eps_nd}, "seed": cfg.seed, "simulate": cfg.simulate}
    if extra:
        m.update(extra)
    return m


def sweep_2d(axisA: Axis, axisB: Axis, C: float = 0.0, methods=("lmi", "wform"), cfg: RegionConfig = RegionConfig()) -> RegionGrid:
    if axisA.name != "A" or axisB.name != "B":
        raise ValueError("sweep_2d expects an A axis and a B axis")
    Av, Bv = axisA.values(), axisB.values()
    params = [GovernorParams(float(a), float(b), C, cfg.k) for a in Av for b in Bv]
    cells = evaluate_cells(params, methods, cfg, shape=(len(Av), len(Bv)))
    arr = np.empty((len(Av), len(Bv)), dtype=object)
    for n, c in enumerate(cells):
        arr[np.unravel_index(n, arr.shape)] = c
    return RegionGrid([axisA, axisB], arr, _meta(cfg, methods, {"C": C}))


def sweep_3d(axisA: Axis, axisB: Axis, axisC: Axis, cfg: RegionConfig = RegionConfig(simulate="off")):
    """LMI sweep over a 3-D grid; returns ``(grid, boundary_points)``."""
    if (axisA.name, axisB.name, axisC.name) != ("A", "B", "C"):
        raise ValueError("sweep_3d expects A, B and C axes")
    Av, Bv, Cv = axisA.values(), axisB.values(), axisC.values()
    params = [GovernorParams(float(a), float(b), float(c), cfg.k) for a in Av for b in Bv for c in Cv]
    cells = evaluate_cells(params, ("lmi",), replace(cfg, simulate="off"))
    arr = np.empty((len(Av), len(Bv), len(Cv)), dtype=object)
    for n, c in enumerate(cells):
        arr[np.unravel_index(n, arr.shape)] = c
    grid = RegionGrid([axisA, axisB, axisC], arr, _meta(cfg, ("lmi",)))
    return grid, boundary_points(grid)


def boundary_points(grid: RegionGrid, name: str = "lmi", value: str = "feasible"):
    """Cells with ``value`` that have a face-neighbour without it, as (A, B, C) rows."""
    m = grid.mask(name, value)
    edge = np.zeros_like(m)
    for ax in range(m.ndim):
        n = m.shape[ax]
        if n < 2:
            continue
        lo = [slice(None)] * m.ndim
        hi = [slice(None)] * m.ndim
        lo[ax], hi[ax] = slice(0, n - 1), slice(1, n)
        diff = m[tuple(lo)] & ~m[tuple(hi)]
        edge[tuple(lo)] |= diff
        diff = m[tuple(hi)] & ~m[tuple(lo)]
        edge[tuple(hi)] |= diff
    pts = [(c.A, c.B, c.C) for c, e in zip(grid.cells.ravel(), edge.ravel()) if e]
    return np.array(pts, dtype=float).reshape(-1, 3)


# ---------------------------------------------------------------------------
# 1-D refinement


def stable_predicate(method: str, cfg: RegionConfig = RegionConfig()):
    """Return ``f(params) -> bool`` for the globally-stable side of the map."""
    if method == "wform":
        return lambda p: _wform(p, cfg.alpha) == "holds"
    if method == "lmi":
        def f(p):
            res = solve_feasibility_batch([LmiProblem(build_system(p), cfg.eps_pd, cfg.eps_nd)], seed=cfg.seed)[0]
            return res.verdict == "feasible"
        return f
    if method == "fused":
        def g(p):
            return evaluate_cells([p], ("lmi", "wform"), replace(cfg, simulate="off"))[0].fused == "GloballyStable"
        return g
    raise ValueError(f"unknown refinement method {method!r}")


def bisect_transition(pred, make, lo: float, hi: float, iters: int):
    """Bisect ``[lo, hi]`` where ``pred(make(lo)) != pred(make(hi))``."""
    plo = pred(make(lo))
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if pred(make(mid)) == plo:
            lo = mid
        else:
            hi = mid
    return lo, hi


def refine_boundary(grid: RegionGrid, passes: int = 10, method: str = "fused", cfg: Optional[RegionConfig] = None) -> RegionGrid:
    """Bisect along A at each B for every change of the globally-stable class.

    The transitions are stored in ``meta["transitions"]`` as dicts with the
    bracketing A values; the bracket width is ``step / 2**passes``.
    """
    if len(grid.axes) != 2 or passes < 0:
        raise ValueError("refine_boundary needs a 2-D grid and passes >= 0")
    cfg = cfg or RegionConfig(alpha=grid.meta.get("alpha", 0.0), k=grid.meta.get("k", 0.5), seed=grid.meta.get("seed", 0))
    C = float(grid.meta.get("C", 0.0))
    pred = stable_predicate(method, cfg)
    stable = grid.field("fused") == "GloballyStable"
    if method == "wform":
        stable = grid.field("w_form") == "holds"
    elif method == "lmi":
        stable = grid.field("lmi") == "feasible"
    Av = grid.axes[0].values()
    trans = []
    for j, b in enumerate(grid.axes[1].values()):
        for i in range(len(Av) - 1):
            if stable[i, j] != stable[i + 1, j]:
                lo, hi = bisect_transition(pred, lambda a: GovernorParams(a, float(b), C, cfg.k), float(Av[i]), float(Av[i + 1]), passes)
                trans.append({"B": float(b), "A_lo": min(lo, hi), "A_hi": max(lo, hi), "A_star": 0.5 * (lo + hi), "stable_above": bool(stable[i + 1, j])})
    meta = dict(grid.meta)
    meta["transitions"] = trans
    meta["refine"] = {"passes": passes, "method": method}
    return RegionGrid(grid.axes, grid.cells, meta)


def transition_A(B: float, C: float = 0.0, method: str = "wform", lo: float = 0.2, hi: float = 3.0, iters: int = 40, cfg: RegionConfig = RegionConfig()):
    """A at which the stable-side predicate switches, at fixed B and C."""
    pred = stable_predicate(method, cfg)
    make = lambda a: GovernorParams(a, B, C, cfg.k)
    if pred(make(lo)) == pred(make(hi)):
        raise ValueError("no transition inside the bracket")
    lo, hi = bisect_transition(pred, make, lo, hi, iters)
    return 0.5 * (lo + hi)
