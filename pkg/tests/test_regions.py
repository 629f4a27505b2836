import itertools

import numpy as np
import pytest

from divgov.model import GovernorParams
from divgov.regions import (
    Axis,
    CellVerdict,
    RegionConfig,
    boundary_points,
    fuse,
    refine_boundary,
    sweep_2d,
    sweep_3d,
    transition_A,
)

OFF = RegionConfig(simulate="off")


def _dist_to_hyperbola(a, b):
    t = np.linspace(0.05, 20, 200001)
    return float(np.min(np.hypot(t - a, 1 / t - b)))


def test_axis():
    ax = Axis("A", 0.2, 3.0, 0.05)
    assert ax.size == 57 and ax.values()[0] == 0.2 and ax.values()[-1] == 3.0
    for bad in [("D", 0, 1, 0.1), ("A", 1, 0, 0.1), ("A", 0, 1, 0), ("A", 0, float("inf"), 0.1)]:
        with pytest.raises(ValueError):
            Axis(*bad)


LMI = ("feasible", "infeasible", "undetermined", "skipped")
WF = ("holds", "fails", "skipped")
HW = ("stable", "marginal", "unstable")
SIM = ("converges-all", "coexistence", "diverges", "inconclusive", "skipped")


def test_fusion_invariants_exhaustive():
    for l, w, h, s in itertools.product(LMI, WF, HW, SIM):
        c = CellVerdict(1, 1, 0, l, w, h, s)
        cls, prov = fuse(c)
        if cls == "GloballyStable":
            assert l == "feasible" or w == "holds"
        if l == "feasible":
            assert cls == "GloballyStable"
        if cls == "LocallyStableWithOscillation":
            assert s == "coexistence"
        if l != "feasible" and w != "holds" and s == "converges-all":
            assert cls == "Undetermined" and "hurwitz" in prov
        assert prov


def test_wform_grid_is_AB_ge_1():
    ax, bx = Axis("A", 0.2, 3, 0.05), Axis("B", 0.2, 3, 0.05)
    g = sweep_2d(ax, bx, 0.0, ("wform",), OFF)
    AB = np.multiply.outer(ax.values(), bx.values())
    assert np.array_equal(g.mask("w_form", "holds"), AB >= 1)
    assert g.cells.size == ax.size * bx.size
    for c in g.flat():
        assert c.provenance


def test_wform_boundary_within_one_step():
    ax, bx = Axis("A", 0.2, 3, 0.05), Axis("B", 0.2, 3, 0.05)
    g = sweep_2d(ax, bx, 0.0, ("wform",), OFF)
    pts = boundary_points(g, "w_form", "holds")
    assert len(pts)
    assert max(_dist_to_hyperbola(a, b) for a, b, _ in pts) <= 0.05 + 1e-12


def test_lmi_coarse_grid_and_self_regulation():
    ax, bx = Axis("A", 0.2, 3, 0.1), Axis("B", 0.2, 3, 0.1)
    g0 = sweep_2d(ax, bx, 0.0, ("lmi",), OFF)
    g5 = sweep_2d(ax, bx, 0.5, ("lmi",), OFF)
    f0, f5 = g0.mask("lmi", "feasible"), g5.mask("lmi", "feasible")
    assert not np.any(f0 & ~f5) and f5.sum() > f0.sum()
    pts = boundary_points(g0)
    assert max(_dist_to_hyperbola(a, b) for a, b, _ in pts) <= 0.2 + 1e-12


@pytest.mark.parametrize("B,expect", [(1.0, 1.0), (2.0, 0.5)])
def test_refine_wform(B, expect):
    ax = Axis("A", 0.2, 3, 0.05)
    g = sweep_2d(ax, Axis("B", B, B, 0.05), 0.0, ("wform",), OFF)
    r = refine_boundary(g, 10, "wform")
    (t,) = r.meta["transitions"]
    assert abs(t["A_star"] - expect) <= 0.002
    assert t["A_hi"] - t["A_lo"] == pytest.approx(0.05 / 2**10)


def test_refine_lmi_with_self_regulation():
    a = transition_A(1.0, 0.1, "lmi", iters=20)
    assert a < 1


def test_transition_bisection_accuracy():
    for B in (0.5, 1.0, 2.0):
        assert abs(transition_A(B, 0.0, "wform") * B - 1) < 0.002


def test_sweep_3d_coarse():
    g, pts = sweep_3d(Axis("A", 0.2, 3, 0.2), Axis("B", 0.2, 3, 0.2), Axis("C", 0, 0.7, 0.1), OFF)
    assert g.shape == (15, 15, 8)
    f = g.mask("lmi", "feasible")
    # monotone in C
    assert not np.any(f[:, :, :-1] & ~f[:, :, 1:])
    # C=0 slice boundary within two cells of AB = 1
    Av, Bv = g.axes[0].values(), g.axes[1].values()
    slice0 = pts[pts[:, 2] == 0]
    assert len(slice0)
    assert max(_dist_to_hyperbola(a, b) for a, b, _ in slice0) <= 0.4 + 1e-12
    i, j = list(Av).index(1.4), list(Bv).index(1.0)
    assert g.cells[i, j, 0].fused == "GloballyStable"
    # every boundary point is feasible with an infeasible face neighbour
    assert all(g.cells[list(Av).index(a), list(Bv).index(b), int(round(c / 0.1))].lmi == "feasible" for a, b, c in pts)


def test_simulation_near_boundary_finds_oscillation():
    cfg = RegionConfig(simulate="boundary")
    g = sweep_2d(Axis("A", 0.75, 1.35, 0.3), Axis("B", 1.0, 1.0, 0.1), 0.0, ("lmi",), cfg)
    c = g.cells[0, 0]
    assert c.simulation == "coexistence" and c.fused == "LocallyStableWithOscillation"
    assert g.cells[2, 0].simulation == "skipped"


def test_certified_cells_never_unstable():
    g = sweep_2d(Axis("A", 0.2, 3, 0.2), Axis("B", 0.2, 3, 0.2), 0.3, ("lmi", "wform"), OFF)
    for c in g.flat():
        if c.lmi == "feasible" or c.w_form == "holds":
            assert c.fused == "GloballyStable"


def test_methods_validated():
    with pytest.raises(ValueError):
        sweep_2d(Axis("A", 1, 1, 0.1), Axis("B", 1, 1, 0.1), 0.0, (), OFF)
    with pytest.raises(ValueError):
        sweep_2d(Axis("A", 1, 1, 0.1), Axis("B", 1, 1, 0.1), 0.0, ("magic",), OFF)
    with pytest.raises(ValueError):
        RegionConfig(simulate="sometimes")
