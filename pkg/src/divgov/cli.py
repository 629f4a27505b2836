"""Command-line front end: ``divgov simulate | region2d | region3d | lmi | hunt``.

Every command writes its numeric output (CSV/JSON) under ``--out``, then
renders SVG figures by reading those files back, and finally writes a
``manifest.json`` listing the files with their hashes and the hash of the
resolved configuration.

Exit codes: 0 success, 1 computation undetermined, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from divgov.filippov import MODE_NAMES, IntegratorConfig, integrate
from divgov.lmi import certificate_record, lmi_verdict
from divgov.model import GovernorParams, build_system, hurwitz_test, stationary_set
from divgov.oscillations import HuntConfig, StartSpec, classify_trajectory, hunt
from divgov.regions import CLASSES, Axis, RegionConfig, refine_boundary, sweep_2d, sweep_3d

EXIT_OK, EXIT_UNDETERMINED, EXIT_USAGE = 0, 1, 2
FLOAT = "{:.16e}"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# output helpers


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n"


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return FLOAT.format(float(v))
    return str(v)


class Output:
    def __init__(self, root):
        self.root = Path(root)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            probe = self.root / ".write-test"
            probe.write_text("")
            probe.unlink()
        except OSError as e:
            raise UsageError(f"cannot write to {self.root}: {e}") from e
        self.files = []

    def path(self, name):
        return self.root / name

    def _add(self, name):
        if name not in self.files:
            self.files.append(name)

    def write_csv(self, name, header, rows):
        with open(self.path(name), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(v) for v in r])
        self._add(name)

    def write_json(self, name, obj):
        self.path(name).write_text(dumps(obj))
        self._add(name)

    def register(self, name):
        self._add(name)

    def manifest(self, command, config):
        cfg_text = json.dumps(_clean(config), sort_keys=True)
        files = []
        for name in self.files:
            digest = hashlib.sha256(self.path(name).read_bytes()).hexdigest()
            files.append({"path": name, "sha256": digest})
        self.write_json(
            "manifest.json",
            {"command": command, "config": config, "config_hash": hashlib.sha256(cfg_text.encode()).hexdigest(), "files": files},
        )


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


# ---------------------------------------------------------------------------
# figures (rendered from the files on disk)


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "divgov"
    return plt


def _save(fig, out: Output, name):
    fig.savefig(out.path(name), format="svg", metadata={"Date": None})
    _pyplot().close(fig)
    out.register(name)


def plot_phase(out: Output, csv_names, params: GovernorParams, name="phase.svg", labels=None):
    plt = _pyplot()
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4.2))
    for i, cn in enumerate(csv_names):
        _, rows = read_csv(out.path(cn))
        X = np.array([[float(v) for v in r[1:4]] for r in rows])
        lab = labels[i] if labels else None
        ax1.plot(X[:, 0], X[:, 1], lw=0.8, label=lab)
        ax2.plot(X[:, 0], X[:, 2], lw=0.8, label=lab)
        ax1.plot(X[0, 0], X[0, 1], "k.", ms=4)
        ax2.plot(X[0, 0], X[0, 2], "k.", ms=4)
    E = stationary_set(params).endpoints()
    ax1.plot(E[:, 0], E[:, 1], "r-", lw=2.5, label="stationary set")
    ax2.plot(E[:, 0], E[:, 2], "r-", lw=2.5)
    ax1.set_xlabel("x1")
    ax1.set_ylabel("x2")
    ax2.set_xlabel("x1")
    ax2.set_ylabel("x3")
    ax1.legend(fontsize=7, loc="best")
    fig.suptitle(f"A={params.A:g}, B={params.B:g}, C={params.C:g}")
    fig.tight_layout()
    _save(fig, out, name)


_COLORS = {
    "GloballyStable": "#4c9a2a",
    "LocallyStableWithOscillation": "#f2b134",
    "Unstable": "#c0392b",
    "Undetermined": "#9e9e9e",
}


def plot_region(out: Output, csv_name, name="region.svg", title=""):
    from matplotlib.colors import ListedColormap
    from matplotlib.patches import Patch

    plt = _pyplot()
    header, rows = read_csv(out.path(csv_name))
    iA, iB, iF = header.index("A"), header.index("B"), header.index("fused")
    A = np.array([float(r[iA]) for r in rows])
    B = np.array([float(r[iB]) for r in rows])
    cls = np.array([CLASSES.index(r[iF]) for r in rows])
    Av, Bv = np.unique(A), np.unique(B)
    Z = np.full((len(Bv), len(Av)), np.nan)
    Z[np.searchsorted(Bv, B), np.searchsorted(Av, A)] = cls
    dA = Av[1] - Av[0] if len(Av) > 1 else 0.05
    dB = Bv[1] - Bv[0] if len(Bv) > 1 else 0.05
    fig, ax = plt.subplots(figsize=(6, 5))
    cmap = ListedColormap([_COLORS[c] for c in CLASSES])
    ax.pcolormesh(
        np.append(Av - dA / 2, Av[-1] + dA / 2),
        np.append(Bv - dB / 2, Bv[-1] + dB / 2),
        Z,
        cmap=cmap,
        vmin=-0.5,
        vmax=len(CLASSES) - 0.5,
    )
    a = np.linspace(max(Av[0] - dA / 2, 1e-3), Av[-1] + dA / 2, 400)
    ax.plot(a, 1 / a, "k--", lw=1.2, label="AB=1")
    ax.set_xlim(Av[0] - dA / 2, Av[-1] + dA / 2)
    ax.set_ylim(Bv[0] - dB / 2, Bv[-1] + dB / 2)
    ax.set_xlabel("A")
    ax.set_ylabel("B")
    handles = [Patch(color=_COLORS[c], label=c) for c in CLASSES] + ax.get_legend_handles_labels()[0]
    ax.legend(handles=handles, fontsize=7, loc="upper right")
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, out, name)


def plot_surface(out: Output, csv_name, name="boundary3d.svg"):
    plt = _pyplot()
    _, rows = read_csv(out.path(csv_name))
    P = np.array([[float(v) for v in r] for r in rows]).reshape(-1, 3)
    fig = plt.figure(figsize=(6.5, 5))
    ax = fig.add_subplot(projection="3d")
    if len(P):
        sc = ax.scatter(P[:, 0], P[:, 1], P[:, 2], c=P[:, 2], s=8, cmap="viridis")
        fig.colorbar(sc, ax=ax, shrink=0.6, label="C")
    ax.set_xlabel("A")
    ax.set_ylabel("B")
    ax.set_zlabel("C")
    ax.set_title("LMI-feasible boundary cells")
    _save(fig, out, name)


# ---------------------------------------------------------------------------
# argument handling


def _default_seed():
    v = os.environ.get("DIVGOV_SEED")
    if v is None:
        return 0
    try:
        return int(v)
    except ValueError:
        raise UsageError(f"DIVGOV_SEED must be an integer, got {v!r}")


def _vec3(text):
    try:
        v = [float(s) for s in str(text).split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    if len(v) != 3 or not all(math.isfinite(x) for x in v):
        raise argparse.ArgumentTypeError(f"expected three finite numbers, got {text!r}")
    return tuple(v)


def _methods(text):
    m = [s.strip() for s in str(text).split(",") if s.strip()]
    if not m:
        raise argparse.ArgumentTypeError("at least one method is required")
    bad = [x for x in m if x not in ("lmi", "wform", "sim")]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown method(s): {', '.join(bad)}")
    return tuple(m)


def _model_flags(p, required=True):
    p.add_argument("--A", type=float, default=None, help="A > 0" + (" (required)" if required else ""))
    p.add_argument("--B", type=float, default=None, help="B > 0" + (" (required)" if required else ""))
    p.add_argument("--C", type=float, default=0.0, help="self-regulation, C >= 0")
    p.add_argument("--k", type=float, default=0.5, help="dry-friction level")


def _common(p):
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--config", default=None, help="key=value file; flags override it")
    p.add_argument("--seed", type=int, default=None, help="RNG seed (default: $DIVGOV_SEED or 0)")
    p.add_argument("--no-svg", action="store_true", help="skip figure rendering")


def _eps_flags(p):
    p.add_argument("--eps-pd", type=float, default=1e-6, help="margin for Q > 0")
    p.add_argument("--eps-nd", type=float, default=1e-8, help="margin for F < 0")


def _axis_flags(p, name, lo, hi, step):
    p.add_argument(f"--{name}-min", type=float, default=lo)
    p.add_argument(f"--{name}-max", type=float, default=hi)
    p.add_argument(f"--{name}-step", type=float, default=step)


def build_parser():
    parser = argparse.ArgumentParser(prog="divgov", description="Watt-governor stability toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="integrate one trajectory")
    _common(p)
    _model_flags(p)
    p.add_argument("--x0", type=_vec3, default=None, help="initial state x1,x2,x3 (required)")
    p.add_argument("--t-max", type=float, default=500.0)
    p.add_argument("--rtol", type=float, default=1e-8)
    p.add_argument("--atol", type=float, default=1e-10)
    p.add_argument("--event-tol", type=float, default=1e-10)

    p = sub.add_parser("region2d", help="stability map over (A, B)")
    _common(p)
    _axis_flags(p, "A", 0.2, 3.0, 0.05)
    _axis_flags(p, "B", 0.2, 3.0, 0.05)
    p.add_argument("--C", type=float, default=0.0)
    p.add_argument("--k", type=float, default=0.5)
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--method", type=_methods, default=("lmi", "wform"), help="comma list of lmi,wform,sim")
    _eps_flags(p)
    p.add_argument("--simulate", choices=("off", "boundary", "all"), default="boundary")
    p.add_argument("--max-sim-cells", type=int, default=32)
    p.add_argument("--refine-passes", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("region3d", help="LMI boundary over (A, B, C)")
    _common(p)
    _axis_flags(p, "A", 0.2, 3.0, 0.2)
    _axis_flags(p, "B", 0.2, 3.0, 0.2)
    _axis_flags(p, "C", 0.0, 0.7, 0.1)
    p.add_argument("--k", type=float, default=0.5)
    _eps_flags(p)

    p = sub.add_parser("lmi", help="LMI feasibility with certificate")
    _common(p)
    _model_flags(p)
    _eps_flags(p)

    p = sub.add_parser("hunt", help="multi-start search for hidden oscillations")
    _common(p)
    _model_flags(p)
    p.add_argument("--grid-n", type=int, default=5)
    p.add_argument("--grid-half-width", type=float, default=5.0)
    p.add_argument("--n-random", type=int, default=50)
    p.add_argument("--random-radius", type=float, default=10.0)
    p.add_argument("--horizon", type=float, default=500.0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--dump-trajectories", action="store_true")
    return parser, sub.choices


_NOT_CONFIGURABLE = {"config", "command", "help"}


def read_config(path, sub: argparse.ArgumentParser):
    """Parse a flat key=value file against the option table of ``sub``."""
    actions = {a.dest: a for a in sub._actions if a.dest not in _NOT_CONFIGURABLE}
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}")
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        dest = key.replace("-", "_")
        if dest not in actions:
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        act = actions[dest]
        if isinstance(act, argparse._StoreTrueAction):
            if val.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"{path}:{n}: {key} expects a boolean")
            out[dest] = val.lower() in ("true", "1", "yes")
            continue
        try:
            out[dest] = act.type(val) if act.type else val
        except (ValueError, argparse.ArgumentTypeError) as e:
            raise UsageError(f"{path}:{n}: bad value for {key}: {e}")
        if act.choices is not None and out[dest] not in act.choices:
            raise UsageError(f"{path}:{n}: {key} must be one of {sorted(act.choices)}")
    return out


def _glue_vectors(argv):
    # "--x0 -1,0,2" would otherwise be read as an unknown option
    out, it = [], iter(argv)
    for a in it:
        if a == "--x0":
            nxt = next(it, None)
            out.append(a if nxt is None else f"--x0={nxt}")
        else:
            out.append(a)
    return out


def parse(argv):
    parser, subs = build_parser()
    argv = _glue_vectors(list(argv))
    args = parser.parse_args(argv)
    if args.config:
        sub = subs[args.command]
        sub.set_defaults(**read_config(args.config, sub))
        args = parser.parse_args(argv)
    if args.seed is None:
        args.seed = _default_seed()
    return args


def _require(args, *names):
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


def _params(args):
    _require(args, "A", "B")
    try:
        return GovernorParams(args.A, args.B, args.C, args.k)
    except ValueError as e:
        raise UsageError(str(e))


def _positive(args, *names):
    for n in names:
        v = getattr(args, n)
        if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
            raise UsageError(f"--{n.replace('_', '-')} must be positive, got {v}")


def _config_dict(args):
    d = {k: v for k, v in vars(args).items() if k not in ("config", "out", "no_svg")}
    return d


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args):
    params = _params(args)
    _require(args, "x0")
    _positive(args, "t_max", "rtol", "atol", "event_tol")
    cfg = IntegratorConfig(rel_tol=args.rtol, abs_tol=args.atol, event_tol=args.event_tol, max_time=args.t_max)
    out = Output(args.out)
    traj = integrate(build_system(params), args.x0, cfg)
    out.write_csv(
        "trajectory.csv",
        ["t", "x1", "x2", "x3", "mode"],
        ([t, *x, MODE_NAMES[int(m)]] for t, x, m in zip(traj.times, traj.states, traj.modes)),
    )
    S = stationary_set(params)
    outcome = classify_trajectory(traj, params)
    summary = {
        "params": params.as_dict(),
        "x0": list(args.x0),
        "status": traj.status,
        "final_time": float(traj.times[-1]),
        "final_state": traj.final_state,
        "final_mode": MODE_NAMES[int(traj.final_mode)],
        "distance_to_set": S.distance(traj.final_state),
        "outcome": outcome,
        "events": len(traj.events),
    }
    out.write_json("summary.json", summary)
    if not args.no_svg:
        plot_phase(out, ["trajectory.csv"], params)
    out.manifest("simulate", _config_dict(args))
    print(f"status={traj.status} outcome={outcome} t_end={traj.times[-1]:.6g} dist={summary['distance_to_set']:.3e}")
    return EXIT_OK


def _cell_rows(grid):
    for c in grid.flat():
        yield [c.A, c.B, c.C, c.lmi, c.w_form, c.hurwitz, c.simulation, c.fused, c.provenance]


CELL_HEADER = ["A", "B", "C", "lmi", "w_form", "hurwitz", "simulation", "fused", "provenance"]


def _grid_json(grid, extra=None):
    d = {"axes": [a.as_dict() for a in grid.axes], "shape": list(grid.shape), "meta": grid.meta, "counts": grid.counts()}
    if extra:
        d.update(extra)
    return d


def _axis(args, name):
    try:
        return Axis(name, getattr(args, f"{name}_min"), getattr(args, f"{name}_max"), getattr(args, f"{name}_step"))
    except ValueError as e:
        raise UsageError(f"{name} axis: {e}")


def cmd_region2d(args):
    ax, bx = _axis(args, "A"), _axis(args, "B")
    try:
        GovernorParams(ax.min, bx.min, args.C, args.k)
        cfg = RegionConfig(
            alpha=args.alpha,
            k=args.k,
            eps_pd=args.eps_pd,
            eps_nd=args.eps_nd,
            seed=args.seed,
            simulate=args.simulate,
            max_sim_cells=args.max_sim_cells,
            workers=args.workers,
        )
    except ValueError as e:
        raise UsageError(str(e))
    if args.refine_passes < 0:
        raise UsageError("--refine-passes must be >= 0")
    out = Output(args.out)
    grid = sweep_2d(ax, bx, args.C, args.method, cfg)
    if args.refine_passes:
        grid = refine_boundary(grid, args.refine_passes, "fused", cfg)
        out.write_csv(
            "transitions.csv",
            ["B", "A_lo", "A_hi", "A_star"],
            ([t["B"], t["A_lo"], t["A_hi"], t["A_star"]] for t in grid.meta["transitions"]),
        )
    out.write_csv("grid.csv", CELL_HEADER, _cell_rows(grid))
    out.write_json("grid.json", _grid_json(grid, {"cells": [c.as_dict() for c in grid.flat()]}))
    if not args.no_svg:
        plot_region(out, "grid.csv", title=f"C={args.C:g}, alpha={args.alpha:g}, methods={','.join(args.method)}")
    out.manifest("region2d", _config_dict(args))
    print(" ".join(f"{k}={v}" for k, v in grid.counts().items()))
    return EXIT_OK


def cmd_region3d(args):
    ax, bx, cx = _axis(args, "A"), _axis(args, "B"), _axis(args, "C")
    try:
        GovernorParams(ax.min, bx.min, cx.min, args.k)
        cfg = RegionConfig(k=args.k, eps_pd=args.eps_pd, eps_nd=args.eps_nd, seed=args.seed, simulate="off")
    except ValueError as e:
        raise UsageError(str(e))
    out = Output(args.out)
    grid, pts = sweep_3d(ax, bx, cx, cfg)
    out.write_csv("grid.csv", CELL_HEADER, _cell_rows(grid))
    out.write_csv("boundary.csv", ["A", "B", "C"], pts.tolist())
    out.write_json("grid.json", _grid_json(grid, {"boundary_cells": len(pts)}))
    if not args.no_svg:
        plot_surface(out, "boundary.csv")
    out.manifest("region3d", _config_dict(args))
    print(" ".join(f"{k}={v}" for k, v in grid.counts().items()) + f" boundary_cells={len(pts)}")
    return EXIT_OK


def cmd_lmi(args):
    params = _params(args)
    _positive(args, "eps_pd")
    out = Output(args.out)
    try:
        res = lmi_verdict(params, args.eps_pd, args.eps_nd, seed=args.seed)
    except ValueError as e:
        raise UsageError(str(e))
    rec = certificate_record(params, res)
    rec["hurwitz"] = hurwitz_test(params).verdict
    out.write_json("certificate.json", rec)
    out.manifest("lmi", _config_dict(args))
    print(f"verdict={res.verdict} min_eig_Q={res.margins[0]:.6e} max_eig_F={res.margins[1]:.6e} tau={res.tau:.6e}")
    if rec["Q"] is not None:
        print("Q(upper)=" + ",".join(FLOAT.format(v) for v in rec["Q"]))
    return EXIT_UNDETERMINED if res.verdict == "undetermined" else EXIT_OK


def cmd_hunt(args):
    params = _params(args)
    _positive(args, "horizon", "grid_half_width", "random_radius", "workers")
    if args.grid_n < 1 or args.n_random < 0:
        raise UsageError("--grid-n must be >= 1 and --n-random >= 0")
    spec = StartSpec(args.grid_n, args.grid_half_width, args.n_random, args.random_radius, seed=args.seed)
    base = HuntConfig()
    cfg = replace(base, integrator=replace(base.integrator, max_time=args.horizon), workers=args.workers)
    out = Output(args.out)
    rep = hunt(params, spec, cfg)
    out.write_json("report.json", rep.as_dict())
    sys_ = build_system(params)
    shown, labels = [], []
    if rep.cycle is not None and rep.cycle.section_point is not None:
        p = rep.cycle.section_point
        tr = integrate(sys_, (p[0], 0.0, p[1]), replace(cfg.integrator, max_time=rep.cycle.period))
        out.write_csv("cycle.csv", ["t", "x1", "x2", "x3", "mode"], ([t, *x, MODE_NAMES[int(m)]] for t, x, m in zip(tr.times, tr.states, tr.modes)))
        shown.append("cycle.csv")
        labels.append(f"cycle T={rep.cycle.period:.5g}")
    def dump(name, x0, t_max, label):
        tr = integrate(sys_, x0, replace(cfg.integrator, max_time=t_max))
        out.write_csv(name, ["t", "x1", "x2", "x3", "mode"], ([t, *x, MODE_NAMES[int(m)]] for t, x, m in zip(tr.times, tr.states, tr.modes)))
        if label:
            shown.append(name)
            labels.append(label)

    if rep.cycle is not None and rep.cycle.section_point is not None:
        # a start just inside the cycle shows the stationary basin it encloses
        p = rep.cycle.section_point
        dump("inside.csv", (0.97 * p[0], 0.0, 0.97 * p[1]), cfg.integrator.max_time, "inside the cycle")
    stat = [s for s in rep.starts if s.outcome == "stationary" and s.source != "near-set"]
    if stat:
        s = max(stat, key=lambda s: float(np.linalg.norm(s.x0)))
        dump(f"start_{s.index:03d}.csv", s.x0, cfg.integrator.max_time, f"start {s.index}: stationary")
    if args.dump_trajectories:
        for s in rep.starts:
            dump(f"start_{s.index:03d}.csv", s.x0, cfg.integrator.max_time, None)
    if not args.no_svg and shown:
        plot_phase(out, shown[:4], params, "portrait.svg", labels[:4])
    out.manifest("hunt", _config_dict(args))
    c = rep.counts()
    msg = f"hidden={'true' if rep.hidden else 'false'} " + " ".join(f"{k}={c[k]}" for k in sorted(c))
    if rep.cycle is not None:
        msg += f" period={rep.cycle.period:.10g} amplitude={rep.cycle.amplitude:.6g}"
        if rep.cycle.stability:
            msg += f" cycle={rep.cycle.stability}"
    print(msg)
    if rep.warning:
        print(f"warning: {rep.warning}", file=sys.stderr)
        return EXIT_UNDETERMINED
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "region2d": cmd_region2d, "region3d": cmd_region3d, "lmi": cmd_lmi, "hunt": cmd_hunt}


def main(argv=None) -> int:
    try:
        args = parse(sys.argv[1:] if argv is None else argv)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"divgov: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # argparse
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
