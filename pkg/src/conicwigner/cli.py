"""Command-line driver: ``conicwigner SUBCOMMAND --config PATH [--out DIR] ...``.

Exit status: 0 success, 2 configuration error, 3 numerical failure,
4 a requested check failed (``--check``).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import load_config
from .errors import ConfigError, ConicWignerError, NumericalFailure
from .flow import PhasePoint, flow_map, hamiltonian
from .microlocal import TwoMicrolocalSymbol, mass_near_S, split_lattice, time_averaged_mass_near_S
from .phase_space import MAX_DENSE, pair_symbol, pair_symbol_streaming, wigner_transform
from .quantum import Grid, WavefunctionGrid, energy, evolve, make_initial_state
from .symbols import constant
from .transport import egorov_gap

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4
SUBCOMMANDS = ("trajectory", "evolve", "wigner", "egorov-check", "two-microlocal")


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _parallel_map(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _grid_dict(grid):
    return {"axes": [list(ax) for ax in grid.axes], "eps": grid.eps}


def _coherent_start(cfg):
    if cfg.initial.kind != "coherent":
        raise ConfigError("trajectory needs a coherent initial state (its centre is the start point)")
    return PhasePoint(cfg.initial.q, cfg.initial.p)


# --------------------------------------------------------------------------
# subcommands

def run_trajectory(cfg, out, threads):
    pot = cfg.potential
    d = pot.dim
    _, traj = flow_map(pot, _coherent_start(cfg), cfg.t_final)
    times = np.linspace(0.0, cfg.t_final, cfg.n_samples)
    rows = []
    for t in times:
        y = traj(t)
        rows.append([t, *y[:d], *y[d:], float(pot.g_norm(y[:d])), hamiltonian(pot, y[:d], y[d:])])
    coords = [f"x{i + 1}" for i in range(d)] + [f"xi{i + 1}" for i in range(d)]
    write_csv(out / "trajectory.csv", ["t"] + coords + ["abs_g", "H"], rows)
    crow = [[k, ev.t_cross, *ev.point.x, *ev.point.xi, ev.dg_xi_norm, int(bool(ev.generic))]
            for k, ev in enumerate(traj.crossings)]
    write_csv(out / "crossings.csv", ["index", "t_cross"] + coords + ["dg_xi_norm", "generic"], crow)
    write_json(out / "crossings.json", {"tau": traj.tau, "min_abs_g": traj.min_g,
                                        "near_singular": bool(traj.near_singular),
                                        "crossings": [ev.to_dict() for ev in traj.crossings]})
    return {"outputs": ["trajectory.csv", "crossings.csv", "crossings.json"],
            "n_crossings": len(traj.crossings)}


def _evolve_one(cfg, eps):
    grid = cfg.grid_for(eps)
    psi0 = make_initial_state(cfg.initial, grid)
    times, snaps = evolve(cfg.potential, psi0, cfg.t_final, dt=cfg.dt, times=cfg.observation_times())
    return grid, times, snaps


def run_evolve(cfg, out, threads):
    runs = _parallel_map(lambda e: _evolve_one(cfg, e), cfg.eps_list, threads)
    manifest = {"runs": []}
    rows = []
    outputs = []
    for k, (eps, (grid, times, snaps)) in enumerate(zip(cfg.eps_list, runs)):
        files = []
        for j, psi in enumerate(snaps):
            name = f"psi_e{k}_s{j}.bin"
            psi.values.astype("<c8").tofile(out / name)
            files.append(name)
            rows.append([eps, times[j], psi.norm2(), energy(cfg.potential, psi),
                         *psi.position_mean(), *psi.momentum_mean()])
        manifest["runs"].append({"eps": eps, "grid": _grid_dict(grid), "times": times,
                                 "files": files, "dtype": "complex64 little-endian, C order"})
        outputs += files
    d = cfg.potential.dim
    write_csv(out / "evolve.csv", ["eps", "t", "norm2", "energy"] + [f"mean_x{i + 1}" for i in range(d)]
              + [f"mean_xi{i + 1}" for i in range(d)], rows)
    write_json(out / "evolve_manifest.json", manifest)
    return {"outputs": outputs + ["evolve.csv", "evolve_manifest.json"]}


def _load_snapshots(manifest_path):
    base = Path(manifest_path).parent
    man = json.loads(Path(manifest_path).read_text())
    for run in man["runs"]:
        grid = Grid(tuple(tuple(ax) for ax in run["grid"]["axes"]), run["grid"]["eps"])
        snaps = [WavefunctionGrid(grid, np.fromfile(base / f, dtype="<c8").reshape(grid.shape))
                 for f in run["files"]]
        yield run["eps"], grid, run["times"], snaps


def run_wigner(cfg, out, threads, input_manifest=None):
    if input_manifest is not None:
        runs = list(_load_snapshots(input_manifest))
    else:
        runs = [(eps,) + r for eps, r in
                zip(cfg.eps_list, _parallel_map(lambda e: _evolve_one(cfg, e), cfg.eps_list, threads))]
    rows, manifest, outputs = [], {"runs": []}, []
    for k, (eps, grid, times, snaps) in enumerate(runs):
        entry = {"eps": eps, "grid": _grid_dict(grid), "times": times, "files": []}
        for j, psi in enumerate(snaps):
            if int(np.prod(grid.shape)) ** 2 <= MAX_DENSE:
                field = wigner_transform(psi)
                name = f"wigner_e{k}_s{j}.bin"
                field.values.astype("<f8").tofile(out / name)
                entry["files"].append(name)
                entry["xi_axes"] = [[float(ax[0]), float(ax[1] - ax[0]), len(ax)] for ax in field.xi_axes]
                vals = [pair_symbol(a, field) for a in cfg.symbols]
            else:
                vals = list(pair_symbol_streaming(cfg.symbols, psi)) if cfg.symbols else []
            for a, v in zip(cfg.symbols, vals):
                rows.append([eps, times[j], a.label, v])
        entry["dtype"] = "float64 little-endian, C order, shape x-axes then sorted xi-axes"
        manifest["runs"].append(entry)
        outputs += entry["files"]
    write_csv(out / "pairings.csv", ["eps", "t", "symbol", "value"], rows)
    write_json(out / "wigner_manifest.json", manifest)
    return {"outputs": outputs + ["pairings.csv", "wigner_manifest.json"]}


def evaluate_checks(result, checks):
    """Pass/fail of each configured check on an Egorov result.

    Recognized keys: ``slope_min``, ``final_ratio_max`` (``D`` at the
    smallest eps over ``D`` at the largest), ``gap_max`` and
    ``strictly_decreasing`` (``true`` to require it).
    """
    gaps = result.gaps
    D = [gaps[e] for e in sorted(gaps, reverse=True)]  # eps decreasing
    out = {}
    if checks.get("strictly_decreasing"):
        out["strictly_decreasing"] = all(b < a for a, b in zip(D, D[1:]))
    if "slope_min" in checks:
        out["slope_min"] = result.slope is not None and result.slope >= checks["slope_min"]
    if "final_ratio_max" in checks:
        out["final_ratio_max"] = D[-1] <= checks["final_ratio_max"] * D[0]
    if "gap_max" in checks:
        out["gap_max"] = max(D) <= checks["gap_max"]
    return {k: bool(v) for k, v in out.items()}


def run_egorov(cfg, out, threads):
    diag = cfg.diagnostics
    t = diag.get("t_observe", cfg.t_final)
    symbols = cfg.symbols or [constant(cfg.potential.dim)]
    result = egorov_gap(cfg.potential, cfg.initial, symbols, t, cfg.eps_list, grid_for=cfg.grid_for,
                        realization=diag.get("realization", "wigner"),
                        n_samples=diag.get("n_samples", 10_000), seed=cfg.seed)
    rows = [[r.eps, r.symbol, r.quantum, r.classical, r.gap] for r in result.rows]
    write_csv(out / "egorov.csv", ["eps", "symbol", "quantum", "classical", "gap"], rows)
    verdict = evaluate_checks(result, diag.get("checks", {}))
    summary = {"t": t, "slope": result.slope, "slope_reliable": result.slope_reliable,
               "table": [{"eps": e, "D": g} for e, g in result.table()],
               "checks": verdict, "passed": all(verdict.values())}
    write_json(out / "egorov_summary.json", summary)
    return {"outputs": ["egorov.csv", "egorov_summary.json"], "checks_passed": summary["passed"]}


def run_two_microlocal(cfg, out, threads):
    diag = cfg.diagnostics
    pot = cfg.potential
    t = diag.get("t_observe", cfg.t_final)
    base = cfg.symbols[0] if cfg.symbols else constant(pot.dim)
    b = TwoMicrolocalSymbol(base, codim=pot.codim, label=base.label)
    radii = diag.get("tube_radii", [])

    def one(eps):
        grid = cfg.grid_for(eps)
        psi0 = make_initial_state(cfg.initial, grid)
        times = sorted(set(cfg.observation_times()) | {t})
        times, snaps = evolve(pot, psi0, max(times), dt=cfg.dt, times=times)
        psi_t = snaps[times.index(t)]
        lattice = split_lattice(b, {eps: psi_t}, diag.get("R", [4.0]), diag.get("delta", [0.2]))
        masses = []
        if radii:
            fields = [wigner_transform(s) for s in snaps]
            for r in radii:
                if len(times) > 1:
                    masses.append([eps, r, time_averaged_mass_near_S(pot, fields, times, r)])
                else:
                    masses.append([eps, r, mass_near_S(pot, fields[0], r)])
        return lattice, masses

    results = _parallel_map(one, cfg.eps_list, threads)
    rows = [list(r) for lat, _ in results for r in lat]
    write_csv(out / "two_microlocal.csv", ["eps", "R", "delta", "inner", "outer", "bulk", "full"], rows)
    outputs = ["two_microlocal.csv"]
    if radii:
        write_csv(out / "mass_near_S.csv", ["eps", "r", "mass"], [m for _, ms in results for m in ms])
        outputs.append("mass_near_S.csv")
    return {"outputs": outputs}


# --------------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="conicwigner", description=__doc__.splitlines()[0])
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", required=True, help="JSON run configuration")
    ap.add_argument("--out", default=None, help="output directory (default: config 'output')")
    ap.add_argument("--threads", type=int, default=1, help="worker threads across eps values")
    ap.add_argument("--seed", type=int, default=None, help="override the configured seed")
    ap.add_argument("--input", default=None, help="evolve manifest to read snapshots from (wigner)")
    ap.add_argument("--check", action="store_true", help="exit with status 4 if a configured check fails")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _versions():
    return {"conicwigner": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t_start = time.perf_counter()
    manifest = {"subcommand": args.subcommand, "versions": _versions(), "config": args.config}
    out = Path(args.out) if args.out else None
    status = EXIT_OK
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        manifest.update(config_hash=cfg.config_hash, seed=cfg.seed)
        out = out or Path(cfg.output)
        out.mkdir(parents=True, exist_ok=True)
        if args.subcommand == "trajectory":
            info = run_trajectory(cfg, out, args.threads)
        elif args.subcommand == "evolve":
            info = run_evolve(cfg, out, args.threads)
        elif args.subcommand == "wigner":
            info = run_wigner(cfg, out, args.threads, args.input)
        elif args.subcommand == "egorov-check":
            info = run_egorov(cfg, out, args.threads)
            if args.check and not info["checks_passed"]:
                status = EXIT_CHECK
        else:
            info = run_two_microlocal(cfg, out, args.threads)
        manifest.update(info)
    except (ConfigError, ValueError) as exc:
        status = EXIT_CONFIG
        manifest["error"] = _error_record(exc)
    except (NumericalFailure, ConicWignerError) as exc:
        status = EXIT_NUMERIC
        manifest["error"] = _error_record(exc)
    manifest["status"] = status
    manifest["wall_time_s"] = time.perf_counter() - t_start
    if "error" in manifest:
        print(f"conicwigner: {manifest['error']['type']}: {manifest['error']['message']}", file=sys.stderr)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "manifest.json", manifest)
    return status


def _error_record(exc):
    rec = {"type": type(exc).__name__, "message": str(exc)}
    for attr in ("violations", "particle_index"):
        val = getattr(exc, attr, None)
        if val is not None:
            rec[attr] = val
    return rec


if __name__ == "__main__":
    sys.exit(main())
