"""Files written after a run: JSON report, trajectory and spectrum CSVs, matrix and field dumps."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .operators import dump_field_csv, dump_matrix
from .pipeline import report_json
from .spectral import write_spectrum_csv


class ExportError(OSError):
    pass


def _guard(path, fn, *args):
    try:
        fn(*args)
    except OSError as exc:
        raise ExportError(f"cannot write {path}: {exc.strerror or exc}") from None
    return Path(path)


def trajectory_header(n_nu, n_mu):
    return (["t", "l2", "lq", "besov"] + [f"nu_{k + 1}" for k in range(n_nu)]
            + [f"mu_{k + 1}" for k in range(n_mu)] + ["pressure_norm"])


def _write_trajectory(traj, path):
    n = 0 if traj is None else len(traj)
    nu = traj.nu if traj is not None and traj.nu is not None else np.zeros((n, 0))
    mu = traj.mu if traj is not None and traj.mu is not None else np.zeros((n, 0))
    nan = np.full(n, np.nan)
    col = lambda a: nan if a is None else a
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(trajectory_header(nu.shape[1], mu.shape[1]))
        if n == 0:
            return
        lq, bs, pn = col(traj.lq), col(traj.besov), col(traj.pressure_norm)
        for i in range(n):
            row = [traj.times[i], traj.l2[i], lq[i], bs[i], *np.real(nu[i]), *np.real(mu[i]), pn[i]]
            w.writerow([f"{x:.12e}" for x in row])


def write_trajectory_csv(traj, path):
    """Norm and control series; an empty (or missing) trajectory yields the header only."""
    return _guard(path, _write_trajectory, traj, path)


def write_report(report, path):
    return _guard(path, Path(path).write_text, report_json(report))


def write_snapshots(grid, traj, directory):
    directory = Path(directory)
    _guard(directory, directory.mkdir, 0o777, True, True)
    out = []
    for k, (t, z) in enumerate(zip(traj.state_times, traj.states)):
        p = directory / f"snapshot_{k:05d}.csv"
        out.append(_guard(p, dump_field_csv, grid, z, p))
    return out


def export_run(state, report, out_dir, command="run"):
    """Write every artifact the command produced; returns the written paths."""
    out = Path(out_dir)
    _guard(out, out.mkdir, 0o777, True, True)
    cfg, core = state.cfg, state.core
    written = []
    full = command == "run"
    if core.mesh is not None and (cfg.output.dump_mesh or command == "mesh"):
        p = out / "mesh_boundary.txt"
        written.append(_guard(p, core.mesh.dump_boundary, p))
    if core.eq is not None and command in ("equilibrium", "run"):
        p = out / "equilibrium.csv"
        written.append(_guard(p, dump_field_csv, core.grid, core.eq.ye, p))
        p = out / "force.csv"
        written.append(_guard(p, dump_field_csv, core.grid, core.eq.f, p))
    if core.spec is not None:
        p = out / "spectrum.csv"
        written.append(_guard(p, write_spectrum_csv, core.spec, p))
    if cfg.output.dump_matrices and core.ops is not None:
        p = out / "oseen_reduced.txt"
        written.append(_guard(p, dump_matrix, core.ops.oseen_reduced, p))
        if core.spec is not None and (core.designs or command in ("design", "simulate", "verify", "run")):
            p = out / "closed_loop.txt"
            written.append(_guard(p, dump_matrix, core.closed.AF, p))
    if command in ("simulate", "run") and (state.sim or command == "simulate"):
        p = out / "trajectory.csv"
        traj = state.sim.get("logged") if state.sim else None
        written.append(write_trajectory_csv(traj, p))
        if traj is not None and traj.states and (full or cfg.output.snapshot_stride):
            written += write_snapshots(core.grid, traj, out / "snapshots")
    p = out / "report.json"
    written.append(write_report(report, p))
    return written
