"""
Command-line experiment runner for the HFB lab.

Subcommands: evolve, oracle, sweep, diagnose. Exit codes: 0 success, 1 invalid
configuration or unreadable trajectory, 2 invariant abort, 3 Fock cutoff overflow.
"""
import argparse
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import structlog

import diagnostics
import export
from config import Config, RunConfig, configure_logging, load_run_config, make_rng, resolve_output_dir, resolve_seed
from dynamics import (IntegratorConfig, ModeSpaceHFB, Trajectory, default_dt, evolve, initial_condensate,
                      initial_pair_kernel, initial_state, interaction_for)
from fock_oracle import (ModeBasis, OccupationBasis, build_hamiltonian, choose_cutoff, evolve_exact_series,
                         expectation, fock_error, fock_error_from_data, number_operator, prepare,
                         quasi_free_data)
from models import ConfigError, CutoffOverflowError, HFBLabError, InvariantAbort, KrylovConvergenceError, TrajectoryError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_ABORT = 2
EXIT_CUTOFF = 3

SWEEP_AXES = {
    'N': ('potential', 'N', int),
    'beta': ('potential', 'beta', float),
    'eta': ('potential', 'eta', float),
    'dt': ('time', 'dt', float),
    'n': ('grid', 'n', int),
}

events = structlog.get_logger('hfb.run')


class HFBLabCLI:
    """Console status helpers shared by the subcommands."""

    def __init__(self, quiet: bool = False):
        self.quiet = quiet

    def print_header(self, title):
        if not self.quiet:
            print(f"\n{'='*60}")
            print(f"🔬 {title}")
            print(f"{'='*60}")

    def print_section(self, title):
        if not self.quiet:
            print(f"\n{'-'*40}")
            print(f"📋 {title}")
            print(f"{'-'*40}")

    def print_success(self, message):
        if not self.quiet:
            print(f"✅ {message}")

    def print_error(self, message):
        print(f"❌ {message}", file=sys.stderr)

    def print_info(self, message):
        if not self.quiet:
            print(f"ℹ️  {message}")

    def print_warning(self, message):
        if not self.quiet:
            print(f"⚠️  {message}")


# ============================================================================
# EVOLVE
# ============================================================================

def integrator_config(cfg: RunConfig) -> IntegratorConfig:
    t = cfg.time
    dt = t.dt if t.dt is not None else default_dt(t.scheme, cfg.grid)
    if t.T > 0:
        dt = min(dt, t.T)
    return IntegratorConfig(dt=dt, T=t.T, scheme=t.scheme, output_cadence=t.output_cadence)


def drift_statistics(traj: Trajectory) -> Dict[str, float]:
    df = pd.DataFrame(traj.monitors)
    stats = {}
    for column in ('trace_gamma', 'energy'):
        if column in df.columns:
            ref = df[column].iloc[0]
            scale = abs(ref) if ref != 0 else 1.0
            stats[f"{column}_drift"] = float((df[column] - ref).abs().max() / scale)
    for column in ('sym_residual_lambda', 'herm_residual_gamma', 'symplectic'):
        if column in df.columns:
            stats[f"max_{column}"] = float(df[column].max())
    if 'gamma_floor' in df.columns:
        stats['min_gamma_floor'] = float(df['gamma_floor'].min())
    return stats


def diagnose_trajectory(traj: Trajectory, cfg: RunConfig) -> Dict[str, Any]:
    """All norm reports for one trajectory; identical in-process and from a stored archive."""
    d = cfg.diagnostics
    reports = {
        'nt_norms': diagnostics.nt_norms(traj, d.epsilon).to_dict(),
        'pair_norms': diagnostics.pair_norm_report(traj).to_dict(),
        'symplectic': diagnostics.symplectic_report(traj).to_dict(),
        'conservation': diagnostics.conservation_report(traj).to_dict(),
        'collapsing': {
            f"{variant}_s{s:g}": diagnostics.collapsing_norm(traj, s, variant)
            for s in d.s_list for variant in (diagnostics.LAMBDA_TYPE, diagnostics.GAMMA_TYPE)
        },
    }
    flags = []
    if len(traj.frames) >= 3:
        reports['equivalence'] = diagnostics.equivalence_residual(traj).to_dict()
        if d.bbgky:
            bbgky = diagnostics.bbgky_residual(traj)
            reports['bbgky'] = bbgky.to_dict()
            flags.extend(bbgky.flags)
    else:
        flags.append('too_few_frames_for_residuals')
    for name in ('nt_norms', 'pair_norms', 'symplectic', 'conservation'):
        flags.extend(reports[name]['flags'])
    reports['flags'] = flags
    return reports


def run_evolve(cfg: RunConfig, seed: int, out_dir: Optional[str] = None) -> Tuple[Trajectory, Dict[str, Any]]:
    """Integrate one configuration; write its CSV, archive and summary when out_dir is given."""
    started = time.perf_counter()
    potential = cfg.scaled_potential
    rng = make_rng(seed)
    s0, flags = initial_state(cfg.grid, potential, cfg.initial, rng)
    icfg = integrator_config(cfg)
    log = events.bind(command='evolve', N=potential.N, beta=potential.beta, scheme=icfg.scheme)
    log.info('run.started', dt=icfg.dt, T=icfg.T, steps=icfg.steps)

    counter = {'steps': 0}

    def progress(state, record):
        counter['steps'] += 1
        if counter['steps'] % icfg.output_cadence == 0:
            log.info('run.frame', t=state.t, trace_gamma=record['trace_gamma'], energy=record.get('energy'))

    traj = evolve(s0, icfg, progress)
    traj.flags.extend(flags)
    if traj.aborted:
        log.error('run.aborted', **traj.abort)

    summary = {
        'command': 'evolve',
        'config': cfg.to_dict(),
        'seed': seed,
        'integrator': {'dt': icfg.dt, 'T': icfg.T, 'scheme': icfg.scheme, 'steps': icfg.steps,
                       'output_cadence': icfg.output_cadence},
        'drift': drift_statistics(traj),
        'abort': traj.abort,
        'flags': list(traj.flags),
        'frames': len(traj.frames),
    }
    if cfg.diagnostics.enabled and not traj.aborted:
        summary['diagnostics'] = diagnose_trajectory(traj, cfg)
    if out_dir is not None:
        export.ensure_directory(out_dir)
        export.write_monitors(traj, os.path.join(out_dir, 'trajectory.csv'))
        export.save_trajectory(traj, os.path.join(out_dir, 'trajectory.npz'))
        summary['files'] = {'monitors': 'trajectory.csv', 'trajectory': 'trajectory.npz'}
    summary['wall_clock'] = time.perf_counter() - started
    if out_dir is not None:
        export.write_summary(summary, os.path.join(out_dir, 'summary.json'))
    log.info('run.finished', frames=len(traj.frames), aborted=traj.aborted, wall_clock=summary['wall_clock'])
    return traj, summary


def cmd_evolve(cfg: RunConfig, out_dir: str, seed: int, cli: HFBLabCLI) -> int:
    cli.print_header('Coupled evolution')
    traj, summary = run_evolve(cfg, seed, out_dir)
    for name, value in summary['drift'].items():
        cli.print_info(f"{name}: {value:.3e}")
    for flag in summary['flags']:
        cli.print_warning(f"flag: {flag}")
    if traj.aborted:
        a = traj.abort
        cli.print_error(f"invariant abort at t={a['t']:.6g}: {a['monitor']}={a['value']:.3e}")
        return EXIT_ABORT
    cli.print_success(f"{len(traj.frames)} frames written to {out_dir}")
    return EXIT_OK


# ============================================================================
# ORACLE COMPARISON
# ============================================================================

def output_times(cfg: RunConfig) -> List[float]:
    icfg = integrator_config(cfg)
    if icfg.steps == 0:
        return []
    every = icfg.dt * icfg.output_cadence
    times = list(np.arange(1, int(np.floor(icfg.T / every + 1e-9)) + 1) * every)
    if not times or abs(times[-1] - icfg.T) > 1e-12:
        times.append(icfg.T)
    return [float(t) for t in times]


def run_oracle(cfg: RunConfig, seed: int, N: Optional[int] = None, max_dim: Optional[int] = None) -> Tuple[pd.DataFrame, Dict[str, Any]]:
    """
    Evolve the Fock reference and the mode-space coupled system from identical data.

    Returns:
        (per-time error table, summary dict)
    """
    potential = cfg.scaled_potential
    if N is not None:
        potential = replace(potential, N=int(N))
    N = int(potential.N)
    grid = cfg.grid
    o = cfg.oracle
    modes = ModeBasis(grid, o.modes)
    rng = make_rng(seed)

    phi = initial_condensate(grid, cfg.initial, rng)
    k = initial_pair_kernel(grid, potential, cfg.initial, phi)
    phi_m = modes.field_to_modes(phi)
    k_m = modes.pair_to_modes(k.k.values)
    k_m = 0.5 * (k_m + k_m.T)
    residual = modes.projection_residual(phi)
    if residual > 1e-6:
        events.warning('oracle.projection', residual=residual)

    max_dim = max_dim or Config.MAX_FOCK_DIM
    n_max = choose_cutoff(phi_m, k_m, N, o.n_max_policy, o.n_max, o.tail_bound, o.krylov_tol, max_dim)
    basis = OccupationBasis(o.modes, n_max, max_dim)
    H = build_hamiltonian(basis, modes, interaction_for(grid, potential).vN, N)
    number = number_operator(basis)
    events.info('run.started', command='oracle', N=N, beta=potential.beta, modes=o.modes, n_max=n_max,
                dimension=basis.dimension)

    psi0 = prepare(basis, phi_m, k_m, N, o.krylov_tol, o.tail_bound)
    hfb = ModeSpaceHFB(modes, potential)
    s0 = hfb.initial(phi_m, k_m)
    times = output_times(cfg)
    icfg = integrator_config(cfg)
    exact_states = [psi0] + evolve_exact_series(psi0, H, times, o.krylov_tol)
    hfb_states = hfb.evolve(s0, icfg.T, icfg.dt, times)

    rows = []
    for psi, s in zip(exact_states, hfb_states):
        if s.t == 0:
            err, theta = fock_error(psi, psi0)
        else:
            err, theta = fock_error_from_data(psi, s.phi, hfb.pair_kernel(s), N, o.krylov_tol, o.tail_bound)
        f, lam, gam = quasi_free_data(psi, N)
        rows.append({
            't': s.t,
            'fock_error': err,
            'phase': theta,
            'phi_error': float(np.linalg.norm(f - s.phi)),
            'lambda_error': float(np.linalg.norm(lam - s.lam)),
            'gamma_error': float(np.linalg.norm(gam - s.gam)),
            'energy_exact': float(np.real(expectation(psi, H))),
            'energy_hfb': hfb.energy(s),
            'number_exact': float(np.real(expectation(psi, number))),
            'tail_mass': psi.tail_mass(),
            'norm': psi.norm(),
        })
        events.info('run.frame', command='oracle', t=s.t, fock_error=err)
    table = pd.DataFrame(rows)
    summary = {
        'command': 'oracle',
        'config': cfg.to_dict(),
        'seed': seed,
        'N': N,
        'n_max': n_max,
        'dimension': basis.dimension,
        'projection_residual': residual,
        'max_fock_error': float(table['fock_error'].max()),
        'max_tail_mass': float(table['tail_mass'].max()),
    }
    return table, summary


def error_at(table: pd.DataFrame, t: float) -> float:
    """Fock error at the stored time closest to t."""
    idx = (table['t'] - t).abs().idxmin()
    return float(table.loc[idx, 'fock_error'])


def cmd_oracle(cfg: RunConfig, out_dir: str, seed: int, cli: HFBLabCLI,
               sweep_n: Optional[Sequence[int]] = None, sweep_t: float = 0.1) -> int:
    cli.print_header('Fock oracle comparison')
    if not cfg.oracle.enabled:
        events.error('run.rejected', command='oracle', reason='oracle.enabled is false')
        raise ConfigError('Oracle comparison is disabled in the run file',
                          {'oracle.enabled': 'Set to true to run the oracle command'})
    started = time.perf_counter()
    export.ensure_directory(out_dir)
    try:
        if sweep_n:
            rows = []
            for N in sweep_n:
                table, summary = run_oracle(cfg, seed, N=N)
                export.write_table(table, os.path.join(out_dir, f"oracle_N{N}.csv"))
                rows.append({'N': N, 't': float(table.loc[(table['t'] - sweep_t).abs().idxmin(), 't']),
                             'fock_error': error_at(table, sweep_t), 'n_max': summary['n_max']})
                cli.print_info(f"N={N}: error {rows[-1]['fock_error']:.4e}")
            export.write_rows(rows, os.path.join(out_dir, 'oracle_sweep.csv'))
            summary = {'command': 'oracle', 'config': cfg.to_dict(), 'seed': seed, 'sweep': rows,
                       'files': {'table': 'oracle_sweep.csv'}}
        else:
            table, summary = run_oracle(cfg, seed)
            export.write_table(table, os.path.join(out_dir, 'oracle.csv'))
            summary['files'] = {'table': 'oracle.csv'}
    except CutoffOverflowError as exc:
        events.error('run.aborted', command='oracle', reason=str(exc))
        cli.print_error(f"cutoff overflow: {exc}")
        return EXIT_CUTOFF
    except KrylovConvergenceError as exc:
        events.error('run.aborted', command='oracle', reason=str(exc))
        cli.print_error(f"exponential did not converge: {exc}")
        return EXIT_ABORT
    summary['wall_clock'] = time.perf_counter() - started
    export.write_summary(summary, os.path.join(out_dir, 'summary.json'))
    events.info('run.finished', command='oracle', wall_clock=summary['wall_clock'])
    cli.print_success(f"Oracle results written to {out_dir}")
    return EXIT_OK


# ============================================================================
# SWEEP
# ============================================================================

def parse_axis(spec: str) -> Tuple[str, List[Any]]:
    """'NAME=v1,v2,...' with NAME one of N, beta, eta, dt, n."""
    if '=' not in spec:
        raise ConfigError(f"Axis must look like NAME=v1,v2: {spec!r}", {'axis': 'Missing ='})
    name, raw = spec.split('=', 1)
    name = name.strip()
    if name not in SWEEP_AXES:
        raise ConfigError(f"Unknown sweep axis {name!r}", {'axis': f"Must be one of: {', '.join(SWEEP_AXES)}"})
    cast = SWEEP_AXES[name][2]
    try:
        values = [cast(v) for v in raw.split(',') if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"Bad value on axis {name}: {exc}", {'axis': str(exc)}) from exc
    if not values:
        raise ConfigError(f"Axis {name} has no values", {'axis': 'Empty value list'})
    return name, values


def config_at(cfg: RunConfig, axis: str, value: Any) -> RunConfig:
    section, key, _ = SWEEP_AXES[axis]
    raw = cfg.to_dict()
    raw[section][key] = value
    return load_run_config(raw)


def _sweep_point(args) -> Dict[str, Any]:
    """One sweep row; runs in a worker process."""
    raw, axis, value, seed, row_dir = args
    row = {'axis': axis, 'value': value, 'status': 'ok'}
    try:
        cfg = load_run_config(raw)
        traj, summary = run_evolve(cfg, seed, row_dir)
        row.update(summary['drift'])
        row['frames'] = len(traj.frames)
        if traj.aborted:
            row['status'] = 'aborted'
            row['abort_monitor'] = traj.abort['monitor']
        final = traj.frames[-1]
        row['_final'] = (final.phi, final.lam, final.gam, final.grid.weight)
    except HFBLabError as exc:
        row['status'] = 'failed'
        row['error'] = str(exc)
    return row


def convergence_columns(rows: List[Dict[str, Any]]):
    """For dt sweeps: distance to the next finer run and the observed order."""
    done = [r for r in rows if '_final' in r]
    done.sort(key=lambda r: -r['value'])
    diffs = []
    for coarse, fine in zip(done, done[1:]):
        a, b = coarse['_final'], fine['_final']
        w = a[3]
        diff = float(np.sqrt(w * np.sum(np.abs(a[0] - b[0]) ** 2) + w ** 2 * np.sum(np.abs(a[1] - b[1]) ** 2)
                             + w ** 2 * np.sum(np.abs(a[2] - b[2]) ** 2)))
        coarse['difference_to_finer'] = diff
        diffs.append((coarse, diff, coarse['value'] / fine['value']))
    for (row, diff, ratio), (_, finer_diff, _) in zip(diffs, diffs[1:]):
        if diff > 0 and finer_diff > 0:
            row['observed_order'] = float(np.log(diff / finer_diff) / np.log(ratio))


def cmd_sweep(cfg: RunConfig, axis_spec: str, out_dir: str, seed: int, cli: HFBLabCLI,
              workers: Optional[int] = None) -> int:
    cli.print_header('Parameter sweep')
    axis, values = parse_axis(axis_spec)
    export.ensure_directory(out_dir)
    raw_points = []
    for i, value in enumerate(values):
        point = config_at(cfg, axis, value).to_dict()
        raw_points.append((point, axis, value, seed, os.path.join(out_dir, f"point_{i:03d}")))
    workers = workers or Config.WORKERS
    events.info('run.started', command='sweep', axis=axis, points=len(values), workers=workers)

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_point, raw_points))
    else:
        rows = [_sweep_point(p) for p in raw_points]

    if axis == 'dt':
        convergence_columns(rows)
    for row in rows:
        row.pop('_final', None)
        status = row['status']
        message = f"{axis}={row['value']}: {status}"
        if status == 'ok':
            cli.print_success(message)
        else:
            cli.print_warning(message)
    export.write_rows(rows, os.path.join(out_dir, 'sweep.csv'), columns=['axis', 'value', 'status'])
    summary = {'command': 'sweep', 'config': cfg.to_dict(), 'seed': seed, 'axis': axis, 'values': values,
               'rows': rows, 'files': {'table': 'sweep.csv'}}
    export.write_summary(summary, os.path.join(out_dir, 'summary.json'))
    ok = all(r['status'] == 'ok' for r in rows)
    events.info('run.finished', command='sweep', all_ok=ok)
    return EXIT_OK if ok else EXIT_ABORT


# ============================================================================
# DIAGNOSE
# ============================================================================

def cmd_diagnose(trajectory_path: str, cfg: RunConfig, out_dir: str, cli: HFBLabCLI) -> int:
    cli.print_header('Trajectory diagnostics')
    try:
        traj = export.load_trajectory(trajectory_path)
        report = diagnose_trajectory(traj, cfg)
    except TrajectoryError as exc:
        cli.print_error(f"trajectory error: {exc}")
        return EXIT_CONFIG
    export.ensure_directory(out_dir)
    report['trajectory'] = os.path.basename(trajectory_path)
    export.write_summary(report, os.path.join(out_dir, 'diagnostics.json'))
    for flag in report['flags']:
        cli.print_warning(f"flag: {flag}")
    cli.print_success(f"Diagnostics written to {out_dir}")
    return EXIT_OK


# ============================================================================
# ENTRY POINT
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='hfb-lab', description='Coupled condensate / pair dynamics experiments')
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='JSON run file')
    common.add_argument('--out', help='output directory')
    common.add_argument('--seed', type=int, help='random seed')
    common.add_argument('--quiet', action='store_true', help='suppress console status')
    sub = parser.add_subparsers(dest='command', required=True)

    sub.add_parser('evolve', parents=[common], help='integrate the coupled system')
    oracle = sub.add_parser('oracle', parents=[common], help='compare with the exact Fock evolution')
    oracle.add_argument('--sweep-n', help='comma-separated particle numbers')
    oracle.add_argument('--sweep-t', type=float, default=0.1, help='time at which sweep errors are read')
    sweep = sub.add_parser('sweep', parents=[common], help='run evolve over one parameter axis')
    sweep.add_argument('--axis', required=True, help='NAME=v1,v2,... with NAME in N, beta, eta, dt, n')
    sweep.add_argument('--workers', type=int, help='worker processes (default HFB_WORKERS)')
    diagnose = sub.add_parser('diagnose', parents=[common], help='norm reports of a stored trajectory')
    diagnose.add_argument('trajectory', help='trajectory .npz archive')
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging()
    cli = HFBLabCLI(quiet=args.quiet)
    try:
        cfg = load_run_config(args.config)
        seed = resolve_seed(args.seed, cfg)
        out_dir = resolve_output_dir(args.out, cfg)
        if args.command == 'evolve':
            return cmd_evolve(cfg, out_dir, seed, cli)
        if args.command == 'oracle':
            sweep_n = [int(v) for v in args.sweep_n.split(',') if v.strip()] if args.sweep_n else None
            return cmd_oracle(cfg, out_dir, seed, cli, sweep_n, args.sweep_t)
        if args.command == 'sweep':
            return cmd_sweep(cfg, args.axis, out_dir, seed, cli, args.workers)
        return cmd_diagnose(args.trajectory, cfg, out_dir, cli)
    except ConfigError as exc:
        detail = f" {exc.errors}" if exc.errors else ''
        cli.print_error(f"configuration error: {exc}{detail}")
        return EXIT_CONFIG
    except InvariantAbort as exc:
        cli.print_error(f"invariant abort at t={exc.t:.6g}: {exc.monitor}={exc.value:.3e}")
        return EXIT_ABORT
    except CutoffOverflowError as exc:
        cli.print_error(f"cutoff overflow: {exc}")
        return EXIT_CUTOFF
    except ValueError as exc:
        cli.print_error(f"invalid argument: {exc}")
        return EXIT_CONFIG


if __name__ == '__main__':
    sys.exit(main())
