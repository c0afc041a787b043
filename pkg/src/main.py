"""Command line entry point: run benchmarks, build references, compare runs."""

import argparse
import logging
import signal
import sys
from dataclasses import replace

from src.config import Config, setup_logging
from src.drivers import SOLVERS, SolverOptions
from src.errors import SolverError
from src.experiments import (
    ExperimentSpec, compare, load_artifacts, reference_solution, resolve_problem,
    run_experiment,
)
from src.search import SearchConfig

log = logging.getLogger(__name__)

# Global state
shutdown_requested = False


def signal_handler(sig, frame):
    """Request a graceful stop; solvers return a partial trace."""
    global shutdown_requested
    print("\n[Main] Stop requested, finishing current iteration...")
    shutdown_requested = True


def stop_requested():
    return shutdown_requested


def build_parser():
    parser = argparse.ArgumentParser(
        prog='bench',
        description='Lazy conditional gradient solvers for sparse measure optimization',
    )
    parser.add_argument('--config', default='config.yaml', help='YAML configuration file')
    parser.add_argument('--log-level', default=None, help='Override logging.level')
    sub = parser.add_subparsers(dest='command', required=True)

    def add_solver_flags(p):
        p.add_argument('--problem', required=True,
                       help="'heat', 'signal' or a YAML/JSON problem config")
        p.add_argument('--tol', type=float, default=None)
        p.add_argument('--grid-n', dest='grid_per_dim', type=int, default=None)
        p.add_argument('--max-local-iters', type=int, default=None)
        p.add_argument('--cache-size', type=int, default=None)
        p.add_argument('--coef-max-iters', type=int, default=None)
        p.add_argument('--m-beta', type=float, default=None)
        p.add_argument('--cache-dir', default=None, help='Reference cache directory')

    run = sub.add_parser('run', help='Run one solver and write its artifacts')
    add_solver_flags(run)
    run.add_argument('--solver', required=True, choices=sorted(SOLVERS))
    run.add_argument('--out', default=None, help='Output directory')
    run.add_argument('--no-reference', action='store_true',
                     help='Skip the reference solve; residuals stay empty')

    ref = sub.add_parser('reference', help='Solve to 1e-14 with PDAP and cache the result')
    add_solver_flags(ref)

    cmp_ = sub.add_parser('compare', help='Compare finished runs over one problem')
    cmp_.add_argument('paths', nargs='+', help='Result directories or summary files')
    cmp_.add_argument('--tol', type=float, default=1e-12)
    cmp_.add_argument('--out', default=None, help='Where to write compare.csv/json')
    return parser


def build_options(config, args):
    """SolverOptions from config defaults overridden by CLI flags."""
    search = SearchConfig.from_config(
        config,
        grid_per_dim=args.grid_per_dim,
        max_local_iters=args.max_local_iters,
        cache_size=args.cache_size,
    )
    opts = SolverOptions.from_config(
        config, search=search,
        tol=args.tol, coef_max_iters=args.coef_max_iters, m_beta=args.m_beta,
    )
    return replace(opts, should_stop=stop_requested)


def print_summary(summary):
    print("\n" + "=" * 60)
    print(f"  {summary['solver'].upper()} on {summary['problem']}: {summary['status']}")
    print("=" * 60)
    print(f"  Outer iterations: {summary['iters']}")
    print(f"  Lazy / exact calls: {summary['lazy_calls']} / {summary['exact_calls']}")
    if summary['recomputes']:
        print(f"  Recompute steps: {summary['recomputes']}")
    print(f"  Final J: {summary['final_J']:.12e}")
    print(f"  Final support: {len(summary['final_support'])} atoms")
    for atom in summary['final_support']:
        x = ', '.join(f"{c:.6f}" for c in atom['x'])
        print(f"    x=({x})  w={atom['w']:+.6f}")
    print(f"  Time: {summary['time_s']:.2f}s (cpu {summary['cpu_time_s']:.2f}s)")
    if summary['message']:
        print(f"  Message: {summary['message']}")
    print("=" * 60 + "\n")


def cmd_run(config, args):
    out_dir = args.out or config.get('bench.out_dir', 'results')
    cache_dir = args.cache_dir or config.get('bench.cache_dir', '.cache')
    spec = ExperimentSpec(
        name=args.problem,
        solver=args.solver,
        opts=build_options(config, args),
        out_dir=out_dir,
        cache_dir=cache_dir,
        use_reference=not args.no_reference,
        config=config,
    )
    result = run_experiment(spec)
    print_summary(result.summary)
    print(f"[Main] Artifacts written to {out_dir}")
    return 0 if result.success else 1


def cmd_reference(config, args):
    cache_dir = args.cache_dir or config.get('bench.cache_dir', '.cache')
    problem, _ = resolve_problem(args.problem, config)
    reference = reference_solution(problem, build_options(config, args), cache_dir)
    print(f"[Main] Reference J={reference.J:.15e} gap={reference.gap:.3e} "
          f"support={len(reference.support)} iterations={reference.iterations}")
    print(f"[Main] Cached in {cache_dir} (hash {reference.problem_hash[:12]})")
    return 0


def cmd_compare(config, args):
    artifacts = []
    for path in args.paths:
        artifacts.extend(load_artifacts(path))
    report = compare(artifacts, tol=args.tol, out_dir=args.out)
    print(f"\n[Main] Baseline: {report.baseline}, tolerance {args.tol:g}")
    for label, t in report.times.items():
        print(f"  {label:<12} time-to-tol {t:10.3f}s  speedup {report.speedups[label]:.3f}")
    return 0


COMMANDS = {
    'run': cmd_run,
    'reference': cmd_reference,
    'compare': cmd_compare,
}


def main(argv=None):
    """Main application function."""
    args = build_parser().parse_args(argv)

    # Setup signal handler
    signal.signal(signal.SIGINT, signal_handler)
    signal.signal(signal.SIGTERM, signal_handler)

    try:
        config = Config(args.config)
        setup_logging(args.log_level or config.get('logging.level', 'INFO'),
                      config.get('logging.file'))
        print("=" * 60)
        print("  SPARSE MEASURE BENCHMARK")
        print("=" * 60)
        return COMMANDS[args.command](config, args)
    except SolverError as e:
        log.error("%s", e)
        print(f"\n[Main] ERROR: {e}")
        return 1


if __name__ == '__main__':
    sys.exit(main())
