"""Benchmark problems, reference solutions and experiment artifacts."""

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import psutil
import yaml

from src.drivers import SolverOptions, Trace, estimate_residual, make_solver, run_pdap
from src.errors import ConfigError, ProblemMismatchError, ReferenceNotConvergedError
from src.measures import SparseMeasure, total_variation
from src.model import (
    Box, HeatKernel, HyperParams, Problem, QuadraticFidelity, SineKernel, forward,
)

log = logging.getLogger(__name__)

HEAT_TIME = 0.025
HEAT_ALPHA = 0.1
HEAT_SOURCES = ([[0.28, 0.71], [0.51, 0.27], [0.71, 0.53]], [1.0, -0.7, 0.8])
HEAT_PARAMS = HyperParams(
    gamma=1.0, theta=0.1, R=0.01, sigma=0.002, L=1.0,
    C_K=6.26, C_Kp=27.13, m_lo=0.001, m_hi=0.1,
)

SIGNAL_LENGTH = 60.0
SIGNAL_SAMPLES = 120
SIGNAL_ALPHA = 0.1
SIGNAL_SOURCES = ([[3.125], [7.0], [math.sqrt(179.0)]], [-1.0, 0.7, 0.5])
SIGNAL_PARAMS = HyperParams(
    gamma=1.0, theta=0.1, R=0.1, sigma=0.05, L=1.0,
    C_K=8.44, C_Kp=39.49, m_lo=0.001, m_hi=0.1,
)

REFERENCE_TOL = 1e-14


def heat_sensors(layout='boundary'):
    """Uniform 4x4 sensor grid on [0, 1]^2, with or without the boundary nodes."""
    if layout == 'boundary':
        axis = np.linspace(0.0, 1.0, 4)
    elif layout == 'interior':
        axis = (np.arange(4) + 0.5) / 4.0
    else:
        raise ConfigError(f"unknown heat sensor layout {layout!r}")
    mesh = np.meshgrid(axis, axis, indexing='ij')
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def signal_times(convention='right', n=SIGNAL_SAMPLES):
    """``n`` equidistant sampling times on [0, 1]."""
    if n < 1:
        raise ConfigError(f"need at least one sampling time, got {n}")
    if convention == 'right':
        return np.arange(1, n + 1) / n
    if convention == 'inclusive':
        return np.linspace(0.0, 1.0, n)
    raise ConfigError(f"unknown signal time grid {convention!r}")


def _with_ground_truth(domain, kernel, alpha, params, truth, name):
    blank = Problem(domain, kernel, QuadraticFidelity(np.zeros(1)), alpha, params, name)
    y_dagger = forward(blank, truth)
    return Problem(domain, kernel, QuadraticFidelity(y_dagger), alpha, params, name)


def build_heat_problem(sensor_grid='boundary'):
    """Source location from heat measurements on [0, 1]^2.

    Returns:
        (Problem, ground truth measure)
    """
    truth = SparseMeasure.from_atoms(*HEAT_SOURCES)
    kernel = HeatKernel(heat_sensors(sensor_grid), HEAT_TIME)
    domain = Box([0.0, 0.0], [1.0, 1.0])
    return _with_ground_truth(domain, kernel, HEAT_ALPHA, HEAT_PARAMS, truth, 'heat'), truth


def build_signal_problem(time_grid='right'):
    """Frequency recovery from sine samples on [0, 60].

    Returns:
        (Problem, ground truth measure)
    """
    truth = SparseMeasure.from_atoms(*SIGNAL_SOURCES)
    kernel = SineKernel(signal_times(time_grid))
    domain = Box([0.0], [SIGNAL_LENGTH])
    return _with_ground_truth(domain, kernel, SIGNAL_ALPHA, SIGNAL_PARAMS, truth, 'signal'), truth


def _load_mapping(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"problem config {path} not found")
    with open(path, 'r') as f:
        if path.suffix == '.json':
            data = json.load(f)
        else:
            data = yaml.safe_load(f)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: problem config must be a mapping")
    return data


def _kernel_from_config(data):
    kernel_cfg = data['kernel']
    if isinstance(kernel_cfg, str):
        kind, options = kernel_cfg, data.get('kernel_params') or {}
    elif isinstance(kernel_cfg, dict):
        kind, options = kernel_cfg.get('type'), kernel_cfg
    else:
        raise ConfigError(f"kernel must be a name or a mapping, got {type(kernel_cfg).__name__}")
    if not isinstance(options, dict):
        raise ConfigError("kernel_params must be a mapping")
    if kind in ('heat2d', 'heat'):
        sensors = options.get('sensors')
        if sensors is None:
            sensors = heat_sensors(options.get('sensor_grid', 'boundary'))
        return HeatKernel(sensors, float(options['t']))
    if kind in ('sine1d', 'sine'):
        times = options.get('times')
        if times is None:
            times = signal_times(options.get('time_grid', 'right'), int(options['n_times']))
        return SineKernel(times)
    raise ConfigError(f"unknown kernel type {kind!r}, expected 'heat2d' or 'sine1d'")


def problem_from_config(source):
    """Build a problem from a YAML/JSON file or an already loaded mapping.

    Expected keys: ``domain`` {lo, hi}, ``kernel`` 'heat2d' or 'sine1d' with
    ``kernel_params`` {t} or {n_times}, ``alpha``, optional ``params`` and
    ``data`` holding either ``ground_truth`` (list of {x, w}) or ``y_dagger``.
    A heat kernel uses the 4x4 sensor grid unless ``sensors`` is given, a sine
    kernel samples n_times points of (0, 1] unless ``times`` is given.

    The nested form ``kernel: {type: heat|sine, ...}`` with ``ground_truth``
    or ``y_dagger`` at top level is read as well.

    Returns:
        (Problem, ground truth measure or None)
    """
    data = source if isinstance(source, dict) else _load_mapping(source)
    try:
        domain = Box(data['domain']['lo'], data['domain']['hi'])
        kernel = _kernel_from_config(data)
        alpha = float(data['alpha'])
        params = HyperParams.from_dict(data.get('params') or {})
        name = data.get('name', 'custom')
        observed = data.get('data', data)
        if not isinstance(observed, dict):
            raise ConfigError("data must be a mapping")
        if 'ground_truth' in observed:
            truth = SparseMeasure.from_json(observed['ground_truth'], dim=domain.dim)
            return _with_ground_truth(domain, kernel, alpha, params, truth, name), truth
        if 'y_dagger' in observed:
            fidelity = QuadraticFidelity(observed['y_dagger'])
            return Problem(domain, kernel, fidelity, alpha, params, name), None
    except ConfigError:
        raise
    except KeyError as e:
        raise ConfigError(f"incomplete problem config: missing {e}") from None
    except (TypeError, AttributeError, ValueError) as e:
        raise ConfigError(f"invalid problem config: {e}") from None
    raise ConfigError("problem config needs 'ground_truth' or 'y_dagger' under 'data'")


def resolve_problem(name, config=None):
    """Named benchmark ('heat', 'signal') or path to a problem config."""
    get = config.get if config is not None else (lambda key, default=None: default)
    if name == 'heat':
        return build_heat_problem(get('bench.heat_sensor_grid', 'boundary'))
    if name == 'signal':
        return build_signal_problem(get('bench.signal_time_grid', 'right'))
    return problem_from_config(name)


def problem_hash(problem):
    """SHA-256 of the canonical JSON description of ``problem``."""
    canonical = json.dumps(problem.describe(), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


@dataclass
class ReferenceSolution:
    problem_hash: str
    J: float
    gap: float
    support: SparseMeasure
    iterations: int

    def to_json(self):
        return {
            'problem_hash': self.problem_hash,
            'J': self.J,
            'gap': self.gap,
            'support': self.support.to_json(),
            'iterations': self.iterations,
        }


def reference_solution(problem, opts=None, cache_dir=None, tol=REFERENCE_TOL):
    """PDAP run to a certified gap of ``tol``, cached as reference_<hash>.json.

    Raises:
        ReferenceNotConvergedError: the PDAP run did not certify
    """
    digest = problem_hash(problem)
    path = Path(cache_dir) / f"reference_{digest}.json" if cache_dir else None
    if path is not None and path.exists():
        with open(path, 'r') as f:
            data = json.load(f)
        if data.get('problem_hash') == digest:
            log.info("reference loaded from %s", path)
            return ReferenceSolution(
                digest, data['J'], data['gap'],
                SparseMeasure.from_json(data['support'], dim=problem.dim), data['iterations'],
            )
        log.warning("ignoring %s: hash mismatch", path)

    opts = replace(opts or SolverOptions(), tol=tol)
    trace = run_pdap(problem, opts)
    if not trace.converged:
        raise ReferenceNotConvergedError(f"reference PDAP did not reach {tol:g}: {trace.message}")
    reference = ReferenceSolution(
        digest, trace.final_J, trace.records[-1].gap_est, trace.final, trace.iterations,
    )
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w') as f:
            json.dump(reference.to_json(), f, indent=2)
        log.info("reference written to %s", path)
    return reference


@dataclass
class ExperimentSpec:
    """One benchmark run: problem, solver and options."""
    name: str
    solver: str
    opts: SolverOptions = field(default_factory=SolverOptions)
    out_dir: str = 'results'
    cache_dir: Optional[str] = '.cache'
    use_reference: bool = True
    reference_tol: float = REFERENCE_TOL
    config: Optional[object] = None


@dataclass
class ExperimentResult:
    """Result of one experiment."""
    success: bool
    message: str
    duration: float
    trace: Optional[Trace] = None
    summary: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)


def _process_stats(process, rss_start):
    cpu = process.cpu_times()
    rss = max(rss_start, process.memory_info().rss)
    return cpu.user + cpu.system, rss / 2 ** 20


def write_plot_data(trace, path):
    """Residual, support size and threshold against iteration count and time."""
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['iteration', 'k', 's', 'time_s', 'residual', 'support_size', 'eps'])
        for i, r in enumerate(trace.records):
            writer.writerow([i, r.k, r.s, f"{r.time_s:.6f}", repr(r.residual),
                             r.support_size, repr(r.eps)])


def run_experiment(spec):
    """Run one solver on one problem and write trace, summary and plot CSVs.

    Returns:
        ExperimentResult; ``success`` is False when the solver did not converge
    """
    start = time.time()
    process = psutil.Process()
    rss_start = process.memory_info().rss
    problem, truth = resolve_problem(spec.name, spec.config)
    digest = problem_hash(problem)
    out_dir = Path(spec.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    reference = None
    if spec.use_reference:
        reference = reference_solution(problem, spec.opts, spec.cache_dir, spec.reference_tol)

    solver = make_solver(spec.solver, problem, spec.opts)
    trace = solver.run()
    if reference is not None:
        estimate_residual(trace, reference.J)

    files = {
        'trace': out_dir / f"{spec.solver}_trace.csv",
        'summary': out_dir / f"{spec.solver}_summary.json",
        'plot': out_dir / f"{spec.solver}_plot.csv",
    }
    trace.to_csv(files['trace'])
    write_plot_data(trace, files['plot'])

    cpu_time, peak_rss = _process_stats(process, rss_start)
    summary = trace.summary()
    summary.update({
        'problem': spec.name,
        'problem_hash': digest,
        'tol': spec.opts.tol,
        'reference_J': reference.J if reference is not None else None,
        'ground_truth_tv': total_variation(truth) if truth is not None else None,
        'cpu_time_s': cpu_time,
        'peak_rss_mb': peak_rss,
    })
    with open(files['summary'], 'w') as f:
        json.dump(summary, f, indent=2)

    duration = time.time() - start
    log.info("%s on %s: %s in %.2fs", spec.solver, spec.name, trace.status, duration)
    return ExperimentResult(
        success=trace.converged,
        message=trace.message,
        duration=duration,
        trace=trace,
        summary=summary,
        files={k: str(v) for k, v in files.items()},
    )


@dataclass
class Artifact:
    """A finished run read back from disk."""
    summary: dict
    rows: list

    @property
    def solver(self):
        return self.summary['solver']

    @property
    def problem_hash(self):
        return self.summary.get('problem_hash')


def load_artifacts(path):
    """All runs under a results directory, or the run of one summary file."""
    path = Path(path)
    summaries = sorted(path.glob('*_summary.json')) if path.is_dir() else [path]
    if not summaries:
        raise ConfigError(f"no summaries found in {path}")
    artifacts = []
    for summary_path in summaries:
        with open(summary_path, 'r') as f:
            summary = json.load(f)
        trace_path = summary_path.with_name(summary_path.name.replace('_summary.json', '_trace.csv'))
        rows = []
        if trace_path.exists():
            with open(trace_path, 'r', newline='') as f:
                rows = [
                    {k: (v if k == 'call_type' else float(v)) for k, v in row.items()}
                    for row in csv.DictReader(f)
                ]
        artifacts.append(Artifact(summary, rows))
    return artifacts


def time_to_tol(artifact, tol):
    """Seconds until the residual first drops to ``tol``.

    Falls back to the final record time of a converged run without
    residuals and to infinity otherwise.
    """
    for row in artifact.rows:
        if not math.isnan(row['residual']) and row['residual'] <= tol:
            return row['time_s']
    if artifact.summary.get('converged') and artifact.rows:
        return artifact.rows[-1]['time_s']
    return math.inf


@dataclass
class CompareReport:
    problem_hash: str
    baseline: str
    times: dict
    speedups: dict
    rows: list

    def to_json(self):
        return {
            'problem_hash': self.problem_hash,
            'baseline': self.baseline,
            'time_to_tol': self.times,
            'speedup': self.speedups,
        }


def compare(artifacts, tol=1e-12, out_dir=None):
    """Merge runs over one problem and compute speedups of time-to-tol.

    The first artifact is the baseline; speedup = baseline time / run time.
    Labels are solver names, suffixed with the run index on collisions.

    Raises:
        ProblemMismatchError: runs over different problem hashes
    """
    if len(artifacts) < 2:
        raise ConfigError("compare needs at least two runs")
    hashes = {a.problem_hash for a in artifacts}
    if len(hashes) != 1:
        raise ProblemMismatchError(f"runs over different problems: {sorted(map(str, hashes))}")

    labels = []
    for i, a in enumerate(artifacts):
        label = a.solver if a.solver not in labels else f"{a.solver}#{i}"
        labels.append(label)
    times = {label: time_to_tol(a, tol) for label, a in zip(labels, artifacts)}
    base = times[labels[0]]
    speedups = {}
    for label in labels:
        t = times[label]
        if math.isinf(base) or math.isinf(t):
            speedups[label] = math.nan
        elif t == base:
            speedups[label] = 1.0
        else:
            speedups[label] = base / t if t > 0 else math.inf

    rows = []
    for label, a in zip(labels, artifacts):
        for i, row in enumerate(a.rows):
            rows.append({
                'solver': label, 'iteration': i, 'k': int(row['k']), 's': int(row['s']),
                'time_s': row['time_s'], 'residual': row['residual'], 'J': row['J'],
                'support_size': int(row['support_size']), 'eps': row['eps'],
                'call_type': row['call_type'],
            })
    report = CompareReport(hashes.pop(), labels[0], times, speedups, rows)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        columns = ['solver', 'iteration', 'k', 's', 'time_s', 'residual', 'J',
                   'support_size', 'eps', 'call_type']
        with open(out_dir / 'compare.csv', 'w', newline='') as f:
            writer = csv.DictWriter(f, fieldnames=columns)
            writer.writeheader()
            writer.writerows(rows)
        with open(out_dir / 'compare.json', 'w') as f:
            json.dump(report.to_json(), f, indent=2)
    return report
