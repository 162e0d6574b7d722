"""Batch command line: forward simulation, inversion runs, scaling benchmark.

Subcommands
-----------
``forward``  simulate the true model, add noise, write data + model files
``invert``   run the requested inversion modes and write traces/models/metrics
``bench``    strong-scaling benchmark of the per-block operations

All numeric outputs are deterministic given the config and seed; wall times go
to a separate ``timings.txt`` so metric files reproduce byte for byte.
"""

import argparse
import gc
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .basis import BasisBuilder, apply_Xk, apply_Yk
from .config import load_config
from .forward import forward_full
from .inversion import (
    GNConfig, Objective, add_noise, misfit_ssd, projected_gauss_newton,
    FullProblem, FixedReducedProblem, AdaptiveReducedProblem,
)
from .io import dump_basis_triplets, export_model_vtk, export_trace_csv
from .models import compute_relative_error
from .operators import assemble_operator

_MODE_KEYS = {"full": "full", "ms-fixed": "ms_fixed", "ms-adaptive": "ms_adaptive"}


def _provenance():
    return (f"# msinv {__version__} | numpy {np.__version__} | "
            f"scipy {scipy.__version__}")


def _blas_single_thread():
    """Pin BLAS pools to one thread so worker scaling is measured cleanly."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return nullcontext()
    return threadpool_limits(limits=1)


def _write_lines(path, lines):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _simulate_observed(config, mesh, survey, m_true):
    op = assemble_operator(mesh, m_true)
    D_clean, _ = forward_full(op, survey, solver=config.solver,
                              cg_tol=config.cg_tol, cg_maxit=config.cg_maxit)
    return D_clean, add_noise(D_clean, config.noise, config.seed)


def make_problem(config, mode, mesh, survey, builder=None):
    if mode == "full":
        return FullProblem(mesh, survey, solver=config.solver,
                           cg_tol=config.cg_tol, cg_maxit=config.cg_maxit)
    if builder is None:
        raise ValueError("multiscale modes need a basis builder")
    if mode == "ms-fixed":
        return FixedReducedProblem(builder, survey)
    if mode == "ms-adaptive":
        return AdaptiveReducedProblem(builder, survey, workers=config.workers)
    raise ValueError(f"unknown mode {mode!r}")


def cmd_forward(config):
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    mesh = config.mesh()
    m_true = config.true_model(mesh)
    survey = config.survey(mesh)

    t0 = time.perf_counter()
    D_clean, d_obs = _simulate_observed(config, mesh, survey, m_true)
    wall = time.perf_counter() - t0

    export_model_vtk(m_true, mesh, out / "model_true.vtk")
    np.savetxt(out / "d_obs.csv", d_obs, fmt="%.17g", delimiter=",")

    lines = [_provenance(), "", "[config]"]
    lines += config.echo_lines()
    lines += ["", "[forward]",
              f"data_norm = {np.linalg.norm(D_clean):.17g}",
              f"noise_norm = {np.linalg.norm(d_obs - D_clean):.17g}",
              f"receivers = {survey.n_receivers}",
              f"sources = {survey.n_sources}"]
    _write_lines(out / "metrics.txt", lines)
    _write_lines(out / "timings.txt", [f"forward_seconds = {wall:.3f}"])
    return 0


def cmd_invert(config):
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    mesh = config.mesh()
    m_true = config.true_model(mesh)
    survey = config.survey(mesh)
    m_ref = config.reference_model(mesh)

    timings = []
    t0 = time.perf_counter()
    D_clean, d_obs = _simulate_observed(config, mesh, survey, m_true)
    timings.append(f"forward_seconds = {time.perf_counter() - t0:.3f}")
    export_model_vtk(m_true, mesh, out / "model_true.vtk")
    np.savetxt(out / "d_obs.csv", d_obs, fmt="%.17g", delimiter=",")

    needs_ms = any(mode != "full" for mode in config.modes)
    builder = None
    if needs_ms:
        partition = config.partition(mesh)
        builder = BasisBuilder(partition, config.basis_spec(), Q=survey.Q,
                               m_ref=m_ref, workers=config.workers)
        if config.dump_basis:
            op_ref = assemble_operator(mesh, m_ref)
            dump_basis_triplets(builder.assemble(op_ref), out / "basis_triplets.txt")

    objective = Objective(mesh=mesh, alpha=config.alpha, m_ref=m_ref)
    gn_config = GNConfig(max_gn=config.max_gn, max_cg=config.max_cg,
                         lower=config.lower, upper=config.upper)

    results = {}
    for mode in config.modes:
        problem = make_problem(config, mode, mesh, survey, builder)
        t0 = time.perf_counter()
        m_est, trace = projected_gauss_newton(problem, m_ref, d_obs,
                                              objective, gn_config)
        timings.append(f"invert_{_MODE_KEYS[mode]}_seconds = "
                       f"{time.perf_counter() - t0:.3f}")
        key = _MODE_KEYS[mode]
        export_trace_csv(trace, out / f"trace_{key}.csv")
        export_model_vtk(m_est, mesh, out / f"model_{key}.vtk")
        results[mode] = (m_est, trace)

    lines = [_provenance(), "", "[config]"]
    lines += config.echo_lines()
    lines += ["", "[results]"]
    baseline = results.get("full", (None, None))[0]
    for mode in config.modes:
        key = _MODE_KEYS[mode]
        m_est, trace = results[mode]
        final = trace.rows[-1]
        lines.append(f"{key}.final_misfit = {final['phi']:.17g}")
        lines.append(f"{key}.final_total = {final['total']:.17g}")
        lines.append(f"{key}.iterations = {final['iter']}")
        lines.append(f"{key}.error_vs_true = "
                     f"{compute_relative_error(m_est, m_true):.17g}")
        if baseline is not None:
            lines.append(f"{key}.error_vs_full = "
                         f"{compute_relative_error(m_est, baseline):.17g}")
        if trace.line_search_failed:
            lines.append(f"{key}.line_search_failed = 1")
        for note in trace.notes:
            lines.append(f"{key}.note = {note}")
    _write_lines(out / "metrics.txt", lines)
    _write_lines(out / "timings.txt", timings)
    return 0


def scaling_benchmark(config, worker_counts, repeats=5):
    """Median wall times for the per-block operations at each worker count.

    Outputs are verified bitwise identical to serial before anything is
    timed.  Measurement rounds interleave the worker counts so slow drift of
    the machine hits every count equally.
    """
    mesh = config.mesh()
    partition = config.partition(mesh)
    survey = config.survey(mesh)
    m_true = config.true_model(mesh)
    m_ref = config.reference_model(mesh)
    builder = BasisBuilder(partition, config.basis_spec(), Q=survey.Q, m_ref=m_ref)
    op = assemble_operator(mesh, m_true)
    m = op.m

    def _same(A, B):
        return (A.shape == B.shape and np.array_equal(A.indptr, B.indptr)
                and np.array_equal(A.indices, B.indices)
                and np.array_equal(A.data, B.data))

    with _blas_single_thread():
        # the serial reference shares the pinned BLAS pool so that bitwise
        # comparison isolates the effect of our own worker count
        basis_ref = builder.assemble(op, workers=1)
        rng = np.random.default_rng(config.seed)
        v = rng.normal(size=basis_ref.k)
        w = rng.normal(size=basis_ref.n)
        Y_ref = apply_Yk(basis_ref, v, m, workers=1)
        X_ref = apply_Xk(basis_ref, w, m, workers=1)

        bases = {}
        for count in worker_counts:
            basis = builder.assemble(op, workers=count)
            if not _same(basis.S.tocsr(), basis_ref.S.tocsr()):
                raise RuntimeError(f"basis at {count} workers differs from serial")
            if not _same(apply_Yk(basis, v, m, workers=count), Y_ref):
                raise RuntimeError(f"dSv at {count} workers differs from serial")
            if not _same(apply_Xk(basis, w, m, workers=count), X_ref):
                raise RuntimeError(f"dStw at {count} workers differs from serial")
            bases[count] = basis

        ops = {
            "basis": lambda count: builder.assemble(op, workers=count),
            "dSv": lambda count: apply_Yk(bases[count], v, m, workers=count),
            "dStw": lambda count: apply_Xk(bases[count], w, m, workers=count),
        }
        samples = {count: {name: [] for name in ops} for count in worker_counts}
        for name, fn in ops.items():
            # one untimed warmup round, then interleave the counts so machine
            # drift and allocator state hit every count alike
            for count in worker_counts:
                fn(count)
            for rep in range(repeats):
                for count in worker_counts:
                    gc.collect()
                    t0 = time.perf_counter()
                    fn(count)
                    samples[count][name].append(time.perf_counter() - t0)

    rows = []
    for count in worker_counts:
        rows.append({
            "workers": count,
            **{op_name: float(np.median(ts))
               for op_name, ts in samples[count].items()},
        })
    base = rows[0]
    for row in rows:
        for op_name in ("basis", "dSv", "dStw"):
            row[f"speedup_{op_name}"] = base[op_name] / row[op_name]
    return rows


def cmd_bench(config, max_workers):
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    counts = [1]
    while counts[-1] * 2 <= max_workers:
        counts.append(counts[-1] * 2)
    rows = scaling_benchmark(config, counts)

    header = ("workers,basis_seconds,dSv_seconds,dStw_seconds,"
              "speedup_basis,speedup_dSv,speedup_dStw")
    lines = [header]
    for r in rows:
        lines.append(f"{r['workers']},{r['basis']:.6f},{r['dSv']:.6f},"
                     f"{r['dStw']:.6f},{r['speedup_basis']:.2f},"
                     f"{r['speedup_dSv']:.2f},{r['speedup_dStw']:.2f}")
    _write_lines(out / "bench.csv", lines)
    print("\n".join(lines))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="msinv",
        description="Multiscale reduced-order inversion of log-conductivity",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, descr in (("forward", "simulate data for the true model"),
                        ("invert", "run the configured inversions"),
                        ("bench", "strong-scaling benchmark")):
        p = sub.add_parser(name, help=descr)
        p.add_argument("--config", required=True, help="path to a key=value config file")
        p.add_argument("--mode", choices=list(_MODE_KEYS),
                       help="override the configured mode list with one mode")
        p.add_argument("--solver", choices=["direct", "blockcg"],
                       help="fine-mesh solver override")
        p.add_argument("--workers", type=int, help="worker threads (bench: maximum)")
        p.add_argument("--seed", type=int, help="noise seed override")
        p.add_argument("--out", help="output directory override")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        for key in ("solver", "seed", "out"):
            val = getattr(args, key)
            if val is not None:
                config.values[key] = val
        if args.workers is not None:
            config.values["workers"] = args.workers
        if args.mode is not None:
            config.values["modes"] = (args.mode,)

        if args.command == "forward":
            return cmd_forward(config)
        if args.command == "invert":
            return cmd_invert(config)
        return cmd_bench(config, config.workers)
    except Exception as exc:   # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
