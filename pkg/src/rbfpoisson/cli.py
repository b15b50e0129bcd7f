"""Command-line harness.

Subcommands:
  nodes           generate a node set and write it as CSV
  solve           one distributed solve; optional solution CSV and plan dump
  sweep           run a benchmark sweep from flags or a key=value config file
  fit-latency     fit the message-cost model to simulated exchange samples
  report-scaling  log-log slope fits over a records CSV

Exit status is 0 only if every requested run succeeded.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import bench, nodeset as ns, partition, rbffd, solver
from .transport import NetModel


def _parse_grid(text: str):
    try:
        return tuple(int(t) for t in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"grid must look like 2x2 or 4x2x1, got {text!r}")


def _net_model(args) -> NetModel | None:
    if args.simulate_latency is None and args.simulate_bandwidth is None:
        return None
    return NetModel(latency=args.simulate_latency or 0.0,
                    bandwidth=args.simulate_bandwidth or 1e9)


def _add_problem_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--h", type=float, default=0.05)
    p.add_argument("--rng-seed", type=int, default=0)
    p.add_argument("--mixed-bc", action="store_true",
                   help="quarter domain with derivative conditions on the "
                        "upper faces")


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--m", type=int, default=2,
                   help="monomial augmentation order (even)")
    p.add_argument("--n-support", type=int, default=None,
                   help="stencil support size (default: 2*M+1 for the order)")
    p.add_argument("--alpha", type=float, default=0.3)
    p.add_argument("--max-steps", type=int, default=10000)
    p.add_argument("--residual-tol", type=float, default=-1.0,
                   help="stop when the residual drops below this; "
                        "negative means the default 1e-8 * mean|f|; "
                        "0 disables")
    p.add_argument("--grid", type=_parse_grid, default=(1, 1),
                   help="subdomain grid, e.g. 2x2")
    p.add_argument("--transport", choices=("inproc", "tcp"), default="inproc")
    p.add_argument("--simulate-latency", type=float, default=None,
                   metavar="SECONDS")
    p.add_argument("--simulate-bandwidth", type=float, default=None,
                   metavar="BYTES_PER_S")
    p.add_argument("--dump-plan", metavar="PATH", default=None,
                   help="write the partition summary as JSON")


def _domain(args) -> ns.Domain:
    return (ns.Domain.mixed_quadrant(args.dim) if args.mixed_bc
            else ns.Domain.unit_cube(args.dim))


def cmd_nodes(args) -> int:
    nodes = ns.generate(_domain(args), args.h, rng_seed=args.rng_seed)
    ns.save_csv(nodes, args.output)
    print(f"wrote {nodes.count} nodes ({args.dim}-D, h={args.h}) "
          f"to {args.output}")
    return 0


def cmd_solve(args) -> int:
    domain = _domain(args)
    nodes = ns.generate(domain, args.h, rng_seed=args.rng_seed)
    bc = ns.classify_nodes(nodes)
    cfg = (rbffd.ApproxConfig(m=args.m, dim=args.dim)
           if args.n_support is None
           else rbffd.ApproxConfig(m=args.m, dim=args.dim, n=args.n_support))
    stencils = rbffd.build_stencil_set(nodes, bc, cfg)
    grid = args.grid
    if len(grid) != args.dim:
        print(f"error: grid {grid} does not match --dim {args.dim}",
              file=sys.stderr)
        return 2
    owners = partition.assign_owners(nodes, grid)
    plan = partition.build_exchange_maps(nodes, stencils, owners, grid)
    if args.dump_plan:
        with open(args.dump_plan, "w") as fh:
            json.dump(partition.plan_summary(plan), fh, indent=2)
    problem = solver.ProblemSpec(domain=domain)
    tol = args.residual_tol
    if tol is not None and tol < 0:
        tol = None          # solver default
    elif tol == 0:
        tol = 0.0
    result = solver.run(problem, nodes, stencils, plan, alpha=args.alpha,
                        max_steps=args.max_steps, residual_tol=tol,
                        transport=args.transport, net_model=_net_model(args))
    print(f"status={result.status} steps={result.steps} "
          f"residual={result.residual:.6e} error={result.error:.6e} "
          f"t_compute={result.mean_compute():.3e}s/step "
          f"t_comm={result.mean_comm():.3e}s/step")
    if args.output:
        solver.save_solution_csv(nodes, result.u, problem, args.output)
        print(f"wrote solution to {args.output}")
    return 0 if result.status == "ok" else 1


def _load_config(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            if not _:
                raise ValueError(f"bad config line (need key=value): {line!r}")
            out[key.strip()] = value.strip()
    return out


def _sweep_spec(args) -> bench.SweepSpec:
    kw: dict = {}
    if args.config:
        raw = _load_config(args.config)
        parse = {
            "m_values": lambda v: tuple(int(x) for x in v.split(",")),
            "h_values": lambda v: tuple(float(x) for x in v.split(",")),
            "n_values": lambda v: tuple(
                None if x in ("default", "") else int(x)
                for x in v.split(",")),
            "grids": lambda v: tuple(_parse_grid(g) for g in v.split(",")),
            "dim": int, "mixed_bc": lambda v: v.lower() in ("1", "true", "yes"),
            "transport": str, "repetitions": int, "alpha": float,
            "max_steps": int, "rng_seed": int,
            "latency": float, "bandwidth": float,
        }
        model_kw = {}
        for key, value in raw.items():
            if key not in parse:
                raise ValueError(f"unknown config key: {key}")
            if key in ("latency", "bandwidth"):
                model_kw[key] = parse[key](value)
            else:
                kw[key] = parse[key](value)
        if model_kw:
            kw["net_model"] = NetModel(
                latency=model_kw.get("latency", 0.0),
                bandwidth=model_kw.get("bandwidth", 1e9))
    if args.m:
        kw["m_values"] = tuple(args.m)
    if args.h:
        kw["h_values"] = tuple(args.h)
    if args.n_support:
        kw["n_values"] = tuple(args.n_support)
    if args.grids:
        kw["grids"] = tuple(args.grids)
    if args.reps is not None:
        kw["repetitions"] = args.reps
    if args.max_steps is not None:
        kw["max_steps"] = args.max_steps
    if args.dim is not None:
        kw["dim"] = args.dim
    if args.mixed_bc:
        kw["mixed_bc"] = True
    if args.transport:
        kw["transport"] = args.transport
    model = _net_model(args)
    if model is not None:
        kw["net_model"] = model
    return bench.SweepSpec(**kw)


def cmd_sweep(args) -> int:
    spec = _sweep_spec(args)
    samples: list = []
    records = bench.run_sweep(spec, collect_samples=samples)
    bench.emit_csv(records, args.output)
    failures = [r for r in records
                if r.rep >= 0 and r.status.startswith("failed")]
    print(f"wrote {len(records)} rows to {args.output} "
          f"({len(failures)} failed runs)")
    if args.samples_output and samples:
        with open(args.samples_output, "w") as fh:
            fh.write("bytes,seconds\n")
            for nbytes, sec in samples:
                fh.write(f"{nbytes},{sec:.17g}\n")
        print(f"wrote {len(samples)} comm samples to {args.samples_output}")
    return 1 if failures else 0


def cmd_fit_latency(args) -> int:
    model = NetModel(latency=args.simulate_latency or 0.0,
                     bandwidth=args.simulate_bandwidth or 1e9)
    if args.samples:
        samples = []
        with open(args.samples) as fh:
            next(fh)  # header
            for line in fh:
                nbytes, sec = line.strip().split(",")
                samples.append((float(nbytes), float(sec)))
    else:
        sizes = np.logspace(np.log10(args.min_bytes),
                            np.log10(args.max_bytes), args.points)
        samples = bench.measure_comm_samples(model, sizes)
    try:
        fit = bench.fit_latency(samples)
    except bench.IllPosedFitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"latency={fit.latency:.6e}s bandwidth={fit.bandwidth:.6e}B/s "
          f"residual={fit.residual:.3e} points={fit.n_points}")
    if args.output:
        bench.emit_fits_csv([fit], args.output)
    return 0


def cmd_report_scaling(args) -> int:
    records = bench.read_csv(args.records)
    try:
        fits = bench.scaling_report(records, args.vary)
    except (bench.MixedFactorGroupError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for f in fits:
        print(f"{f.metric} vs {f.x}: slope={f.slope:+.4f} "
              f"+/-{f.half_width:.4f} ({f.n_points} points)")
    if args.output:
        bench.emit_fits_csv(fits, args.output)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rbfpoisson",
        description="Meshless RBF-FD Poisson solver and benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("nodes", help="generate a node set CSV")
    _add_problem_flags(p)
    p.add_argument("--output", "-o", required=True)
    p.set_defaults(func=cmd_nodes)

    p = sub.add_parser("solve", help="run one distributed solve")
    _add_problem_flags(p)
    _add_solver_flags(p)
    p.add_argument("--output", "-o", default=None,
                   help="solution CSV (x..., u, u_exact, abs_err)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("sweep", help="run a benchmark sweep")
    p.add_argument("--config", default=None,
                   help="key=value file (m_values, h_values, n_values, "
                        "grids, repetitions, latency, bandwidth, ...)")
    p.add_argument("--m", type=int, nargs="*", default=None)
    p.add_argument("--h", type=float, nargs="*", default=None)
    p.add_argument("--n-support", type=int, nargs="*", default=None)
    p.add_argument("--grids", type=_parse_grid, nargs="*", default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--mixed-bc", action="store_true")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--transport", choices=("inproc", "tcp"), default=None)
    p.add_argument("--simulate-latency", type=float, default=None)
    p.add_argument("--simulate-bandwidth", type=float, default=None)
    p.add_argument("--output", "-o", required=True, help="records CSV")
    p.add_argument("--samples-output", default=None,
                   help="also write per-message comm samples")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fit-latency", help="fit the message-cost model")
    p.add_argument("--samples", default=None,
                   help="bytes,seconds CSV; default: measure under the "
                        "simulated model")
    p.add_argument("--simulate-latency", type=float, default=None)
    p.add_argument("--simulate-bandwidth", type=float, default=None)
    p.add_argument("--min-bytes", type=float, default=1e2)
    p.add_argument("--max-bytes", type=float, default=1e6)
    p.add_argument("--points", type=int, default=12)
    p.add_argument("--output", "-o", default=None)
    p.set_defaults(func=cmd_fit_latency)

    p = sub.add_parser("report-scaling", help="log-log slope fits")
    p.add_argument("records", help="records CSV from `sweep`")
    p.add_argument("--vary", choices=("n", "p", "N"), required=True)
    p.add_argument("--output", "-o", default=None)
    p.set_defaults(func=cmd_report_scaling)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
