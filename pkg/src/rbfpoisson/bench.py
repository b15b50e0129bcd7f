"""Benchmark harness: parameter sweeps, derived metrics, CSV, model fits.

Sweeps (m, h, n, partition grid) configurations, repeats each one, records
per-run and mean rows, fits the latency/bandwidth message-cost model to
communication samples, and regresses the scaling laws (compute time vs
support size, communication fraction vs support size and vs nodes per
subdomain) on log-log axes.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import nodeset as ns
from . import partition
from . import rbffd
from . import solver
from .transport import FLOAT_SIZE, InprocNetwork, NetModel

_FLOAT_FMT = "%.17g"


class IllPosedFitError(RuntimeError):
    """The sample set cannot identify the model parameters."""


class MixedFactorGroupError(ValueError):
    """A scaling regression was asked for on records varying in more than
    the declared factor."""


@dataclass(frozen=True)
class SweepSpec:
    """One benchmark campaign: the cross product of the listed factors."""

    m_values: tuple = (2,)
    h_values: tuple = (0.05,)
    n_values: tuple = (None,)         # None -> default support size for m
    grids: tuple = ((1, 1),)
    dim: int = 2
    mixed_bc: bool = False
    transport: str = "inproc"
    net_model: NetModel | None = None
    repetitions: int = 5
    alpha: float = 0.3
    max_steps: int = 200
    residual_tol: float | None = None
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("m_values", "h_values", "n_values", "grids"):
            if not len(getattr(self, name)):
                raise ValueError(f"{name} must be non-empty")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")

    def configurations(self):
        return list(itertools.product(self.m_values, self.h_values,
                                      self.n_values, self.grids))


@dataclass
class BenchRecord:
    """One benchmark row; ``rep`` is -1 for the per-configuration mean."""

    run_id: str
    status: str
    rep: int
    d: int
    h: float
    n_nodes: int
    m: int
    n_support: int
    p: int
    steps: int
    t_compute: float
    t_comm: float
    t_compute_best: float   # fastest single worker-step (noise floor)
    t_comm_best: float
    t_ws: float
    throughput: float
    error: float
    dt_max: float
    alpha: float
    t_ratio: float        # t_ws / (alpha * dt_max): wall time per unit sim time

    def __post_init__(self):
        if min(self.t_compute, self.t_comm, self.t_ws) < 0:
            raise ValueError("times must be non-negative")
        if not math.isfinite(self.throughput):
            raise ValueError("throughput must be finite")


@dataclass(frozen=True)
class FitResult:
    """Least-squares fit of message cost = latency + bytes / bandwidth."""

    latency: float
    inv_bandwidth: float
    residual: float
    n_points: int

    @property
    def bandwidth(self) -> float:
        return math.inf if self.inv_bandwidth == 0 else 1.0 / self.inv_bandwidth


@dataclass(frozen=True)
class SlopeFit:
    """Log-log regression slope with a +/- half-width (2 standard errors)."""

    metric: str
    x: str
    slope: float
    half_width: float
    n_points: int


def _record_from_run(run_id: str, rep: int, *, dim, h, n_nodes, m, n_support,
                     p, alpha, result) -> BenchRecord:
    tcu = result.mean_compute()
    tco = result.mean_comm()
    t_ws = tcu + tco
    best_cu = (min(t.t_compute for t in result.timings)
               if result.timings else 0.0)
    best_co = (min(t.t_comm for t in result.timings)
               if result.timings else 0.0)
    dt = solver.dt_max(h, dim)
    return BenchRecord(
        run_id=run_id, status=result.status, rep=rep, d=dim, h=h,
        n_nodes=n_nodes, m=m, n_support=n_support, p=p, steps=result.steps,
        t_compute=tcu, t_comm=tco,
        t_compute_best=best_cu, t_comm_best=best_co, t_ws=t_ws,
        throughput=n_nodes / (p * t_ws) if t_ws > 0 else 0.0,
        error=result.error, dt_max=dt, alpha=alpha,
        t_ratio=t_ws / (alpha * dt) if dt > 0 else 0.0)


def _failed_record(run_id: str, rep: int, *, dim, h, n_nodes, m, n_support,
                   p, alpha, exc) -> BenchRecord:
    return BenchRecord(
        run_id=run_id, status=f"failed:{type(exc).__name__}", rep=rep,
        d=dim, h=h, n_nodes=n_nodes, m=m, n_support=n_support, p=p, steps=0,
        t_compute=0.0, t_comm=0.0, t_compute_best=0.0, t_comm_best=0.0,
        t_ws=0.0, throughput=0.0,
        error=math.nan, dt_max=solver.dt_max(h, dim) if h > 0 else 0.0,
        alpha=alpha, t_ratio=0.0)


def _mean_record(run_id: str, rows: list[BenchRecord]) -> BenchRecord:
    ok = [r for r in rows if r.status == "ok"]
    base = ok[0] if ok else rows[0]
    if not ok:
        return replace(base, run_id=run_id, rep=-1, status="failed:all-reps")

    def mean(attr):
        return float(np.mean([getattr(r, attr) for r in ok]))

    return replace(base, run_id=run_id, rep=-1,
                   status="mean" if len(ok) == len(rows) else "mean-partial",
                   steps=round(mean("steps")), t_compute=mean("t_compute"),
                   t_comm=mean("t_comm"),
                   t_compute_best=min(r.t_compute_best for r in ok),
                   t_comm_best=min(r.t_comm_best for r in ok),
                   t_ws=mean("t_ws"),
                   throughput=mean("throughput"), error=mean("error"),
                   t_ratio=mean("t_ratio"))


def run_sweep(spec: SweepSpec, collect_samples: list | None = None
              ) -> list[BenchRecord]:
    """Run every configuration x repetition; append a mean row per config.

    Individual run failures become status rows and the sweep continues.  If
    ``collect_samples`` is given, per-message (bytes, seconds) communication
    samples from every successful run are appended to it.
    """
    domain = (ns.Domain.mixed_quadrant(spec.dim) if spec.mixed_bc
              else ns.Domain.unit_cube(spec.dim))
    problem = solver.ProblemSpec(domain=domain)
    cache: dict = {}
    configs = spec.configurations()
    by_config: dict = {idx: [] for idx in range(len(configs))}
    # repetitions are interleaved across configurations so that slow drifts
    # in machine load bias every configuration equally instead of one
    for rep in range(spec.repetitions):
        for idx, (m, h, n, grid) in enumerate(configs):
            p = int(np.prod(grid))
            cfg = rbffd.ApproxConfig(m=m, dim=spec.dim) if n is None else \
                rbffd.ApproxConfig(m=m, dim=spec.dim, n=n)
            cid = f"d{spec.dim}-h{h}-m{m}-n{cfg.n}-p{p}"
            run_id = f"{cid}-r{rep}"
            try:
                key = (h,)
                if key not in cache:
                    cache[key] = ns.generate(domain, h, rng_seed=spec.rng_seed)
                nodes = cache[key]
                skey = (h, m, cfg.n)
                if skey not in cache:
                    bc = ns.classify_nodes(nodes)
                    cache[skey] = rbffd.build_stencil_set(nodes, bc, cfg)
                stencils = cache[skey]
                pkey = (h, m, cfg.n, grid)
                if pkey not in cache:
                    owners = partition.assign_owners(nodes, grid)
                    cache[pkey] = partition.build_exchange_maps(
                        nodes, stencils, owners, grid)
                plan = cache[pkey]
                result = solver.run(
                    problem, nodes, stencils, plan, alpha=spec.alpha,
                    max_steps=spec.max_steps, residual_tol=spec.residual_tol,
                    transport=spec.transport, net_model=spec.net_model)
                by_config[idx].append(_record_from_run(
                    run_id, rep, dim=spec.dim, h=h, n_nodes=nodes.count,
                    m=m, n_support=cfg.n, p=p, alpha=spec.alpha,
                    result=result))
                if collect_samples is not None:
                    collect_samples.extend(result.comm_samples)
            except Exception as exc:
                by_config[idx].append(_failed_record(
                    run_id, rep, dim=spec.dim, h=h,
                    n_nodes=cache.get((h,)).count if (h,) in cache else 0,
                    m=m, n_support=cfg.n, p=p, alpha=spec.alpha, exc=exc))
    records: list[BenchRecord] = []
    for idx, rows in by_config.items():
        mean = _mean_record(rows[0].run_id.rsplit("-r", 1)[0] + "-mean", rows)
        records.extend(rows + [mean])
    return records


# ---------------------------------------------------------------------------
# latency / bandwidth model fitting


def fit_latency(samples) -> FitResult:
    """Least-squares fit of t = latency + bytes / bandwidth to samples.

    ``samples`` is an iterable of (bytes, seconds) pairs, e.g. the
    ``comm_samples`` of a run.  Requires at least 4 distinct message sizes
    spanning a factor of 100, otherwise the fit is declared ill-posed.
    """
    samples = list(samples)
    sizes = np.array([float(s[0]) for s in samples])
    times = np.array([float(s[1]) for s in samples])
    distinct = np.unique(sizes)
    if distinct.size < 4:
        raise IllPosedFitError(
            f"need >= 4 distinct message sizes, got {distinct.size}")
    if distinct.max() / distinct.min() < 100:
        raise IllPosedFitError(
            f"message sizes span only {distinct.max() / distinct.min():.3g}x; "
            "need >= 100x to separate latency from bandwidth")
    A = np.column_stack([np.ones_like(sizes), sizes])
    coef, *_ = np.linalg.lstsq(A, times, rcond=None)
    resid = float(np.linalg.norm(A @ coef - times))
    return FitResult(latency=float(coef[0]), inv_bandwidth=float(coef[1]),
                     residual=resid, n_points=len(samples))


def measure_comm_samples(model: NetModel, sizes_bytes,
                         reps: int = 3) -> list[tuple[int, float]]:
    """Collect (bytes, seconds) samples from real two-worker exchanges.

    A pair of workers swaps a message of each requested size under the given
    model; the samples come out of the transport's own accounting, not out of
    the model formula directly.
    """
    samples: list[tuple[int, float]] = []
    for nbytes in sizes_bytes:
        count = max(1, int(round(nbytes / FLOAT_SIZE)))
        net = InprocNetwork(2, model=model)
        idx = np.arange(count)
        eps = [net.endpoint(r, {1 - r: idx}, {1 - r: idx}) for r in (0, 1)]
        import threading

        def one(rank):
            u = np.zeros(count)
            for step in range(reps):
                eps[rank].barrier()
                eps[rank].exchange(step, u)

        threads = [threading.Thread(target=one, args=(r,)) for r in (0, 1)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        samples.extend(eps[0].comm_samples)
    return samples


# ---------------------------------------------------------------------------
# scaling regressions


def _loglog_slope(x: np.ndarray, y: np.ndarray, metric: str, xname: str
                  ) -> SlopeFit:
    lx, ly = np.log(x), np.log(y)
    A = np.column_stack([np.ones_like(lx), lx])
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = ly - A @ coef
    n = len(lx)
    if n > 2:
        s2 = float(resid @ resid) / (n - 2)
        sxx = float(((lx - lx.mean()) ** 2).sum())
        half = 2.0 * math.sqrt(s2 / sxx) if sxx > 0 else math.inf
    else:
        half = 0.0
    return SlopeFit(metric=metric, x=xname, slope=float(coef[1]),
                    half_width=half, n_points=n)


_FACTOR_FIELDS = {"p": "p", "n": "n_support", "N": "n_nodes"}


def scaling_report(records: list[BenchRecord], vary: str,
                   aggregate: str = "mean") -> list[SlopeFit]:
    """Log-log slope fits over records in which exactly one factor varies.

    ``vary`` is "n" (support size), "p" (subdomain count) or "N" (node
    count).  With ``aggregate="mean"`` the per-configuration mean rows are
    used (falling back to per-repetition rows); ``aggregate="min"`` takes
    the fastest repetition per configuration instead, which rejects
    machine-load noise.  Rows with zero communication time (single
    subdomain) are excluded from communication-fraction fits.
    """
    if vary not in _FACTOR_FIELDS:
        raise ValueError(f"vary must be one of {sorted(_FACTOR_FIELDS)}")
    if aggregate not in ("mean", "min"):
        raise ValueError(f"aggregate must be 'mean' or 'min', got {aggregate}")
    if aggregate == "min":
        ok = [r for r in records
              if r.status in ("mean", "ok", "mean-partial")]
        groups: dict = {}
        for r in ok:
            groups.setdefault(r.run_id.rsplit("-", 1)[0], []).append(r)
        rows = []
        for rid, g in groups.items():
            rows.append(replace(
                g[0],
                t_compute=min(r.t_compute_best for r in g),
                t_comm=min(r.t_comm_best for r in g)))
    else:
        rows = [r for r in records
                if r.status in ("mean", "ok", "mean-partial")]
        means = [r for r in rows if r.rep == -1]
        if means:
            rows = means
    if not rows:
        raise ValueError("no successful records to fit")
    for factor, attr in _FACTOR_FIELDS.items():
        if factor == vary:
            continue
        vals = {getattr(r, attr) for r in rows}
        if len(vals) > 1:
            raise MixedFactorGroupError(
                f"records vary in {factor} ({sorted(vals)}) "
                f"but the declared factor is {vary}")

    fits = []
    if vary == "n":
        x = np.array([r.n_support for r in rows], dtype=float)
        fits.append(_loglog_slope(
            x, np.array([r.t_compute for r in rows]), "t_compute", "n"))
        ratio_rows = [r for r in rows if r.t_comm > 0]
        if len(ratio_rows) >= 2:
            xr = np.array([r.n_support for r in ratio_rows], dtype=float)
            yr = np.array([r.t_comm / r.t_compute for r in ratio_rows])
            fits.append(_loglog_slope(xr, yr, "t_comm/t_compute", "n"))
    else:
        ratio_rows = [r for r in rows if r.t_comm > 0]
        if len(ratio_rows) < 2:
            raise ValueError("need >= 2 multi-subdomain records for the "
                             "communication-fraction fit")
        x = np.array([r.n_nodes / r.p for r in ratio_rows], dtype=float)
        y = np.array([r.t_comm / r.t_compute for r in ratio_rows])
        fits.append(_loglog_slope(x, y, "t_comm/t_compute", "N/p"))
    return fits


# ---------------------------------------------------------------------------
# CSV plumbing


_COLUMNS = [f.name for f in fields(BenchRecord)]
_INT_COLS = {"rep", "d", "n_nodes", "m", "n_support", "p", "steps"}
_STR_COLS = {"run_id", "status"}


def emit_csv(records: list[BenchRecord], path) -> None:
    """Write records with a stable column order; floats keep 17 digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_COLUMNS)
        for r in records:
            row = []
            for c in _COLUMNS:
                v = getattr(r, c)
                if c in _STR_COLS:
                    row.append(v)
                elif c in _INT_COLS:
                    row.append(str(int(v)))
                else:
                    row.append(_FLOAT_FMT % v)
            w.writerow(row)


def read_csv(path) -> list[BenchRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != _COLUMNS:
            raise ValueError(f"unexpected columns: {reader.fieldnames}")
        for row in reader:
            kw = {}
            for c in _COLUMNS:
                if c in _STR_COLS:
                    kw[c] = row[c]
                elif c in _INT_COLS:
                    kw[c] = int(row[c])
                else:
                    kw[c] = float(row[c])
            out.append(BenchRecord(**kw))
    return out


def emit_fits_csv(fits, path) -> None:
    """Write FitResult or SlopeFit rows; the header matches the type."""
    fits = list(fits)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if not fits:
            w.writerow([])
            return
        cols = [f.name for f in fields(fits[0])]
        w.writerow(cols)
        for item in fits:
            w.writerow([getattr(item, c) if isinstance(getattr(item, c), str)
                        else _FLOAT_FMT % getattr(item, c) for c in cols])
