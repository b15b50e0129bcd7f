"""Explicit Jacobi relaxation of the Poisson test problem over subdomains.

The manufactured solution is ``u(x) = prod_i sin(pi x_i)`` with forcing
``f = -pi^2 d u``, zero Dirichlet values and zero Neumann flux.  Each step
runs: barrier, Neumann enforcement from the previous step's exchanged values,
Jacobi update of owned interior nodes, halo exchange.  Dirichlet nodes stay
exactly zero throughout; Neumann boundary values are recomputed locally by
every worker that sees them (the extended halo guarantees their supports are
complete), so they never need a second exchange phase.
"""
from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import nodeset as ns
from .partition import PartitionPlan, localize
from .rbffd import StencilSet
from .transport import (InprocNetwork, NetModel, StepTiming, TcpEndpoint,
                        TcpHub, TransportError)


class DivergenceError(RuntimeError):
    def __init__(self, step: int, subdomain: int):
        self.step = step
        super().__init__(
            f"non-finite value at step {step} in subdomain {subdomain}")


class UnusableBoundaryStencilError(RuntimeError):
    pass


@dataclass(frozen=True)
class ProblemSpec:
    """Poisson test problem on a cube with a known product-of-sines solution."""

    domain: ns.Domain

    def exact(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.prod(np.sin(np.pi * x), axis=1)

    def rhs(self, x: np.ndarray) -> np.ndarray:
        return -np.pi ** 2 * self.domain.dim * self.exact(x)

    dirichlet_value: float = 0.0
    neumann_flux: float = 0.0


def dt_max(h: float, d: int) -> float:
    """Explicit-step stability bound ``h^2 / (2 d)``."""
    if h <= 0:
        raise ValueError(f"spacing must be positive, got {h}")
    return h * h / (2 * d)


@dataclass(frozen=True)
class TimeStep:
    h: float
    dim: int
    alpha: float = 0.3

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")

    @property
    def dt_max(self) -> float:
        return dt_max(self.h, self.dim)

    @property
    def dt(self) -> float:
        return self.alpha * self.dt_max


@dataclass
class FieldState:
    """Per-subdomain solution values over owned + halo locals."""

    values: np.ndarray
    step: int = 0
    dt: float = 0.0

    @property
    def time(self) -> float:
        return self.step * self.dt


@dataclass
class WorkerData:
    """Everything one worker needs, in local indices.  Picklable."""

    rank: int
    n_owned: int
    n_local: int
    local_to_global: np.ndarray
    send_idx: dict
    recv_idx: dict
    # owned interior update
    int_local: np.ndarray          # (I,) local indices
    int_support: np.ndarray        # (I, n)
    int_weights: np.ndarray        # (I, n)
    f_vals: np.ndarray             # (I,)
    # Neumann enforcement over owned + halo boundary nodes
    neu_local: np.ndarray          # (K,)
    neu_support: np.ndarray        # (K, n)
    neu_weights: np.ndarray        # (K, n)
    neu_self_w: np.ndarray         # (K,)
    neu_flux: float = 0.0


def prepare_worker(problem: ProblemSpec, nodes: ns.NodeSet,
                   stencils: StencilSet, plan: PartitionPlan,
                   s: int) -> WorkerData:
    imap, lap, neu = localize(plan, s, stencils)
    g2l = imap.global_to_local
    sub = plan.subdomains[s]

    int_local, int_sup, int_W = lap
    f_vals = problem.rhs(nodes.positions[imap.local_to_global[int_local]])

    neu_local, neu_sup, neu_W = neu
    if neu_local.size:
        # the center sits first in its own support (distance zero)
        if not np.array_equal(neu_sup[:, 0], neu_local):
            raise UnusableBoundaryStencilError(
                "Neumann stencil does not contain its center first")
        self_w = neu_W[:, 0]
        limit = 1e-12 * np.abs(neu_W).max(axis=1)
        bad = np.flatnonzero(np.abs(self_w) < limit)
        if bad.size:
            g = imap.local_to_global[neu_local[bad[0]]]
            raise UnusableBoundaryStencilError(
                f"negligible self weight in Neumann stencil at node {g}")
    else:
        self_w = np.empty(0)

    send_idx = {t: g2l[lst] for t, lst in sub.send.items()}
    recv_idx = {t: g2l[lst] for t, lst in sub.recv.items()}
    return WorkerData(rank=s, n_owned=imap.n_owned,
                      n_local=imap.local_to_global.size,
                      local_to_global=imap.local_to_global,
                      send_idx=send_idx, recv_idx=recv_idx,
                      int_local=int_local, int_support=int_sup,
                      int_weights=int_W, f_vals=f_vals,
                      neu_local=neu_local, neu_support=neu_sup,
                      neu_weights=neu_W, neu_self_w=self_w,
                      neu_flux=problem.neumann_flux)


def enforce_neumann(u: np.ndarray, data: WorkerData) -> None:
    """Recompute Neumann boundary values from a snapshot of the field.

    ``u_b = (g - sum_{i != b} w_i u_i) / w_b`` with all right-hand values
    taken before any boundary write, so results do not depend on enforcement
    order (and hence not on the partition).
    """
    if data.neu_local.size == 0:
        return
    snap = u.copy()
    total = np.einsum("ij,ij->i", data.neu_weights, snap[data.neu_support])
    others = total - data.neu_self_w * snap[data.neu_local]
    u[data.neu_local] = (data.neu_flux - others) / data.neu_self_w


def jacobi_step(u: np.ndarray, data: WorkerData, dt: float) -> None:
    """One explicit relaxation of the owned interior nodes in place."""
    lap = np.einsum("ij,ij->i", data.int_weights, u[data.int_support])
    u[data.int_local] += dt * (lap - data.f_vals)


def local_residual(u: np.ndarray, data: WorkerData):
    """Sum of ``|lap u - f|`` over owned interior nodes, with the count."""
    if data.int_local.size == 0:
        return 0.0, 0
    lap = np.einsum("ij,ij->i", data.int_weights, u[data.int_support])
    return float(np.abs(lap - data.f_vals).sum()), int(data.int_local.size)


def solution_error(u_global: np.ndarray, nodes: ns.NodeSet,
                   problem: ProblemSpec) -> float:
    """Mean absolute deviation from the analytic solution over all nodes."""
    return float(np.mean(np.abs(u_global - problem.exact(nodes.positions))))


@dataclass
class StopRule:
    max_steps: int
    residual_tol: float | None = None


@dataclass
class RunResult:
    u: np.ndarray
    error: float
    steps: int
    residual: float
    timings: list
    comm_samples: list
    status: str = "ok"

    def mean_compute(self) -> float:
        return float(np.mean([t.t_compute for t in self.timings])) \
            if self.timings else 0.0

    def mean_comm(self) -> float:
        return float(np.mean([t.t_comm for t in self.timings])) \
            if self.timings else 0.0


def _worker_loop(endpoint, data: WorkerData, dt: float, max_steps: int,
                 report_interval: int, failures: list) -> None:
    try:
        u = np.zeros(data.n_local)
        timings = []
        stop = False
        step = 0
        while step < max_steps and not stop:
            endpoint.barrier()
            t0 = time.thread_time()
            enforce_neumann(u, data)
            jacobi_step(u, data, dt)
            t_compute = time.thread_time() - t0
            t_comm = endpoint.exchange(step, u)
            timings.append(StepTiming(step=step, subdomain=data.rank,
                                      t_compute=t_compute, t_comm=t_comm))
            step += 1
            if step % report_interval == 0 and step < max_steps:
                # root reporting travels on its own channel, outside the
                # timed sections
                if not np.isfinite(u).all():
                    raise DivergenceError(step, data.rank)
                rsum, rcount = local_residual(u, data)
                endpoint.report(("res", rsum, rcount))
                stop = bool(endpoint.recv_control()["stop"])
        if not np.isfinite(u).all():
            raise DivergenceError(step, data.rank)
        rsum, rcount = local_residual(u, data)
        endpoint.report(("done", u[:data.n_owned], rsum, rcount, timings,
                         endpoint.comm_samples))
    except Exception as exc:  # surfaced by the driver after collect times out
        failures.append((data.rank, exc))
        try:
            endpoint.report(("failed", repr(exc)))
        except Exception:
            pass
    finally:
        endpoint.close()


def run(problem: ProblemSpec, nodes: ns.NodeSet,
        stencils: StencilSet, plan: PartitionPlan, *,
        alpha: float = 0.3, max_steps: int = 1000,
        residual_tol: float | None = None, report_interval: int = 100,
        transport: str = "inproc", net_model: NetModel | None = None,
        timeout: float = 120.0) -> RunResult:
    """Drive one distributed solve and assemble the result at the root.

    Workers run in this process (threads); the calling thread plays the root
    role: it reduces residual reports at every interval, decides stopping and
    gathers the owned solution blocks at the end.
    """
    p = plan.count
    step = TimeStep(h=nodes.h, dim=nodes.dim, alpha=alpha)
    workers = [prepare_worker(problem, nodes, stencils, plan, s)
               for s in range(p)]
    if max_steps == 0:
        u = np.zeros(nodes.count)
        return RunResult(u=u, error=solution_error(u, nodes, problem),
                         steps=0, residual=math.inf, timings=[],
                         comm_samples=[], status="ok")

    if transport == "inproc":
        net = InprocNetwork(p, model=net_model, timeout=timeout)
        endpoints = [net.endpoint(w.rank, w.send_idx, w.recv_idx)
                     for w in workers]
        root = net
    elif transport == "tcp":
        hub = TcpHub(p, timeout=timeout)
        endpoints = [None] * p

        def _connect(i):
            endpoints[i] = TcpEndpoint(hub.address, workers[i].rank,
                                       workers[i].send_idx,
                                       workers[i].recv_idx,
                                       model=net_model, timeout=timeout)

        conn_threads = [threading.Thread(target=_connect, args=(i,))
                        for i in range(p)]
        for t in conn_threads:
            t.start()
        hub.accept_workers()
        for t in conn_threads:
            t.join()
        root = hub
    else:
        raise ValueError(f"unknown transport {transport!r}")

    failures: list = []
    threads = [threading.Thread(
        target=_worker_loop,
        args=(endpoints[i], workers[i], step.dt, max_steps,
              report_interval, failures), daemon=True)
        for i in range(p)]
    for t in threads:
        t.start()

    f_scale = float(np.mean(np.abs(problem.rhs(nodes.positions))))
    tol = residual_tol if residual_tol is not None else None
    residual = math.inf
    done_payload: dict = {}
    status = "ok"
    try:
        while True:
            reports = root.collect(p, timeout=timeout)
            kinds = {r[1][0] for r in reports}
            if "failed" in kinds:
                raise next(exc for _, exc in failures) if failures else \
                    TransportError("worker failed")
            if kinds == {"done"}:
                for rank, payload in reports:
                    done_payload[rank] = payload
                break
            total = sum(r[1][1] for r in reports)
            count = sum(r[1][2] for r in reports)
            residual = total / max(count, 1)
            stop = tol is not None and residual <= tol
            root.broadcast({"stop": stop})
    finally:
        for t in threads:
            t.join(timeout=timeout)
        root.close()
    if failures:
        raise failures[0][1]

    u = np.zeros(nodes.count)
    timings: list = []
    comm_samples: list = []
    rsum = 0.0
    rcount = 0
    steps_run = 0
    for rank, payload in done_payload.items():
        _, owned_u, rs, rc, tms, samples = payload
        u[plan.subdomains[rank].owned] = owned_u
        rsum += rs
        rcount += rc
        timings.extend(tms)
        comm_samples.extend(samples)
        steps_run = max(steps_run, max((t.step for t in tms), default=-1) + 1)
    residual = rsum / max(rcount, 1)
    return RunResult(u=u, error=solution_error(u, nodes, problem),
                     steps=steps_run, residual=residual, timings=timings,
                     comm_samples=comm_samples, status=status)


def save_solution_csv(nodes: ns.NodeSet, u: np.ndarray,
                      problem: ProblemSpec, path) -> None:
    """Dump ``x0,..,x{d-1},u,u_exact,abs_err`` rows."""
    import csv

    exact = problem.exact(nodes.positions)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        d = nodes.dim
        w.writerow([f"x{a}" for a in range(d)] + ["u", "u_exact", "abs_err"])
        for i in range(nodes.count):
            w.writerow([f"{v:.17g}" for v in nodes.positions[i]] +
                       [f"{u[i]:.17g}", f"{exact[i]:.17g}",
                        f"{abs(u[i] - exact[i]):.17g}"])
