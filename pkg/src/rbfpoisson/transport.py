"""Halo-exchange transports: in-process queues and loopback TCP.

Both transports satisfy the same contract: per step every worker posts all of
its messages, then blocks until every send and receive has completed; after
``exchange`` returns, each halo slot holds the owner's current value and no
owned value has been modified.  A barrier precedes every timed section so the
absence of load balancing cannot skew communication timings.

An optional :class:`NetModel` turns either transport into a simulated network:
each pairwise message completes after ``latency + bytes / bandwidth`` and the
reported communication time is the completion time of the slowest message of
that exchange.  Root-directed reporting travels on a separate channel and is
never part of the timed sections.
"""
from __future__ import annotations

import pickle
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

FLOAT_SIZE = 8


class TransportError(RuntimeError):
    pass


class BarrierTimeout(TransportError):
    pass


@dataclass(frozen=True)
class NetModel:
    """First-order message cost model: ``t = latency + bytes / bandwidth``."""

    latency: float
    bandwidth: float
    enabled: bool = True

    def __post_init__(self):
        if self.latency < 0:
            raise ValueError(f"latency must be >= 0, got {self.latency}")
        if self.bandwidth <= 0:
            raise ValueError(f"bandwidth must be > 0, got {self.bandwidth}")


def simulate_cost(model: NetModel, nbytes: float) -> float:
    """Seconds to move ``nbytes`` under the model: latency + bytes/bandwidth."""
    return model.latency + nbytes / model.bandwidth


@dataclass
class StepTiming:
    step: int
    subdomain: int
    t_compute: float
    t_comm: float

    def __post_init__(self):
        if self.t_compute < 0 or self.t_comm < 0:
            raise ValueError("timings must be non-negative")


class ListedBarrier:
    """Reusable barrier that can name the absent workers on timeout."""

    def __init__(self, parties: int):
        self.parties = parties
        self._cond = threading.Condition()
        self._arrived: set = set()
        self._generation = 0

    def wait(self, rank: int, timeout: float = 60.0) -> None:
        with self._cond:
            gen = self._generation
            self._arrived.add(rank)
            if len(self._arrived) == self.parties:
                self._generation += 1
                self._arrived = set()
                self._cond.notify_all()
                return
            if not self._cond.wait_for(lambda: self._generation != gen,
                                       timeout=timeout):
                absent = sorted(set(range(self.parties)) - self._arrived)
                raise BarrierTimeout(
                    f"barrier timed out; absent workers: {absent}")


def _sim_wait(delay: float) -> None:
    # keep wall clock consistent with the simulated cost; sub-50us delays are
    # below sleep resolution and are simply reported, not slept
    if delay > 2e-4:
        time.sleep(delay - 1e-4)
    elif delay > 5e-5:
        deadline = time.perf_counter() + delay
        while time.perf_counter() < deadline:
            pass


class _ExchangeMixin:
    """Shared bookkeeping: buffer-size checks and simulated-cost accounting.

    Subclasses provide ``_post(peer, step, values)`` and
    ``_collect(peer)`` returning ``(step, values)``.
    """

    def _init_maps(self, rank, send_idx, recv_idx, model):
        self.rank = rank
        self.send_idx = {int(k): np.asarray(v) for k, v in send_idx.items()}
        self.recv_idx = {int(k): np.asarray(v) for k, v in recv_idx.items()}
        self.model = model
        self.comm_samples: list[tuple[int, float]] = []

    @property
    def peers(self):
        return sorted(set(self.send_idx) | set(self.recv_idx))

    def exchange(self, step: int, u: np.ndarray) -> float:
        """Fill halo slots of ``u`` from peers; returns elapsed comm seconds."""
        t0 = time.perf_counter()
        for peer in self.peers:
            idx = self.send_idx.get(peer)
            if idx is None or idx.size == 0:
                continue
            self._post(peer, step, u[idx])
        for peer in self.peers:
            idx = self.recv_idx.get(peer)
            if idx is None or idx.size == 0:
                continue
            got_step, values = self._collect(peer)
            if got_step != step:
                raise TransportError(
                    f"pair ({peer}->{self.rank}): got step {got_step}, "
                    f"expected {step}")
            if values.size != idx.size:
                raise TransportError(
                    f"pair ({peer}->{self.rank}): buffer size mismatch "
                    f"({values.size} values for {idx.size} slots)")
            u[idx] = values
        elapsed = time.perf_counter() - t0

        if self.model is not None and self.model.enabled:
            costs = [0.0]
            for peer in self.peers:
                for m in (self.send_idx, self.recv_idx):
                    idx = m.get(peer)
                    if idx is not None and idx.size:
                        costs.append(simulate_cost(self.model,
                                                   idx.size * FLOAT_SIZE))
            for peer, idx in self.send_idx.items():
                if idx.size:
                    self.comm_samples.append(
                        (idx.size * FLOAT_SIZE,
                         simulate_cost(self.model, idx.size * FLOAT_SIZE)))
            t_comm = max(costs)
            _sim_wait(max(0.0, t_comm - elapsed))
            return t_comm

        sent = sum(self.send_idx[p].size for p in self.send_idx)
        if sent:
            self.comm_samples.append((sent * FLOAT_SIZE, elapsed))
        return elapsed


# ---------------------------------------------------------------------------
# in-process transport


class InprocNetwork:
    """One worker per subdomain inside one process, linked by queues."""

    def __init__(self, n_workers: int, model: NetModel | None = None,
                 timeout: float = 60.0):
        self.n_workers = n_workers
        self.model = model
        self.timeout = timeout
        self._barrier = ListedBarrier(n_workers)
        self._boxes: dict[tuple, queue.SimpleQueue] = {}
        self._reports: queue.SimpleQueue = queue.SimpleQueue()
        self._controls = [queue.SimpleQueue() for _ in range(n_workers)]

    def _box(self, src: int, dst: int) -> queue.SimpleQueue:
        key = (src, dst)
        if key not in self._boxes:
            self._boxes[key] = queue.SimpleQueue()
        return self._boxes[key]

    def endpoint(self, rank: int, send_idx, recv_idx) -> "InprocEndpoint":
        return InprocEndpoint(self, rank, send_idx, recv_idx)

    # root side -----------------------------------------------------------
    def collect(self, count: int, timeout: float | None = None):
        out = []
        for _ in range(count):
            try:
                out.append(self._reports.get(timeout=timeout or self.timeout))
            except queue.Empty:
                raise TransportError(
                    f"root timed out after {len(out)}/{count} reports") from None
        return out

    def broadcast(self, obj) -> None:
        for q in self._controls:
            q.put(obj)

    def close(self) -> None:
        pass


class InprocEndpoint(_ExchangeMixin):
    def __init__(self, net: InprocNetwork, rank, send_idx, recv_idx):
        self.net = net
        self._init_maps(rank, send_idx, recv_idx, net.model)

    def barrier(self) -> None:
        self.net._barrier.wait(self.rank, timeout=self.net.timeout)

    def _post(self, peer, step, values) -> None:
        self.net._box(self.rank, peer).put((step, values.copy()))

    def _collect(self, peer):
        try:
            return self.net._box(peer, self.rank).get(timeout=self.net.timeout)
        except queue.Empty:
            raise TransportError(
                f"pair ({peer}->{self.rank}): peer timed out") from None

    def report(self, obj) -> None:
        self.net._reports.put((self.rank, obj))

    def recv_control(self):
        try:
            return self.net._controls[self.rank].get(timeout=self.net.timeout)
        except queue.Empty:
            raise TransportError(
                f"worker {self.rank}: no control message from root") from None

    def close(self) -> None:
        pass


# ---------------------------------------------------------------------------
# TCP transport (star through a hub owned by the root role)

K_HELLO = 0
K_DATA = 1          # payload: (step, count) prefix + count little-endian f64
K_BARRIER = 2
K_RELEASE = 3
K_REPORT = 4        # pickled payload
K_CONTROL = 5
K_BUNDLE = 6

_HEADER = struct.Struct("<5Q")   # kind, src, dst, step, count


def _send_frame(sock: socket.socket, kind: int, src: int, dst: int,
                step: int, payload: bytes) -> None:
    sock.sendall(_HEADER.pack(kind, src, dst, step, len(payload)) + payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise TransportError("peer disconnected")
        buf.extend(chunk)
    return bytes(buf)


def _recv_frame(sock: socket.socket):
    kind, src, dst, step, count = _HEADER.unpack(_recv_exact(sock, _HEADER.size))
    payload = _recv_exact(sock, count) if count else b""
    return kind, src, dst, step, payload


def encode_values(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype="<f8").tobytes()


def decode_values(payload: bytes) -> np.ndarray:
    return np.frombuffer(payload, dtype="<f8").copy()


class TcpHub:
    """Root-side message router for the star topology.

    Accepts one connection per worker, forwards data frames between them,
    counts barrier arrivals and carries the (untimed) reporting channel.
    """

    def __init__(self, n_workers: int, host: str = "127.0.0.1", port: int = 0,
                 timeout: float = 60.0):
        self.n_workers = n_workers
        self.timeout = timeout
        self._listener = socket.create_server((host, port))
        self._listener.settimeout(timeout)
        self.address = self._listener.getsockname()
        self._conns: dict[int, socket.socket] = {}
        self._reports: queue.SimpleQueue = queue.SimpleQueue()
        self._lock = threading.Lock()
        self._barrier_count: dict[int, set] = {}
        self._threads: list[threading.Thread] = []
        self._closing = False

    def accept_workers(self) -> None:
        for _ in range(self.n_workers):
            conn, _ = self._listener.accept()
            conn.settimeout(self.timeout)
            kind, src, _, _, _ = _recv_frame(conn)
            if kind != K_HELLO:
                raise TransportError("expected HELLO handshake")
            self._conns[src] = conn
        for rank, conn in self._conns.items():
            t = threading.Thread(target=self._pump, args=(rank, conn),
                                 daemon=True)
            t.start()
            self._threads.append(t)

    def send_bundle(self, rank: int, obj) -> None:
        _send_frame(self._conns[rank], K_BUNDLE, 0, rank, 0, pickle.dumps(obj))

    def _pump(self, rank: int, conn: socket.socket) -> None:
        try:
            while True:
                kind, src, dst, step, payload = _recv_frame(conn)
                if kind == K_DATA:
                    with self._lock:
                        _send_frame(self._conns[dst], K_DATA, src, dst, step,
                                    payload)
                elif kind == K_BARRIER:
                    release = False
                    with self._lock:
                        arrived = self._barrier_count.setdefault(step, set())
                        arrived.add(src)
                        if len(arrived) == self.n_workers:
                            del self._barrier_count[step]
                            release = True
                    if release:
                        with self._lock:
                            for c in self._conns.values():
                                _send_frame(c, K_RELEASE, 0, 0, step, b"")
                elif kind == K_REPORT:
                    self._reports.put((src, pickle.loads(payload)))
                else:
                    raise TransportError(f"hub got unexpected frame kind {kind}")
        except (TransportError, OSError):
            if not self._closing:
                self._reports.put((rank, TransportError(
                    f"worker {rank} disconnected")))

    # root side -----------------------------------------------------------
    def collect(self, count: int, timeout: float | None = None):
        out = []
        for _ in range(count):
            try:
                item = self._reports.get(timeout=timeout or self.timeout)
            except queue.Empty:
                raise TransportError(
                    f"root timed out after {len(out)}/{count} reports") from None
            if isinstance(item[1], Exception):
                raise item[1]
            out.append(item)
        return out

    def broadcast(self, obj) -> None:
        payload = pickle.dumps(obj)
        with self._lock:
            for rank, c in self._conns.items():
                _send_frame(c, K_CONTROL, 0, rank, 0, payload)

    def close(self) -> None:
        self._closing = True
        for c in self._conns.values():
            try:
                c.close()
            except OSError:
                pass
        self._listener.close()


class TcpEndpoint(_ExchangeMixin):
    """Worker-side endpoint speaking the framed wire format to the hub."""

    def __init__(self, address, rank: int, send_idx, recv_idx,
                 model: NetModel | None = None, timeout: float = 60.0):
        self._init_maps(rank, send_idx, recv_idx, model)
        self.timeout = timeout
        self._sock = socket.create_connection(tuple(address), timeout=timeout)
        self._sock.settimeout(timeout)
        _send_frame(self._sock, K_HELLO, rank, 0, 0, b"")
        self._pending_data: dict[tuple, tuple] = {}
        self._controls: list = []
        self._barrier_seq = 0

    def _next_frame(self):
        try:
            return _recv_frame(self._sock)
        except socket.timeout:
            raise TransportError(
                f"worker {self.rank}: socket timed out") from None

    def recv_bundle(self):
        while True:
            kind, src, dst, step, payload = self._next_frame()
            if kind == K_BUNDLE:
                return pickle.loads(payload)
            raise TransportError(f"expected bundle, got frame kind {kind}")

    def barrier(self) -> None:
        seq = self._barrier_seq
        self._barrier_seq += 1
        _send_frame(self._sock, K_BARRIER, self.rank, 0, seq, b"")
        while True:
            kind, src, dst, step, payload = self._next_frame()
            if kind == K_RELEASE and step == seq:
                return
            self._stash(kind, src, step, payload)

    def _stash(self, kind, src, step, payload) -> None:
        if kind == K_DATA:
            self._pending_data[(src, step)] = payload
        elif kind == K_CONTROL:
            self._controls.append(pickle.loads(payload))
        else:
            raise TransportError(
                f"worker {self.rank}: unexpected frame kind {kind}")

    def _post(self, peer, step, values) -> None:
        _send_frame(self._sock, K_DATA, self.rank, peer, step,
                    encode_values(values))

    def _collect(self, peer):
        while True:
            for (src, step), payload in list(self._pending_data.items()):
                if src == peer:
                    del self._pending_data[(src, step)]
                    return step, decode_values(payload)
            kind, src, dst, step, payload = self._next_frame()
            self._stash(kind, src, step, payload)

    def report(self, obj) -> None:
        _send_frame(self._sock, K_REPORT, self.rank, 0, 0, pickle.dumps(obj))

    def recv_control(self):
        while True:
            if self._controls:
                return self._controls.pop(0)
            kind, src, dst, step, payload = self._next_frame()
            self._stash(kind, src, step, payload)

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass
