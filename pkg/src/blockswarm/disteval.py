"""Distributed fitness evaluation over TCP.

Workers pull jobs from the search server, evaluate them locally against
datasets they hold themselves, and push results back.  Frames are a
big-endian ``u32`` payload length followed by a UTF-8 JSON object whose
``type`` is one of ``hello``, ``request_job``, ``job``, ``result``,
``heartbeat`` or ``shutdown``.

The server re-queues a job when its worker disconnects or misses
``missed_heartbeats`` heartbeat intervals, and keeps the first result that
arrives for any job id.
"""

from __future__ import annotations

import itertools
import json
import logging
import os
import socket
import struct
import threading
import time
import uuid
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .data import Dataset, resolve_dataset, sample_subset
from .fitness import FitnessConfig, FitnessResult, evaluate_block
from .netspec import BlockSpec, MemoryBudget

log = logging.getLogger(__name__)

MAX_FRAME = 1 << 24
MESSAGE_TYPES = {"hello", "request_job", "job", "result", "heartbeat", "shutdown"}
JOB_ERROR = "job_error"


class ProtocolError(ValueError):
    pass


# --- framing -------------------------------------------------------------------

def encode_frame(message: dict) -> bytes:
    payload = json.dumps(message, separators=(",", ":")).encode("utf-8")
    return struct.pack(">I", len(payload)) + payload


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if buf:
                raise ProtocolError("connection closed mid-frame")
            return None
        buf.extend(chunk)
    return bytes(buf)


def decode_payload(payload: bytes) -> dict:
    try:
        message = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed frame: {exc}") from None
    if not isinstance(message, dict) or message.get("type") not in MESSAGE_TYPES:
        raise ProtocolError("frame is not a typed message")
    return message


def recv_frame(sock: socket.socket) -> dict | None:
    """Next message, or ``None`` on a clean close between frames."""
    header = _recv_exact(sock, 4)
    if header is None:
        return None
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME:
        raise ProtocolError(f"frame of {length} bytes exceeds limit")
    payload = _recv_exact(sock, length)
    if payload is None:
        raise ProtocolError("connection closed mid-frame")
    return decode_payload(payload)


def send_frame(sock: socket.socket, message: dict) -> None:
    sock.sendall(encode_frame(message))


# --- jobs ----------------------------------------------------------------------

@dataclass(frozen=True)
class SubsetRef:
    dataset: str
    seed: int
    fraction: float


@dataclass(frozen=True)
class FitnessJob:
    job_id: int
    spec: BlockSpec
    subset_ref: SubsetRef
    config: FitnessConfig

    def to_message(self) -> dict:
        c = self.config
        return {
            "type": "job",
            "job_id": self.job_id,
            "layers": self.spec.num_layers,
            "growth": self.spec.growth_rate,
            "subset": {"dataset": self.subset_ref.dataset, "seed": self.subset_ref.seed,
                       "fraction": self.subset_ref.fraction},
            "config": {"patience": c.patience, "max_epochs": c.max_epochs_cap,
                       "batch_size": c.batch_size, "split_fraction": c.split_fraction,
                       "budget_params": c.budget.max_parameters,
                       "budget_bytes": c.budget.max_activation_bytes, "seed": c.rng_seed,
                       "dtype": c.dtype},
        }

    @classmethod
    def from_message(cls, m: dict) -> "FitnessJob":
        try:
            s, c = m["subset"], m["config"]
            config = FitnessConfig(
                patience=int(c["patience"]), max_epochs_cap=int(c["max_epochs"]),
                split_fraction=float(c["split_fraction"]), batch_size=int(c["batch_size"]),
                budget=MemoryBudget(int(c["budget_params"]), int(c["budget_bytes"])),
                rng_seed=int(c["seed"]), dtype=str(c.get("dtype", "float32")))
            return cls(int(m["job_id"]), BlockSpec(int(m["layers"]), int(m["growth"])),
                       SubsetRef(str(s["dataset"]), int(s["seed"]), float(s["fraction"])),
                       config)
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"bad job message: {exc}") from None


def result_message(job_id: int, result: FitnessResult) -> dict:
    return {"type": "result", "job_id": job_id, "fitness": result.fitness,
            "epochs_trained": result.epochs_trained, "failure": result.failure}


def result_from_message(m: dict) -> FitnessResult:
    failure = m.get("failure")
    try:
        fitness = float(m["fitness"])
        epochs = int(m.get("epochs_trained", 0))
    except (KeyError, TypeError, ValueError):
        return FitnessResult(0.0, 0, JOB_ERROR)
    if failure is not None or not 0.0 <= fitness <= 1.0:
        return FitnessResult(0.0, epochs, str(failure or JOB_ERROR))
    return FitnessResult(fitness, epochs)


def load_subset(data_root, ref: SubsetRef) -> Dataset:
    return sample_subset(resolve_dataset(data_root, ref.dataset), ref.fraction, ref.seed)


# --- server --------------------------------------------------------------------

@dataclass
class WorkerStatus:
    worker_id: str
    pid: int | None = None
    jobs_completed: int = 0
    last_heartbeat: float = field(default_factory=time.monotonic)
    current_job: int | None = None
    alive: bool = True

    def beat(self) -> None:
        self.last_heartbeat = max(self.last_heartbeat, time.monotonic())


class EvalServer:
    """Job queue and result table shared by any number of worker connections."""

    def __init__(self, bind_address=("127.0.0.1", 0), heartbeat_interval: float = 10.0,
                 missed_heartbeats: int = 3):
        self.bind_address = bind_address
        self.heartbeat_interval = heartbeat_interval
        self.missed_heartbeats = missed_heartbeats
        self._lock = threading.Condition()
        self._jobs: dict[int, FitnessJob] = {}
        self._queue: deque[int] = deque()
        self._inflight: dict[int, str] = {}
        self.results: dict[int, FitnessResult] = {}
        self.workers: dict[str, WorkerStatus] = {}
        self._conns: dict[str, socket.socket] = {}
        self._closing = False
        self._threads: list[threading.Thread] = []
        self._sock: socket.socket | None = None
        self.dispatch_count = 0

    # lifecycle

    def start(self) -> "EvalServer":
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind(tuple(self.bind_address))
        except OSError:
            sock.close()
            raise
        sock.listen(64)
        sock.settimeout(0.2)
        self._sock = sock
        for target in (self._accept_loop, self._monitor_loop):
            t = threading.Thread(target=target, daemon=True)
            t.start()
            self._threads.append(t)
        log.info("evaluation server listening on %s:%d", *self.address)
        return self

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()[:2]

    def close(self, grace: float = 2.0) -> None:
        with self._lock:
            if self._closing:
                return
            self._closing = True
            self._lock.notify_all()
        deadline = time.monotonic() + grace
        while time.monotonic() < deadline:
            with self._lock:
                busy = any(w.alive for w in self.workers.values())
            if not busy:
                break
            time.sleep(0.05)
        with self._lock:
            conns = list(self._conns.values())
        for conn in conns:
            _hard_close(conn)
        if self._sock is not None:
            self._sock.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()

    # job api

    def submit(self, jobs: Iterable[FitnessJob]) -> list[int]:
        ids = []
        with self._lock:
            for job in jobs:
                if job.job_id in self._jobs:
                    raise ValueError(f"duplicate job id {job.job_id}")
                self._jobs[job.job_id] = job
                self._queue.append(job.job_id)
                ids.append(job.job_id)
            self._lock.notify_all()
        return ids

    def wait(self, job_ids: Sequence[int], timeout: float | None = None) -> dict[int, FitnessResult]:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._lock:
            while not all(j in self.results for j in job_ids):
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    raise TimeoutError("jobs still pending")
                self._lock.wait(0.5 if remaining is None else min(0.5, remaining))
            return {j: self.results[j] for j in job_ids}

    def evaluate(self, jobs: Sequence[FitnessJob], timeout: float | None = None):
        ids = self.submit(jobs)
        return self.wait(ids, timeout)

    def inflight(self) -> dict[int, WorkerStatus]:
        with self._lock:
            return {j: self.workers[w] for j, w in self._inflight.items()}

    def pending(self) -> int:
        with self._lock:
            return len(self._queue) + len(self._inflight)

    # internals

    def _requeue(self, worker_id: str, reason: str) -> None:
        # caller holds the lock
        w = self.workers.get(worker_id)
        if w is None or w.current_job is None:
            return
        job_id = w.current_job
        w.current_job = None
        if self._inflight.get(job_id) == worker_id:
            del self._inflight[job_id]
            if job_id not in self.results and job_id not in self._queue:
                self._queue.appendleft(job_id)
                log.warning("re-queued job %d from worker %s (%s)", job_id, worker_id, reason)
        self._lock.notify_all()

    def _accept_loop(self):
        while not self._closing:
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            conn.settimeout(None)
            t = threading.Thread(target=self._handle, args=(conn,), daemon=True)
            t.start()

    def _monitor_loop(self):
        limit = self.heartbeat_interval * self.missed_heartbeats
        while not self._closing:
            time.sleep(min(self.heartbeat_interval / 2, 1.0))
            now = time.monotonic()
            dead = []
            with self._lock:
                for w in self.workers.values():
                    if w.alive and w.current_job is not None and now - w.last_heartbeat > limit:
                        w.alive = False
                        self._requeue(w.worker_id, "missed heartbeats")
                        dead.append(self._conns.get(w.worker_id))
            for conn in dead:
                if conn is not None:
                    _hard_close(conn)

    def _next_job(self, worker: WorkerStatus) -> FitnessJob | None:
        with self._lock:
            while not self._queue and not self._closing and worker.alive:
                self._lock.wait(0.5)
            if self._closing or not worker.alive:
                return None
            job_id = self._queue.popleft()
            self._inflight[job_id] = worker.worker_id
            worker.current_job = job_id
            worker.beat()
            self.dispatch_count += 1
            return self._jobs[job_id]

    def _record(self, worker: WorkerStatus, message: dict) -> None:
        job_id = message.get("job_id")
        with self._lock:
            if job_id not in self._jobs:
                log.warning("worker %s reported unknown job %r", worker.worker_id, job_id)
                return
            if job_id not in self.results:
                self.results[job_id] = result_from_message(message)
                worker.jobs_completed += 1
            if job_id in self._queue:
                self._queue.remove(job_id)
            if self._inflight.get(job_id) == worker.worker_id:
                del self._inflight[job_id]
            if worker.current_job == job_id:
                worker.current_job = None
            self._lock.notify_all()

    def _handle(self, conn: socket.socket):
        worker = None
        try:
            hello = recv_frame(conn)
            if hello is None or hello["type"] != "hello":
                raise ProtocolError("expected hello")
            worker_id = str(hello.get("worker_id") or uuid.uuid4().hex)
            with self._lock:
                if worker_id in self.workers and self.workers[worker_id].alive:
                    worker_id = f"{worker_id}-{uuid.uuid4().hex[:6]}"
                worker = WorkerStatus(worker_id, hello.get("pid"))
                self.workers[worker_id] = worker
                self._conns[worker_id] = conn
            log.info("worker %s connected (pid %s)", worker_id, worker.pid)
            while True:
                message = recv_frame(conn)
                if message is None:
                    break
                kind = message["type"]
                if kind == "request_job":
                    job = self._next_job(worker)
                    if job is None:
                        send_frame(conn, {"type": "shutdown"})
                        break
                    send_frame(conn, job.to_message())
                elif kind == "heartbeat":
                    with self._lock:
                        worker.beat()
                elif kind == "result":
                    self._record(worker, message)
                else:
                    raise ProtocolError(f"unexpected {kind!r} from worker")
        except (OSError, ProtocolError) as exc:
            log.info("closing worker connection: %s", exc)
        finally:
            if worker is not None:
                with self._lock:
                    self._requeue(worker.worker_id, "connection closed")
                    worker.alive = False
                    self._conns.pop(worker.worker_id, None)
            _hard_close(conn)


def _hard_close(conn: socket.socket) -> None:
    try:
        conn.shutdown(socket.SHUT_RDWR)
    except OSError:
        pass
    conn.close()


def serve(bind_address, job_source: Iterable, result_sink: Callable[[int, FitnessResult], None],
          heartbeat_interval: float = 10.0, on_ready: Callable[[EvalServer], None] | None = None):
    """Serve every job from ``job_source`` and hand results to ``result_sink``.

    ``job_source`` yields jobs or lists of jobs; each list is resolved
    completely before the next one is requested, so a source can depend on
    earlier results.
    """
    server = EvalServer(bind_address, heartbeat_interval).start()
    try:
        if on_ready is not None:
            on_ready(server)
        for item in job_source:
            batch = [item] if isinstance(item, FitnessJob) else list(item)
            results = server.evaluate(batch)
            for job in batch:
                result_sink(job.job_id, results[job.job_id])
    finally:
        server.close()


class DistributedEvaluator:
    """Swarm batch evaluator that runs each generation through an ``EvalServer``."""

    def __init__(self, server: EvalServer, subset_ref: SubsetRef, config: FitnessConfig,
                 timeout: float | None = None):
        self.server = server
        self.subset_ref = subset_ref
        self.config = config
        self.timeout = timeout
        self._ids = itertools.count(1)
        self.results: dict[BlockSpec, FitnessResult] = {}

    def __call__(self, specs: Sequence[BlockSpec]) -> list[float]:
        jobs = [FitnessJob(next(self._ids), s, self.subset_ref, self.config) for s in specs]
        results = self.server.evaluate(jobs, self.timeout)
        out = []
        for job in jobs:
            r = results[job.job_id]
            self.results[job.spec] = r
            out.append(r.fitness)
        return out


# --- worker --------------------------------------------------------------------

def work(server_address, local_data_root, worker_id: str | None = None,
         connect_timeout: float = 10.0) -> int:
    """Pull and evaluate jobs until the server shuts down or goes away; returns 0."""
    host, port = server_address
    deadline = time.monotonic() + connect_timeout
    while True:
        try:
            sock = socket.create_connection((host, int(port)))
            break
        except OSError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.1)
    worker_id = worker_id or f"{socket.gethostname()}-{os.getpid()}"
    subsets: dict[SubsetRef, Dataset] = {}
    try:
        send_frame(sock, {"type": "hello", "worker_id": worker_id, "pid": os.getpid()})
        while True:
            send_frame(sock, {"type": "request_job"})
            message = recv_frame(sock)
            if message is None or message["type"] == "shutdown":
                return 0
            if message["type"] != "job":
                raise ProtocolError(f"unexpected {message['type']!r} from server")
            job = FitnessJob.from_message(message)
            send_frame(sock, {"type": "heartbeat", "job_id": job.job_id})
            try:
                if job.subset_ref not in subsets:
                    subsets[job.subset_ref] = load_subset(local_data_root, job.subset_ref)
                subset = subsets[job.subset_ref]
            except (OSError, ValueError) as exc:
                log.error("job %d: %s", job.job_id, exc)
                send_frame(sock, result_message(job.job_id,
                                                FitnessResult(0.0, 0, f"{JOB_ERROR}: {exc}")))
                continue

            def beat(epoch, acc, job_id=job.job_id):
                send_frame(sock, {"type": "heartbeat", "job_id": job_id, "epoch": epoch})

            result = evaluate_block(job.spec, subset, job.config, on_epoch=beat)
            send_frame(sock, result_message(job.job_id, result))
    except (ConnectionError, ProtocolError) as exc:
        log.info("server connection ended: %s", exc)
        return 0
    finally:
        sock.close()
