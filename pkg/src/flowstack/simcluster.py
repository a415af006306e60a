"""Discrete-event simulation of batch-scheduled clusters.

One :class:`SimCluster` owns the virtual clock and a single event heap for
any number of simulated resources. Each resource runs a FCFS queue without
cluster-level backfill: the head of the pending queue starts as soon as its
eligibility time has passed and enough cores are free. Queue-time models
shape when a submitted job becomes eligible, which is how configurable queue
waits are injected; the same machinery answers "how long would a request
submitted right now wait" both for pure models and for the live backlog.

Determinism: events fire in (time, insertion sequence) order, so identical
inputs produce identical event logs.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional

from .tracking import VirtualClock

CONSTANT = "constant"
TABLE = "table"
BACKLOG = "backlog"


class SimError(Exception):
    pass


class ClockRegression(SimError):
    pass


class RequestExceedsCapacity(SimError):
    pass


@dataclass(frozen=True)
class QueueTimeModel:
    """Deterministic queue-wait model for a simulated resource.

    ``constant`` waits a fixed delay, ``table`` picks the delay for the
    smallest core bracket that covers the request, ``backlog`` derives the
    wait purely from simulator occupancy.
    """

    kind: str = BACKLOG
    delay_s: float = 0.0
    table: tuple[tuple[int, float], ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in (CONSTANT, TABLE, BACKLOG):
            raise ValueError(f"unknown queue-time model kind {self.kind!r}")
        if self.delay_s < 0:
            raise ValueError("delay must be non-negative")
        for cores, delay in self.table:
            if delay < 0:
                raise ValueError("table delays must be non-negative")
            if cores <= 0:
                raise ValueError("table core brackets must be positive")

    def delay_for(self, cores: int) -> float:
        if self.kind == CONSTANT:
            return self.delay_s
        if self.kind == TABLE:
            for bracket, delay in sorted(self.table):
                if cores <= bracket:
                    return delay
            return sorted(self.table)[-1][1] if self.table else 0.0
        return 0.0

    @classmethod
    def constant(cls, delay_s: float) -> "QueueTimeModel":
        return cls(kind=CONSTANT, delay_s=delay_s)

    @classmethod
    def backlog(cls) -> "QueueTimeModel":
        return cls(kind=BACKLOG)

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.kind == CONSTANT:
            out["delay_s"] = self.delay_s
        if self.kind == TABLE:
            out["table"] = [{"cores": c, "delay_s": d} for c, d in self.table]
        return out

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> "QueueTimeModel":
        if data is None:
            return cls.backlog()
        kind = data.get("kind", BACKLOG)
        if kind == TABLE:
            rows = tuple((int(r["cores"]), float(r["delay_s"])) for r in data.get("table", ()))
            return cls(kind=TABLE, table=rows)
        return cls(kind=kind, delay_s=float(data.get("delay_s", 0.0)))


@dataclass(frozen=True)
class SimEvent:
    time: float
    kind: str  # job_arrival | job_start | job_end | cancel
    job_uid: str
    resource_id: str


@dataclass
class SimJob:
    uid: str
    cores: int
    runtime_s: float
    submit_s: float
    eligible_s: float
    start_s: Optional[float] = None
    end_s: Optional[float] = None
    status: str = "new"  # new -> pending -> running -> done | canceled
    on_start: Optional[Callable[["SimJob"], None]] = None
    on_end: Optional[Callable[["SimJob"], None]] = None


class SimResource:
    """FCFS core pool; all mutation happens through the owning cluster."""

    def __init__(self, cluster: "SimCluster", resource_id: str, nodes: int,
                 cores_per_node: int, model: QueueTimeModel) -> None:
        self.cluster = cluster
        self.resource_id = resource_id
        self.total_cores = nodes * cores_per_node
        self.model = model
        self.free_cores = self.total_cores
        self.pending: deque[SimJob] = deque()
        self.running: dict[str, SimJob] = {}
        self.jobs: dict[str, SimJob] = {}

    @property
    def pending_count(self) -> int:
        return len(self.pending)

    @property
    def running_count(self) -> int:
        return len(self.running)

    def submit(self, job: SimJob) -> None:
        if job.cores > self.total_cores:
            raise RequestExceedsCapacity(
                f"{job.cores} cores > {self.total_cores} on {self.resource_id}")
        self.jobs[job.uid] = job
        self.cluster._schedule(job.submit_s, "job_arrival", self.resource_id, job.uid)

    def cancel(self, job: SimJob) -> None:
        if job.status in ("done", "canceled"):
            return
        now = self.cluster.clock.now_s
        if job.status == "pending":
            self.pending.remove(job)
        elif job.status == "running":
            del self.running[job.uid]
            self.free_cores += job.cores
        job.status = "canceled"
        job.end_s = now
        self.cluster._log(now, "cancel", self.resource_id, job.uid)
        if job.on_end:
            job.on_end(job)
        self._try_start()

    def advance_to(self, t: float) -> list[SimEvent]:
        """Convenience wrapper: advances the whole owning cluster."""
        return self.cluster.advance_to(t)

    def estimate_wait(self, cores: int) -> float:
        """Modeled delay for constant/table models; backlog replay otherwise."""
        if cores > self.total_cores:
            raise RequestExceedsCapacity(
                f"{cores} cores > {self.total_cores} on {self.resource_id}")
        if self.model.kind in (CONSTANT, TABLE):
            return self.model.delay_for(cores)
        return self.hypothetical_wait(cores, 0.0)

    def hypothetical_wait(self, cores: int, eligibility_delay_s: float) -> float:
        """FCFS replay of a request submitted now, assuming no future arrivals.

        The replay walks the current pending queue in order in front of the
        hypothetical request, using the same max/+ arithmetic as the live
        simulator so the answer matches the observed wait exactly.
        """
        if cores > self.total_cores:
            raise RequestExceedsCapacity(
                f"{cores} cores > {self.total_cores} on {self.resource_id}")
        now = self.cluster.clock.now_s
        ends = [(job.start_s + job.runtime_s, job.cores) for job in self.running.values()]
        heapq.heapify(ends)
        free = self.total_cores - sum(job.cores for job in self.running.values())
        queue: list[tuple[float, int, Optional[float]]] = [
            (job.eligible_s, job.cores, job.runtime_s) for job in self.pending
        ]
        queue.append((now + eligibility_delay_s, cores, None))
        t = now
        for eligible, need, runtime in queue:
            start = max(t, eligible)
            while free < need:
                end, freed = heapq.heappop(ends)
                free += freed
                start = max(start, end)
            if runtime is None:
                return start - now
            free -= need
            heapq.heappush(ends, (start + runtime, need))
            t = start
        raise AssertionError("unreachable")

    # -- event handlers, invoked by the cluster with the clock already set --

    def _on_arrival(self, job: SimJob) -> None:
        job.status = "pending"
        self.pending.append(job)
        self._try_start()

    def _on_end(self, job: SimJob) -> None:
        if job.status != "running":
            return  # canceled earlier; stale end event
        del self.running[job.uid]
        self.free_cores += job.cores
        job.status = "done"
        job.end_s = self.cluster.clock.now_s
        self.cluster._log(job.end_s, "job_end", self.resource_id, job.uid)
        if job.on_end:
            job.on_end(job)
        self._try_start()

    def _try_start(self) -> None:
        now = self.cluster.clock.now_s
        while self.pending:
            head = self.pending[0]
            if head.cores > self.free_cores:
                break
            if now < head.eligible_s:
                self.cluster._schedule(head.eligible_s, "wake", self.resource_id, head.uid)
                break
            self.pending.popleft()
            head.status = "running"
            head.start_s = now
            self.free_cores -= head.cores
            self.running[head.uid] = head
            self.cluster._log(now, "job_start", self.resource_id, head.uid)
            if head.on_start:
                head.on_start(head)
            self.cluster._schedule(now + head.runtime_s, "job_end", self.resource_id, head.uid)


class SimCluster:
    """Single virtual-time owner for a set of simulated resources."""

    def __init__(self, clock: Optional[VirtualClock] = None) -> None:
        self.clock = clock if clock is not None else VirtualClock()
        self.resources: dict[str, SimResource] = {}
        self._heap: list[tuple[float, int, str, str, str]] = []
        self._seq = 0
        self._bg_seq = 0
        self.event_log: list[SimEvent] = []

    def add_resource(self, resource_id: str, nodes: int, cores_per_node: int,
                     model: Optional[QueueTimeModel] = None) -> SimResource:
        if resource_id in self.resources:
            raise SimError(f"resource {resource_id!r} already simulated")
        res = SimResource(self, resource_id, nodes, cores_per_node,
                          model if model is not None else QueueTimeModel.backlog())
        self.resources[resource_id] = res
        return res

    def resource(self, resource_id: str) -> SimResource:
        return self.resources[resource_id]

    def submit(self, resource_id: str, job: SimJob) -> None:
        self.resources[resource_id].submit(job)

    def next_event_time(self) -> Optional[float]:
        return self._heap[0][0] if self._heap else None

    def advance_to(self, t: float) -> list[SimEvent]:
        """Process all events with time <= t in order; leave the clock at t."""
        if t < self.clock.now_s - 1e-9:
            raise ClockRegression(f"advance_to({t}) before clock {self.clock.now_s}")
        fired_from = len(self.event_log)
        while self._heap and self._heap[0][0] <= t:
            when, _, kind, resource_id, uid = heapq.heappop(self._heap)
            self.clock.advance_to_s(when)
            res = self.resources[resource_id]
            job = res.jobs[uid]
            if kind == "job_arrival":
                if job.status == "canceled":
                    continue
                self._log(when, "job_arrival", resource_id, uid)
                res._on_arrival(job)
            elif kind == "job_end":
                res._on_end(job)
            elif kind == "wake":
                res._try_start()
        self.clock.advance_to_s(t)
        return self.event_log[fired_from:]

    def inject_background_load(self, resource_id: str,
                               spec: Iterable[tuple[float, int, float]]) -> int:
        """Enqueue (arrival_s, cores, runtime_s) entries as future arrivals."""
        res = self.resources[resource_id]
        count = 0
        for arrival_s, cores, runtime_s in spec:
            if cores > res.total_cores:
                raise RequestExceedsCapacity(
                    f"background job needs {cores} cores > {res.total_cores}")
            self._bg_seq += 1
            job = SimJob(
                uid=f"bg.{self._bg_seq:06d}",
                cores=int(cores),
                runtime_s=float(runtime_s),
                submit_s=float(arrival_s),
                eligible_s=float(arrival_s) + res.model.delay_for(int(cores)),
            )
            res.submit(job)
            count += 1
        return count

    def export_events(self, path) -> int:
        """Event log in the trace-file schema; names carry a virtual marker."""
        import json

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for ev in self.event_log:
                obj = {"uid": ev.job_uid, "kind": "simjob", "type": "event",
                       "name": f"virtual:{ev.kind} resource={ev.resource_id}",
                       "ts_ns": int(round(ev.time * 1e9))}
                fh.write(json.dumps(obj, ensure_ascii=False) + "\n")
        return len(self.event_log)

    # -- internals -----------------------------------------------------------

    def _schedule(self, when: float, kind: str, resource_id: str, uid: str) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (when, self._seq, kind, resource_id, uid))

    def _log(self, when: float, kind: str, resource_id: str, uid: str) -> None:
        self.event_log.append(SimEvent(when, kind, uid, resource_id))
