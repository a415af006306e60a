"""Homogeneous job access over heterogeneous backends.

One interface (submit / state / cancel / queue_info) over two backends: a
local backend that spawns real processes, and a simulated batch backend that
maps jobs onto a :class:`~flowstack.simcluster.SimCluster` resource. Real
queue systems would plug in as further Backend subclasses; everything above
this layer is backend-agnostic.

Job lifecycles are recorded in the shared registry (kind ``job``), so job
state is monotone across polls by construction.
"""

from __future__ import annotations

import logging
import os
import subprocess
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Optional

from . import tracking
from .simcluster import SimCluster, SimJob
from .tracking import (CANCELED, DONE, FAILED, JOB_KIND, PENDING, RUNNING,
                       EntityRegistry, VirtualClock)

if TYPE_CHECKING:
    from .workload import ResourceCatalogEntry

log = logging.getLogger(__name__)

LOCAL = "local"
SIMBATCH = "simbatch"


class AccessError(Exception):
    pass


class CapacityExceeded(AccessError):
    pass


class BackendUnavailable(AccessError):
    pass


class AlreadyFinal(AccessError):
    pass


class UnknownJob(AccessError):
    pass


class UnknownResource(AccessError):
    pass


@dataclass(frozen=True)
class JobDescription:
    command: tuple[str, ...]
    cores: int = 1
    walltime_s: float = 60.0
    queue: str = "batch"
    working_dir: Optional[str] = None
    environment: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.cores < 1:
            raise ValueError("cores must be positive")
        if self.walltime_s <= 0:
            raise ValueError("walltime must be positive")


@dataclass
class Job:
    uid: str
    description: JobDescription
    resource_id: str


@dataclass(frozen=True)
class JobStatus:
    uid: str
    state: str
    submit_ts_ns: Optional[int]
    start_ts_ns: Optional[int]
    end_ts_ns: Optional[int]
    exit_code: Optional[int]


@dataclass(frozen=True)
class QueueInfo:
    resource_id: str
    pending_jobs: int
    running_jobs: int
    estimated_wait_s: float


class Backend:
    kind = "abstract"

    def __init__(self, entry: "ResourceCatalogEntry", registry: EntityRegistry) -> None:
        self.entry = entry
        self.registry = registry
        self.jobs: dict[str, Job] = {}
        self._exit_codes: dict[str, Optional[int]] = {}

    @property
    def resource_id(self) -> str:
        return self.entry.resource_id

    def submit(self, description: JobDescription) -> Job:
        raise NotImplementedError

    def cancel(self, uid: str) -> None:
        raise NotImplementedError

    def queue_info(self, cores: int) -> QueueInfo:
        raise NotImplementedError

    def pump(self) -> bool:
        return False

    def status(self, uid: str) -> JobStatus:
        if uid not in self.jobs:
            raise UnknownJob(uid)
        snap = self.registry.history(uid)
        submit = start = end = None
        for rec in snap.records:
            if rec.state == PENDING:
                submit = rec.ts_ns
            elif rec.state == RUNNING:
                start = rec.ts_ns
            elif rec.state in tracking.FINAL_STATES:
                end = rec.ts_ns
        return JobStatus(uid, snap.current_state, submit, start, end,
                         self._exit_codes.get(uid))

    def _check_capacity(self, description: JobDescription) -> None:
        if description.cores > self.entry.total_cores:
            raise CapacityExceeded(
                f"{description.cores} cores > {self.entry.total_cores} "
                f"on {self.resource_id}")


class LocalBackend(Backend):
    """Runs jobs as real subprocesses; PENDING -> RUNNING at spawn."""

    kind = LOCAL

    def __init__(self, entry, registry, run_dir: Optional[Path] = None,
                 cancel_grace_s: float = 2.0) -> None:
        super().__init__(entry, registry)
        self.run_dir = Path(run_dir) if run_dir else Path.cwd()
        self.cancel_grace_s = cancel_grace_s
        self._procs: dict[str, subprocess.Popen] = {}
        self._lock = threading.RLock()

    def submit(self, description: JobDescription) -> Job:
        self._check_capacity(description)
        with self._lock:
            uid = self.registry.new_uid("job")
            self.registry.register(uid, JOB_KIND)
            self.registry.advance(uid, PENDING)
            job = Job(uid, description, self.resource_id)
            self.jobs[uid] = job
            cwd = Path(description.working_dir) if description.working_dir else self.run_dir
            cwd.mkdir(parents=True, exist_ok=True)
            env = dict(os.environ)
            env.update(description.environment)
            try:
                proc = subprocess.Popen(
                    list(description.command), cwd=cwd, env=env,
                    stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
            except OSError as exc:
                self.registry.record_error(uid, "SPAWN_FAILED", str(exc))
                self.registry.advance(uid, FAILED)
                return job
            self._procs[uid] = proc
            self.registry.advance(uid, RUNNING)
            return job

    def pump(self) -> bool:
        progressed = False
        with self._lock:
            for uid, proc in list(self._procs.items()):
                rc = proc.poll()
                if rc is None:
                    continue
                del self._procs[uid]
                self._exit_codes[uid] = rc
                if rc == 0:
                    self.registry.advance(uid, DONE)
                else:
                    self.registry.record_error(uid, "EXIT_NONZERO",
                                               f"exit code {rc}")
                    self.registry.advance(uid, FAILED)
                progressed = True
        return progressed

    def cancel(self, uid: str) -> None:
        if uid not in self.jobs:
            raise UnknownJob(uid)
        with self._lock:
            if self.registry.is_final(uid):
                raise AlreadyFinal(uid)
            proc = self._procs.pop(uid, None)
            if proc is not None and proc.poll() is None:
                proc.terminate()
                try:
                    proc.wait(timeout=self.cancel_grace_s)
                except subprocess.TimeoutExpired:
                    proc.kill()
                    proc.wait()
                self._exit_codes[uid] = proc.returncode
            self.registry.advance(uid, CANCELED)

    def queue_info(self, cores: int) -> QueueInfo:
        return QueueInfo(self.resource_id, 0, len(self._procs), 0.0)


class SimBatchBackend(Backend):
    """Maps jobs onto a simulated FCFS resource; time is virtual."""

    kind = SIMBATCH

    def __init__(self, entry, registry, sim_cluster: SimCluster) -> None:
        super().__init__(entry, registry)
        self.cluster = sim_cluster
        self.sim = sim_cluster.add_resource(
            entry.resource_id, entry.nodes, entry.cores_per_node,
            entry.queue_time_model)
        self._simjobs: dict[str, SimJob] = {}

    def submit(self, description: JobDescription) -> Job:
        self._check_capacity(description)
        uid = self.registry.new_uid("job")
        self.registry.register(uid, JOB_KIND)
        self.registry.advance(uid, PENDING)
        job = Job(uid, description, self.resource_id)
        self.jobs[uid] = job
        now = self.cluster.clock.now_s

        def on_start(sj: SimJob, _uid=uid) -> None:
            self.registry.advance(_uid, RUNNING)

        def on_end(sj: SimJob, _uid=uid) -> None:
            if sj.status == "canceled":
                if not self.registry.is_final(_uid):
                    self.registry.advance(_uid, CANCELED)
            else:
                self._exit_codes[_uid] = 0
                self.registry.advance(_uid, DONE)

        simjob = SimJob(
            uid=uid, cores=description.cores, runtime_s=description.walltime_s,
            submit_s=now,
            eligible_s=now + self.sim.model.delay_for(description.cores),
            on_start=on_start, on_end=on_end)
        self._simjobs[uid] = simjob
        self.sim.submit(simjob)
        # Process same-instant events so the queue census is immediately true.
        self.cluster.advance_to(now)
        return job

    def cancel(self, uid: str) -> None:
        if uid not in self.jobs:
            raise UnknownJob(uid)
        if self.registry.is_final(uid):
            raise AlreadyFinal(uid)
        self.sim.cancel(self._simjobs[uid])

    def queue_info(self, cores: int) -> QueueInfo:
        wait = self.sim.hypothetical_wait(cores, self.sim.model.delay_for(cores))
        return QueueInfo(self.resource_id, self.sim.pending_count,
                         self.sim.running_count, wait)


class ResourceAccess:
    """Facade mapping resource ids onto their backends.

    A single access layer is either fully real-time (local backends with a
    monotonic registry clock) or fully virtual (simbatch backends sharing
    one SimCluster on the registry's VirtualClock); mixing the two time
    bases in one run is rejected.
    """

    def __init__(self, entries, registry: EntityRegistry,
                 run_dir: Optional[Path] = None,
                 sim_cluster: Optional[SimCluster] = None) -> None:
        entries = list(entries)
        if not entries:
            raise AccessError("no resources configured")
        kinds = {e.backend for e in entries}
        if len(kinds) > 1:
            raise AccessError(f"cannot mix backends in one run: {sorted(kinds)}")
        self.registry = registry
        self.sim_cluster: Optional[SimCluster] = None
        self._backends: dict[str, Backend] = {}
        self._jobs: dict[str, str] = {}  # job uid -> resource id
        if kinds == {SIMBATCH}:
            clock = registry.clock
            if not isinstance(clock, VirtualClock):
                raise AccessError("simbatch resources require a virtual registry clock")
            self.sim_cluster = sim_cluster if sim_cluster is not None else SimCluster(clock)
            if self.sim_cluster.clock is not clock:
                raise AccessError("sim cluster must share the registry clock")
        for entry in entries:
            if entry.backend == LOCAL:
                backend: Backend = LocalBackend(entry, registry, run_dir)
            elif entry.backend == SIMBATCH:
                backend = SimBatchBackend(entry, registry, self.sim_cluster)
            else:
                raise BackendUnavailable(f"unknown backend {entry.backend!r}")
            self._backends[entry.resource_id] = backend

    @property
    def virtual(self) -> bool:
        return self.sim_cluster is not None

    def backend(self, resource_id: str) -> Backend:
        try:
            return self._backends[resource_id]
        except KeyError:
            raise UnknownResource(resource_id) from None

    def entry(self, resource_id: str):
        return self.backend(resource_id).entry

    def resource_ids(self) -> list[str]:
        return list(self._backends)

    def submit_job(self, resource_id: str, description: JobDescription) -> Job:
        job = self.backend(resource_id).submit(description)
        self._jobs[job.uid] = resource_id
        return job

    def job_state(self, uid: str) -> JobStatus:
        if uid not in self._jobs:
            raise UnknownJob(uid)
        return self._backends[self._jobs[uid]].status(uid)

    def cancel_job(self, uid: str) -> None:
        if uid not in self._jobs:
            raise UnknownJob(uid)
        self._backends[self._jobs[uid]].cancel(uid)

    def queue_info(self, resource_id: str, cores: int) -> QueueInfo:
        return self.backend(resource_id).queue_info(cores)

    def pump(self) -> bool:
        progressed = False
        for backend in self._backends.values():
            progressed |= backend.pump()
        return progressed
