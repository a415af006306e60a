"""Workload management: resource selection, partitioning and late binding.

A workload is a set of mutually independent tasks (typically one ready
frontier). The manager ranks feasible resources by estimated queue time for
the derived pilot request, partitions the workload, sizes pilots from task
requirements, submits them through the pilot runtime and late-binds tasks
only once a pilot is actually ACTIVE. Still-active pilots with enough spare
walltime are reused across successive workloads.
"""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import yaml

from . import checks
from .pilot import Pilot, PilotDescription, PilotRuntime
from .simcluster import QueueTimeModel
from .tracking import (ACTIVE, BOUND, FINAL_STATES, NEW, TASK_KIND,
                       EntityRegistry)

log = logging.getLogger(__name__)

BACKENDS = ("local", "simbatch")


class WorkloadError(Exception):
    pass


class NoFeasibleResource(WorkloadError):
    pass


class UnplaceableTask(WorkloadError):
    pass


class InfeasibleOnResource(WorkloadError):
    pass


class PilotFailed(WorkloadError):
    pass


class CatalogError(WorkloadError):
    pass


@dataclass(frozen=True)
class ResourceCatalogEntry:
    resource_id: str
    nodes: int
    cores_per_node: int
    gpus_per_node: int = 0
    max_walltime_s: float = 86400.0
    backend: str = "local"
    queue_time_model: QueueTimeModel = field(default_factory=QueueTimeModel.backlog)

    def __post_init__(self) -> None:
        if self.nodes < 1 or self.cores_per_node < 1:
            raise ValueError("nodes and cores_per_node must be positive")
        if self.gpus_per_node < 0:
            raise ValueError("gpus_per_node must be non-negative")
        if self.max_walltime_s <= 0:
            raise ValueError("max_walltime_s must be positive")
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}")

    @property
    def total_cores(self) -> int:
        return self.nodes * self.cores_per_node

    @property
    def total_gpus(self) -> int:
        return self.nodes * self.gpus_per_node

    def to_dict(self) -> dict:
        return {
            "resource_id": self.resource_id,
            "nodes": self.nodes,
            "cores_per_node": self.cores_per_node,
            "gpus_per_node": self.gpus_per_node,
            "max_walltime_s": self.max_walltime_s,
            "backend": self.backend,
            "queue_time_model": self.queue_time_model.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ResourceCatalogEntry":
        try:
            return cls(
                resource_id=str(data["resource_id"]),
                nodes=int(data["nodes"]),
                cores_per_node=int(data["cores_per_node"]),
                gpus_per_node=int(data.get("gpus_per_node", 0)),
                max_walltime_s=float(data.get("max_walltime_s", 86400.0)),
                backend=str(data.get("backend", "local")),
                queue_time_model=QueueTimeModel.from_dict(data.get("queue_time_model")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CatalogError(f"bad catalog entry {data!r}: {exc}") from exc


def load_catalog(path) -> list[ResourceCatalogEntry]:
    """Read a resource catalog file (YAML mapping with a ``resources`` list)."""
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict) or not isinstance(data.get("resources"), list):
        raise CatalogError(f"{path}: expected a mapping with a 'resources' list")
    entries = [ResourceCatalogEntry.from_dict(row) for row in data["resources"]]
    ids = [e.resource_id for e in entries]
    if len(set(ids)) != len(ids):
        raise CatalogError(f"{path}: duplicate resource ids")
    return entries


def save_catalog(path, entries: Iterable[ResourceCatalogEntry]) -> None:
    Path(path).write_text(
        yaml.safe_dump({"resources": [e.to_dict() for e in entries]},
                       sort_keys=False),
        encoding="utf-8")


@dataclass(frozen=True)
class Workload:
    """Mutually independent tasks runnable concurrently (one ready frontier)."""

    uid: str
    tasks: tuple

    def __post_init__(self) -> None:
        if not self.tasks:
            raise ValueError("workload must contain at least one task")

    def task_map(self) -> dict:
        return {t.uid: t for t in self.tasks}


@dataclass(frozen=True)
class PartitionPlan:
    assignments: dict  # resource_id -> tuple of task uids

    def covered(self) -> set:
        out: set = set()
        for uids in self.assignments.values():
            out.update(uids)
        return out


@dataclass(frozen=True)
class Binding:
    entries: dict  # task uid -> (pilot uid, bind ts_ns)


def task_fits(task, entry: ResourceCatalogEntry) -> bool:
    return task.cpu_count <= entry.total_cores and task.gpu_count <= entry.total_gpus


def select_resources(workload: Workload, catalog: Sequence[ResourceCatalogEntry],
                     estimator: Optional[Callable[[ResourceCatalogEntry, PilotDescription], float]] = None,
                     concurrency_cap: int = 32) -> list[str]:
    """Rank feasible resources by estimated queue time for the derived pilot.

    Feasible means every workload task individually fits. Without a live
    estimator the entry's queue-time model is evaluated statically (backlog
    models estimate zero). Ties break on resource id.
    """
    feasible = [e for e in catalog
                if all(task_fits(t, e) for t in workload.tasks)]
    if not feasible:
        raise NoFeasibleResource(
            f"no resource can host every task of workload {workload.uid}")

    def estimate(entry: ResourceCatalogEntry) -> float:
        request = derive_pilot_description(workload.tasks, entry, concurrency_cap)
        if estimator is not None:
            return float(estimator(entry, request))
        return float(entry.queue_time_model.delay_for(request.cores))

    return [e.resource_id
            for e in sorted(feasible, key=lambda e: (estimate(e), e.resource_id))]


def partition(workload: Workload, entries: Sequence[ResourceCatalogEntry],
              free_cores: Optional[dict] = None) -> PartitionPlan:
    """Disjoint cover of the workload over the chosen (ranked) resources.

    Greedy fill proportional to free core capacity: each task goes to the
    eligible resource with the most remaining free cores, ties to the
    earlier-ranked resource.
    """
    if not entries:
        raise WorkloadError("partition needs at least one resource")
    remaining = {e.resource_id: float((free_cores or {}).get(e.resource_id, e.total_cores))
                 for e in entries}
    rank = {e.resource_id: i for i, e in enumerate(entries)}
    assignments: dict[str, list[str]] = {}
    for task in workload.tasks:
        eligible = [e for e in entries if task_fits(task, e)]
        if not eligible:
            raise UnplaceableTask(f"task {task.uid} fits no chosen resource")
        target = max(eligible,
                     key=lambda e: (remaining[e.resource_id], -rank[e.resource_id]))
        assignments.setdefault(target.resource_id, []).append(task.uid)
        remaining[target.resource_id] -= task.cpu_count
    return PartitionPlan({rid: tuple(uids) for rid, uids in assignments.items()})


def derive_pilot_description(tasks, entry: ResourceCatalogEntry,
                             concurrency_cap: int = 32) -> PilotDescription:
    """Size a pilot from task requirements.

    cores = min(resource cores, widest task * min(n, cap)); gpus likewise;
    walltime = ceil(total core-seconds / cores) * 1.5, clamped to the
    resource's walltime limit.
    """
    tasks = list(tasks)
    if not tasks:
        raise ValueError("cannot derive a pilot for zero tasks")
    max_cpu = max(t.cpu_count for t in tasks)
    max_gpu = max(t.gpu_count for t in tasks)
    if max_cpu > entry.total_cores or max_gpu > entry.total_gpus:
        raise InfeasibleOnResource(
            f"a task needs {max_cpu}c/{max_gpu}g, {entry.resource_id} offers "
            f"{entry.total_cores}c/{entry.total_gpus}g")
    width = min(len(tasks), concurrency_cap)
    cores = min(entry.total_cores, max_cpu * width)
    gpus = min(entry.total_gpus, max_gpu * width)
    core_seconds = sum(t.expected_duration_s * t.cpu_count for t in tasks)
    walltime = math.ceil(core_seconds / cores) * 1.5
    walltime = min(walltime, entry.max_walltime_s)
    return PilotDescription(resource_id=entry.resource_id, cores=cores,
                            gpus=gpus, walltime_s=walltime)


def _fits_static(pilot: Pilot, task) -> bool:
    return (pilot.description.cores >= task.cpu_count
            and pilot.description.gpus >= task.gpu_count)


def _remaining_s(pilot: Pilot, now_ns: int) -> float:
    if pilot.expires_at_ns is None:
        return float("inf")
    return (pilot.expires_at_ns - now_ns) / 1e9


def choose_pilot(pilots, states: dict, task, now_ns: int) -> Optional[Pilot]:
    """Pick an ACTIVE pilot for one task, or None to defer binding.

    The fitting active pilot with the most remaining walltime wins. If even
    that one cannot cover the task's duration hint, binding is deferred
    only while a strictly better pilot is still possible (another non-final
    pilot whose runway, actual or promised, is longer); otherwise the best
    available pilot is taken and the walltime contract applies.
    """
    fitting = [p for p in pilots
               if states[p.uid] == ACTIVE and _fits_static(p, task)]
    if not fitting:
        return None
    best = max(fitting, key=lambda p: _remaining_s(p, now_ns))
    best_remaining = _remaining_s(best, now_ns)
    if best_remaining < task.expected_duration_s:
        potential = 0.0
        for p in pilots:
            if states[p.uid] in FINAL_STATES or not _fits_static(p, task):
                continue
            runway = (_remaining_s(p, now_ns) if states[p.uid] == ACTIVE
                      else p.description.walltime_s)
            potential = max(potential, runway)
        if potential > best_remaining + 1e-9:
            return None
    return best


def bind(workload: Workload, plan: PartitionPlan,
         pilots_by_resource: dict, registry: EntityRegistry) -> Binding:
    """Late-bind NEW tasks onto ACTIVE pilots of their planned resource.

    Tasks whose pilots are still queued stay NEW and bind on a later call;
    so do tasks for which a pilot with more walltime is on its way. A
    resource whose pilots are all final raises PilotFailed.
    """
    tasks = workload.task_map()
    bound: dict[str, tuple[str, int]] = {}
    for resource_id, uids in plan.assignments.items():
        pilots = list(pilots_by_resource.get(resource_id, ()))
        if not pilots:
            raise PilotFailed(f"no pilots exist for resource {resource_id}")
        states = {p.uid: registry.current_state(p.uid) for p in pilots}
        if not any(states[p.uid] == ACTIVE for p in pilots):
            if all(states[p.uid] in FINAL_STATES for p in pilots):
                raise PilotFailed(
                    f"all pilots for {resource_id} are final "
                    f"({sorted(set(states.values()))}); tasks cannot bind")
            continue
        for uid in uids:
            if registry.current_state(uid) != NEW:
                continue
            pilot = choose_pilot(pilots, states, tasks[uid],
                                 registry.clock.now_ns())
            if pilot is None:
                continue
            record = registry.advance(uid, BOUND)
            registry.record_event(uid, checks.bind_event(pilot.uid))
            bound[uid] = (pilot.uid, record.ts_ns)
    return Binding(bound)


class WorkloadManager:
    """Stateful L3 driver: owns the pilot pool and executes workloads.

    Safe to call from several threads of control: pool mutation and the
    pump loop are serialized on one lock, so concurrent execute_workload
    calls interleave at workload granularity and share still-active pilots.
    """

    def __init__(self, catalog: Sequence[ResourceCatalogEntry],
                 runtime: PilotRuntime, concurrency_cap: int = 32) -> None:
        if not catalog:
            raise WorkloadError("empty resource catalog")
        self.catalog = list(catalog)
        self.by_id = {e.resource_id: e for e in self.catalog}
        self.runtime = runtime
        self.registry = runtime.registry
        self.concurrency_cap = concurrency_cap
        self.pool: dict[str, list[Pilot]] = {}
        self._wl_count = 0
        self._lock = threading.RLock()

    def pilots(self) -> list[Pilot]:
        with self._lock:
            return [p for pilots in self.pool.values() for p in pilots]

    def new_workload(self, tasks) -> Workload:
        with self._lock:
            self._wl_count += 1
            return Workload(uid=f"workload.{self._wl_count:06d}", tasks=tuple(tasks))

    def _estimate(self, entry: ResourceCatalogEntry, request: PilotDescription) -> float:
        return self.runtime.access.queue_info(entry.resource_id, request.cores).estimated_wait_s

    def execute_workload(self, workload: Workload,
                         timeout_s: Optional[float] = None) -> dict:
        """Run one workload to completion; returns task uid -> final state."""
        for task in workload.tasks:
            if not self.registry.exists(task.uid):
                self.registry.register(task.uid, TASK_KIND)
        with self._lock:
            ranked = select_resources(workload, self.catalog,
                                      estimator=self._estimate,
                                      concurrency_cap=self.concurrency_cap)
            chosen = [self.by_id[ranked[0]]]
            plan = partition(workload, chosen)
            tasks = workload.task_map()
            for resource_id, uids in plan.assignments.items():
                subset = [tasks[u] for u in uids]
                self._ensure_pilot(self.by_id[resource_id], subset)

        submitted: set[str] = set()

        def finished() -> bool:
            return all(self.registry.is_final(u) for u in tasks)

        import time as _time
        deadline = None if timeout_s is None else _time.monotonic() + timeout_s
        while not finished():
            with self._lock:
                progressed = self.runtime.pump()
                binding = bind(workload, plan, self.pool, self.registry)
                if binding.entries:
                    progressed = True
                    by_pilot: dict[str, list] = {}
                    for uid, (pilot_uid, _) in binding.entries.items():
                        if uid in submitted:
                            continue
                        by_pilot.setdefault(pilot_uid, []).append(tasks[uid])
                        submitted.add(uid)
                    for pilot_uid, subset in by_pilot.items():
                        self.runtime.submit_units(self._pilot(pilot_uid), subset)
            if finished():
                break
            if not progressed:
                if deadline is not None and _time.monotonic() > deadline:
                    raise WorkloadError(f"workload {workload.uid} timed out")
                if self.runtime.access.sim_cluster is not None:
                    # virtual time has a single owner; advance it serialized
                    with self._lock:
                        self.runtime.idle()
                else:
                    self.runtime.idle()
        log.info("workload %s finished (%d tasks)", workload.uid, len(tasks))
        return {uid: self.registry.current_state(uid) for uid in tasks}

    def shutdown(self) -> None:
        """Cancel every pilot that is still alive."""
        with self._lock:
            for pilot in self.pilots():
                if self.registry.current_state(pilot.uid) not in FINAL_STATES:
                    self.runtime.cancel_pilot(pilot)

    def _pilot(self, uid: str) -> Pilot:
        for pilot in self.pilots():
            if pilot.uid == uid:
                return pilot
        raise WorkloadError(f"unknown pilot {uid}")

    def _ensure_pilot(self, entry: ResourceCatalogEntry, tasks) -> Pilot:
        reuse = self._reusable(entry, tasks)
        if reuse is not None:
            log.info("reusing pilot %s for %d tasks", reuse.uid, len(tasks))
            return reuse
        description = derive_pilot_description(tasks, entry, self.concurrency_cap)
        pilot = self.runtime.submit_pilot(description)
        self.pool.setdefault(entry.resource_id, []).append(pilot)
        return pilot

    def _reusable(self, entry: ResourceCatalogEntry, tasks) -> Optional[Pilot]:
        max_cpu = max(t.cpu_count for t in tasks)
        max_gpu = max(t.gpu_count for t in tasks)
        now_ns = self.registry.clock.now_ns()
        for pilot in self.pool.get(entry.resource_id, ()):
            if self.registry.current_state(pilot.uid) != ACTIVE:
                continue
            if pilot.description.cores < max_cpu or pilot.description.gpus < max_gpu:
                continue
            required = math.ceil(
                sum(t.expected_duration_s * t.cpu_count for t in tasks)
                / pilot.description.cores) * 1.5
            remaining = (pilot.expires_at_ns - now_ns) / 1e9
            if remaining >= required:
                return pilot
        return None
