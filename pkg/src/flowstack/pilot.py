"""Pilot runtime: acquire resources as pilots, schedule units onto slots.

A pilot is one L1 job that holds cores/gpus for a while; compute units are
tasks bound to a pilot and executed inside it without further queue waits.
The runtime is a cooperative pump loop: a single owner calls ``pump()``
which syncs pilot states from their jobs, reaps finished unit executions,
enforces walltime expiry, and runs one FIFO first-fit scheduling pass per
active pilot. Unit processes run concurrently between pumps; on a simulated
backend "execution" is a virtual interval on the shared clock.

Isolation: every unit gets its own sandbox directory under
``<run-dir>/<pilot-uid>/<unit-uid>/`` and a process environment consisting
of exactly the runtime's base environment plus the task's own variables
(plus the thread/rank variables its parallelism kind mandates).
"""

from __future__ import annotations

import logging
import math
import os
import shutil
import subprocess
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Optional, Sequence

from . import checks
from .access import CapacityExceeded, JobDescription, ResourceAccess, SIMBATCH
from .tracking import (ACTIVE, CANCELED, DONE, EXECUTING, FAILED,
                       FINAL_STATES, PILOT_KIND, RUNNING, SCHEDULED, SUBMITTED,
                       EntityRegistry, VirtualClock)

if TYPE_CHECKING:
    from .workflow import TaskDescription

log = logging.getLogger(__name__)

RANK_VAR = "FLOWSTACK_RANK"
RANKS_VAR = "FLOWSTACK_RANKS"


class PilotError(Exception):
    pass


class SubmissionRejected(PilotError):
    pass


class UnitTooLarge(PilotError):
    pass


class PilotFinal(PilotError):
    pass


class AlreadyFinal(PilotError):
    pass


class StagingFailed(PilotError):
    pass


class SpawnFailed(PilotError):
    pass


class Timeout(PilotError):
    pass


class StalledExecution(PilotError):
    pass


@dataclass(frozen=True)
class PilotDescription:
    resource_id: str
    cores: int
    walltime_s: float
    gpus: int = 0
    queue: str = "batch"

    def __post_init__(self) -> None:
        if self.cores < 1:
            raise ValueError("pilot needs at least one core")
        if self.gpus < 0:
            raise ValueError("gpus must be non-negative")
        if self.walltime_s <= 0:
            raise ValueError("walltime must be positive")


class SlotMap:
    """Core/GPU slot bookkeeping; a slot holds at most one unit uid."""

    def __init__(self, cores: int, gpus: int = 0) -> None:
        self.cpu: list[Optional[str]] = [None] * cores
        self.gpu: list[Optional[str]] = [None] * gpus

    def free_cpu(self) -> int:
        return sum(1 for s in self.cpu if s is None)

    def free_gpu(self) -> int:
        return sum(1 for s in self.gpu if s is None)

    def alloc(self, uid: str, cpu_n: int, gpu_n: int
              ) -> Optional[tuple[tuple[int, ...], tuple[int, ...]]]:
        """Claim the lowest-index free slots, or None if they do not fit."""
        cpu_idx = [i for i, s in enumerate(self.cpu) if s is None][:cpu_n]
        gpu_idx = [i for i, s in enumerate(self.gpu) if s is None][:gpu_n]
        if len(cpu_idx) < cpu_n or len(gpu_idx) < gpu_n:
            return None
        for i in cpu_idx:
            self.cpu[i] = uid
        for i in gpu_idx:
            self.gpu[i] = uid
        return tuple(cpu_idx), tuple(gpu_idx)

    def release(self, uid: str) -> None:
        self.cpu = [None if s == uid else s for s in self.cpu]
        self.gpu = [None if s == uid else s for s in self.gpu]

    def census(self) -> dict:
        return {
            "total_cores": len(self.cpu), "free_cores": self.free_cpu(),
            "total_gpus": len(self.gpu), "free_gpus": self.free_gpu(),
        }


@dataclass
class ComputeUnit:
    uid: str
    task_uid: str
    cpu_count: int = 1
    gpu_count: int = 0
    memory_mb: int = 0
    parallelism: str = "serial"
    description: Optional["TaskDescription"] = None
    sandbox: Optional[str] = None
    cpu_slots: tuple[int, ...] = ()
    gpu_slots: tuple[int, ...] = ()
    exit_code: Optional[int] = None


class Pilot:
    """Resource container: one L1 job plus slot and queue state."""

    def __init__(self, uid: str, description: PilotDescription,
                 job_uid: Optional[str] = None) -> None:
        self.uid = uid
        self.description = description
        self.job_uid = job_uid
        self.slots: Optional[SlotMap] = None
        self.queue: deque[ComputeUnit] = deque()
        self.units: dict[str, ComputeUnit] = {}
        self.running: dict[str, "UnitExecution"] = {}
        self.activated_at_ns: Optional[int] = None
        self.expires_at_ns: Optional[int] = None

    @property
    def resource_id(self) -> str:
        return self.description.resource_id

    def init_slots(self) -> None:
        self.slots = SlotMap(self.description.cores, self.description.gpus)

    def schedule_tick(self, backfill: bool = False
                      ) -> list[tuple[ComputeUnit, tuple[tuple[int, ...], tuple[int, ...]]]]:
        """One FIFO first-fit pass over the unit queue.

        Without backfill the scan stops at the first unit that does not fit;
        with backfill it keeps scanning past blocked units. Assigned units
        leave the queue with their slot indices recorded.
        """
        if self.slots is None:
            return []
        assigned = []
        kept: list[ComputeUnit] = []
        blocked = False
        for unit in self.queue:
            if blocked and not backfill:
                kept.append(unit)
                continue
            alloc = self.slots.alloc(unit.uid, unit.cpu_count, unit.gpu_count)
            if alloc is None:
                kept.append(unit)
                blocked = True
            else:
                unit.cpu_slots, unit.gpu_slots = alloc
                assigned.append((unit, alloc))
        self.queue = deque(kept)
        return assigned


class UnitExecution:
    def poll(self) -> Optional[int]:
        raise NotImplementedError

    def kill(self) -> None:
        raise NotImplementedError


class _ProcessExecution(UnitExecution):
    def __init__(self, procs: list[subprocess.Popen], files: list) -> None:
        self.procs = procs
        self._files = files

    def poll(self) -> Optional[int]:
        codes = [p.poll() for p in self.procs]
        if any(c is None for c in codes):
            return None
        self._close()
        return next((c for c in codes if c != 0), 0)

    def kill(self) -> None:
        for p in self.procs:
            if p.poll() is None:
                p.kill()
        for p in self.procs:
            p.wait()
        self._close()

    def _close(self) -> None:
        for fh in self._files:
            try:
                fh.close()
            except OSError:
                pass
        self._files = []


class _VirtualExecution(UnitExecution):
    def __init__(self, clock: VirtualClock, end_s: float) -> None:
        self.clock = clock
        self.end_s = end_s

    def poll(self) -> Optional[int]:
        return 0 if self.clock.now_s >= self.end_s - 1e-12 else None

    def kill(self) -> None:
        pass


class PilotRuntime:
    """Owner of all pilots in one run; drive it by calling ``pump()``."""

    def __init__(self, access: ResourceAccess, registry: EntityRegistry,
                 run_dir, backfill: bool = False,
                 base_env: Optional[dict] = None) -> None:
        self.access = access
        self.registry = registry
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.backfill = backfill
        if base_env is None:
            base_env = {"PATH": os.environ.get("PATH", "/usr/bin:/bin")}
        self.base_env = dict(base_env)
        self.pilots: dict[str, Pilot] = {}

    # -- pilots ---------------------------------------------------------------

    def submit_pilot(self, description: PilotDescription) -> Pilot:
        entry = self.access.entry(description.resource_id)
        if description.cores > entry.total_cores or description.gpus > entry.total_gpus:
            raise SubmissionRejected(
                f"pilot wants {description.cores}c/{description.gpus}g, "
                f"{entry.resource_id} has {entry.total_cores}c/{entry.total_gpus}g")
        if description.walltime_s > entry.max_walltime_s:
            raise SubmissionRejected(
                f"walltime {description.walltime_s}s exceeds resource limit "
                f"{entry.max_walltime_s}s")
        uid = self.registry.new_uid("pilot")
        self.registry.register(uid, PILOT_KIND)
        self.registry.record_event(uid, checks.size_event(
            description.cores, description.gpus, description.walltime_s,
            description.resource_id))
        jobdesc = JobDescription(
            command=self._pilot_command(description),
            cores=description.cores,
            walltime_s=description.walltime_s,
            queue=description.queue,
            working_dir=str(self.run_dir / "jobs" / uid),
        )
        try:
            job = self.access.submit_job(description.resource_id, jobdesc)
        except CapacityExceeded as exc:
            self.registry.advance(uid, FAILED)
            raise SubmissionRejected(str(exc)) from exc
        pilot = Pilot(uid, description, job.uid)
        self.registry.advance(uid, SUBMITTED)
        self.pilots[uid] = pilot
        log.info("pilot %s submitted to %s (%d cores, %.0fs)", uid,
                 description.resource_id, description.cores, description.walltime_s)
        return pilot

    def _pilot_command(self, description: PilotDescription) -> tuple[str, ...]:
        if self.access.backend(description.resource_id).kind == SIMBATCH:
            return ("pilot-agent",)
        return ("sleep", str(int(math.ceil(description.walltime_s))))

    def pilot_state(self, pilot: Pilot) -> str:
        return self.registry.current_state(pilot.uid)

    def submit_units(self, pilot: Pilot, tasks: Sequence["TaskDescription"]) -> list[str]:
        if self.pilot_state(pilot) in FINAL_STATES:
            raise PilotFinal(pilot.uid)
        staged = []
        for task in tasks:
            if (task.cpu_count > pilot.description.cores
                    or task.gpu_count > pilot.description.gpus):
                raise UnitTooLarge(
                    f"task {task.uid} needs {task.cpu_count}c/{task.gpu_count}g, "
                    f"pilot {pilot.uid} has {pilot.description.cores}c/"
                    f"{pilot.description.gpus}g")
            unit = ComputeUnit(
                uid=self.registry.new_uid("unit"),
                task_uid=task.uid,
                cpu_count=task.cpu_count,
                gpu_count=task.gpu_count,
                memory_mb=task.memory_mb,
                parallelism=task.parallelism,
                description=task,
            )
            staged.append(unit)
        for unit in staged:
            pilot.units[unit.uid] = unit
            pilot.queue.append(unit)
        return [u.uid for u in staged]

    # -- pump loop --------------------------------------------------------------

    def pump(self) -> bool:
        progressed = self.access.pump()
        for pilot in list(self.pilots.values()):
            progressed |= self._pump_pilot(pilot)
        return progressed

    def idle(self) -> None:
        """Block until something can happen: sleep (real) or advance time (sim)."""
        cluster = self.access.sim_cluster
        if cluster is None:
            time.sleep(0.002)
            return
        candidates = []
        nxt = cluster.next_event_time()
        if nxt is not None:
            candidates.append(nxt)
        for pilot in self.pilots.values():
            for ex in pilot.running.values():
                if isinstance(ex, _VirtualExecution):
                    candidates.append(ex.end_s)
        if not candidates:
            raise StalledExecution("virtual time cannot advance: no future events")
        cluster.advance_to(min(candidates))

    def drive_until(self, predicate, timeout_s: Optional[float] = None) -> None:
        deadline = None if timeout_s is None else time.monotonic() + timeout_s
        while not predicate():
            if self.pump():
                continue
            if predicate():
                return
            if deadline is not None and time.monotonic() > deadline:
                raise Timeout("condition not reached in time")
            self.idle()

    def wait_tasks(self, task_uids: Iterable[str], timeout_s: Optional[float] = None) -> None:
        uids = list(task_uids)
        self.drive_until(lambda: all(self.registry.is_final(u) for u in uids), timeout_s)

    def wait_active(self, pilot: Pilot, timeout_s: Optional[float] = None) -> None:
        def settled() -> bool:
            return self.pilot_state(pilot) == ACTIVE or self.registry.is_final(pilot.uid)
        self.drive_until(settled, timeout_s)
        if self.pilot_state(pilot) != ACTIVE:
            raise PilotError(f"pilot {pilot.uid} ended in {self.pilot_state(pilot)}")

    def _pump_pilot(self, pilot: Pilot) -> bool:
        progressed = False
        state = self.pilot_state(pilot)
        if state in FINAL_STATES:
            return False
        job = self.access.job_state(pilot.job_uid)
        if state == SUBMITTED:
            if job.state == RUNNING:
                pilot.init_slots()
                rec = self.registry.advance(pilot.uid, ACTIVE)
                pilot.activated_at_ns = rec.ts_ns
                pilot.expires_at_ns = rec.ts_ns + int(pilot.description.walltime_s * 1e9)
                state = ACTIVE
                progressed = True
            elif job.state in FINAL_STATES:
                # Died or was drained while still queued.
                self._drain(pilot, CANCELED if job.state == CANCELED else FAILED)
                return True
        if state != ACTIVE:
            return progressed

        for uid, execution in list(pilot.running.items()):
            code = execution.poll()
            if code is not None:
                self._finish_unit(pilot, pilot.units[uid], code)
                progressed = True

        job = self.access.job_state(pilot.job_uid)
        if job.state in FINAL_STATES:
            self._drain(pilot, DONE if job.state == DONE else
                        (CANCELED if job.state == CANCELED else FAILED))
            return True
        if pilot.expires_at_ns is not None and self.registry.clock.now_ns() >= pilot.expires_at_ns:
            self._drain(pilot, DONE, cancel_job=True)
            return True

        for unit, alloc in pilot.schedule_tick(self.backfill):
            self.registry.advance(unit.task_uid, SCHEDULED)
            self.registry.record_event(
                unit.task_uid, checks.alloc_event(unit.cpu_count, unit.gpu_count))
            self._start_unit(pilot, unit)
            progressed = True
        return progressed

    # -- unit execution -----------------------------------------------------------

    def execute_unit(self, pilot: Pilot, unit: ComputeUnit,
                     timeout_s: Optional[float] = None) -> Optional[int]:
        """Drive one scheduled unit to a final state; returns its exit code.

        Raises Timeout if the unit was cut off by the pilot's walltime.
        """
        if unit.uid not in pilot.running:
            self._start_unit(pilot, unit)
        self.drive_until(lambda: self.registry.is_final(unit.task_uid), timeout_s)
        if self.registry.current_state(unit.task_uid) == CANCELED and unit.exit_code is None:
            raise Timeout(f"unit {unit.uid} cut off at pilot expiry")
        return unit.exit_code

    def _start_unit(self, pilot: Pilot, unit: ComputeUnit) -> None:
        task_uid = unit.task_uid
        try:
            if self.access.backend(pilot.resource_id).kind == SIMBATCH:
                duration = unit.description.expected_duration_s if unit.description else 0.0
                clock = self.registry.clock
                execution: UnitExecution = _VirtualExecution(clock, clock.now_s + duration)
            else:
                execution = self._spawn(pilot, unit)
        except StagingFailed as exc:
            self.registry.record_error(task_uid, "STAGING_FAILED", str(exc))
            self.registry.advance(task_uid, FAILED)
            if pilot.slots:
                pilot.slots.release(unit.uid)
            return
        except SpawnFailed as exc:
            self.registry.record_error(task_uid, "SPAWN_FAILED", str(exc))
            self.registry.advance(task_uid, FAILED)
            if pilot.slots:
                pilot.slots.release(unit.uid)
            return
        self.registry.advance(task_uid, EXECUTING)
        pilot.running[unit.uid] = execution

    def _spawn(self, pilot: Pilot, unit: ComputeUnit) -> _ProcessExecution:
        task = unit.description
        if task is None:
            raise SpawnFailed(f"unit {unit.uid} has no task description")
        sandbox = self.run_dir / pilot.uid / unit.uid
        sandbox.mkdir(parents=True, exist_ok=True)
        unit.sandbox = str(sandbox)
        stage_in(task, sandbox)
        env = dict(self.base_env)
        env.update(task.environment)
        if task.parallelism == "openmp":
            env["OMP_NUM_THREADS"] = str(task.cpu_count)
        ranks = task.cpu_count if task.parallelism == "mpi" else 1
        procs: list[subprocess.Popen] = []
        files: list = []
        for rank in range(ranks):
            rank_env = env
            if ranks > 1:
                rank_env = dict(env)
                rank_env[RANK_VAR] = str(rank)
                rank_env[RANKS_VAR] = str(ranks)
            suffix = "" if ranks == 1 else f".{rank}"
            out = open(sandbox / f"stdout{suffix}", "wb")
            err = open(sandbox / f"stderr{suffix}", "wb")
            files.extend((out, err))
            try:
                proc = subprocess.Popen(
                    [task.executable, *task.arguments],
                    cwd=sandbox, env=rank_env, stdout=out, stderr=err)
            except OSError as exc:
                for p in procs:
                    p.kill()
                    p.wait()
                for fh in files:
                    fh.close()
                raise SpawnFailed(f"{task.executable}: {exc}") from exc
            procs.append(proc)
        return _ProcessExecution(procs, files)

    def _finish_unit(self, pilot: Pilot, unit: ComputeUnit, exit_code: int) -> None:
        unit.exit_code = exit_code
        pilot.running.pop(unit.uid, None)
        task_uid = unit.task_uid
        staging_error: Optional[str] = None
        if unit.sandbox is not None and unit.description is not None:
            try:
                stage_out(unit.description, Path(unit.sandbox), self.run_dir / "outputs")
            except StagingFailed as exc:
                staging_error = str(exc)
        if exit_code == 0 and staging_error is None:
            self.registry.advance(task_uid, DONE)
        else:
            if exit_code != 0:
                self.registry.record_error(task_uid, "EXIT_NONZERO",
                                           f"exit code {exit_code}")
            if staging_error is not None:
                self.registry.record_error(task_uid, "STAGING_FAILED", staging_error)
            self.registry.advance(task_uid, FAILED)
        if pilot.slots:
            pilot.slots.release(unit.uid)

    # -- cancellation --------------------------------------------------------------

    def cancel_unit(self, pilot: Pilot, unit_uid: str) -> None:
        unit = pilot.units[unit_uid]
        if self.registry.is_final(unit.task_uid):
            raise AlreadyFinal(unit_uid)
        execution = pilot.running.pop(unit_uid, None)
        if execution is not None:
            execution.kill()
        else:
            pilot.queue = deque(u for u in pilot.queue if u.uid != unit_uid)
        if pilot.slots:
            pilot.slots.release(unit_uid)
        self.registry.advance(unit.task_uid, CANCELED)

    def cancel_pilot(self, pilot: Pilot) -> None:
        if self.pilot_state(pilot) in FINAL_STATES:
            raise AlreadyFinal(pilot.uid)
        self._drain(pilot, CANCELED, cancel_job=True)

    def _drain(self, pilot: Pilot, final_state: str, cancel_job: bool = False) -> None:
        """Cancel every non-final unit, release the job, finalize the pilot."""
        for uid, execution in list(pilot.running.items()):
            execution.kill()
            unit = pilot.units[uid]
            if not self.registry.is_final(unit.task_uid):
                self.registry.record_event(unit.task_uid, "pilot_drained")
                self.registry.advance(unit.task_uid, CANCELED)
            if pilot.slots:
                pilot.slots.release(uid)
        pilot.running.clear()
        for unit in pilot.queue:
            if not self.registry.is_final(unit.task_uid):
                self.registry.record_event(unit.task_uid, "pilot_drained")
                self.registry.advance(unit.task_uid, CANCELED)
        pilot.queue.clear()
        if cancel_job and pilot.job_uid is not None:
            status = self.access.job_state(pilot.job_uid)
            if status.state not in FINAL_STATES:
                self.access.cancel_job(pilot.job_uid)
        self.registry.advance(pilot.uid, final_state)


# -- staging ----------------------------------------------------------------------


def _sandbox_relative(path: str) -> str:
    if not path or path.startswith("/") or ".." in Path(path).parts:
        raise StagingFailed(f"sandbox path must be relative without '..': {path!r}")
    return path


def stage_in(task: "TaskDescription", sandbox: Path) -> None:
    """Materialize input directives: source is external, target sandbox-relative."""
    for directive in task.input_staging:
        target = sandbox / _sandbox_relative(directive.target or Path(directive.source).name)
        source = Path(directive.source)
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            if directive.action == "link":
                target.symlink_to(source.resolve())
            elif directive.action == "move":
                shutil.move(str(source), str(target))
            elif source.is_dir():
                shutil.copytree(source, target, dirs_exist_ok=True)
            else:
                shutil.copy2(source, target)
        except OSError as exc:
            raise StagingFailed(f"stage-in {directive.source} -> {directive.target}: {exc}") from exc


def stage_out(task: "TaskDescription", sandbox: Path, output_root: Path) -> None:
    """Collect output directives: source sandbox-relative, target external.

    Relative targets land under the run's ``outputs/`` directory.
    """
    for directive in task.output_staging:
        source = sandbox / _sandbox_relative(directive.source)
        target = Path(directive.target) if directive.target.startswith("/") \
            else output_root / directive.target
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            if directive.action == "link":
                target.symlink_to(source.resolve())
            elif directive.action == "move":
                shutil.move(str(source), str(target))
            elif source.is_dir():
                shutil.copytree(source, target, dirs_exist_ok=True)
            else:
                shutil.copy2(source, target)
        except OSError as exc:
            raise StagingFailed(f"stage-out {directive.source} -> {directive.target}: {exc}") from exc
