"""Workflow description and execution: pipelines of stages of task sets.

Execution-order semantics: tasks of one stage run concurrently, stages of
one pipeline run sequentially behind a barrier, pipelines run concurrently.
The runner repeatedly takes the ready frontier, hands it to the workload
manager as one workload, fires adaptivity hooks when their trigger stage is
fully final, and stops when no frontier remains. A failed task lets its
stage siblings finish and then freezes its own pipeline; other pipelines
proceed (fail-stop per pipeline).

Workflow objects are treated as immutable snapshots between hook
applications; hooks return edit lists that are applied atomically onto a
fresh copy.
"""

from __future__ import annotations

import graphlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Union

import yaml

from . import checks
from .tracking import (DONE, FINAL_STATES, NEW, TASK_KIND, EntityRegistry,
                       VirtualClock, uid_error)
from .workload import WorkloadManager

log = logging.getLogger(__name__)

PARALLELISM = ("serial", "mpi", "openmp")
STAGING_ACTIONS = ("copy", "link", "move")


class WorkflowError(Exception):
    pass


class CycleDetected(WorkflowError):
    pass


class IllegalEdit(WorkflowError):
    pass


class ValidationFailed(WorkflowError):
    pass


class HookFailure(WorkflowError):
    pass


class UnregisteredTask(WorkflowError):
    pass


@dataclass(frozen=True)
class StagingDirective:
    """One file movement; the sandbox-side path must stay inside the sandbox
    (for inputs that is the target, for outputs the source)."""

    source: str
    target: str = ""
    action: str = "copy"


@dataclass(frozen=True)
class TaskDescription:
    """A single executable invocation plus its resource requirements."""

    uid: str
    executable: str
    arguments: tuple[str, ...] = ()
    parallelism: str = "serial"
    cpu_count: int = 1
    gpu_count: int = 0
    memory_mb: int = 0
    environment: dict = field(default_factory=dict)
    input_staging: tuple[StagingDirective, ...] = ()
    output_staging: tuple[StagingDirective, ...] = ()
    expected_duration_s: float = 60.0

    def to_dict(self) -> dict:
        return {
            "uid": self.uid,
            "executable": self.executable,
            "arguments": list(self.arguments),
            "parallelism": self.parallelism,
            "cpu_count": self.cpu_count,
            "gpu_count": self.gpu_count,
            "memory_mb": self.memory_mb,
            "environment": dict(self.environment),
            "input_staging": [vars(d) | {} for d in self.input_staging],
            "output_staging": [vars(d) | {} for d in self.output_staging],
            "expected_duration_s": self.expected_duration_s,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TaskDescription":
        known = {"uid", "executable", "arguments", "parallelism", "cpu_count",
                 "gpu_count", "memory_mb", "environment", "input_staging",
                 "output_staging", "expected_duration_s"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown task fields: {sorted(unknown)}")
        if "uid" not in data or "executable" not in data:
            raise ValueError("task needs at least 'uid' and 'executable'")

        def directives(rows) -> tuple[StagingDirective, ...]:
            out = []
            for row in rows or ():
                extra = set(row) - {"source", "target", "action"}
                if extra:
                    raise ValueError(f"unknown staging fields: {sorted(extra)}")
                out.append(StagingDirective(
                    source=str(row["source"]),
                    target=str(row.get("target", "")),
                    action=str(row.get("action", "copy"))))
            return tuple(out)

        args = data.get("arguments", ())
        if isinstance(args, str):
            raise ValueError("arguments must be a list of strings")
        return cls(
            uid=str(data["uid"]),
            executable=str(data["executable"]),
            arguments=tuple(str(a) for a in args),
            parallelism=str(data.get("parallelism", "serial")),
            cpu_count=int(data.get("cpu_count", 1)),
            gpu_count=int(data.get("gpu_count", 0)),
            memory_mb=int(data.get("memory_mb", 0)),
            environment={str(k): str(v) for k, v in (data.get("environment") or {}).items()},
            input_staging=directives(data.get("input_staging")),
            output_staging=directives(data.get("output_staging")),
            expected_duration_s=float(data.get("expected_duration_s", 60.0)),
        )


@dataclass
class Stage:
    uid: str
    tasks: tuple[TaskDescription, ...]
    post_hook: Optional["AdaptivityHook"] = None


@dataclass
class Pipeline:
    uid: str
    stages: tuple[Stage, ...]


@dataclass
class Workflow:
    uid: str
    pipelines: tuple[Pipeline, ...]

    def iter_tasks(self):
        """Yield (pipeline, stage_index, stage, task) in traversal order."""
        for pipeline in self.pipelines:
            for index, stage in enumerate(pipeline.stages):
                for task in stage.tasks:
                    yield pipeline, index, stage, task

    def task_uids(self) -> list[str]:
        return [t.uid for _, _, _, t in self.iter_tasks()]

    def find_task(self, uid: str) -> Optional[TaskDescription]:
        for _, _, _, task in self.iter_tasks():
            if task.uid == uid:
                return task
        return None


# -- adaptivity ---------------------------------------------------------------


@dataclass(frozen=True)
class AppendStage:
    pipeline_uid: str
    stage: Stage


@dataclass(frozen=True)
class AppendPipeline:
    pipeline: Pipeline


@dataclass(frozen=True)
class ModifyTask:
    task_uid: str
    description: TaskDescription


Edit = Union[AppendStage, AppendPipeline, ModifyTask]


@dataclass
class AdaptivityHook:
    """Runs when its trigger stage is fully final; returns a list of edits.

    Edits may append stages/pipelines or modify tasks that have not been
    bound yet; they can never touch started or completed work.
    """

    trigger: str
    effect: Callable[[Workflow, dict], list]


# -- validation ----------------------------------------------------------------


@dataclass(frozen=True)
class Defect:
    kind: str
    where: str
    detail: str


def _task_defects(task: TaskDescription, where: str) -> list[Defect]:
    out = []
    reason = uid_error(task.uid)
    if reason:
        out.append(Defect("BadUid", where, reason))
    if task.parallelism not in PARALLELISM:
        out.append(Defect("BadParallelism", where, task.parallelism))
    if task.cpu_count < 1:
        out.append(Defect("BadCpuCount", where, str(task.cpu_count)))
    if task.parallelism == "serial" and task.cpu_count != 1:
        out.append(Defect("SerialCpuMismatch", where,
                          f"serial task with cpu_count={task.cpu_count}"))
    if task.gpu_count < 0:
        out.append(Defect("BadGpuCount", where, str(task.gpu_count)))
    if task.memory_mb < 0:
        out.append(Defect("BadMemory", where, str(task.memory_mb)))
    if task.expected_duration_s <= 0:
        out.append(Defect("BadDuration", where, str(task.expected_duration_s)))
    for directive in task.input_staging:
        side = directive.target or Path(directive.source).name
        if side.startswith("/") or ".." in Path(side).parts:
            out.append(Defect("BadStaging", where, f"input target {side!r}"))
        if directive.action not in STAGING_ACTIONS:
            out.append(Defect("BadStaging", where, f"action {directive.action!r}"))
    for directive in task.output_staging:
        if (not directive.source or directive.source.startswith("/")
                or ".." in Path(directive.source).parts):
            out.append(Defect("BadStaging", where, f"output source {directive.source!r}"))
        if not directive.target:
            out.append(Defect("BadStaging", where, "output target missing"))
        if directive.action not in STAGING_ACTIONS:
            out.append(Defect("BadStaging", where, f"action {directive.action!r}"))
    return out


def validate_workflow(workflow: Workflow) -> list[Defect]:
    """Empty result iff all structural invariants hold and uids are unique."""
    out: list[Defect] = []
    if not workflow.pipelines:
        out.append(Defect("EmptyWorkflow", workflow.uid, "no pipelines"))
    seen: dict[str, str] = {workflow.uid: "workflow"}
    for pipeline in workflow.pipelines:
        if pipeline.uid in seen:
            out.append(Defect("DuplicateUid", pipeline.uid, "pipeline uid reused"))
        seen[pipeline.uid] = "pipeline"
        if not pipeline.stages:
            out.append(Defect("EmptyPipeline", pipeline.uid, "no stages"))
        for stage in pipeline.stages:
            if stage.uid in seen:
                out.append(Defect("DuplicateUid", stage.uid, "stage uid reused"))
            seen[stage.uid] = "stage"
            if not stage.tasks:
                out.append(Defect("EmptyStage", stage.uid, "no tasks"))
            for task in stage.tasks:
                if task.uid in seen:
                    out.append(Defect("DuplicateUid", task.uid, "task uid reused"))
                seen[task.uid] = "task"
                out.extend(_task_defects(task, f"{pipeline.uid}/{stage.uid}/{task.uid}"))
    return out


# -- frontier and DAG import ------------------------------------------------------


def ready_frontier(workflow: Workflow, registry: EntityRegistry) -> set[str]:
    """Tasks runnable right now.

    Per pipeline: the earliest stage that still has a non-final task
    contributes its NEW tasks, provided every earlier stage finished DONE.
    A FAILED/CANCELED task in an earlier stage freezes the pipeline.
    """
    ready: set[str] = set()
    for pipeline in workflow.pipelines:
        blocked = False
        for stage in pipeline.stages:
            states = {}
            for task in stage.tasks:
                if not registry.exists(task.uid):
                    raise UnregisteredTask(task.uid)
                states[task.uid] = registry.current_state(task.uid)
            if all(s in FINAL_STATES for s in states.values()):
                if any(s != DONE for s in states.values()):
                    blocked = True  # fail-stop: later stages never start
                    break
                continue
            if not blocked:
                ready.update(uid for uid, s in states.items() if s == NEW)
            break
    return ready


def import_dag(nodes: Iterable[TaskDescription], edges: Iterable[tuple[str, str]],
               uid: str = "dag") -> Workflow:
    """Convert a task DAG into one pipeline of longest-path-depth stages."""
    nodes = list(nodes)
    by_uid = {t.uid: t for t in nodes}
    if len(by_uid) != len(nodes):
        raise WorkflowError("duplicate node uids in DAG")
    predecessors: dict[str, set[str]] = {t.uid: set() for t in nodes}
    for src, dst in edges:
        if src not in by_uid or dst not in by_uid:
            raise WorkflowError(f"edge ({src}, {dst}) references unknown node")
        predecessors[dst].add(src)
    sorter = graphlib.TopologicalSorter(predecessors)
    try:
        order = list(sorter.static_order())
    except graphlib.CycleError as exc:
        raise CycleDetected(str(exc)) from exc
    depth: dict[str, int] = {}
    for node in order:
        preds = predecessors[node]
        depth[node] = 1 + max((depth[p] for p in preds), default=-1)
    stages: dict[int, list[TaskDescription]] = {}
    for node in order:
        stages.setdefault(depth[node], []).append(by_uid[node])
    pipeline = Pipeline(
        uid=f"{uid}.p0",
        stages=tuple(Stage(uid=f"{uid}.s{k}", tasks=tuple(stages[k]))
                     for k in sorted(stages)))
    return Workflow(uid=uid, pipelines=(pipeline,))


# -- adaptivity application ---------------------------------------------------------


def _canonical_task(task: TaskDescription) -> str:
    return json.dumps(task.to_dict(), sort_keys=True)


def apply_hook(workflow: Workflow, hook: AdaptivityHook,
               registry: EntityRegistry, results: dict) -> Workflow:
    """Apply a hook's edits atomically; bound-or-later tasks stay untouched."""
    trigger = None
    for pipeline in workflow.pipelines:
        for stage in pipeline.stages:
            if stage.uid == hook.trigger:
                trigger = stage
    if trigger is None:
        raise WorkflowError(f"hook trigger stage {hook.trigger!r} not in workflow")
    for task in trigger.tasks:
        if not registry.exists(task.uid) or not registry.is_final(task.uid):
            raise WorkflowError(f"hook fired before stage {hook.trigger} was final")

    frozen_before = {
        task.uid: _canonical_task(task)
        for _, _, _, task in workflow.iter_tasks()
        if registry.exists(task.uid) and registry.current_state(task.uid) != NEW
    }

    try:
        edits = hook.effect(workflow, dict(results))
    except Exception as exc:
        raise HookFailure(f"hook on {hook.trigger} raised: {exc}") from exc

    pipelines = {p.uid: list(p.stages) for p in workflow.pipelines}
    order = [p.uid for p in workflow.pipelines]
    appended: list[Pipeline] = []
    for edit in edits:
        if isinstance(edit, AppendStage):
            if edit.pipeline_uid not in pipelines:
                raise IllegalEdit(f"unknown pipeline {edit.pipeline_uid}")
            pipelines[edit.pipeline_uid].append(edit.stage)
        elif isinstance(edit, AppendPipeline):
            appended.append(edit.pipeline)
        elif isinstance(edit, ModifyTask):
            if edit.description.uid != edit.task_uid:
                raise IllegalEdit("replacement must keep the task uid")
            state = (registry.current_state(edit.task_uid)
                     if registry.exists(edit.task_uid) else NEW)
            if state != NEW:
                raise IllegalEdit(f"task {edit.task_uid} already {state}")
            hit = False
            for puid, stages in pipelines.items():
                for i, stage in enumerate(stages):
                    if any(t.uid == edit.task_uid for t in stage.tasks):
                        stages[i] = replace(stage, tasks=tuple(
                            edit.description if t.uid == edit.task_uid else t
                            for t in stage.tasks))
                        hit = True
            if not hit:
                raise IllegalEdit(f"task {edit.task_uid} not in workflow")
        else:
            raise IllegalEdit(f"unknown edit type {type(edit).__name__}")

    edited = Workflow(
        uid=workflow.uid,
        pipelines=tuple(Pipeline(uid=puid, stages=tuple(pipelines[puid]))
                        for puid in order) + tuple(appended))
    defects = validate_workflow(edited)
    if defects:
        raise ValidationFailed("; ".join(f"{d.kind}@{d.where}" for d in defects))
    for _, _, _, task in edited.iter_tasks():
        if task.uid in frozen_before and _canonical_task(task) != frozen_before[task.uid]:
            raise IllegalEdit(f"task {task.uid} was modified after binding")
    return edited


# -- execution -------------------------------------------------------------------


@dataclass
class PilotPlacement:
    pilot_uid: str
    resource_id: str
    cores: int
    gpus: int
    walltime_s: float
    state: str
    queue_wait_s: Optional[float]

    def to_dict(self) -> dict:
        return vars(self) | {}


@dataclass
class RunReport:
    workflow_uid: str
    virtual: bool
    task_states: dict
    wall_time_s: float
    workload_count: int
    pilots: list
    trace_path: str
    run_dir: str

    @property
    def all_done(self) -> bool:
        return all(s == DONE for s in self.task_states.values())

    def to_dict(self) -> dict:
        return {
            "workflow_uid": self.workflow_uid,
            "virtual": self.virtual,
            "all_done": self.all_done,
            "task_states": dict(sorted(self.task_states.items())),
            "wall_time_s": self.wall_time_s,
            "makespan_s": self.wall_time_s,
            "workload_count": self.workload_count,
            "pilots": [p.to_dict() for p in self.pilots],
            "trace_path": self.trace_path,
            "run_dir": self.run_dir,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n",
                              encoding="utf-8")


def _register_tasks(workflow: Workflow, registry: EntityRegistry) -> None:
    for pipeline, stage_index, _, task in workflow.iter_tasks():
        if not registry.exists(task.uid):
            registry.register(task.uid, TASK_KIND)
            registry.record_event(
                task.uid, checks.member_event(pipeline.uid, stage_index))


def run(workflow: Workflow, manager: WorkloadManager, run_dir) -> RunReport:
    """Execute a workflow to quiescence and emit trace plus report files."""
    defects = validate_workflow(workflow)
    if defects:
        raise ValidationFailed("; ".join(f"{d.kind}@{d.where}: {d.detail}"
                                         for d in defects))
    registry = manager.registry
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    started_ns = registry.clock.now_ns()

    current = workflow
    _register_tasks(current, registry)
    fired: set[str] = set()
    workload_count = 0
    try:
        while True:
            frontier = ready_frontier(current, registry)
            if not frontier:
                break
            ordered = [task for _, _, _, task in current.iter_tasks()
                       if task.uid in frontier]
            manager.execute_workload(manager.new_workload(ordered))
            workload_count += 1
            for pipeline in current.pipelines:
                for stage in pipeline.stages:
                    if stage.post_hook is None or stage.uid in fired:
                        continue
                    states = {t.uid: registry.current_state(t.uid)
                              for t in stage.tasks}
                    if all(s in FINAL_STATES for s in states.values()):
                        fired.add(stage.uid)
                        current = apply_hook(current, stage.post_hook, registry,
                                             states)
                        _register_tasks(current, registry)
    finally:
        # Pilots must not outlive the run, error paths included.
        manager.shutdown()
    finished_ns = registry.clock.now_ns()
    trace_path = run_dir / "trace.jsonl"
    registry.export_trace(trace_path)

    placements = []
    for pilot in manager.pilots():
        snap = registry.history(pilot.uid)
        submitted_ts = active_ts = None
        for rec in snap.records:
            if rec.state == "SUBMITTED":
                submitted_ts = rec.ts_ns
            elif rec.state == "ACTIVE":
                active_ts = rec.ts_ns
        wait = None
        if submitted_ts is not None and active_ts is not None:
            wait = (active_ts - submitted_ts) / 1e9
        placements.append(PilotPlacement(
            pilot_uid=pilot.uid, resource_id=pilot.resource_id,
            cores=pilot.description.cores, gpus=pilot.description.gpus,
            walltime_s=pilot.description.walltime_s,
            state=registry.current_state(pilot.uid), queue_wait_s=wait))

    report = RunReport(
        workflow_uid=workflow.uid,
        virtual=isinstance(registry.clock, VirtualClock),
        task_states={uid: registry.current_state(uid) for uid in current.task_uids()},
        wall_time_s=(finished_ns - started_ns) / 1e9,
        workload_count=workload_count,
        pilots=placements,
        trace_path=str(trace_path),
        run_dir=str(run_dir),
    )
    report.save(run_dir / "report.json")
    return report


# -- file format -----------------------------------------------------------------


def workflow_to_dict(workflow: Workflow) -> dict:
    return {"workflow": {
        "uid": workflow.uid,
        "pipelines": [{
            "uid": p.uid,
            "stages": [{
                "uid": s.uid,
                "tasks": [t.to_dict() for t in s.tasks],
            } for s in p.stages],
        } for p in workflow.pipelines],
    }}


def save_workflow(path, workflow: Workflow) -> None:
    Path(path).write_text(yaml.safe_dump(workflow_to_dict(workflow), sort_keys=False),
                          encoding="utf-8")


def load_workflow(path) -> Workflow:
    """Read a workflow description file (YAML; JSON parses as YAML)."""
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    try:
        body = data["workflow"]
        pipelines = []
        for prow in body["pipelines"]:
            stages = []
            for srow in prow["stages"]:
                tasks = tuple(TaskDescription.from_dict(trow) for trow in srow["tasks"])
                stages.append(Stage(uid=str(srow["uid"]), tasks=tasks))
            pipelines.append(Pipeline(uid=str(prow["uid"]), stages=tuple(stages)))
        return Workflow(uid=str(body["uid"]), pipelines=tuple(pipelines))
    except (KeyError, TypeError, ValueError) as exc:
        raise WorkflowError(f"{path}: malformed workflow file: {exc}") from exc
