"""Integration bridge: filesystem task exchange and a REST resource-queue.

Two protocols let foreign systems drive the runtime without sharing code:

* File exchange: one ``<uid>.task.json`` per task, canonical JSON (sorted
  keys, compact separators, UTF-8, newline-terminated), written atomically.
  Import tolerates malformed files by reporting them as rejects.
* REST service: pilots presented as one aggregated resource queue. Clients
  POST workloads and poll; there are no push callbacks.

Endpoints: GET /pilots, POST /workloads, GET /workloads/{uid},
GET /tasks/{uid}, DELETE /workloads/{uid}.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional

from . import checks
from .pilot import AlreadyFinal, Pilot, PilotRuntime
from .tracking import (ACTIVE, BOUND, CANCELED, FINAL_STATES, NEW, TASK_KIND,
                       EntityRegistry)
from .workflow import TaskDescription

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
TASK_SUFFIX = ".task.json"


class BridgeError(Exception):
    pass


class IoFailure(BridgeError):
    pass


class DuplicateFile(BridgeError):
    pass


class BindFailure(BridgeError):
    pass


def canonical_bytes(obj) -> bytes:
    """The pinned wire/file form: sorted keys, compact, UTF-8, one newline."""
    return (json.dumps(obj, sort_keys=True, separators=(",", ":"),
                       ensure_ascii=False) + "\n").encode("utf-8")


def task_record(task: TaskDescription) -> dict:
    return task.to_dict() | {"schema_version": SCHEMA_VERSION}


def task_from_record(data: dict) -> TaskDescription:
    if not isinstance(data, dict):
        raise ValueError("task record must be an object")
    version = data.get("schema_version")
    if version is None:
        raise ValueError("schema_version field required")
    if int(version) != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {version}")
    body = {k: v for k, v in data.items() if k != "schema_version"}
    return TaskDescription.from_dict(body)


def export_tasks(directory, tasks) -> int:
    """Write one canonical file per task; atomic via write-temp-then-rename."""
    directory = Path(directory)
    tasks = list(tasks)
    names = [t.uid for t in tasks]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise DuplicateFile(f"duplicate task uids in export batch: {dupes}")
    count = 0
    for task in tasks:
        final = directory / f"{task.uid}{TASK_SUFFIX}"
        temp = directory / f".{task.uid}{TASK_SUFFIX}.tmp"
        try:
            temp.write_bytes(canonical_bytes(task_record(task)))
            os.replace(temp, final)
        except OSError as exc:
            raise IoFailure(f"cannot write {final}: {exc}") from exc
        count += 1
    return count


@dataclass(frozen=True)
class Reject:
    filename: str
    reason: str


def import_tasks(directory) -> tuple[list[TaskDescription], list[Reject]]:
    """Load every ``*.task.json``; malformed files become rejects, not errors."""
    directory = Path(directory)
    try:
        names = sorted(p.name for p in directory.iterdir()
                       if p.name.endswith(TASK_SUFFIX) and not p.name.startswith("."))
    except OSError as exc:
        raise IoFailure(f"cannot read {directory}: {exc}") from exc
    tasks: list[TaskDescription] = []
    rejects: list[Reject] = []
    for name in names:
        path = directory / name
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
            tasks.append(task_from_record(data))
        except (OSError, ValueError) as exc:
            rejects.append(Reject(name, str(exc)))
    return tasks, rejects


# -- capacity --------------------------------------------------------------------


@dataclass(frozen=True)
class CapacitySummary:
    total_cores: int
    free_cores: int
    total_gpus: int
    free_gpus: int
    earliest_expiry_ns: Optional[int]
    pilots: tuple

    def to_dict(self) -> dict:
        return {
            "total_cores": self.total_cores,
            "free_cores": self.free_cores,
            "total_gpus": self.total_gpus,
            "free_gpus": self.free_gpus,
            "earliest_expiry_ns": self.earliest_expiry_ns,
            "pilots": list(self.pilots),
        }


def aggregate_capacity(pilots, registry: EntityRegistry) -> CapacitySummary:
    """Sum slot capacity over ACTIVE pilots only."""
    total_cores = free_cores = total_gpus = free_gpus = 0
    expiry: Optional[int] = None
    rows = []
    for pilot in pilots:
        state = registry.current_state(pilot.uid)
        row = {"uid": pilot.uid, "resource_id": pilot.resource_id,
               "state": state, "cores": pilot.description.cores,
               "gpus": pilot.description.gpus}
        if state == ACTIVE and pilot.slots is not None:
            census = pilot.slots.census()
            total_cores += census["total_cores"]
            free_cores += census["free_cores"]
            total_gpus += census["total_gpus"]
            free_gpus += census["free_gpus"]
            row |= {"free_cores": census["free_cores"],
                    "free_gpus": census["free_gpus"],
                    "expires_at_ns": pilot.expires_at_ns}
            if pilot.expires_at_ns is not None:
                expiry = pilot.expires_at_ns if expiry is None \
                    else min(expiry, pilot.expires_at_ns)
        rows.append(row)
    return CapacitySummary(total_cores, free_cores, total_gpus, free_gpus,
                           expiry, tuple(rows))


# -- service ---------------------------------------------------------------------


@dataclass
class Submission:
    uid: str
    task_uids: list
    tasks: dict
    canceled: bool = False
    unit_refs: dict = None  # task uid -> (pilot uid, unit uid)

    def __post_init__(self) -> None:
        if self.unit_refs is None:
            self.unit_refs = {}


class BridgeService:
    """Pilot pool exposed as a pull-only HTTP resource queue.

    HTTP handler threads only mutate the submission store and read state;
    the pump loop (single owner, typically the main thread) binds submitted
    tasks to active pilots and drives execution. Both sides serialize on
    ``self.lock``.
    """

    def __init__(self, runtime: PilotRuntime, pilots, host: str = "127.0.0.1",
                 port: int = 0) -> None:
        self.runtime = runtime
        self.registry: EntityRegistry = runtime.registry
        self.pilots: list[Pilot] = list(pilots)
        self.host = host
        self.port = port
        self.lock = threading.RLock()
        self.submissions: dict[str, Submission] = {}
        self._server: Optional[ThreadingHTTPServer] = None
        self._thread: Optional[threading.Thread] = None
        self._stop = threading.Event()

    # -- lifecycle ------------------------------------------------------------

    def start(self) -> None:
        service = self

        class Handler(_BridgeHandler):
            bridge = service

        try:
            self._server = ThreadingHTTPServer((self.host, self.port), Handler)
        except OSError as exc:
            raise BindFailure(f"cannot bind {self.host}:{self.port}: {exc}") from exc
        self.port = self._server.server_address[1]
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        name="bridge-http", daemon=True)
        self._thread.start()
        log.info("bridge listening on %s:%d", self.host, self.port)

    def stop(self) -> None:
        self._stop.set()
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    @property
    def address(self) -> str:
        return f"http://{self.host}:{self.port}"

    def run_forever(self, poll_s: float = 0.002) -> None:
        while not self._stop.is_set():
            with self.lock:
                self.pump_once()
            time.sleep(poll_s)

    # -- pump (call with self.lock held or via run_forever) ---------------------

    def pump_once(self) -> bool:
        progressed = self.runtime.pump()
        for submission in self.submissions.values():
            if submission.canceled:
                continue
            progressed |= self._dispatch(submission)
        return progressed

    def _dispatch(self, submission: Submission) -> bool:
        from .workload import choose_pilot

        moved = False
        states = {p.uid: self.registry.current_state(p.uid) for p in self.pilots}
        if ACTIVE not in states.values():
            return False
        by_pilot: dict[str, list] = {}
        for uid in submission.task_uids:
            if self.registry.current_state(uid) != NEW:
                continue
            task = submission.tasks[uid]
            pilot = choose_pilot(self.pilots, states, task,
                                 self.registry.clock.now_ns())
            if pilot is None:
                continue
            self.registry.advance(uid, BOUND)
            self.registry.record_event(uid, checks.bind_event(pilot.uid))
            by_pilot.setdefault(pilot.uid, []).append(task)
            moved = True
        for pilot_uid, tasks in by_pilot.items():
            pilot = next(p for p in self.pilots if p.uid == pilot_uid)
            unit_uids = self.runtime.submit_units(pilot, tasks)
            for task, unit_uid in zip(tasks, unit_uids):
                submission.unit_refs[task.uid] = (pilot_uid, unit_uid)
        return moved

    # -- store operations (handler side, all take the lock) ----------------------

    def capacity(self) -> CapacitySummary:
        return aggregate_capacity(self.pilots, self.registry)

    def submit_workload(self, body: dict) -> tuple[Optional[str], list[dict]]:
        """Validate and store one submission; all-or-nothing."""
        rejects: list[dict] = []
        if not isinstance(body, dict):
            return None, [{"reason": "body must be an object"}]
        if body.get("callback_mode", "poll") != "poll":
            return None, [{"reason": "only callback_mode 'poll' is supported"}]
        rows = body.get("tasks")
        if not isinstance(rows, list) or not rows:
            return None, [{"reason": "tasks must be a nonempty list"}]
        tasks: list[TaskDescription] = []
        for index, row in enumerate(rows):
            try:
                task = task_from_record(row)
            except (ValueError, TypeError) as exc:
                rejects.append({"index": index, "reason": str(exc)})
                continue
            if self.registry.exists(task.uid):
                rejects.append({"index": index, "uid": task.uid,
                                "reason": "task uid already known"})
                continue
            if not any(p.description.cores >= task.cpu_count
                       and p.description.gpus >= task.gpu_count
                       for p in self.pilots):
                rejects.append({"index": index, "uid": task.uid,
                                "reason": "no configured pilot can fit this task"})
                continue
            tasks.append(task)
        uids = [t.uid for t in tasks]
        if len(set(uids)) != len(uids):
            rejects.append({"reason": "duplicate task uids in submission"})
        if rejects:
            return None, rejects
        uid = body.get("uid") or self.registry.new_uid("submission")
        if uid in self.submissions:
            return None, [{"reason": f"submission {uid} already exists"}]
        for task in tasks:
            self.registry.register(task.uid, TASK_KIND)
        self.submissions[uid] = Submission(uid=uid, task_uids=uids,
                                           tasks={t.uid: t for t in tasks})
        return uid, []

    def workload_status(self, uid: str) -> Optional[dict]:
        submission = self.submissions.get(uid)
        if submission is None:
            return None
        states = {t: self.registry.current_state(t) for t in submission.task_uids}
        return {"uid": uid,
                "tasks": states,
                "done": all(s in FINAL_STATES for s in states.values())}

    def task_history(self, uid: str) -> Optional[dict]:
        if not self.registry.exists(uid):
            return None
        snap = self.registry.history(uid)
        return {
            "uid": snap.uid,
            "kind": snap.kind,
            "state": snap.current_state,
            "records": [{"state": r.state, "ts_ns": r.ts_ns} for r in snap.records],
            "events": [{"name": e.name, "ts_ns": e.ts_ns} for e in snap.events],
            "errors": [{"code": e.code, "message": e.message, "state": e.state,
                        "event": e.event, "ts_ns": e.ts_ns} for e in snap.errors],
        }

    def cancel_workload(self, uid: str) -> Optional[int]:
        submission = self.submissions.get(uid)
        if submission is None:
            return None
        submission.canceled = True
        count = 0
        for task_uid in submission.task_uids:
            if self.registry.is_final(task_uid):
                continue
            ref = submission.unit_refs.get(task_uid)
            try:
                if ref is not None:
                    pilot = next(p for p in self.pilots if p.uid == ref[0])
                    self.runtime.cancel_unit(pilot, ref[1])
                else:
                    self.registry.advance(task_uid, CANCELED)
                count += 1
            except AlreadyFinal:
                pass
        return count


class _BridgeHandler(BaseHTTPRequestHandler):
    bridge: BridgeService = None  # bound by BridgeService.start
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # route through logging, not stderr
        log.debug("http %s", fmt % args)

    def _send(self, code: int, obj) -> None:
        payload = canonical_bytes(obj)
        self.send_response(code)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def _body(self):
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length) if length else b""
        try:
            return json.loads(raw.decode("utf-8")) if raw else None
        except (ValueError, UnicodeDecodeError):
            return ValueError("body is not valid JSON")

    def do_GET(self) -> None:
        bridge = self.bridge
        parts = [p for p in self.path.split("?")[0].split("/") if p]
        with bridge.lock:
            if parts == ["pilots"]:
                self._send(200, bridge.capacity().to_dict())
            elif len(parts) == 2 and parts[0] == "workloads":
                status = bridge.workload_status(parts[1])
                self._send(200, status) if status is not None else \
                    self._send(404, {"error": f"unknown workload {parts[1]}"})
            elif len(parts) == 2 and parts[0] == "tasks":
                hist = bridge.task_history(parts[1])
                self._send(200, hist) if hist is not None else \
                    self._send(404, {"error": f"unknown task {parts[1]}"})
            else:
                self._send(404, {"error": f"no route {self.path}"})

    def do_POST(self) -> None:
        bridge = self.bridge
        parts = [p for p in self.path.split("?")[0].split("/") if p]
        if parts != ["workloads"]:
            self._send(404, {"error": f"no route {self.path}"})
            return
        body = self._body()
        if isinstance(body, ValueError):
            self._send(400, {"rejects": [{"reason": str(body)}]})
            return
        with bridge.lock:
            uid, rejects = bridge.submit_workload(body)
        if uid is None:
            self._send(400, {"rejects": rejects})
        else:
            self._send(201, {"uid": uid})

    def do_DELETE(self) -> None:
        bridge = self.bridge
        parts = [p for p in self.path.split("?")[0].split("/") if p]
        if len(parts) == 2 and parts[0] == "workloads":
            with bridge.lock:
                count = bridge.cancel_workload(parts[1])
            self._send(200, {"canceled": count}) if count is not None else \
                self._send(404, {"error": f"unknown workload {parts[1]}"})
        else:
            self._send(404, {"error": f"no route {self.path}"})
