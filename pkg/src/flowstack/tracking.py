"""Ordered entity lifecycles: state models, events, errors and trace files.

Every block in this package coordinates through the same discipline: an
entity is registered under a *kind*, advances through the kind's ordered
state list (with optional shortcut jumps into final states), records
free-form events that are bracketed by the surrounding state changes, and
attaches error records to whatever state/event context was current at the
time. The :class:`EntityRegistry` serializes all writes, hands out strictly
increasing per-entity timestamps from a monotonic (or virtual) clock, and
exports newline-delimited trace records that can be re-read and re-validated
offline.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Protocol

# State names shared by the standard models.
NEW = "NEW"
BOUND = "BOUND"
SCHEDULED = "SCHEDULED"
EXECUTING = "EXECUTING"
SUBMITTED = "SUBMITTED"
ACTIVE = "ACTIVE"
PENDING = "PENDING"
RUNNING = "RUNNING"
DONE = "DONE"
FAILED = "FAILED"
CANCELED = "CANCELED"

TASK_KIND = "task"
PILOT_KIND = "pilot"
JOB_KIND = "job"

TASK_STATES = (NEW, BOUND, SCHEDULED, EXECUTING, DONE, FAILED, CANCELED)
PILOT_STATES = (NEW, SUBMITTED, ACTIVE, DONE, FAILED, CANCELED)
JOB_STATES = (NEW, PENDING, RUNNING, DONE, FAILED, CANCELED)
FINAL_STATES = frozenset((DONE, FAILED, CANCELED))

MAX_UID_LEN = 256


class TrackingError(Exception):
    """Base class for registry failures."""


class DuplicateKind(TrackingError):
    pass


class EmptyStates(TrackingError):
    pass


class FinalNotInStates(TrackingError):
    pass


class InvalidJump(TrackingError):
    pass


class UnknownKind(TrackingError):
    pass


class UnknownEntity(TrackingError):
    pass


class DuplicateEntity(TrackingError):
    pass


class InvalidUid(TrackingError):
    pass


class OrderViolation(TrackingError):
    pass


class FinalStateFrozen(TrackingError):
    pass


class EventAfterFinal(TrackingError):
    pass


class Clock(Protocol):
    def now_ns(self) -> int: ...


class MonotonicClock:
    """Wall-clock independent time source: nanoseconds since construction."""

    def __init__(self) -> None:
        self._epoch = time.monotonic_ns()

    def now_ns(self) -> int:
        return time.monotonic_ns() - self._epoch


class VirtualClock:
    """Simulated time in seconds, advanced explicitly by a single owner."""

    def __init__(self, start_s: float = 0.0) -> None:
        self._now_s = float(start_s)

    @property
    def now_s(self) -> float:
        return self._now_s

    def now_ns(self) -> int:
        return int(round(self._now_s * 1e9))

    def advance_to_s(self, t: float) -> None:
        if t < self._now_s - 1e-9:
            raise ValueError(f"virtual clock cannot go backwards: {t} < {self._now_s}")
        self._now_s = max(self._now_s, float(t))


def uid_error(uid: str) -> Optional[str]:
    """Return a human-readable reason the uid is unusable, or None.

    Uids become file names (``<uid>.task.json``) and sandbox directory
    names, hence the path-separator restriction.
    """
    if not isinstance(uid, str) or not uid:
        return "uid must be a nonempty string"
    if len(uid) > MAX_UID_LEN:
        return f"uid longer than {MAX_UID_LEN} characters"
    if "/" in uid or "\\" in uid or "\x00" in uid:
        return "uid must not contain path separators or NUL"
    return None


@dataclass(frozen=True)
class StateModel:
    """Ordered state list for one entity kind.

    Non-final states are totally ordered by list position; final states
    terminate the order. ``jumps`` enumerates the allowed shortcuts from a
    non-final state directly into a final state (by default: all of them).
    """

    kind: str
    states: tuple[str, ...]
    finals: frozenset[str]
    jumps: frozenset[tuple[str, str]]

    @property
    def initial(self) -> str:
        return self.states[0]

    def is_final(self, state: str) -> bool:
        return state in self.finals

    def index(self, state: str) -> int:
        return self.states.index(state)

    def successor(self, state: str) -> Optional[str]:
        """Next state in list order, or None for the last state."""
        i = self.states.index(state)
        if i + 1 < len(self.states):
            return self.states[i + 1]
        return None

    def legal_target(self, current: str, target: str) -> bool:
        if self.is_final(current):
            return False
        if target == self.successor(current):
            return True
        return target in self.finals and (current, target) in self.jumps


def _build_model(kind: str, states: Iterable[str], finals: Iterable[str],
                 jumps: Optional[Iterable[tuple[str, str]]] = None) -> StateModel:
    states = tuple(states)
    finals = frozenset(finals)
    if not states:
        raise EmptyStates(f"model {kind!r} has no states")
    if len(set(states)) != len(states):
        raise TrackingError(f"model {kind!r} has duplicate states")
    if not finals <= set(states):
        raise FinalNotInStates(f"model {kind!r}: finals {sorted(finals - set(states))} not in states")
    nonfinal = [s for s in states if s not in finals]
    if jumps is None:
        jumps = frozenset((s, f) for s in nonfinal for f in finals)
    else:
        jumps = frozenset(tuple(j) for j in jumps)
        for src, dst in jumps:
            if src not in states or dst not in finals or src in finals:
                raise InvalidJump(f"model {kind!r}: illegal jump {src}->{dst}")
    return StateModel(kind=kind, states=states, finals=finals, jumps=jumps)


@dataclass(frozen=True)
class StateRecord:
    uid: str
    state: str
    ts_ns: int


@dataclass
class Event:
    uid: str
    name: str
    ts_ns: int
    state_before: str
    prev_index: int
    next_index: Optional[int] = None

    @property
    def pending(self) -> bool:
        return self.next_index is None


@dataclass(frozen=True)
class ErrorRecord:
    uid: str
    state: str
    event: Optional[str]
    code: str
    message: str
    ts_ns: int


@dataclass(frozen=True)
class Violation:
    """A trace defect found by validation. Violations are data, not errors."""

    kind: str
    uid: str
    detail: str


@dataclass
class EntityHistory:
    uid: str
    kind: str
    records: tuple[StateRecord, ...]
    events: tuple[Event, ...]
    errors: tuple[ErrorRecord, ...]

    @property
    def current_state(self) -> str:
        return self.records[-1].state


class _History:
    __slots__ = ("uid", "kind", "records", "events", "errors", "last_ts")

    def __init__(self, uid: str, kind: str) -> None:
        self.uid = uid
        self.kind = kind
        self.records: list[StateRecord] = []
        self.events: list[Event] = []
        self.errors: list[ErrorRecord] = []
        self.last_ts = -1


class EntityRegistry:
    """Single serialized owner of all entity histories.

    Writers are serialized by one lock; appends to a single entity are
    therefore totally ordered, and per-entity timestamps strictly increase
    even when the underlying clock is coarse (same-tick appends get bumped
    by one nanosecond).
    """

    def __init__(self, clock: Optional[Clock] = None) -> None:
        self._clock: Clock = clock if clock is not None else MonotonicClock()
        self.epoch_wall_s = time.time()
        self._models: dict[str, StateModel] = {}
        self._hist: dict[str, _History] = {}
        self._order: list[str] = []
        self._counters: dict[str, int] = {}
        self._lock = threading.RLock()

    @property
    def clock(self) -> Clock:
        return self._clock

    # -- models -----------------------------------------------------------

    def register_model(self, kind: str, states: Iterable[str], finals: Iterable[str],
                       jumps: Optional[Iterable[tuple[str, str]]] = None) -> StateModel:
        with self._lock:
            if kind in self._models:
                raise DuplicateKind(f"model {kind!r} already registered")
            model = _build_model(kind, states, finals, jumps)
            self._models[kind] = model
            return model

    def model(self, kind: str) -> StateModel:
        try:
            return self._models[kind]
        except KeyError:
            raise UnknownKind(f"no model for kind {kind!r}") from None

    def kinds(self) -> tuple[str, ...]:
        return tuple(self._models)

    # -- entities ---------------------------------------------------------

    def register(self, uid: str, kind: str) -> StateRecord:
        reason = uid_error(uid)
        if reason:
            raise InvalidUid(f"{uid!r}: {reason}")
        with self._lock:
            model = self.model(kind)
            if uid in self._hist:
                raise DuplicateEntity(f"entity {uid!r} already registered")
            hist = _History(uid, kind)
            rec = StateRecord(uid, model.initial, self._stamp(hist))
            hist.records.append(rec)
            self._hist[uid] = hist
            self._order.append(uid)
            return rec

    def exists(self, uid: str) -> bool:
        return uid in self._hist

    def advance(self, uid: str, target: str) -> StateRecord:
        with self._lock:
            hist = self._get(uid)
            model = self._models[hist.kind]
            current = hist.records[-1].state
            if model.is_final(current):
                raise FinalStateFrozen(f"{uid}: {current} is final")
            if target not in model.states:
                raise OrderViolation(f"{uid}: unknown state {target!r} for kind {hist.kind!r}")
            if not model.legal_target(current, target):
                succ = model.successor(current)
                if (not model.is_final(target)
                        and model.index(target) > model.index(current) + 1):
                    skipped = model.states[model.index(current) + 1:model.index(target)]
                    raise OrderViolation(
                        f"{uid}: {current} -> {target} skips {','.join(skipped)}")
                raise OrderViolation(f"{uid}: illegal transition {current} -> {target}")
            rec = StateRecord(uid, target, self._stamp(hist))
            hist.records.append(rec)
            closing = len(hist.records) - 1
            for ev in hist.events:
                if ev.next_index is None:
                    ev.next_index = closing
            return rec

    def record_event(self, uid: str, name: str) -> Event:
        with self._lock:
            hist = self._get(uid)
            model = self._models[hist.kind]
            current = hist.records[-1].state
            if model.is_final(current):
                raise EventAfterFinal(f"{uid}: cannot record {name!r} in final state {current}")
            ev = Event(uid, name, self._stamp(hist), current, len(hist.records) - 1)
            hist.events.append(ev)
            return ev

    def record_error(self, uid: str, code: str, message: str) -> ErrorRecord:
        with self._lock:
            hist = self._get(uid)
            current = hist.records[-1].state
            pending = [e for e in hist.events if e.next_index is None]
            err = ErrorRecord(uid, current, pending[-1].name if pending else None,
                              code, message, self._stamp(hist))
            hist.errors.append(err)
            return err

    def current_state(self, uid: str) -> str:
        with self._lock:
            return self._get(uid).records[-1].state

    def is_final(self, uid: str) -> bool:
        with self._lock:
            hist = self._get(uid)
            return self._models[hist.kind].is_final(hist.records[-1].state)

    def uids(self, kind: Optional[str] = None) -> list[str]:
        with self._lock:
            if kind is None:
                return list(self._order)
            return [u for u in self._order if self._hist[u].kind == kind]

    def history(self, uid: str) -> EntityHistory:
        with self._lock:
            hist = self._get(uid)
            return EntityHistory(
                uid=hist.uid,
                kind=hist.kind,
                records=tuple(hist.records),
                events=tuple(replace(e) for e in hist.events),
                errors=tuple(hist.errors),
            )

    def new_uid(self, prefix: str) -> str:
        """Deterministic uid factory: ``<prefix>.000001`` and counting."""
        with self._lock:
            n = self._counters.get(prefix, 0) + 1
            self._counters[prefix] = n
            return f"{prefix}.{n:06d}"

    # -- validation and export ---------------------------------------------

    def validate_entity(self, uid: str) -> list[Violation]:
        snap = self.history(uid)
        return validate_history(self._models[snap.kind], snap)

    def validate_all(self) -> list[Violation]:
        out: list[Violation] = []
        for uid in self.uids():
            out.extend(self.validate_entity(uid))
        return out

    def export_trace(self, path) -> int:
        """Write newline-delimited trace records; returns the line count.

        Line schema (canonical key order): uid, kind, type, name, ts_ns.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        count = 0
        with self._lock:
            snapshots = [self.history(uid) for uid in self._order]
        with open(path, "w", encoding="utf-8") as fh:
            for snap in snapshots:
                entries: list[tuple[int, int, dict]] = []
                for r in snap.records:
                    entries.append((r.ts_ns, 0, {"uid": snap.uid, "kind": snap.kind,
                                                 "type": "state", "name": r.state,
                                                 "ts_ns": r.ts_ns}))
                for e in snap.events:
                    entries.append((e.ts_ns, 1, {"uid": snap.uid, "kind": snap.kind,
                                                 "type": "event", "name": e.name,
                                                 "ts_ns": e.ts_ns}))
                for er in snap.errors:
                    entries.append((er.ts_ns, 2, {"uid": snap.uid, "kind": snap.kind,
                                                  "type": "error", "name": er.code,
                                                  "ts_ns": er.ts_ns}))
                entries.sort(key=lambda item: (item[0], item[1]))
                for _, _, obj in entries:
                    fh.write(json.dumps(obj, ensure_ascii=False) + "\n")
                    count += 1
        return count

    # -- internals ----------------------------------------------------------

    def _get(self, uid: str) -> _History:
        try:
            return self._hist[uid]
        except KeyError:
            raise UnknownEntity(f"unknown entity {uid!r}") from None

    def _stamp(self, hist: _History) -> int:
        ts = self._clock.now_ns()
        if ts <= hist.last_ts:
            ts = hist.last_ts + 1
        hist.last_ts = ts
        return ts


def validate_history(model: Optional[StateModel], snap: EntityHistory) -> list[Violation]:
    """Full validation of one in-memory history against its model.

    Empty result iff the state sequence is a prefix of the model order
    (possibly ending in one legal jump into a final state), timestamps
    strictly increase, every event sits inside its bracket, and every error
    references a recorded state and a known event.
    """
    out: list[Violation] = []
    uid = snap.uid
    records = snap.records

    prev_ts: Optional[int] = None
    for rec in records:
        if prev_ts is not None and rec.ts_ns <= prev_ts:
            out.append(Violation("NonMonotonicTimestamp", uid,
                                 f"{rec.state} at {rec.ts_ns} after {prev_ts}"))
        prev_ts = rec.ts_ns

    if model is not None and records:
        if records[0].state not in model.states:
            out.append(Violation("UnknownState", uid, records[0].state))
        elif records[0].state != model.initial:
            out.append(Violation("OrderViolation", uid,
                                 f"history starts at {records[0].state}, not {model.initial}"))
        for i in range(1, len(records)):
            a, b = records[i - 1].state, records[i].state
            if b not in model.states:
                out.append(Violation("UnknownState", uid, b))
                continue
            if a not in model.states:
                continue
            if model.is_final(a):
                out.append(Violation("OrderViolation", uid, f"transition out of final {a}"))
                continue
            if model.legal_target(a, b):
                continue
            if not model.is_final(b) and model.index(b) > model.index(a) + 1:
                skipped = model.states[model.index(a) + 1:model.index(b)]
                out.append(Violation("SkippedState", uid, ",".join(skipped)))
            else:
                out.append(Violation("OrderViolation", uid, f"{a} -> {b}"))

    for ev in snap.events:
        if ev.prev_index >= len(records):
            out.append(Violation("EventOutsideBracket", uid, f"{ev.name}: dangling bracket"))
            continue
        if ev.ts_ns < records[ev.prev_index].ts_ns:
            out.append(Violation("EventOutsideBracket", uid,
                                 f"{ev.name} precedes state {records[ev.prev_index].state}"))
        if ev.next_index is not None:
            if ev.next_index >= len(records):
                out.append(Violation("EventOutsideBracket", uid, f"{ev.name}: dangling bracket"))
            elif ev.ts_ns > records[ev.next_index].ts_ns:
                out.append(Violation("EventOutsideBracket", uid,
                                     f"{ev.name} follows state {records[ev.next_index].state}"))

    recorded_states = {r.state for r in records}
    event_names = {e.name for e in snap.events}
    for err in snap.errors:
        if err.state not in recorded_states:
            out.append(Violation("ErrorStateMissing", uid, f"{err.code}: state {err.state}"))
        if err.event is not None and err.event not in event_names:
            out.append(Violation("ErrorEventMissing", uid, f"{err.code}: event {err.event}"))
    return out


# -- standard models ---------------------------------------------------------

def register_standard_models(registry: EntityRegistry) -> None:
    registry.register_model(TASK_KIND, TASK_STATES, FINAL_STATES)
    registry.register_model(PILOT_KIND, PILOT_STATES, FINAL_STATES)
    registry.register_model(JOB_KIND, JOB_STATES, FINAL_STATES)


def standard_registry(clock: Optional[Clock] = None) -> EntityRegistry:
    """Registry preloaded with the task, pilot and job models."""
    registry = EntityRegistry(clock)
    register_standard_models(registry)
    return registry


def standard_models() -> dict[str, StateModel]:
    return {
        TASK_KIND: _build_model(TASK_KIND, TASK_STATES, FINAL_STATES),
        PILOT_KIND: _build_model(PILOT_KIND, PILOT_STATES, FINAL_STATES),
        JOB_KIND: _build_model(JOB_KIND, JOB_STATES, FINAL_STATES),
    }


# -- trace files --------------------------------------------------------------

TRACE_FIELDS = ("uid", "kind", "type", "name", "ts_ns")


@dataclass
class TraceEntity:
    """One entity's records as read back from a trace file (file order kept)."""

    uid: str
    kind: str
    states: list[tuple[str, int]] = field(default_factory=list)
    events: list[tuple[str, int]] = field(default_factory=list)
    errors: list[tuple[str, int]] = field(default_factory=list)


def read_trace(path) -> dict[str, TraceEntity]:
    """Parse a trace file into per-entity records, preserving file order."""
    entities: dict[str, TraceEntity] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: not valid JSON: {exc}") from None
            missing = [k for k in TRACE_FIELDS if k not in obj]
            if missing:
                raise ValueError(f"{path}:{lineno}: missing fields {missing}")
            ent = entities.setdefault(obj["uid"], TraceEntity(obj["uid"], obj["kind"]))
            row = (obj["name"], int(obj["ts_ns"]))
            if obj["type"] == "state":
                ent.states.append(row)
            elif obj["type"] == "event":
                ent.events.append(row)
            elif obj["type"] == "error":
                ent.errors.append(row)
            else:
                raise ValueError(f"{path}:{lineno}: unknown record type {obj['type']!r}")
    return entities


def validate_trace_entity(models: dict[str, StateModel], ent: TraceEntity) -> list[Violation]:
    """File-level validation: state order, timestamp monotonicity, event placement.

    Brackets cannot be fully reconstructed from a flat file, so events are
    only checked against the first and the final state record.
    """
    out: list[Violation] = []
    model = models.get(ent.kind)
    prev_ts: Optional[int] = None
    for name, ts in ent.states:
        if prev_ts is not None and ts <= prev_ts:
            out.append(Violation("NonMonotonicTimestamp", ent.uid, f"{name} at {ts}"))
        prev_ts = ts
    if model is not None and ent.states:
        if ent.states[0][0] not in model.states:
            out.append(Violation("UnknownState", ent.uid, ent.states[0][0]))
        elif ent.states[0][0] != model.initial:
            out.append(Violation("OrderViolation", ent.uid,
                                 f"history starts at {ent.states[0][0]}"))
        for i in range(1, len(ent.states)):
            a, b = ent.states[i - 1][0], ent.states[i][0]
            if b not in model.states:
                out.append(Violation("UnknownState", ent.uid, b))
                continue
            if a not in model.states:
                continue
            if model.is_final(a):
                out.append(Violation("OrderViolation", ent.uid, f"transition out of final {a}"))
                continue
            if model.legal_target(a, b):
                continue
            if not model.is_final(b) and model.index(b) > model.index(a) + 1:
                skipped = model.states[model.index(a) + 1:model.index(b)]
                out.append(Violation("SkippedState", ent.uid, ",".join(skipped)))
            else:
                out.append(Violation("OrderViolation", ent.uid, f"{a} -> {b}"))
        if ent.states:
            first_ts = ent.states[0][1]
            last_name, last_ts = ent.states[-1]
            final = model.is_final(last_name)
            for name, ts in ent.events:
                if ts < first_ts:
                    out.append(Violation("EventOutsideBracket", ent.uid, name))
                elif final and ts > last_ts:
                    out.append(Violation("EventOutsideBracket", ent.uid,
                                         f"{name} after final {last_name}"))
    return out
