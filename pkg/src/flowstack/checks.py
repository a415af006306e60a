"""Structured trace events and cross-entity trace checks.

Traces carry only {uid, kind, type, name, ts_ns}, so the relationships the
checks need (task -> pilot, slot sizes, pipeline membership) are encoded in
event names as ``verb key=value ...`` strings. The emitters below and the
checks that parse them are the two halves of that convention.

Available checks: ``states`` (per-entity model validation), ``stage-barrier``,
``no-oversubscription``, ``late-binding``, ``walltime``.
"""

from __future__ import annotations

from typing import Optional

from .tracking import (ACTIVE, EXECUTING, FINAL_STATES, StateModel, TraceEntity,
                       Violation, standard_models, validate_trace_entity)

CHECK_NAMES = ("states", "stage-barrier", "no-oversubscription", "late-binding", "walltime")

# Final records land a beat after the kill on the real backend; virtual runs
# are exact. The walltime check allows this much slack.
WALLTIME_GRACE_NS = 2_000_000_000


def member_event(pipeline_uid: str, stage_index: int) -> str:
    return f"member pipeline={pipeline_uid} stage={stage_index}"


def bind_event(pilot_uid: str) -> str:
    return f"bind pilot={pilot_uid}"


def alloc_event(cpu: int, gpu: int) -> str:
    return f"alloc cpu={cpu} gpu={gpu}"


def size_event(cores: int, gpus: int, walltime_s: float, resource_id: str) -> str:
    return f"size cores={cores} gpus={gpus} walltime={walltime_s} resource={resource_id}"


def parse_kv(name: str) -> Optional[tuple[str, dict[str, str]]]:
    """Parse ``verb key=value ...``; None when the name is not in that shape."""
    parts = name.split()
    if not parts or any("=" not in p for p in parts[1:]):
        return None
    kv = {}
    for part in parts[1:]:
        key, _, value = part.partition("=")
        kv[key] = value
    return parts[0], kv


def _tagged(ent: TraceEntity, verb: str) -> Optional[dict[str, str]]:
    for name, _ in ent.events:
        parsed = parse_kv(name)
        if parsed and parsed[0] == verb:
            return parsed[1]
    return None


def _state_ts(ent: TraceEntity, state: str) -> Optional[int]:
    for name, ts in ent.states:
        if name == state:
            return ts
    return None


def _final_ts(ent: TraceEntity) -> Optional[int]:
    for name, ts in ent.states:
        if name in FINAL_STATES:
            return ts
    return None


def check_states(entities: dict[str, TraceEntity],
                 models: Optional[dict[str, StateModel]] = None) -> list[Violation]:
    models = models if models is not None else standard_models()
    out: list[Violation] = []
    for ent in entities.values():
        out.extend(validate_trace_entity(models, ent))
    return out


def check_stage_barrier(entities: dict[str, TraceEntity]) -> list[Violation]:
    """No stage s+1 task starts executing before every stage s task is final."""
    pipelines: dict[str, dict[int, list[TraceEntity]]] = {}
    for ent in entities.values():
        if ent.kind != "task":
            continue
        member = _tagged(ent, "member")
        if not member:
            continue
        stage = int(member["stage"])
        pipelines.setdefault(member["pipeline"], {}).setdefault(stage, []).append(ent)

    out: list[Violation] = []
    for pipeline_uid, stages in pipelines.items():
        indexes = sorted(stages)
        for prev, nxt in zip(indexes, indexes[1:]):
            starts = [(_state_ts(e, EXECUTING), e.uid) for e in stages[nxt]]
            starts = [(ts, uid) for ts, uid in starts if ts is not None]
            if not starts:
                continue
            finals = [_final_ts(e) for e in stages[prev]]
            if any(f is None for f in finals):
                out.append(Violation(
                    "StageBarrier", pipeline_uid,
                    f"stage {nxt} started while stage {prev} had unfinished tasks"))
                continue
            barrier = max(finals)
            first, uid = min(starts)
            if first < barrier:
                out.append(Violation(
                    "StageBarrier", uid,
                    f"stage {nxt} start {first} precedes stage {prev} barrier {barrier}"))
    return out


def check_late_binding(entities: dict[str, TraceEntity]) -> tuple[list[Violation], int]:
    """Every BOUND timestamp must be >= its pilot's ACTIVE timestamp."""
    out: list[Violation] = []
    checked = 0
    for ent in entities.values():
        if ent.kind != "task":
            continue
        bind = _tagged(ent, "bind")
        if not bind:
            continue
        bound_ts = _state_ts(ent, "BOUND")
        if bound_ts is None:
            continue
        pilot = entities.get(bind["pilot"])
        if pilot is None:
            out.append(Violation("LateBinding", ent.uid, f"pilot {bind['pilot']} missing"))
            continue
        active_ts = _state_ts(pilot, ACTIVE)
        if active_ts is None:
            out.append(Violation("LateBinding", ent.uid,
                                 f"bound to pilot {pilot.uid} that never went ACTIVE"))
            continue
        checked += 1
        if bound_ts < active_ts:
            out.append(Violation("LateBinding", ent.uid,
                                 f"BOUND {bound_ts} before pilot ACTIVE {active_ts}"))
    return out, checked


def _pilot_units(entities: dict[str, TraceEntity]) -> dict[str, list[tuple[TraceEntity, int, int]]]:
    """Map pilot uid -> [(task, cpu, gpu)] for tasks with bind+alloc events."""
    grouped: dict[str, list[tuple[TraceEntity, int, int]]] = {}
    for ent in entities.values():
        if ent.kind != "task":
            continue
        bind = _tagged(ent, "bind")
        alloc = _tagged(ent, "alloc")
        if not bind or not alloc:
            continue
        grouped.setdefault(bind["pilot"], []).append(
            (ent, int(alloc["cpu"]), int(alloc["gpu"])))
    return grouped


def check_no_oversubscription(entities: dict[str, TraceEntity]) -> list[Violation]:
    """Executing units never hold more cpu/gpu than their pilot owns."""
    out: list[Violation] = []
    for pilot_uid, units in _pilot_units(entities).items():
        pilot = entities.get(pilot_uid)
        size = _tagged(pilot, "size") if pilot else None
        if not size:
            out.append(Violation("Oversubscription", pilot_uid, "pilot size unknown"))
            continue
        for dim, capacity in (("cpu", int(size["cores"])), ("gpu", int(size["gpus"]))):
            boundaries: list[tuple[int, int, int]] = []
            for ent, cpu, gpu in units:
                amount = cpu if dim == "cpu" else gpu
                if amount == 0:
                    continue
                start = _state_ts(ent, EXECUTING)
                if start is None:
                    continue
                end = _final_ts(ent)
                boundaries.append((start, 1, amount))
                if end is not None:
                    boundaries.append((end, 0, amount))
            # Releases sort before acquisitions at equal timestamps, matching
            # how slots are freed before the next scheduling pass.
            boundaries.sort(key=lambda b: (b[0], b[1]))
            load = 0
            for ts, kind, amount in boundaries:
                load += amount if kind == 1 else -amount
                if load > capacity:
                    out.append(Violation(
                        "Oversubscription", pilot_uid,
                        f"{dim} load {load} > {capacity} at {ts}"))
                    break
    return out


def check_walltime(entities: dict[str, TraceEntity],
                   grace_ns: int = WALLTIME_GRACE_NS) -> list[Violation]:
    """No unit's EXECUTING interval extends past its pilot's expiry."""
    out: list[Violation] = []
    for pilot_uid, units in _pilot_units(entities).items():
        pilot = entities.get(pilot_uid)
        size = _tagged(pilot, "size") if pilot else None
        if not pilot or not size:
            continue
        active_ts = _state_ts(pilot, ACTIVE)
        if active_ts is None:
            continue
        expiry = active_ts + int(float(size["walltime"]) * 1e9)
        for ent, _, _ in units:
            end = _final_ts(ent)
            if end is not None and end > expiry + grace_ns:
                out.append(Violation("WalltimeOverrun", ent.uid,
                                     f"final at {end} past pilot expiry {expiry}"))
    return out


def run_checks(entities: dict[str, TraceEntity], names=CHECK_NAMES,
               models: Optional[dict[str, StateModel]] = None) -> list[Violation]:
    out: list[Violation] = []
    for name in names:
        if name == "states":
            out.extend(check_states(entities, models))
        elif name == "stage-barrier":
            out.extend(check_stage_barrier(entities))
        elif name == "late-binding":
            out.extend(check_late_binding(entities)[0])
        elif name == "no-oversubscription":
            out.extend(check_no_oversubscription(entities))
        elif name == "walltime":
            out.extend(check_walltime(entities))
        else:
            raise ValueError(f"unknown check {name!r}")
    return out
