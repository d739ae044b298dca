"""Non-RT tier: policy provisioning at non-RT cadence and KPI aggregation."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Optional

from .model import FailureReason, Stage
from .wire import A1Policy, validate_policy


class InvalidPolicy(Exception):
    def __init__(self, violations: list):
        self.violations = violations
        super().__init__("; ".join(violations))


class KpiOrderViolation(Exception):
    """KPI event violates per-workflow ordering invariants: a fabric bug."""


class InFlightWorkflows(Exception):
    """aggregate() was called while some workflow lacks a terminal record."""


class KpiKind(enum.Enum):
    WORKFLOW_INSTANTIATED = "workflow_instantiated"
    ROUND_COMPLETED = "round_completed"
    ESCALATION_TRIGGERED = "escalation_triggered"
    ESCALATION_ACKED = "escalation_acked"
    WORKFLOW_COMPLETED = "workflow_completed"
    WORKFLOW_FAILED = "workflow_failed"

_TERMINAL_KINDS = {KpiKind.WORKFLOW_COMPLETED, KpiKind.WORKFLOW_FAILED}


@dataclass(frozen=True)
class KpiRecord:
    workflow_id: str
    kind: KpiKind
    time: int
    stage: Optional[Stage] = None
    round_index: Optional[int] = None
    duration: Optional[int] = None
    escalated: Optional[bool] = None
    completion_time: Optional[int] = None
    deadline_satisfied: Optional[bool] = None
    failure_reason: Optional[FailureReason] = None

    def to_doc(self) -> dict:
        doc: dict = {
            "workflow_id": self.workflow_id,
            "kind": self.kind.value,
            "time": self.time,
        }
        if self.stage is not None:
            doc["stage"] = self.stage.value
        if self.round_index is not None:
            doc["round_index"] = self.round_index
        if self.duration is not None:
            doc["duration"] = self.duration
        if self.escalated is not None:
            doc["escalated"] = self.escalated
        if self.completion_time is not None:
            doc["completion_time"] = self.completion_time
        if self.deadline_satisfied is not None:
            doc["deadline_satisfied"] = self.deadline_satisfied
        if self.failure_reason is not None:
            doc["failure_reason"] = self.failure_reason.value
        return doc

    @classmethod
    def from_doc(cls, doc: dict) -> "KpiRecord":
        return cls(
            workflow_id=doc["workflow_id"],
            kind=KpiKind(doc["kind"]),
            time=int(doc["time"]),
            stage=Stage(doc["stage"]) if "stage" in doc else None,
            round_index=doc.get("round_index"),
            duration=doc.get("duration"),
            escalated=doc.get("escalated"),
            completion_time=doc.get("completion_time"),
            deadline_satisfied=doc.get("deadline_satisfied"),
            failure_reason=(
                FailureReason(doc["failure_reason"]) if "failure_reason" in doc else None
            ),
        )


class KpiStore:
    """Append-only event store with per-workflow ordering checks."""

    def __init__(self) -> None:
        self.records: list = []

    def record(self, event: KpiRecord) -> None:
        prior = [r for r in self.records if r.workflow_id == event.workflow_id]
        kinds = [r.kind for r in prior]
        if event.kind is KpiKind.WORKFLOW_INSTANTIATED:
            if KpiKind.WORKFLOW_INSTANTIATED in kinds:
                raise KpiOrderViolation(
                    f"duplicate instantiation record for {event.workflow_id}"
                )
        else:
            if KpiKind.WORKFLOW_INSTANTIATED not in kinds:
                raise KpiOrderViolation(
                    f"{event.kind.value} for {event.workflow_id} before instantiation"
                )
        if event.kind in _TERMINAL_KINDS and any(k in _TERMINAL_KINDS for k in kinds):
            raise KpiOrderViolation(
                f"second terminal record for {event.workflow_id}"
            )
        if event.kind is KpiKind.ESCALATION_ACKED:
            if KpiKind.ESCALATION_TRIGGERED not in kinds:
                raise KpiOrderViolation(
                    f"escalation ack without trigger for {event.workflow_id}"
                )
        self.records.append(event)

    def dump_jsonl(self) -> str:
        return "".join(
            json.dumps(r.to_doc(), sort_keys=True, separators=(",", ":")) + "\n"
            for r in self.records
        )

    @classmethod
    def load_jsonl(cls, text: str) -> "KpiStore":
        store = cls()
        for line in text.splitlines():
            if line.strip():
                store.record(KpiRecord.from_doc(json.loads(line)))
        return store


def record_kpi(store: KpiStore, event: KpiRecord) -> KpiStore:
    store.record(event)
    return store


# --- aggregation --------------------------------------------------------------

def format_ratio(value: Fraction) -> str:
    """Exact rational rendered to 4 decimal places (round half up)."""
    num, den = value.numerator, value.denominator
    scaled, rem = divmod(num * 10000, den)
    if 2 * rem >= den:
        scaled += 1
    return f"{scaled // 10000}.{scaled % 10000:04d}"


def _stats(values: list) -> dict:
    if not values:
        return {"count": 0, "min": 0, "max": 0, "mean": "0.0000"}
    return {
        "count": len(values),
        "min": min(values),
        "max": max(values),
        "mean": format_ratio(Fraction(sum(values), len(values))),
    }


@dataclass
class KpiReport:
    totals: dict
    deadline_satisfaction_ratio: str
    round_durations: dict  # stage value -> stats dict
    escalation_latency: dict
    workflows: list  # per-workflow detail row dicts

    def to_doc(self) -> dict:
        return {
            "totals": self.totals,
            "deadline_satisfaction_ratio": self.deadline_satisfaction_ratio,
            "round_durations": self.round_durations,
            "escalation_latency": self.escalation_latency,
            "workflows": self.workflows,
        }

    def render_structured(self) -> str:
        return json.dumps(self.to_doc(), sort_keys=True, indent=2) + "\n"

    FLAT_COLUMNS = (
        "workflow_id", "outcome", "escalated", "completion_time",
        "deadline_satisfied", "rounds_group_formation", "rounds_validation",
        "rounds_escalation", "escalation_latency",
    )

    def render_flat(self) -> str:
        lines = ["\t".join(self.FLAT_COLUMNS)]
        for row in self.workflows:
            lines.append("\t".join(str(row[col]) for col in self.FLAT_COLUMNS))
        return "\n".join(lines) + "\n"


def aggregate(store: KpiStore) -> KpiReport:
    """Deterministic run report; raises InFlightWorkflows unless every
    instantiated workflow has exactly one terminal record."""
    by_workflow: dict = {}
    for record in store.records:
        by_workflow.setdefault(record.workflow_id, []).append(record)

    in_flight = [
        wf for wf, records in by_workflow.items()
        if not any(r.kind in _TERMINAL_KINDS for r in records)
    ]
    if in_flight:
        raise InFlightWorkflows(f"non-terminal workflows: {sorted(in_flight)}")

    completed = 0
    satisfied = 0
    failed_by_reason = {reason.value: 0 for reason in FailureReason}
    round_durations: dict = {
        stage.value: []
        for stage in (Stage.GROUP_FORMATION, Stage.VALIDATION, Stage.ESCALATION)
    }
    escalation_latencies: list = []
    rows: list = []

    for wf in sorted(by_workflow):
        records = by_workflow[wf]
        terminal = next(r for r in records if r.kind in _TERMINAL_KINDS)
        triggered = next(
            (r for r in records if r.kind is KpiKind.ESCALATION_TRIGGERED), None
        )
        acked = next((r for r in records if r.kind is KpiKind.ESCALATION_ACKED), None)
        latency = acked.time - triggered.time if (triggered and acked) else None
        if latency is not None:
            escalation_latencies.append(latency)

        rounds = {stage.value: 0 for stage in
                  (Stage.GROUP_FORMATION, Stage.VALIDATION, Stage.ESCALATION)}
        for r in records:
            if r.kind is KpiKind.ROUND_COMPLETED:
                rounds[r.stage.value] += 1
                round_durations[r.stage.value].append(r.duration)

        if terminal.kind is KpiKind.WORKFLOW_COMPLETED:
            completed += 1
            if terminal.deadline_satisfied:
                satisfied += 1
            outcome = f"completed(escalated={str(terminal.escalated).lower()})"
        else:
            failed_by_reason[terminal.failure_reason.value] += 1
            outcome = f"failed({terminal.failure_reason.value})"

        rows.append({
            "workflow_id": wf,
            "outcome": outcome,
            "escalated": terminal.escalated if terminal.escalated is not None else False,
            "completion_time": (
                terminal.completion_time
                if terminal.completion_time is not None else terminal.time
            ),
            "deadline_satisfied": (
                terminal.deadline_satisfied
                if terminal.deadline_satisfied is not None else False
            ),
            "rounds_group_formation": rounds[Stage.GROUP_FORMATION.value],
            "rounds_validation": rounds[Stage.VALIDATION.value],
            "rounds_escalation": rounds[Stage.ESCALATION.value],
            "escalation_latency": latency if latency is not None else "",
        })

    instantiated = len(by_workflow)
    ratio = (
        Fraction(satisfied, instantiated) if instantiated else Fraction(0)
    )
    return KpiReport(
        totals={
            "instantiated": instantiated,
            "completed": completed,
            "failed": instantiated - completed,
            "failed_by_reason": failed_by_reason,
        },
        deadline_satisfaction_ratio=format_ratio(ratio),
        round_durations={k: _stats(v) for k, v in round_durations.items()},
        escalation_latency=_stats(escalation_latencies),
        workflows=rows,
    )


# --- provisioning --------------------------------------------------------------

def provision(policies: list, fabric, scenario_domains, strict: bool = True) -> None:
    """Validate and install policies on the fabric; raises InvalidPolicy."""
    all_violations: list = []
    for policy in policies:
        for violation in validate_policy(policy, scenario_domains, strict=strict):
            all_violations.append(f"{policy.policy_id}: {violation}")
    if all_violations:
        raise InvalidPolicy(all_violations)
    fabric.install_policies(policies)


def next_provision_slot(requested: int, cadence: int) -> int:
    """Earliest non-RT cadence boundary at or after the requested time."""
    if cadence <= 0 or requested % cadence == 0:
        return requested
    return (requested // cadence + 1) * cadence
