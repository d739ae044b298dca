"""Near-RT coordination fabric: bounded deadline-paced rounds over E2/RRC/SDAP.

The fabric is a single actor. It owns all workflow instances and the SDAP
association table; every interaction with a node goes out as an encoded
control message delivery, and long waits are modeled as scheduled timer
events. Handlers receive the current simulated time from the run loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

from .model import (
    CoordinationContext,
    FailureReason,
    MetadataKind,
    PayloadClass,
    RoleKind,
    Stage,
    TriggerKind,
    VALIDATOR_ROLES,
    WorkflowEvent,
    WorkflowInstance,
    WorkflowState,
    bind_context,
    remaining_budget,
    transition,
)
from . import wire
from .wire import (
    A1Policy,
    E2Control,
    E2Report,
    ExtensionContainer,
    RrcAck,
    RrcReconfig,
    SdapTable,
    associate_flow,
)
from .knowledge import KpiKind, KpiRecord

DECISION_ESCALATE = "escalate"
DECISION_COMPLETE = "complete"

#: Baseline mandatory session parameters carried by every reconfiguration.
BASELINE_SESSION_PARAMS = (("session_profile", "baseline-v1"),)


def pace_interval(base_interval: int, remaining: int, rounds_left: int) -> int:
    """Deadline-proximity round interval.

    max(1, min(base, floor(remaining / (rounds_left + 1)))); the +1 keeps
    slack for the final decision event. Never exceeds the base interval and
    shrinks as the deadline nears; a spent budget yields the minimum tick.
    """
    if rounds_left < 1:
        raise ValueError(f"rounds_left must be >= 1, got {rounds_left}")
    return max(1, min(base_interval, remaining // (rounds_left + 1)))


def decide_escalation(
    template,
    validation_confirmed: Optional[bool],
    elapsed: int,
) -> str:
    """Escalate iff the template trigger matches the validation conclusion.

    OnAnomalyConfirmed escalates on a confirmed result; the timeout-fraction
    trigger escalates once elapsed >= fraction * total_budget; Never always
    completes. ``validation_confirmed`` is None on a stage timeout.
    """
    trigger = template.escalation_trigger
    if trigger.kind is TriggerKind.ON_ANOMALY_CONFIRMED:
        if validation_confirmed is True:
            return DECISION_ESCALATE
    elif trigger.kind is TriggerKind.ON_VALIDATION_TIMEOUT_FRACTION:
        if Fraction(elapsed) >= trigger.fraction * template.total_budget:
            return DECISION_ESCALATE
    return DECISION_COMPLETE


@dataclass
class RoundState:
    """One bounded coordination round within a stage."""

    stage: Stage
    round_index: int  # 1-based
    started_at: int
    round_deadline: int
    pending: set  # role values (group formation) or node ids (validation/escalation)
    acked: set = field(default_factory=set)


@dataclass
class RosterEntry:
    node_id: str
    role: RoleKind
    mode: str
    domain: str
    capabilities: tuple


@dataclass
class _WorkflowRun:
    """Fabric-side runtime bookkeeping wrapped around a WorkflowInstance."""

    instance: WorkflowInstance
    policy: A1Policy
    origin_node: str
    created_at: int
    round: Optional[RoundState] = None
    validation_outcomes: dict = field(default_factory=dict)  # node_id -> outcome str
    validation_started_at: Optional[int] = None
    escalation_target: Optional[str] = None


class CoordinationFabric:
    """Instantiates workflows from policy and drives them to a terminal state."""

    def __init__(
        self,
        services,
        domain: str,
        base_round_interval: int,
        near_rt_envelope: int,
        flow_bindings: Optional[dict] = None,
        known_flows=(),
    ) -> None:
        self.services = services
        self.domain = domain
        self.base_round_interval = base_round_interval
        self.near_rt_envelope = near_rt_envelope
        self.flow_bindings = dict(flow_bindings or {})  # node_id -> flow_id
        self.sdap_table = SdapTable(known_flows)
        self.policies: list = []
        self.roster: dict = {}  # node_id -> RosterEntry
        self.runs: dict = {}  # workflow_id -> _WorkflowRun
        self._group_counter = 0

    # round intervals never exceed the near-RT envelope
    @property
    def _effective_base(self) -> int:
        return min(self.base_round_interval, self.near_rt_envelope)

    def install_policies(self, policies: list) -> None:
        self.policies = list(policies)

    def _policy_for(self, template_id: Optional[str]) -> Optional[A1Policy]:
        if template_id:
            for policy in self.policies:
                if policy.template.template_id == template_id:
                    return policy
        return self.policies[0] if self.policies else None

    # --- inbound message handlers -------------------------------------------

    def on_advert(self, advert, now: int) -> None:
        self.roster[advert.node_id] = RosterEntry(
            node_id=advert.node_id,
            role=advert.role,
            mode=advert.mode,
            domain="",  # domain is a deployment fact, filled by the runner
            capabilities=advert.capabilities,
        )
        self.services.trace(
            "fabric", "roster_add", f"{advert.node_id} role={advert.role.value}"
        )

    def set_roster_domain(self, node_id: str, domain: str) -> None:
        if node_id in self.roster:
            self.roster[node_id].domain = domain

    def on_anomaly(self, report: E2Report, origin_domain: str, now: int) -> None:
        workflow_id = report.extensions.get(wire.TAG_WORKFLOW_ID)
        template_id = report.extensions.get("TemplateID")
        policy = self._policy_for(template_id)
        if workflow_id is None or policy is None:
            self.services.trace("fabric", "ignore", "anomaly report without policy or id")
            return
        if workflow_id in self.runs:
            self.services.trace("fabric", "ignore", f"duplicate anomaly for {workflow_id}")
            return
        self.instantiate_workflow(workflow_id, report.node, origin_domain, policy, now)

    def instantiate_workflow(
        self,
        workflow_id: str,
        origin_node: str,
        origin_domain: str,
        policy: A1Policy,
        now: int,
    ) -> WorkflowInstance:
        template = policy.template
        self._group_counter += 1
        group_id = f"grp-{self._group_counter:04d}"
        context = bind_context(
            workflow_id,
            group_id,
            now,
            template.total_budget,
            template.required_roles,
            origin_domain,
        )
        instance = WorkflowInstance(
            workflow_id=workflow_id,
            template=template,
            context=context,
            state=WorkflowState.group_formation(),
            timestamps={"instantiated": now},
        )
        run = _WorkflowRun(
            instance=instance, policy=policy, origin_node=origin_node, created_at=now
        )
        self.runs[workflow_id] = run
        self.services.kpi(
            KpiRecord(workflow_id=workflow_id, kind=KpiKind.WORKFLOW_INSTANTIATED, time=now)
        )

        rejected = (
            self.services.strict_governance
            and policy.allowed_outbound(origin_domain) is None
        )
        if rejected:
            instance.state = WorkflowState.failed(FailureReason.POLICY_REJECTED)
            self._finalize(run, now)
            return instance

        self.services.trace(
            "fabric",
            "stage_enter",
            f"{workflow_id} group_formation group={group_id} deadline={context.deadline}",
        )
        self.services.set_timer(
            context.deadline, {"kind": "deadline", "wf": workflow_id}
        )
        self._start_group_formation_round(run, now)
        return instance

    # --- group formation --------------------------------------------------------

    def _candidates(self, role: RoleKind) -> list:
        return sorted(
            node_id for node_id, entry in self.roster.items() if entry.role is role
        )

    def _start_group_formation_round(self, run: _WorkflowRun, now: int) -> None:
        instance = run.instance
        template = instance.template
        round_index = instance.rounds_used.get(Stage.GROUP_FORMATION, 0) + 1
        if round_index > template.max_rounds_per_stage:
            self._apply(run, WorkflowEvent.GROUP_FORMATION_FAILED, now)
            return

        pending = {
            role.value
            for role in instance.template.required_roles
            if role not in instance.members
        }
        rounds_left = template.max_rounds_per_stage - round_index + 1
        interval = pace_interval(
            self._effective_base, remaining_budget(instance.context, now), rounds_left
        )
        run.round = RoundState(
            stage=Stage.GROUP_FORMATION,
            round_index=round_index,
            started_at=now,
            round_deadline=now + interval,
            pending=pending,
            acked={role.value for role in instance.members},
        )
        instance.rounds_used[Stage.GROUP_FORMATION] = round_index
        self.services.trace(
            "fabric",
            "round_start",
            f"{instance.workflow_id} group_formation round={round_index} "
            f"interval={interval}",
        )
        self.services.set_timer(
            now + interval,
            {
                "kind": "round",
                "wf": instance.workflow_id,
                "stage": Stage.GROUP_FORMATION.value,
                "round": round_index,
            },
        )
        for role_value in sorted(pending):
            candidates = self._candidates(RoleKind(role_value))
            if not candidates:
                continue
            target = candidates[(round_index - 1) % len(candidates)]
            msg = RrcReconfig(
                target=target,
                session_params=BASELINE_SESSION_PARAMS,
                payload_class=PayloadClass.metadata(MetadataKind.WORKFLOW_IDENTIFIER),
                extensions=ExtensionContainer.of(
                    (wire.TAG_GROUP_ID, instance.context.group_id),
                    (wire.TAG_TIME_BUDGET, remaining_budget(instance.context, now)),
                    (wire.TAG_WORKFLOW_ID, instance.workflow_id),
                ),
            )
            self.services.send("fabric", target, msg)

    def on_rrc_ack(self, ack: RrcAck, now: int) -> None:
        run = self._run_for_group(ack.group_id)
        if run is None or run.instance.state.stage is not Stage.GROUP_FORMATION:
            self.services.trace("fabric", "ignore", f"stale ack group={ack.group_id}")
            return
        entry = self.roster.get(ack.node_id)
        rs = run.round
        if entry is None or rs is None or entry.role.value not in rs.pending:
            self.services.trace(
                "fabric", "ignore", f"unexpected ack from {ack.node_id}"
            )
            return
        rs.pending.discard(entry.role.value)
        rs.acked.add(entry.role.value)
        run.instance.members[entry.role] = ack.node_id
        required = len(run.instance.template.required_roles)
        self.services.trace(
            "fabric",
            "alignment",
            f"{run.instance.workflow_id} {len(rs.acked)}/{required}",
        )
        if not rs.pending:
            self._close_round(run, now)
            self._apply(run, WorkflowEvent.GROUP_FORMED, now)

    def _run_for_group(self, group_id: str) -> Optional[_WorkflowRun]:
        for run in self.runs.values():
            if run.instance.context and run.instance.context.group_id == group_id:
                return run
        return None

    def _close_round(self, run: _WorkflowRun, now: int) -> None:
        rs = run.round
        if rs is None:
            return
        self.services.kpi(
            KpiRecord(
                workflow_id=run.instance.workflow_id,
                kind=KpiKind.ROUND_COMPLETED,
                time=now,
                stage=rs.stage,
                round_index=rs.round_index,
                duration=now - rs.started_at,
            )
        )
        run.round = None

    # --- validation -----------------------------------------------------------

    def _enter_validation(self, run: _WorkflowRun, now: int) -> None:
        instance = run.instance
        run.validation_started_at = now
        self.services.trace(
            "fabric", "stage_enter", f"{instance.workflow_id} validation"
        )
        for role in sorted(instance.members, key=lambda r: r.value):
            node_id = instance.members[role]
            flow = self.flow_bindings.get(node_id)
            if flow is not None:
                associate_flow(self.sdap_table, flow, instance.context.group_id)
                self.services.trace(
                    "fabric",
                    "sdap_associate",
                    f"{flow} -> {instance.context.group_id} prioritized=true",
                )

        timeout_at = now + instance.template.stage_budget(Stage.VALIDATION)
        trigger = instance.template.escalation_trigger
        if trigger.kind is TriggerKind.ON_VALIDATION_TIMEOUT_FRACTION:
            # A timeout before the escalation threshold would force a failure
            # the policy wants escalated instead; hold the timer to the
            # threshold crossing.
            threshold_at = run.created_at + int(
                trigger.fraction * instance.template.total_budget
            )
            timeout_at = max(timeout_at, threshold_at)
        self.services.set_timer(
            timeout_at, {"kind": "validation_timeout", "wf": instance.workflow_id}
        )
        self._start_validation_round(run, now)

    def _validators(self, run: _WorkflowRun) -> list:
        return sorted(
            node_id
            for role, node_id in run.instance.members.items()
            if role in VALIDATOR_ROLES
        )

    def _start_validation_round(self, run: _WorkflowRun, now: int) -> None:
        instance = run.instance
        template = instance.template
        round_index = instance.rounds_used.get(Stage.VALIDATION, 0) + 1
        if round_index > template.max_rounds_per_stage:
            # dispatch budget exhausted; the stage timeout timer concludes
            run.round = None
            return
        pending = {
            node_id
            for node_id in self._validators(run)
            if node_id not in run.validation_outcomes
        }
        rounds_left = template.max_rounds_per_stage - round_index + 1
        interval = pace_interval(
            self._effective_base, remaining_budget(instance.context, now), rounds_left
        )
        run.round = RoundState(
            stage=Stage.VALIDATION,
            round_index=round_index,
            started_at=now,
            round_deadline=now + interval,
            pending=pending,
            acked=set(run.validation_outcomes),
        )
        instance.rounds_used[Stage.VALIDATION] = round_index
        self.services.trace(
            "fabric",
            "round_start",
            f"{instance.workflow_id} validation round={round_index} interval={interval}",
        )
        self.services.set_timer(
            now + interval,
            {
                "kind": "round",
                "wf": instance.workflow_id,
                "stage": Stage.VALIDATION.value,
                "round": round_index,
            },
        )
        for node_id in sorted(pending):
            task_id = f"{instance.workflow_id}:val:{round_index}"
            msg = E2Control(
                directive="validate",
                workflow_id=instance.workflow_id,
                payload_class=PayloadClass.metadata(MetadataKind.WORKFLOW_IDENTIFIER),
                extensions=ExtensionContainer.of(
                    ("TaskID", task_id),
                    (wire.TAG_GROUP_ID, instance.context.group_id),
                    (wire.TAG_DEADLINE_INDICATOR, remaining_budget(instance.context, now)),
                ),
            )
            flow = self.flow_bindings.get(node_id)
            prioritized = flow is not None and self.sdap_table.is_prioritized(flow)
            self.services.send("fabric", node_id, msg, prioritized=prioritized)

    def on_validation_outcome(self, report: E2Report, now: int) -> None:
        workflow_id = report.extensions.get(wire.TAG_WORKFLOW_ID)
        run = self.runs.get(workflow_id)
        if run is None or run.instance.state.stage is not Stage.VALIDATION:
            self.services.trace("fabric", "ignore", f"stale outcome for {workflow_id}")
            return
        if report.node in run.validation_outcomes:
            return
        outcome = report.extensions.get(wire.TAG_OUTCOME)
        run.validation_outcomes[report.node] = outcome
        self.services.trace(
            "fabric", "outcome", f"{workflow_id} {report.node} {outcome}"
        )
        if run.round is not None:
            run.round.pending.discard(report.node)
            run.round.acked.add(report.node)
        if set(run.validation_outcomes) >= set(self._validators(run)):
            self._close_round(run, now)
            self._conclude_validation(run, now)

    def _conclude_validation(self, run: _WorkflowRun, now: int) -> None:
        confirmed = all(v == "confirmed" for v in run.validation_outcomes.values())
        decision = decide_escalation(
            run.instance.template, confirmed, elapsed=now - run.created_at
        )
        trigger = run.instance.template.escalation_trigger.kind
        if decision == DECISION_ESCALATE:
            event = (
                WorkflowEvent.VALIDATION_SUCCEEDED
                if trigger is TriggerKind.ON_ANOMALY_CONFIRMED
                else WorkflowEvent.STAGE_TIMEOUT
            )
        else:
            event = (
                WorkflowEvent.VALIDATION_SUCCEEDED
                if confirmed
                else WorkflowEvent.VALIDATION_FAILED
            )
        self._apply(run, event, now)

    def _on_validation_timeout(self, run: _WorkflowRun, now: int) -> None:
        if run.instance.state.stage is not Stage.VALIDATION:
            return
        self._close_round(run, now)
        decision = decide_escalation(
            run.instance.template, None, elapsed=now - run.created_at
        )
        self.services.trace(
            "fabric",
            "validation_timeout",
            f"{run.instance.workflow_id} decision={decision}",
        )
        self._apply(run, WorkflowEvent.STAGE_TIMEOUT, now)

    # --- escalation ------------------------------------------------------------

    def _enter_escalation(self, run: _WorkflowRun, now: int) -> None:
        instance = run.instance
        self.services.trace(
            "fabric", "stage_enter", f"{instance.workflow_id} escalation"
        )
        self.services.kpi(
            KpiRecord(
                workflow_id=instance.workflow_id,
                kind=KpiKind.ESCALATION_TRIGGERED,
                time=now,
            )
        )
        instance.timestamps["escalation_triggered"] = now
        self._start_escalation_round(run, now)

    def _escalation_candidates(self, run: _WorkflowRun) -> list:
        member = run.instance.members.get(RoleKind.EXPERTISE_SUPPORT)
        if member is not None:
            return [member]
        return self._candidates(RoleKind.EXPERTISE_SUPPORT)

    def _start_escalation_round(self, run: _WorkflowRun, now: int) -> None:
        instance = run.instance
        template = instance.template
        round_index = instance.rounds_used.get(Stage.ESCALATION, 0) + 1
        if round_index > template.max_rounds_per_stage:
            self._apply(run, WorkflowEvent.STAGE_TIMEOUT, now)
            return
        rounds_left = template.max_rounds_per_stage - round_index + 1
        interval = pace_interval(
            self._effective_base, remaining_budget(instance.context, now), rounds_left
        )
        candidates = self._escalation_candidates(run)
        target = candidates[(round_index - 1) % len(candidates)] if candidates else None
        run.escalation_target = target
        run.round = RoundState(
            stage=Stage.ESCALATION,
            round_index=round_index,
            started_at=now,
            round_deadline=now + interval,
            pending={target} if target else set(),
        )
        instance.rounds_used[Stage.ESCALATION] = round_index
        self.services.trace(
            "fabric",
            "round_start",
            f"{instance.workflow_id} escalation round={round_index} interval={interval}",
        )
        self.services.set_timer(
            now + interval,
            {
                "kind": "round",
                "wf": instance.workflow_id,
                "stage": Stage.ESCALATION.value,
                "round": round_index,
            },
        )
        if target is not None:
            msg = E2Control(
                directive="escalate",
                workflow_id=instance.workflow_id,
                payload_class=PayloadClass.metadata(MetadataKind.ESCALATION_INDICATOR),
                extensions=ExtensionContainer.of(
                    (wire.TAG_GROUP_ID, instance.context.group_id),
                    (wire.TAG_DEADLINE_INDICATOR, remaining_budget(instance.context, now)),
                ),
            )
            self.services.send("fabric", target, msg)

    def on_escalation_ack(self, report: E2Report, now: int) -> None:
        workflow_id = report.extensions.get(wire.TAG_WORKFLOW_ID)
        run = self.runs.get(workflow_id)
        if run is None or run.instance.state.stage is not Stage.ESCALATION:
            self.services.trace("fabric", "ignore", f"stale escalation ack {workflow_id}")
            return
        self._close_round(run, now)
        self.services.kpi(
            KpiRecord(
                workflow_id=workflow_id, kind=KpiKind.ESCALATION_ACKED, time=now
            )
        )
        run.instance.timestamps["escalation_acked"] = now
        self._apply(run, WorkflowEvent.ESCALATION_ACKED, now)

    # --- report routing ----------------------------------------------------------

    def on_e2_report(self, report: E2Report, src_domain: str, now: int) -> None:
        if report.extensions.get(wire.TAG_ANOMALY):
            self.on_anomaly(report, src_domain, now)
        elif report.extensions.get(wire.TAG_OUTCOME) is not None:
            self.on_validation_outcome(report, now)
        elif report.extensions.get("EscalationAck"):
            self.on_escalation_ack(report, now)
        else:
            self.services.trace(
                "fabric", "state_report", f"{report.node}"
            )

    # --- timers ---------------------------------------------------------------

    def on_timer(self, payload: dict, now: int) -> None:
        kind = payload.get("kind")
        workflow_id = payload.get("wf")
        run = self.runs.get(workflow_id)
        if run is None:
            return
        instance = run.instance
        if instance.state.is_terminal:
            return

        if kind == "deadline":
            self._apply(run, WorkflowEvent.DEADLINE_EXPIRED, now)
            return
        if kind == "validation_timeout":
            self._on_validation_timeout(run, now)
            return
        if kind == "round":
            rs = run.round
            if (
                rs is None
                or rs.stage.value != payload.get("stage")
                or rs.round_index != payload.get("round")
            ):
                return  # stale: the round already closed
            self._close_round(run, now)
            if rs.stage is Stage.GROUP_FORMATION:
                self._start_group_formation_round(run, now)
            elif rs.stage is Stage.VALIDATION:
                self._start_validation_round(run, now)
            elif rs.stage is Stage.ESCALATION:
                self._start_escalation_round(run, now)

    # --- state application -----------------------------------------------------

    def _apply(self, run: _WorkflowRun, event: WorkflowEvent, now: int) -> None:
        instance = run.instance
        new_state = transition(instance.state, event, instance.template)
        if new_state == instance.state:
            return
        instance.state = new_state
        instance.timestamps[new_state.label()] = now
        if new_state.is_terminal:
            self._finalize(run, now)
        elif new_state.stage is Stage.VALIDATION:
            self._enter_validation(run, now)
        elif new_state.stage is Stage.ESCALATION:
            self._enter_escalation(run, now)

    def _finalize(self, run: _WorkflowRun, now: int) -> None:
        instance = run.instance
        state = instance.state
        run.round = None
        self.services.trace(
            "fabric", "stage_enter", f"{instance.workflow_id} {state.label()}"
        )
        if state.stage is Stage.COMPLETED:
            deadline_satisfied = now <= instance.context.deadline
            self.services.kpi(
                KpiRecord(
                    workflow_id=instance.workflow_id,
                    kind=KpiKind.WORKFLOW_COMPLETED,
                    time=now,
                    escalated=state.escalated,
                    completion_time=now,
                    deadline_satisfied=deadline_satisfied,
                )
            )
        else:
            self.services.kpi(
                KpiRecord(
                    workflow_id=instance.workflow_id,
                    kind=KpiKind.WORKFLOW_FAILED,
                    time=now,
                    failure_reason=state.failure_reason,
                )
            )
