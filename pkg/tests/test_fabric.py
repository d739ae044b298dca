"""Round pacing, escalation decisions, and fabric stage orchestration."""

from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from caip_bench import wire
from caip_bench.fabric import (
    CoordinationFabric,
    DECISION_COMPLETE,
    DECISION_ESCALATE,
    decide_escalation,
    pace_interval,
)
from caip_bench.knowledge import KpiKind
from caip_bench.model import (
    EscalationTrigger,
    MetadataKind,
    PayloadClass,
    RoleKind,
    Stage,
    TriggerKind,
    WorkflowTemplate,
)
from caip_bench.wire import A1Policy, CapabilityAdvert, E2Report, ExtensionContainer, RrcAck


class TestPaceInterval:
    def test_reference_values(self):
        assert pace_interval(100, 1000, 3) == 100   # ample budget: base interval
        assert pace_interval(100, 150, 2) == 50     # deadline pressure shrinks it
        assert pace_interval(100, 0, 1) == 1        # spent budget: minimum tick

    def test_rounds_left_must_be_positive(self):
        with pytest.raises(ValueError):
            pace_interval(100, 1000, 0)

    @given(
        st.integers(min_value=1, max_value=500),
        st.integers(min_value=-100, max_value=5000),
        st.integers(min_value=1, max_value=10),
    )
    def test_bounds(self, base, remaining, rounds_left):
        interval = pace_interval(base, remaining, rounds_left)
        assert 1 <= interval <= base
        assert interval == max(1, min(base, remaining // (rounds_left + 1)))


def make_template(trigger=None, budget=1000, max_rounds=3,
                  roles=(RoleKind.EDGE_ANALYSIS, RoleKind.CLINICAL_SITE)):
    return WorkflowTemplate(
        template_id="tpl",
        required_roles=frozenset(roles),
        total_budget=budget,
        stage_budget_fractions={
            Stage.GROUP_FORMATION: Fraction(3, 10),
            Stage.VALIDATION: Fraction(2, 5),
            Stage.ESCALATION: Fraction(3, 10),
        },
        max_rounds_per_stage=max_rounds,
        escalation_trigger=trigger
        or EscalationTrigger(kind=TriggerKind.ON_ANOMALY_CONFIRMED),
    )


class TestDecideEscalation:
    def test_on_anomaly_confirmed(self):
        template = make_template()
        assert decide_escalation(template, True, 0) == DECISION_ESCALATE
        assert decide_escalation(template, False, 0) == DECISION_COMPLETE
        assert decide_escalation(template, None, 999) == DECISION_COMPLETE

    def test_timeout_fraction_threshold(self):
        template = make_template(
            EscalationTrigger(
                kind=TriggerKind.ON_VALIDATION_TIMEOUT_FRACTION, fraction=Fraction(1, 2)
            )
        )
        assert decide_escalation(template, None, 499) == DECISION_COMPLETE
        assert decide_escalation(template, None, 500) == DECISION_ESCALATE
        assert decide_escalation(template, True, 700) == DECISION_ESCALATE

    def test_never(self):
        template = make_template(EscalationTrigger(kind=TriggerKind.NEVER))
        assert decide_escalation(template, True, 10**6) == DECISION_COMPLETE


# --- fabric orchestration harness ----------------------------------------------

class FakeServices:
    def __init__(self, strict_governance=False):
        self.strict_governance = strict_governance
        self.traces = []
        self.kpis = []
        self.sends = []   # (src, dst, msg, prioritized)
        self.timers = []  # (fire_at, payload)

    def trace(self, entity, kind, detail):
        self.traces.append((entity, kind, detail))

    def kpi(self, record):
        self.kpis.append(record)

    def send(self, src, dst, msg, prioritized=False):
        self.sends.append((src, dst, msg, prioritized))

    def set_timer(self, fire_at, payload):
        self.timers.append((fire_at, payload))

    def kpi_kinds(self, workflow_id):
        return [r.kind for r in self.kpis if r.workflow_id == workflow_id]


def make_fabric(template, roster, strict=False, base=100, envelope=100):
    services = FakeServices(strict_governance=strict)
    fabric = CoordinationFabric(
        services=services, domain="dom-a",
        base_round_interval=base, near_rt_envelope=envelope,
    )
    policy = A1Policy(
        policy_id="pol-1",
        template=template,
        governance_constraints=(("dom-a", tuple(MetadataKind)),),
        kpi_sinks=("knowledge",),
        payload_class=PayloadClass.metadata(MetadataKind.WORKFLOW_IDENTIFIER),
    )
    fabric.install_policies([policy])
    for node_id, role in roster:
        advert = CapabilityAdvert(
            node_id=node_id, role=role, mode="caip_enabled", capabilities=(),
            payload_class=PayloadClass.metadata(MetadataKind.ROLE_ALIGNMENT_SIGNAL),
        )
        fabric.on_advert(advert, now=0)
        fabric.set_roster_domain(node_id, "dom-a")
    return fabric, services, policy


def ack(fabric, node_id, group_id, now):
    fabric.on_rrc_ack(
        RrcAck(node_id=node_id, group_id=group_id,
               payload_class=PayloadClass.metadata(MetadataKind.ROLE_ALIGNMENT_SIGNAL)),
        now,
    )


def outcome(fabric, node_id, workflow_id, verdict, now):
    fabric.on_validation_outcome(
        E2Report(
            node=node_id,
            payload_class=PayloadClass.metadata(MetadataKind.COMPLETION_STATUS_FLAG),
            extensions=ExtensionContainer.of(
                (wire.TAG_WORKFLOW_ID, workflow_id), (wire.TAG_OUTCOME, verdict)
            ),
        ),
        now,
    )


def escalation_ack(fabric, node_id, workflow_id, now):
    fabric.on_escalation_ack(
        E2Report(
            node=node_id,
            payload_class=PayloadClass.metadata(MetadataKind.ESCALATION_INDICATOR),
            extensions=ExtensionContainer.of(
                (wire.TAG_WORKFLOW_ID, workflow_id), ("EscalationAck", True)
            ),
        ),
        now,
    )


ROSTER = (
    ("n-a", RoleKind.EDGE_ANALYSIS),
    ("n-b", RoleKind.CLINICAL_SITE),
    ("n-c", RoleKind.EXPERTISE_SUPPORT),
)


class TestHappyPath:
    def test_escalated_completion_hand_trace(self):
        fabric, services, policy = make_fabric(make_template(), ROSTER)
        instance = fabric.instantiate_workflow("wf-1", "n-a", "dom-a", policy, now=0)

        # group formation: deadline timer at 1000, round 1 with full interval
        assert instance.context.deadline == 1000
        assert services.timers[0] == (1000, {"kind": "deadline", "wf": "wf-1"})
        # contact requests go out in role-value order: clinical_site first
        rrc_targets = [dst for _, dst, msg, _ in services.sends
                       if isinstance(msg, wire.RrcReconfig)]
        assert rrc_targets == ["n-b", "n-a"]

        ack(fabric, "n-a", instance.context.group_id, now=6)
        assert instance.state.stage is Stage.GROUP_FORMATION
        ack(fabric, "n-b", instance.context.group_id, now=10)
        assert instance.state.stage is Stage.VALIDATION

        # group-formation round closed with its measured duration
        round_record = next(r for r in services.kpis if r.kind is KpiKind.ROUND_COMPLETED)
        assert (round_record.stage, round_record.duration) == (Stage.GROUP_FORMATION, 10)

        # validation dispatch to both validators, stage timer at 10 + 400
        tasks = [dst for _, dst, msg, _ in services.sends
                 if isinstance(msg, wire.E2Control) and msg.directive == "validate"]
        assert tasks == ["n-a", "n-b"]
        assert (410, {"kind": "validation_timeout", "wf": "wf-1"}) in services.timers

        outcome(fabric, "n-a", "wf-1", "confirmed", now=28)
        assert instance.state.stage is Stage.VALIDATION
        outcome(fabric, "n-b", "wf-1", "confirmed", now=30)
        assert instance.state.stage is Stage.ESCALATION

        # escalation goes to the expertise-support node
        escalate_targets = [dst for _, dst, msg, _ in services.sends
                            if isinstance(msg, wire.E2Control)
                            and msg.directive == "escalate"]
        assert escalate_targets == ["n-c"]

        escalation_ack(fabric, "n-c", "wf-1", now=40)
        assert instance.state.label() == "completed(escalated=true)"
        kinds = services.kpi_kinds("wf-1")
        assert kinds[0] is KpiKind.WORKFLOW_INSTANTIATED
        assert kinds[-1] is KpiKind.WORKFLOW_COMPLETED
        triggered = next(r for r in services.kpis
                         if r.kind is KpiKind.ESCALATION_TRIGGERED)
        acked = next(r for r in services.kpis if r.kind is KpiKind.ESCALATION_ACKED)
        assert acked.time - triggered.time == 10
        completed = next(r for r in services.kpis
                         if r.kind is KpiKind.WORKFLOW_COMPLETED)
        assert completed.deadline_satisfied is True
        assert completed.completion_time == 40

    def test_refuted_outcome_completes_without_escalation(self):
        fabric, services, policy = make_fabric(make_template(), ROSTER)
        instance = fabric.instantiate_workflow("wf-1", "n-a", "dom-a", policy, now=0)
        ack(fabric, "n-a", instance.context.group_id, 5)
        ack(fabric, "n-b", instance.context.group_id, 5)
        outcome(fabric, "n-a", "wf-1", "refuted", 20)
        outcome(fabric, "n-b", "wf-1", "refuted", 20)
        assert instance.state.label() == "completed(escalated=false)"
        assert KpiKind.ESCALATION_TRIGGERED not in services.kpi_kinds("wf-1")


class TestRoundRetries:
    def fire_round_timer(self, fabric, services, index):
        fire_at, payload = [t for t in services.timers
                            if t[1].get("kind") == "round"][index]
        fabric.on_timer(payload, fire_at)
        return fire_at

    def test_unresponsive_group_exhausts_rounds_and_fails(self):
        template = make_template(roles=(RoleKind.EDGE_ANALYSIS,), max_rounds=3)
        fabric, services, policy = make_fabric(
            template, (("n-a", RoleKind.EDGE_ANALYSIS),)
        )
        instance = fabric.instantiate_workflow("wf-1", "n-a", "dom-a", policy, now=0)
        for i in range(3):
            self.fire_round_timer(fabric, services, i)
        assert instance.state.label() == "failed(group_formation_timeout)"
        assert instance.rounds_used[Stage.GROUP_FORMATION] == 3
        failed = next(r for r in services.kpis if r.kind is KpiKind.WORKFLOW_FAILED)
        assert failed.failure_reason.value == "group_formation_timeout"

    def test_round_indices_advance_across_retries(self):
        template = make_template(roles=(RoleKind.EDGE_ANALYSIS,), max_rounds=3)
        fabric, services, policy = make_fabric(
            template, (("n-a", RoleKind.EDGE_ANALYSIS),)
        )
        fabric.instantiate_workflow("wf-1", "n-a", "dom-a", policy, now=0)
        self.fire_round_timer(fabric, services, 0)
        rounds = [t[1]["round"] for t in services.timers if t[1].get("kind") == "round"]
        assert rounds == [1, 2]

    def test_candidate_rotation_across_rounds(self):
        template = make_template(roles=(RoleKind.EDGE_ANALYSIS,), max_rounds=3)
        fabric, services, policy = make_fabric(
            template,
            (("n-a1", RoleKind.EDGE_ANALYSIS), ("n-a2", RoleKind.EDGE_ANALYSIS)),
        )
        fabric.instantiate_workflow("wf-1", "n-a1", "dom-a", policy, now=0)
        self.fire_round_timer(fabric, services, 0)
        self.fire_round_timer(fabric, services, 1)
        rrc_targets = [dst for _, dst, msg, _ in services.sends
                       if isinstance(msg, wire.RrcReconfig)]
        assert rrc_targets == ["n-a1", "n-a2", "n-a1"]

    def test_stale_round_timer_is_ignored(self):
        fabric, services, policy = make_fabric(make_template(), ROSTER)
        instance = fabric.instantiate_workflow("wf-1", "n-a", "dom-a", policy, now=0)
        ack(fabric, "n-a", instance.context.group_id, 5)
        ack(fabric, "n-b", instance.context.group_id, 5)
        assert instance.state.stage is Stage.VALIDATION
        sends_before = len(services.sends)
        # the group-formation round timer pops after the stage already moved on
        fire_at, payload = next(t for t in services.timers
                                if t[1].get("kind") == "round"
                                and t[1]["stage"] == "group_formation")
        fabric.on_timer(payload, fire_at)
        assert len(services.sends) == sends_before
        assert instance.state.stage is Stage.VALIDATION


class TestPacing:
    def test_round_interval_respects_near_rt_envelope(self):
        fabric, services, policy = make_fabric(make_template(), ROSTER,
                                               base=100, envelope=40)
        fabric.instantiate_workflow("wf-1", "n-a", "dom-a", policy, now=0)
        fire_at, payload = next(t for t in services.timers
                                if t[1].get("kind") == "round")
        assert fire_at == 40  # min(base, envelope), ample remaining budget

    def test_round_interval_shrinks_near_deadline(self):
        template = make_template(roles=(RoleKind.EDGE_ANALYSIS,), budget=90,
                                 max_rounds=2)
        fabric, services, policy = make_fabric(
            template, (("n-a", RoleKind.EDGE_ANALYSIS),)
        )
        fabric.instantiate_workflow("wf-1", "n-a", "dom-a", policy, now=0)
        fire_at, _ = next(t for t in services.timers if t[1].get("kind") == "round")
        assert fire_at == 30  # remaining 90 across 2 rounds (+1 slack) = 30


class TestValidationTimeout:
    def test_fraction_trigger_holds_timer_to_threshold(self):
        template = make_template(
            EscalationTrigger(
                kind=TriggerKind.ON_VALIDATION_TIMEOUT_FRACTION, fraction=Fraction(1, 2)
            )
        )
        fabric, services, policy = make_fabric(template, ROSTER)
        instance = fabric.instantiate_workflow("wf-1", "n-a", "dom-a", policy, now=0)
        ack(fabric, "n-a", instance.context.group_id, 20)
        ack(fabric, "n-b", instance.context.group_id, 20)
        # stage budget ends at 20 + 400 but the escalation threshold is 500
        assert (500, {"kind": "validation_timeout", "wf": "wf-1"}) in services.timers
        fabric.on_timer({"kind": "validation_timeout", "wf": "wf-1"}, 500)
        assert instance.state.stage is Stage.ESCALATION

    def test_timeout_without_escalation_policy_fails(self):
        template = make_template(EscalationTrigger(kind=TriggerKind.NEVER))
        fabric, services, policy = make_fabric(template, ROSTER)
        instance = fabric.instantiate_workflow("wf-1", "n-a", "dom-a", policy, now=0)
        ack(fabric, "n-a", instance.context.group_id, 10)
        ack(fabric, "n-b", instance.context.group_id, 10)
        fabric.on_timer({"kind": "validation_timeout", "wf": "wf-1"}, 410)
        assert instance.state.label() == "failed(validation_timeout)"


class TestGovernanceRejection:
    def test_strict_mode_rejects_unconstrained_origin_domain(self):
        fabric, services, policy = make_fabric(make_template(), ROSTER, strict=True)
        instance = fabric.instantiate_workflow("wf-1", "n-x", "dom-unlisted",
                                               policy, now=0)
        assert instance.state.label() == "failed(policy_rejected)"
        assert services.kpi_kinds("wf-1") == [
            KpiKind.WORKFLOW_INSTANTIATED, KpiKind.WORKFLOW_FAILED
        ]
        assert services.timers == []  # rejected before any round started


class TestTimersAndDeadline:
    def test_deadline_expiry_fails_a_stuck_workflow(self):
        fabric, services, policy = make_fabric(make_template(), ROSTER)
        instance = fabric.instantiate_workflow("wf-1", "n-a", "dom-a", policy, now=0)
        fabric.on_timer({"kind": "deadline", "wf": "wf-1"}, 1000)
        assert instance.state.label() == "failed(deadline_expired)"

    def test_timers_after_terminal_state_are_inert(self):
        fabric, services, policy = make_fabric(make_template(), ROSTER)
        instance = fabric.instantiate_workflow("wf-1", "n-a", "dom-a", policy, now=0)
        fabric.on_timer({"kind": "deadline", "wf": "wf-1"}, 1000)
        state = instance.state
        fabric.on_timer({"kind": "validation_timeout", "wf": "wf-1"}, 1001)
        fabric.on_timer({"kind": "deadline", "wf": "wf-1"}, 1002)
        assert instance.state == state

    def test_unknown_workflow_timer_is_ignored(self):
        fabric, services, _ = make_fabric(make_template(), ROSTER)
        fabric.on_timer({"kind": "deadline", "wf": "wf-nope"}, 10)
        assert services.kpis == []
