"""Core domain types and the four-stage clinical workflow state machine."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional


class RoleKind(enum.Enum):
    """The five agent role kinds; the coordination fabric is an entity, not a role."""

    PATIENT_SIDE_SENSING = "patient_side_sensing"
    EDGE_ANALYSIS = "edge_analysis"
    CLINICAL_SITE = "clinical_site"
    MOBILE_CARE_NODE = "mobile_care_node"
    EXPERTISE_SUPPORT = "expertise_support"


#: Roles allowed to execute validation tasks.
VALIDATOR_ROLES = frozenset({RoleKind.EDGE_ANALYSIS, RoleKind.CLINICAL_SITE})


class MetadataKind(enum.Enum):
    WORKFLOW_IDENTIFIER = "workflow_identifier"
    DEADLINE_INDICATOR = "deadline_indicator"
    ROLE_ALIGNMENT_SIGNAL = "role_alignment_signal"
    COMPLETION_STATUS_FLAG = "completion_status_flag"
    ESCALATION_INDICATOR = "escalation_indicator"


@dataclass(frozen=True)
class PayloadClass:
    """Exactly one of: coordination metadata of a given kind, or clinical bytes."""

    category: str  # "metadata" | "clinical"
    kind: Optional[MetadataKind] = None
    clinical_hex: Optional[str] = None

    CATEGORY_METADATA = "metadata"
    CATEGORY_CLINICAL = "clinical"

    @classmethod
    def metadata(cls, kind: MetadataKind) -> "PayloadClass":
        return cls(category=cls.CATEGORY_METADATA, kind=kind)

    @classmethod
    def clinical(cls, data: bytes) -> "PayloadClass":
        return cls(category=cls.CATEGORY_CLINICAL, clinical_hex=data.hex())

    @property
    def is_clinical(self) -> bool:
        return self.category == self.CATEGORY_CLINICAL


class Stage(enum.Enum):
    DETECTION = "detection"
    GROUP_FORMATION = "group_formation"
    VALIDATION = "validation"
    ESCALATION = "escalation"
    COMPLETED = "completed"
    FAILED = "failed"


class FailureReason(enum.Enum):
    GROUP_FORMATION_TIMEOUT = "group_formation_timeout"
    VALIDATION_TIMEOUT = "validation_timeout"
    ESCALATION_TIMEOUT = "escalation_timeout"
    DEADLINE_EXPIRED = "deadline_expired"
    POLICY_REJECTED = "policy_rejected"


@dataclass(frozen=True)
class WorkflowState:
    """Workflow stage, plus outcome parameters for the absorbing states."""

    stage: Stage
    escalated: Optional[bool] = None
    failure_reason: Optional[FailureReason] = None

    @classmethod
    def detection(cls) -> "WorkflowState":
        return cls(Stage.DETECTION)

    @classmethod
    def group_formation(cls) -> "WorkflowState":
        return cls(Stage.GROUP_FORMATION)

    @classmethod
    def validation(cls) -> "WorkflowState":
        return cls(Stage.VALIDATION)

    @classmethod
    def escalation(cls) -> "WorkflowState":
        return cls(Stage.ESCALATION)

    @classmethod
    def completed(cls, escalated: bool) -> "WorkflowState":
        return cls(Stage.COMPLETED, escalated=escalated)

    @classmethod
    def failed(cls, reason: FailureReason) -> "WorkflowState":
        return cls(Stage.FAILED, failure_reason=reason)

    @property
    def is_terminal(self) -> bool:
        return self.stage in (Stage.COMPLETED, Stage.FAILED)

    def label(self) -> str:
        if self.stage is Stage.COMPLETED:
            return f"completed(escalated={str(self.escalated).lower()})"
        if self.stage is Stage.FAILED:
            return f"failed({self.failure_reason.value})"
        return self.stage.value


class WorkflowEvent(enum.Enum):
    ANOMALY_DETECTED = "anomaly_detected"
    GROUP_FORMED = "group_formed"
    GROUP_FORMATION_FAILED = "group_formation_failed"
    VALIDATION_SUCCEEDED = "validation_succeeded"
    VALIDATION_FAILED = "validation_failed"
    STAGE_TIMEOUT = "stage_timeout"
    ESCALATION_ACKED = "escalation_acked"
    DEADLINE_EXPIRED = "deadline_expired"


class TriggerKind(enum.Enum):
    ON_ANOMALY_CONFIRMED = "on_anomaly_confirmed"
    ON_VALIDATION_TIMEOUT_FRACTION = "on_validation_timeout_fraction"
    NEVER = "never"


@dataclass(frozen=True)
class EscalationTrigger:
    kind: TriggerKind
    fraction: Optional[Fraction] = None

    def __post_init__(self) -> None:
        if self.kind is TriggerKind.ON_VALIDATION_TIMEOUT_FRACTION:
            if self.fraction is None or not (0 < self.fraction <= 1):
                raise ValueError("timeout-fraction trigger requires fraction in (0, 1]")
        elif self.fraction is not None:
            raise ValueError(f"trigger {self.kind.value} takes no fraction")


@dataclass(frozen=True)
class WorkflowTemplate:
    template_id: str
    required_roles: frozenset
    total_budget: int
    stage_budget_fractions: dict
    max_rounds_per_stage: int
    escalation_trigger: EscalationTrigger

    def violations(self) -> list[str]:
        """Invariant check; empty list means the template is well formed."""
        problems: list[str] = []
        if not self.template_id:
            problems.append("template_id is empty")
        if not self.required_roles:
            problems.append("required_roles is empty")
        if not self.required_roles & VALIDATOR_ROLES:
            problems.append("required_roles contains no validator role")
        if self.total_budget <= 0:
            problems.append(f"total_budget must be > 0, got {self.total_budget}")
        if self.max_rounds_per_stage < 1:
            problems.append(
                f"max_rounds_per_stage must be >= 1, got {self.max_rounds_per_stage}"
            )
        total = sum(self.stage_budget_fractions.values(), Fraction(0))
        if total > 1:
            problems.append(f"stage budget fractions exceed 1.0 (sum={total})")
        for stage, frac in self.stage_budget_fractions.items():
            if frac < 0 or frac > 1:
                problems.append(f"fraction for {stage.value} outside [0,1]: {frac}")
        return problems

    def stage_budget(self, stage: Stage) -> int:
        """Integer stage budget: floor(total * fraction), exact rational arithmetic."""
        frac = self.stage_budget_fractions.get(stage, Fraction(0))
        return int(self.total_budget * frac)


# --- coordination context ----------------------------------------------------

class EmptyRoleSet(Exception):
    pass


class NonPositiveBudget(Exception):
    pass


@dataclass(frozen=True)
class CoordinationContext:
    """Workflow-scoped binding shared across control tiers; immutable."""

    group_id: str
    workflow_id: str
    deadline: int
    required_roles: frozenset
    origin_domain: str


def bind_context(
    workflow_id: str,
    group_id: str,
    now: int,
    budget: int,
    roles: frozenset,
    origin: str,
) -> CoordinationContext:
    """Bind a context with deadline = now + budget."""
    if budget <= 0:
        raise NonPositiveBudget(f"budget must be > 0, got {budget}")
    if not roles:
        raise EmptyRoleSet("required role set is empty")
    return CoordinationContext(
        group_id=group_id,
        workflow_id=workflow_id,
        deadline=now + budget,
        required_roles=frozenset(roles),
        origin_domain=origin,
    )


def remaining_budget(context: CoordinationContext, now: int) -> int:
    """deadline - now, unclamped; negative means overdue."""
    return context.deadline - now


# --- workflow instance -------------------------------------------------------

@dataclass
class WorkflowInstance:
    """Stateful workflow bookkeeping; owned and mutated only by the fabric."""

    workflow_id: str
    template: WorkflowTemplate
    context: Optional[CoordinationContext]
    state: WorkflowState
    rounds_used: dict = field(default_factory=dict)
    members: dict = field(default_factory=dict)
    timestamps: dict = field(default_factory=dict)


# --- transition function -----------------------------------------------------

class IllegalTransition(Exception):
    """An undefined (state, event) pair: a fabric logic bug, aborts the run."""

    def __init__(self, state: WorkflowState, event: WorkflowEvent):
        self.state = state
        self.event = event
        super().__init__(f"illegal transition: {state.label()} on {event.value}")


def transition(
    state: WorkflowState, event: WorkflowEvent, template: WorkflowTemplate
) -> WorkflowState:
    """Successor state for (state, event) under the template's escalation trigger.

    Absorbing states return themselves for every event. Undefined pairs
    raise IllegalTransition; there are no silent no-ops.
    """
    if state.is_terminal:
        return state

    trigger = template.escalation_trigger.kind
    stage = state.stage

    if stage is Stage.DETECTION:
        if event is WorkflowEvent.ANOMALY_DETECTED:
            return WorkflowState.group_formation()

    elif stage is Stage.GROUP_FORMATION:
        if event is WorkflowEvent.GROUP_FORMED:
            return WorkflowState.validation()
        if event is WorkflowEvent.GROUP_FORMATION_FAILED:
            return WorkflowState.failed(FailureReason.GROUP_FORMATION_TIMEOUT)
        if event is WorkflowEvent.DEADLINE_EXPIRED:
            return WorkflowState.failed(FailureReason.DEADLINE_EXPIRED)

    elif stage is Stage.VALIDATION:
        if event is WorkflowEvent.VALIDATION_SUCCEEDED:
            if trigger is TriggerKind.ON_ANOMALY_CONFIRMED:
                return WorkflowState.escalation()
            return WorkflowState.completed(escalated=False)
        if event is WorkflowEvent.VALIDATION_FAILED:
            return WorkflowState.completed(escalated=False)
        if event is WorkflowEvent.STAGE_TIMEOUT:
            if trigger is TriggerKind.ON_VALIDATION_TIMEOUT_FRACTION:
                return WorkflowState.escalation()
            return WorkflowState.failed(FailureReason.VALIDATION_TIMEOUT)
        if event is WorkflowEvent.DEADLINE_EXPIRED:
            return WorkflowState.failed(FailureReason.DEADLINE_EXPIRED)

    elif stage is Stage.ESCALATION:
        if event is WorkflowEvent.ESCALATION_ACKED:
            return WorkflowState.completed(escalated=True)
        if event is WorkflowEvent.STAGE_TIMEOUT:
            return WorkflowState.failed(FailureReason.ESCALATION_TIMEOUT)
        if event is WorkflowEvent.DEADLINE_EXPIRED:
            return WorkflowState.failed(FailureReason.DEADLINE_EXPIRED)

    raise IllegalTransition(state, event)
