"""Role-typed node behaviors: adverts, context acceptance, validation, reporting.

Nodes are actors owned by the simulation thread. Clinical payloads live in
``local_store`` and are never placed into a message by this module; only
coordination metadata is emitted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .model import MetadataKind, PayloadClass, RoleKind, VALIDATOR_ROLES
from . import wire
from .wire import (
    CapabilityAdvert,
    E2Report,
    ExtensionContainer,
    RrcAck,
    RrcReconfig,
)

MODE_CAIP_ENABLED = "caip_enabled"
MODE_LEGACY = "legacy"

#: Capability strings advertised only by coordination-capable nodes.
COORDINATION_CAPABILITIES = ("coordination_context", "deadline_signaling")


class NotAValidatorRole(Exception):
    pass


class NotAMember(Exception):
    pass


class NoSuchContext(Exception):
    pass


@dataclass
class BoundContext:
    """A node's local view of a coordination context received over RRC."""

    group_id: str
    workflow_id: str
    deadline: int  # local absolute deadline: arrival time + TimeBudget


@dataclass
class AgentNode:
    node_id: str
    role: RoleKind
    domain: str
    mode: str = MODE_CAIP_ENABLED
    capabilities: tuple = ()
    processing_time: int = 10
    flow_id: Optional[str] = None
    local_store: list = field(default_factory=list)  # clinical payloads, never emitted

    # runtime state, owned by the simulation thread
    session_params: dict = field(default_factory=dict)
    contexts: dict = field(default_factory=dict)  # workflow_id -> BoundContext
    stage_view: dict = field(default_factory=dict)  # workflow_id -> stage string
    active_tasks: set = field(default_factory=set)

    @property
    def caip_enabled(self) -> bool:
        return self.mode == MODE_CAIP_ENABLED

    def context_for_group(self, group_id: str) -> Optional[BoundContext]:
        for ctx in self.contexts.values():
            if ctx.group_id == group_id:
                return ctx
        return None


def advertise(node: AgentNode) -> CapabilityAdvert:
    """Capability advert; legacy nodes omit coordination capability strings."""
    capabilities = tuple(node.capabilities)
    if node.caip_enabled:
        capabilities = capabilities + COORDINATION_CAPABILITIES
    return CapabilityAdvert(
        node_id=node.node_id,
        role=node.role,
        mode=node.mode,
        capabilities=capabilities,
        payload_class=PayloadClass.metadata(MetadataKind.ROLE_ALIGNMENT_SIGNAL),
    )


def handle_rrc(node: AgentNode, raw_doc: str, now: int) -> Optional[RrcAck]:
    """Apply an RRC reconfiguration addressed to this node.

    CAIP-enabled nodes decode in extended mode, bind the carried context,
    and return an Ack; legacy nodes decode in legacy mode, apply the
    mandatory session parameters, and return None (silent ignore). A
    non-positive TimeBudget binds an already-expired context and withholds
    the Ack.
    """
    mode = wire.MODE_EXTENDED if node.caip_enabled else wire.MODE_LEGACY
    msg = wire.decode_message(raw_doc, mode)
    if not isinstance(msg, RrcReconfig):
        raise wire.MalformedDocument(f"expected rrc_reconfig, got {type(msg).__name__}")
    node.session_params.update(dict(msg.session_params))
    if not node.caip_enabled:
        return None

    group_id = msg.extensions.get(wire.TAG_GROUP_ID)
    if group_id is None:
        return None
    budget = msg.extensions.get(wire.TAG_TIME_BUDGET, 0)
    workflow_id = msg.extensions.get(wire.TAG_WORKFLOW_ID, group_id)
    node.contexts[workflow_id] = BoundContext(
        group_id=group_id, workflow_id=workflow_id, deadline=now + max(0, int(budget))
    )
    node.stage_view.setdefault(workflow_id, "group_formation")
    if int(budget) <= 0:
        return None  # bound but already expired: no alignment ack
    return RrcAck(
        node_id=node.node_id,
        group_id=group_id,
        payload_class=PayloadClass.metadata(MetadataKind.ROLE_ALIGNMENT_SIGNAL),
    )


@dataclass(frozen=True)
class ValidationTask:
    workflow_id: str
    task_id: str


def perform_validation(node: AgentNode, task: ValidationTask, now: int) -> int:
    """Accept a validation task; returns the completion time (now + processing).

    The scripted outcome is taken from the node's local clinical context at
    completion time; only a completion-status flag ever leaves the node.
    """
    if node.role not in VALIDATOR_ROLES:
        raise NotAValidatorRole(f"{node.role.value} cannot validate")
    if task.workflow_id not in node.contexts:
        raise NotAMember(f"{node.node_id} holds no context for {task.workflow_id}")
    node.stage_view[task.workflow_id] = "validation"
    node.active_tasks.add(task.task_id)
    return now + node.processing_time


def build_outcome_report(
    node: AgentNode, workflow_id: str, outcome: str, now: int
) -> E2Report:
    """Completion-status report for a finished validation task."""
    ctx = node.contexts[workflow_id]
    return E2Report(
        node=node.node_id,
        payload_class=PayloadClass.metadata(MetadataKind.COMPLETION_STATUS_FLAG),
        extensions=ExtensionContainer.of(
            (wire.TAG_WORKFLOW_ID, workflow_id),
            (wire.TAG_OUTCOME, outcome),
            (wire.TAG_DEADLINE_INDICATOR, ctx.deadline - now),
        ),
    )


def report_state(node: AgentNode, workflow_id: str, now: int) -> E2Report:
    """Workflow-state report with the remaining deadline budget."""
    if not node.caip_enabled or workflow_id not in node.contexts:
        raise NoSuchContext(f"{node.node_id} holds no context for {workflow_id}")
    ctx = node.contexts[workflow_id]
    return E2Report(
        node=node.node_id,
        payload_class=PayloadClass.metadata(MetadataKind.DEADLINE_INDICATOR),
        extensions=ExtensionContainer.of(
            (wire.TAG_WORKFLOW_ID, workflow_id),
            (wire.TAG_COORDINATION_STATE, node.stage_view.get(workflow_id, "group_formation")),
            (wire.TAG_DEADLINE_INDICATOR, ctx.deadline - now),
        ),
    )


def build_escalation_ack(node: AgentNode, workflow_id: str) -> E2Report:
    """Expertise-support acknowledgment of an escalation directive."""
    return E2Report(
        node=node.node_id,
        payload_class=PayloadClass.metadata(MetadataKind.ESCALATION_INDICATOR),
        extensions=ExtensionContainer.of(
            (wire.TAG_WORKFLOW_ID, workflow_id),
            ("EscalationAck", True),
        ),
    )


def build_anomaly_report(node: AgentNode, workflow_id: str) -> E2Report:
    """Anomaly detection report that triggers workflow instantiation."""
    return E2Report(
        node=node.node_id,
        payload_class=PayloadClass.metadata(MetadataKind.WORKFLOW_IDENTIFIER),
        extensions=ExtensionContainer.of(
            (wire.TAG_WORKFLOW_ID, workflow_id),
            (wire.TAG_ANOMALY, True),
        ),
    )
