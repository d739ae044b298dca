"""Message schemas and tolerant codecs for the four simulated control interfaces.

The wire format is a canonical JSON document: stable key order (sorted),
compact separators, with optional extensions kept as an *ordered* list of
``[tag, value]`` pairs. Extended-mode decoding reconstructs every
extension, including unknown tags, verbatim; legacy-mode decoding yields
an empty extension view and never errors on unknown tags.

Fixed field names used by fixtures and external tooling: ``GroupID``,
``TimeBudget``, ``coordination_state``, ``deadline_indicator``,
``payload_class``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Optional

from .model import (
    EscalationTrigger,
    MetadataKind,
    PayloadClass,
    RoleKind,
    Stage,
    TriggerKind,
    WorkflowTemplate,
)

# Extension tag names (carried inside extension containers only).
TAG_GROUP_ID = "GroupID"
TAG_TIME_BUDGET = "TimeBudget"
TAG_WORKFLOW_ID = "WorkflowID"
TAG_COORDINATION_STATE = "coordination_state"
TAG_DEADLINE_INDICATOR = "deadline_indicator"
TAG_OUTCOME = "Outcome"
TAG_ANOMALY = "AnomalyDetected"

MODE_LEGACY = "legacy"
MODE_EXTENDED = "extended"


class MalformedDocument(Exception):
    """Syntactically invalid wire document."""


class MissingMandatoryField(Exception):
    """A mandatory field is absent; raised in both decode modes."""


class InvariantViolation(Exception):
    """Message fails its type invariants at encode time."""


class UnknownFlow(Exception):
    """Flow id not present in the scenario topology."""


# --- extension container ------------------------------------------------------

@dataclass(frozen=True)
class ExtensionContainer:
    """Ordered (tag, value) pairs with unique tags; values are JSON-compatible."""

    entries: tuple = ()

    def __post_init__(self) -> None:
        tags = [tag for tag, _ in self.entries]
        if len(tags) != len(set(tags)):
            raise InvariantViolation(f"duplicate extension tags: {tags}")

    @classmethod
    def of(cls, *pairs: tuple) -> "ExtensionContainer":
        return cls(entries=tuple((str(tag), value) for tag, value in pairs))

    def get(self, tag: str, default: Any = None) -> Any:
        for key, value in self.entries:
            if key == tag:
                return value
        return default

    def has(self, tag: str) -> bool:
        return any(key == tag for key, _ in self.entries)

    def with_entry(self, tag: str, value: Any) -> "ExtensionContainer":
        return ExtensionContainer(entries=self.entries + ((tag, value),))

    def __len__(self) -> int:
        return len(self.entries)

    def __bool__(self) -> bool:
        return bool(self.entries)


EMPTY_EXTENSIONS = ExtensionContainer()


# --- message types --------------------------------------------------------

@dataclass(frozen=True)
class CapabilityAdvert:
    node_id: str
    role: RoleKind
    mode: str  # "caip_enabled" | "legacy"
    capabilities: tuple
    payload_class: PayloadClass
    extensions: ExtensionContainer = EMPTY_EXTENSIONS


@dataclass(frozen=True)
class RrcReconfig:
    """RRC-like reconfiguration: mandatory session params, optional context IEs."""

    target: str
    session_params: tuple  # ordered (key, value) string pairs
    payload_class: PayloadClass
    extensions: ExtensionContainer = EMPTY_EXTENSIONS


@dataclass(frozen=True)
class RrcAck:
    node_id: str
    group_id: str
    payload_class: PayloadClass
    extensions: ExtensionContainer = EMPTY_EXTENSIONS


@dataclass(frozen=True)
class SdapAssociationMsg:
    flow_id: str
    group_id: str
    prioritized: bool
    payload_class: PayloadClass
    extensions: ExtensionContainer = EMPTY_EXTENSIONS


@dataclass(frozen=True)
class E2Subscription:
    filter_expr: str
    payload_class: PayloadClass
    extensions: ExtensionContainer = EMPTY_EXTENSIONS


@dataclass(frozen=True)
class E2Report:
    """E2-like report; all coordination fields live in the extension container."""

    node: str
    payload_class: PayloadClass
    extensions: ExtensionContainer = EMPTY_EXTENSIONS


@dataclass(frozen=True)
class E2Control:
    directive: str
    workflow_id: str
    payload_class: PayloadClass
    extensions: ExtensionContainer = EMPTY_EXTENSIONS


@dataclass(frozen=True)
class A1Policy:
    policy_id: str
    template: WorkflowTemplate
    governance_constraints: tuple  # ordered (domain_id, tuple-of-MetadataKind) pairs
    kpi_sinks: tuple
    payload_class: PayloadClass
    extensions: ExtensionContainer = EMPTY_EXTENSIONS

    def allowed_outbound(self, domain_id: str) -> Optional[frozenset]:
        for dom, kinds in self.governance_constraints:
            if dom == domain_id:
                return frozenset(kinds)
        return None


_TYPE_NAMES = {
    CapabilityAdvert: "capability_advert",
    RrcReconfig: "rrc_reconfig",
    RrcAck: "rrc_ack",
    SdapAssociationMsg: "sdap_association",
    E2Subscription: "e2_subscription",
    E2Report: "e2_report",
    E2Control: "e2_control",
    A1Policy: "a1_policy",
}


# --- fraction helpers -------------------------------------------------------

def frac_to_str(f: Fraction) -> str:
    return f"{f.numerator}/{f.denominator}"


def frac_from_str(raw: Any) -> Fraction:
    """Accept 'a/b' strings, decimal strings, ints, and floats (via repr)."""
    if isinstance(raw, Fraction):
        return raw
    if isinstance(raw, int):
        return Fraction(raw)
    if isinstance(raw, float):
        return Fraction(repr(raw))
    if isinstance(raw, str):
        return Fraction(raw)
    raise MalformedDocument(f"cannot parse fraction from {raw!r}")


# --- payload class codec ----------------------------------------------------

def _payload_class_to_doc(pc: PayloadClass) -> dict:
    if pc.category == PayloadClass.CATEGORY_METADATA:
        if pc.kind is None:
            raise InvariantViolation("metadata payload class without kind")
        return {"category": "metadata", "kind": pc.kind.value}
    if pc.category == PayloadClass.CATEGORY_CLINICAL:
        return {"category": "clinical", "clinical_bytes": pc.clinical_hex or ""}
    raise InvariantViolation(f"unknown payload class category {pc.category!r}")


def _payload_class_from_doc(doc: Any) -> PayloadClass:
    if not isinstance(doc, dict) or "category" not in doc:
        raise MissingMandatoryField("payload_class")
    category = doc["category"]
    if category == "metadata":
        try:
            kind = MetadataKind(doc.get("kind"))
        except ValueError as exc:
            raise MalformedDocument(f"unknown metadata kind {doc.get('kind')!r}") from exc
        return PayloadClass.metadata(kind)
    if category == "clinical":
        return PayloadClass(
            category=PayloadClass.CATEGORY_CLINICAL,
            clinical_hex=doc.get("clinical_bytes", ""),
        )
    raise MalformedDocument(f"unknown payload class category {category!r}")


# --- template codec -----------------------------------------------------------

def template_to_doc(template: WorkflowTemplate) -> dict:
    return {
        "template_id": template.template_id,
        "required_roles": sorted(r.value for r in template.required_roles),
        "total_budget": template.total_budget,
        "stage_budget_fractions": {
            stage.value: frac_to_str(frac)
            for stage, frac in sorted(
                template.stage_budget_fractions.items(), key=lambda kv: kv[0].value
            )
        },
        "max_rounds_per_stage": template.max_rounds_per_stage,
        "escalation_trigger": _trigger_to_doc(template.escalation_trigger),
    }


def template_from_doc(doc: Any) -> WorkflowTemplate:
    if not isinstance(doc, dict):
        raise MalformedDocument("template must be an object")
    for key in ("template_id", "required_roles", "total_budget",
                "stage_budget_fractions", "max_rounds_per_stage", "escalation_trigger"):
        if key not in doc:
            raise MissingMandatoryField(f"template.{key}")
    try:
        roles = frozenset(RoleKind(r) for r in doc["required_roles"])
        fractions = {
            Stage(stage): frac_from_str(frac)
            for stage, frac in doc["stage_budget_fractions"].items()
        }
    except ValueError as exc:
        raise MalformedDocument(str(exc)) from exc
    return WorkflowTemplate(
        template_id=doc["template_id"],
        required_roles=roles,
        total_budget=int(doc["total_budget"]),
        stage_budget_fractions=fractions,
        max_rounds_per_stage=int(doc["max_rounds_per_stage"]),
        escalation_trigger=_trigger_from_doc(doc["escalation_trigger"]),
    )


def _trigger_to_doc(trigger: EscalationTrigger) -> dict:
    doc: dict = {"kind": trigger.kind.value}
    if trigger.fraction is not None:
        doc["fraction"] = frac_to_str(trigger.fraction)
    return doc


def _trigger_from_doc(doc: Any) -> EscalationTrigger:
    if not isinstance(doc, dict) or "kind" not in doc:
        raise MissingMandatoryField("escalation_trigger.kind")
    try:
        kind = TriggerKind(doc["kind"])
    except ValueError as exc:
        raise MalformedDocument(f"unknown trigger kind {doc['kind']!r}") from exc
    fraction = frac_from_str(doc["fraction"]) if "fraction" in doc else None
    return EscalationTrigger(kind=kind, fraction=fraction)


# --- encode -------------------------------------------------------------------

def encode_message(msg: Any) -> str:
    """Canonical deterministic serialization: equal messages, equal bytes."""
    type_name = _TYPE_NAMES.get(type(msg))
    if type_name is None:
        raise InvariantViolation(f"not a control message: {type(msg).__name__}")

    doc: dict = {"type": type_name}
    if type_name == "capability_advert":
        if not msg.node_id:
            raise InvariantViolation("capability_advert.node_id is empty")
        doc.update(
            node_id=msg.node_id,
            role=msg.role.value,
            mode=msg.mode,
            capabilities=list(msg.capabilities),
        )
    elif type_name == "rrc_reconfig":
        if not msg.target:
            raise InvariantViolation("rrc_reconfig.target is empty")
        doc.update(target=msg.target, session_params=[list(p) for p in msg.session_params])
    elif type_name == "rrc_ack":
        doc.update(node_id=msg.node_id, group_id=msg.group_id)
    elif type_name == "sdap_association":
        doc.update(flow_id=msg.flow_id, group_id=msg.group_id, prioritized=msg.prioritized)
    elif type_name == "e2_subscription":
        doc.update(filter=msg.filter_expr)
    elif type_name == "e2_report":
        if not msg.node:
            raise InvariantViolation("e2_report.node is empty")
        doc.update(node=msg.node)
    elif type_name == "e2_control":
        doc.update(directive=msg.directive, workflow_id=msg.workflow_id)
    elif type_name == "a1_policy":
        doc.update(
            policy_id=msg.policy_id,
            template=template_to_doc(msg.template),
            governance_constraints=[
                [dom, sorted(k.value for k in kinds)]
                for dom, kinds in msg.governance_constraints
            ],
            kpi_sinks=list(msg.kpi_sinks),
        )
    doc["payload_class"] = _payload_class_to_doc(msg.payload_class)
    doc["extensions"] = [[tag, value] for tag, value in msg.extensions.entries]
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


# --- decode -------------------------------------------------------------------

def _require(doc: dict, *keys: str) -> None:
    for key in keys:
        if key not in doc:
            raise MissingMandatoryField(key)


def parse_document(raw: str) -> dict:
    """Parse a wire document to its JSON object; syntax errors only."""
    try:
        doc = json.loads(raw)
    except (json.JSONDecodeError, TypeError) as exc:
        raise MalformedDocument(str(exc)) from exc
    if not isinstance(doc, dict) or "type" not in doc:
        raise MalformedDocument("wire document must be an object with a 'type' field")
    return doc


def decode_message(raw: str, mode: str = MODE_EXTENDED) -> Any:
    """Decode a wire document.

    Extended mode reconstructs all extensions including unknown tags;
    legacy mode returns the message with an empty extension view and never
    errors on unknown tags. Missing mandatory fields fail in both modes.
    """
    if mode not in (MODE_LEGACY, MODE_EXTENDED):
        raise ValueError(f"unknown decode mode {mode!r}")
    doc = parse_document(raw)

    if mode == MODE_EXTENDED:
        raw_ext = doc.get("extensions", [])
        if not isinstance(raw_ext, list):
            raise MalformedDocument("extensions must be a list of [tag, value] pairs")
        try:
            extensions = ExtensionContainer(
                entries=tuple((str(pair[0]), pair[1]) for pair in raw_ext)
            )
        except (IndexError, TypeError) as exc:
            raise MalformedDocument("bad extension entry") from exc
    else:
        extensions = EMPTY_EXTENSIONS

    _require(doc, "payload_class")
    payload_class = _payload_class_from_doc(doc["payload_class"])
    type_name = doc["type"]

    if type_name == "capability_advert":
        _require(doc, "node_id", "role", "mode", "capabilities")
        try:
            role = RoleKind(doc["role"])
        except ValueError as exc:
            raise MalformedDocument(f"unknown role {doc['role']!r}") from exc
        return CapabilityAdvert(
            node_id=doc["node_id"],
            role=role,
            mode=doc["mode"],
            capabilities=tuple(doc["capabilities"]),
            payload_class=payload_class,
            extensions=extensions,
        )
    if type_name == "rrc_reconfig":
        _require(doc, "target", "session_params")
        return RrcReconfig(
            target=doc["target"],
            session_params=tuple((p[0], p[1]) for p in doc["session_params"]),
            payload_class=payload_class,
            extensions=extensions,
        )
    if type_name == "rrc_ack":
        _require(doc, "node_id", "group_id")
        return RrcAck(
            node_id=doc["node_id"],
            group_id=doc["group_id"],
            payload_class=payload_class,
            extensions=extensions,
        )
    if type_name == "sdap_association":
        _require(doc, "flow_id", "group_id", "prioritized")
        return SdapAssociationMsg(
            flow_id=doc["flow_id"],
            group_id=doc["group_id"],
            prioritized=bool(doc["prioritized"]),
            payload_class=payload_class,
            extensions=extensions,
        )
    if type_name == "e2_subscription":
        _require(doc, "filter")
        return E2Subscription(
            filter_expr=doc["filter"], payload_class=payload_class, extensions=extensions
        )
    if type_name == "e2_report":
        _require(doc, "node")
        return E2Report(node=doc["node"], payload_class=payload_class, extensions=extensions)
    if type_name == "e2_control":
        _require(doc, "directive", "workflow_id")
        return E2Control(
            directive=doc["directive"],
            workflow_id=doc["workflow_id"],
            payload_class=payload_class,
            extensions=extensions,
        )
    if type_name == "a1_policy":
        _require(doc, "policy_id", "template", "governance_constraints", "kpi_sinks")
        constraints = tuple(
            (entry[0], tuple(MetadataKind(k) for k in entry[1]))
            for entry in doc["governance_constraints"]
        )
        return A1Policy(
            policy_id=doc["policy_id"],
            template=template_from_doc(doc["template"]),
            governance_constraints=constraints,
            kpi_sinks=tuple(doc["kpi_sinks"]),
            payload_class=payload_class,
            extensions=extensions,
        )
    raise MalformedDocument(f"unknown message type {type_name!r}")


def strip_extensions(raw: str) -> str:
    """Return the document with an emptied extension container (canonical form)."""
    doc = parse_document(raw)
    doc["extensions"] = []
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


# --- SDAP association table -----------------------------------------------------

class SdapTable:
    """flow_id -> (group_id, prioritized); owned by the fabric.

    Re-association to a different group replaces the prior entry
    (last-writer-wins); re-association to the same group is idempotent.
    """

    def __init__(self, known_flows) -> None:
        self.known_flows = frozenset(known_flows)
        self.entries: dict = {}

    def lookup(self, flow_id: str):
        return self.entries.get(flow_id)

    def is_prioritized(self, flow_id: str) -> bool:
        entry = self.entries.get(flow_id)
        return bool(entry and entry[1])


def associate_flow(table: SdapTable, flow_id: str, group_id: str) -> SdapTable:
    if flow_id not in table.known_flows:
        raise UnknownFlow(flow_id)
    table.entries[flow_id] = (group_id, True)
    return table


# --- policy validation ------------------------------------------------------

def validate_policy(policy: A1Policy, scenario_domains, strict: bool = True) -> list[str]:
    """All violations found; an empty list means the policy is accepted."""
    violations = [f"template: {problem}" for problem in policy.template.violations()]
    if not policy.policy_id:
        violations.append("policy_id is empty")
    seen = set()
    for dom, _kinds in policy.governance_constraints:
        if dom in seen:
            violations.append(f"duplicate governance constraint for domain {dom}")
        seen.add(dom)
    if strict:
        for dom in sorted(scenario_domains):
            if dom not in seen:
                violations.append(
                    f"domain {dom} has no governance constraints (strict mode default-deny)"
                )
    return violations
