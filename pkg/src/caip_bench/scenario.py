"""Scenario configuration: schema, YAML loader, validation, bundled scenarios."""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field
from typing import Any, Optional

import yaml

from .kernel import LinkModel
from .model import MetadataKind, RoleKind
from .wire import A1Policy, frac_from_str, template_from_doc
from .model import PayloadClass
from .knowledge import InvalidPolicy
from . import wire

FABRIC_ENTITY = "fabric"
KNOWLEDGE_ENTITY = "knowledge"


class ParseError(Exception):
    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        self.line = line
        self.column = column
        loc = f" at line {line}, column {column}" if line is not None else ""
        super().__init__(f"{message}{loc}")


class UnresolvedReference(Exception):
    pass


@dataclass(frozen=True)
class NodeConfig:
    node_id: str
    role: RoleKind
    domain: str
    mode: str
    capabilities: tuple = ()
    processing_time: int = 10


@dataclass(frozen=True)
class ScriptEvent:
    kind: str  # "anomaly" | "reprovision" | "misdeclared"
    time: int
    origin: Optional[str] = None  # anomaly origin / misdeclared src
    outcome: Optional[str] = None  # "confirmed" | "refuted"
    template_id: Optional[str] = None
    dst: Optional[str] = None  # misdeclared destination entity
    policy_index: Optional[int] = None  # reprovision: index into policies


@dataclass(frozen=True)
class Parameters:
    near_rt_envelope: int = 100
    base_round_interval: int = 100
    non_rt_cadence: int = 1000
    strict_governance: bool = True


@dataclass
class Scenario:
    name: str
    seed: int
    run_until: int
    parameters: Parameters
    domains: tuple
    fabric_domain: str
    knowledge_domain: str
    nodes: tuple  # NodeConfig
    flows: dict  # flow_id -> node_id
    links: tuple  # LinkModel, directed
    policies: tuple  # A1Policy
    script: tuple  # ScriptEvent

    def node(self, node_id: str) -> NodeConfig:
        for cfg in self.nodes:
            if cfg.node_id == node_id:
                return cfg
        raise UnresolvedReference(node_id)

    def entity_domain(self, entity: str) -> str:
        if entity == FABRIC_ENTITY:
            return self.fabric_domain
        if entity == KNOWLEDGE_ENTITY:
            return self.knowledge_domain
        return self.node(entity).domain

    def flow_for_node(self, node_id: str) -> Optional[str]:
        for flow_id, owner in self.flows.items():
            if owner == node_id:
                return flow_id
        return None


def _policy_from_doc(doc: dict) -> A1Policy:
    template = template_from_doc(doc["template"])
    constraints_doc = doc.get("governance_constraints", {})
    if isinstance(constraints_doc, dict):
        items = sorted(constraints_doc.items())
    else:
        items = [(entry["domain"], entry["allowed"]) for entry in constraints_doc]
    constraints = tuple(
        (dom, tuple(MetadataKind(kind) for kind in kinds)) for dom, kinds in items
    )
    return A1Policy(
        policy_id=doc["policy_id"],
        template=template,
        governance_constraints=constraints,
        kpi_sinks=tuple(doc.get("kpi_sinks", (KNOWLEDGE_ENTITY,))),
        payload_class=PayloadClass.metadata(MetadataKind.WORKFLOW_IDENTIFIER),
    )


def scenario_from_doc(doc: dict, strict_override: Optional[bool] = None) -> Scenario:
    """Build and fully validate a Scenario from its plain-dict form.

    ``strict_override`` replaces the scenario's own strict_governance flag
    before validation, so a caller can relax or tighten a scenario file.
    """
    try:
        params_doc = doc.get("parameters", {})
        strict = bool(params_doc.get("strict_governance", True))
        if strict_override is not None:
            strict = strict_override
        parameters = Parameters(
            near_rt_envelope=int(params_doc.get("near_rt_envelope_ms", 100)),
            base_round_interval=int(params_doc.get("base_round_interval_ms", 100)),
            non_rt_cadence=int(params_doc.get("non_rt_cadence_ms", 1000)),
            strict_governance=strict,
        )
        domains = tuple(
            d["id"] if isinstance(d, dict) else str(d) for d in doc.get("domains", ())
        )
        nodes = tuple(
            NodeConfig(
                node_id=n["id"],
                role=RoleKind(n["role"]),
                domain=n["domain"],
                mode=n.get("mode", "caip_enabled"),
                capabilities=tuple(n.get("capabilities", ())),
                processing_time=int(n.get("processing_time_ms", 10)),
            )
            for n in doc.get("nodes", ())
        )
        flows = {f["id"]: f["node"] for f in doc.get("flows", ())}
        links = []
        for entry in doc.get("links", ()):
            link = LinkModel(
                src=entry["src"],
                dst=entry["dst"],
                base_latency=int(entry["base_latency_ms"]),
                jitter_bound=int(entry.get("jitter_ms", 0)),
                priority_discount=int(entry.get("priority_discount_ms", 0)),
            )
            links.append(link)
            if entry.get("symmetric", True):
                links.append(
                    LinkModel(
                        src=link.dst,
                        dst=link.src,
                        base_latency=link.base_latency,
                        jitter_bound=link.jitter_bound,
                        priority_discount=link.priority_discount,
                    )
                )
        policies = tuple(_policy_from_doc(p) for p in doc.get("policies", ()))
        script = tuple(
            ScriptEvent(
                kind=s["kind"],
                time=int(s["at_ms"]),
                origin=s.get("origin"),
                outcome=s.get("outcome"),
                template_id=s.get("template_id"),
                dst=s.get("dst"),
                policy_index=s.get("policy_index"),
            )
            for s in doc.get("script", ())
        )
        scenario = Scenario(
            name=str(doc.get("name", "unnamed")),
            seed=int(doc.get("seed", 1)),
            run_until=int(doc["run_until"]),
            parameters=parameters,
            domains=domains,
            fabric_domain=doc["fabric"]["domain"],
            knowledge_domain=doc.get("knowledge", {}).get(
                "domain", doc["fabric"]["domain"]
            ),
            nodes=nodes,
            flows=flows,
            links=tuple(links),
            policies=policies,
            script=script,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad scenario structure: {exc!r}") from exc
    validate_scenario(scenario)
    return scenario


def validate_scenario(scenario: Scenario) -> None:
    """All-invariant check; raises UnresolvedReference or InvalidPolicy."""
    domain_set = set(scenario.domains)
    node_ids = {cfg.node_id for cfg in scenario.nodes}
    if len(node_ids) != len(scenario.nodes):
        raise UnresolvedReference("duplicate node ids")
    entity_ids = node_ids | {FABRIC_ENTITY, KNOWLEDGE_ENTITY}

    if scenario.fabric_domain not in domain_set:
        raise UnresolvedReference(f"fabric domain {scenario.fabric_domain}")
    if scenario.knowledge_domain not in domain_set:
        raise UnresolvedReference(f"knowledge domain {scenario.knowledge_domain}")
    for cfg in scenario.nodes:
        if cfg.domain not in domain_set:
            raise UnresolvedReference(f"domain {cfg.domain} of node {cfg.node_id}")
    for flow_id, owner in scenario.flows.items():
        if owner not in node_ids:
            raise UnresolvedReference(f"flow {flow_id} references unknown node {owner}")

    link_pairs = set()
    for link in scenario.links:
        for endpoint in (link.src, link.dst):
            if endpoint not in entity_ids:
                raise UnresolvedReference(f"link endpoint {endpoint}")
        link_pairs.add((link.src, link.dst))
    for cfg in scenario.nodes:
        if (FABRIC_ENTITY, cfg.node_id) not in link_pairs or (
            cfg.node_id,
            FABRIC_ENTITY,
        ) not in link_pairs:
            raise UnresolvedReference(
                f"no fabric link path for node {cfg.node_id}"
            )

    from .wire import validate_policy  # local import to avoid cycle at module load

    violations = []
    for policy in scenario.policies:
        for violation in validate_policy(
            policy, domain_set, strict=scenario.parameters.strict_governance
        ):
            violations.append(f"{policy.policy_id}: {violation}")
    if violations:
        raise InvalidPolicy(violations)

    def matched_policy(template_id):
        if template_id:
            for policy in scenario.policies:
                if policy.template.template_id == template_id:
                    return policy
            raise UnresolvedReference(f"script references template {template_id}")
        return scenario.policies[0] if scenario.policies else None

    for event in scenario.script:
        if event.time > scenario.run_until:
            raise UnresolvedReference(
                f"script event at {event.time} after run_until {scenario.run_until}"
            )
        if event.kind == "anomaly":
            if event.origin not in node_ids:
                raise UnresolvedReference(f"anomaly origin {event.origin}")
            if scenario.node(event.origin).mode != "caip_enabled":
                raise UnresolvedReference(
                    f"anomaly origin {event.origin} is not coordination-capable"
                )
            if event.outcome not in ("confirmed", "refuted"):
                raise UnresolvedReference(
                    f"anomaly outcome must be confirmed|refuted, got {event.outcome}"
                )
            policy = matched_policy(event.template_id)
            if policy is not None:
                uplink = next(
                    link for link in scenario.links
                    if link.src == event.origin and link.dst == FABRIC_ENTITY
                )
                latest_deadline = (
                    event.time
                    + uplink.base_latency
                    + uplink.jitter_bound
                    + policy.template.total_budget
                )
                if latest_deadline > scenario.run_until:
                    raise UnresolvedReference(
                        f"anomaly at {event.time} cannot terminate by run_until "
                        f"(needs {latest_deadline})"
                    )
        elif event.kind == "misdeclared":
            if event.origin not in node_ids:
                raise UnresolvedReference(f"misdeclared src {event.origin}")
            if event.dst not in entity_ids:
                raise UnresolvedReference(f"misdeclared dst {event.dst}")
        elif event.kind == "reprovision":
            if event.policy_index is None or not (
                0 <= event.policy_index < len(scenario.policies)
            ):
                raise UnresolvedReference(
                    f"reprovision policy_index {event.policy_index}"
                )
        else:
            raise UnresolvedReference(f"unknown script event kind {event.kind}")


def loads_scenario(text: str, strict_override: Optional[bool] = None) -> Scenario:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        if mark is not None:
            raise ParseError(str(exc), line=mark.line + 1, column=mark.column + 1) from exc
        raise ParseError(str(exc)) from exc
    if not isinstance(doc, dict):
        raise ParseError("scenario file must contain a mapping")
    return scenario_from_doc(doc, strict_override=strict_override)


def load_scenario(path: str, strict_override: Optional[bool] = None) -> Scenario:
    with open(path, "r", encoding="utf-8") as handle:
        return loads_scenario(handle.read(), strict_override=strict_override)


def load_bundled(name: str, strict_override: Optional[bool] = None) -> Scenario:
    """Load a scenario shipped with the package, e.g. 'icu_reference'."""
    resource = importlib.resources.files("caip_bench") / "scenarios" / f"{name}.yaml"
    return loads_scenario(resource.read_text(encoding="utf-8"),
                          strict_override=strict_override)
