"""Run loop: executes a scenario to quiescence and emits trace/KPI/audit artifacts.

Every inter-entity message is encoded at send time, delayed by its link
model, gated by the governance guard at delivery, and decoded by the
receiving entity in its own mode. The run trace is a flat tab-separated
file with columns (time, seq, entity, kind, detail); lines appear in
event pop order, and identical (scenario, seed) pairs produce
byte-identical artifacts.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Any, Optional

from . import agents, wire
from .agents import AgentNode, ValidationTask
from .fabric import CoordinationFabric
from .governance import GovernanceGuard, VERDICT_ALLOW
from .kernel import EventQueue, LinkModel, Pcg32, SimEvent, sample_link_delay
from .knowledge import (
    InvalidPolicy,
    KpiStore,
    aggregate,
    next_provision_slot,
    provision,
)
from .model import MetadataKind, PayloadClass
from .scenario import FABRIC_ENTITY, KNOWLEDGE_ENTITY, Scenario, UnresolvedReference
from .wire import (
    CapabilityAdvert,
    E2Control,
    E2Report,
    ExtensionContainer,
    RrcAck,
    RrcReconfig,
)

TRACE_COLUMNS = ("time", "seq", "entity", "kind", "detail")
AUDIT_COLUMNS = ("time", "src_domain", "dst_domain", "class", "verdict")


@dataclass
class RunResult:
    scenario: Scenario
    seed: int
    trace_lines: list
    kpi_store: KpiStore
    guard: GovernanceGuard
    final_states: dict  # workflow_id -> state label

    def trace_text(self) -> str:
        header = "\t".join(TRACE_COLUMNS)
        return "\n".join([header] + self.trace_lines) + "\n"

    def audit_text(self) -> str:
        header = "\t".join(AUDIT_COLUMNS)
        lines = [header] + [r.flat_line() for r in self.guard.audit_log]
        return "\n".join(lines) + "\n"

    def report(self):
        return aggregate(self.kpi_store)


class SimulationRun:
    """One deterministic execution of a scenario; also the fabric's services."""

    def __init__(
        self,
        scenario: Scenario,
        seed_override: Optional[int] = None,
        strip_legacy_extensions: bool = False,
    ) -> None:
        self.scenario = scenario
        self.seed = scenario.seed if seed_override is None else seed_override
        self.strip_legacy_extensions = strip_legacy_extensions
        self.queue = EventQueue()
        self.rng = Pcg32(self.seed)
        self.trace_lines: list = []
        self.kpi_store = KpiStore()
        self.guard = GovernanceGuard(strict=scenario.parameters.strict_governance)
        self.nodes = {
            cfg.node_id: AgentNode(
                node_id=cfg.node_id,
                role=cfg.role,
                domain=cfg.domain,
                mode=cfg.mode,
                capabilities=cfg.capabilities,
                processing_time=cfg.processing_time,
                flow_id=scenario.flow_for_node(cfg.node_id),
            )
            for cfg in scenario.nodes
        }
        self.links = {(link.src, link.dst): link for link in scenario.links}
        flow_bindings = {
            node_id: node.flow_id
            for node_id, node in self.nodes.items()
            if node.flow_id is not None
        }
        self.fabric = CoordinationFabric(
            services=self,
            domain=scenario.fabric_domain,
            base_round_interval=scenario.parameters.base_round_interval,
            near_rt_envelope=scenario.parameters.near_rt_envelope,
            flow_bindings=flow_bindings,
            known_flows=scenario.flows.keys(),
        )
        self._workflow_counter = 0
        self._outcome_oracle: dict = {}  # workflow_id -> scripted outcome
        self._current_time = 0
        self._current_seq = 0

    # --- services used by the fabric and node handlers -----------------------

    @property
    def strict_governance(self) -> bool:
        return self.scenario.parameters.strict_governance

    def trace(self, entity: str, kind: str, detail: str) -> None:
        self.trace_lines.append(
            f"{self._current_time}\t{self._current_seq}\t{entity}\t{kind}\t{detail}"
        )

    def kpi(self, record) -> None:
        self.kpi_store.record(record)
        self.trace(KNOWLEDGE_ENTITY, "kpi", f"{record.kind.value} {record.workflow_id}")

    def set_timer(self, fire_at: int, payload: dict) -> None:
        self.queue.schedule(
            fire_at, SimEvent.KIND_TIMER, {"owner": FABRIC_ENTITY, **payload}
        )

    def send(self, src: str, dst: str, msg: Any, prioritized: bool = False) -> None:
        link = self.links.get((src, dst))
        if link is None:
            raise UnresolvedReference(f"no link {src} -> {dst}")
        raw = wire.encode_message(msg)
        delay = sample_link_delay(link, self.rng, prioritized)
        self.queue.schedule(
            self.queue.clock + delay,
            SimEvent.KIND_DELIVERY,
            {"src": src, "dst": dst, "raw": raw, "prioritized": prioritized},
        )

    # --- run loop -----------------------------------------------------------------

    def run(self) -> RunResult:
        scenario = self.scenario

        self.queue.schedule(0, SimEvent.KIND_INJECTION, {"kind": "provision"})
        self.queue.schedule(0, SimEvent.KIND_INJECTION, {"kind": "advertise"})
        for event in scenario.script:
            fire_at = event.time
            if event.kind == "reprovision":
                fire_at = next_provision_slot(
                    event.time, scenario.parameters.non_rt_cadence
                )
            self.queue.schedule(
                fire_at, SimEvent.KIND_INJECTION, {"kind": event.kind, "event": event}
            )

        while len(self.queue):
            event = self.queue.advance()
            if event.fire_at > scenario.run_until:
                break
            self._current_time = event.fire_at
            self._current_seq = event.seq
            if event.kind == SimEvent.KIND_INJECTION:
                self._handle_injection(event.payload)
            elif event.kind == SimEvent.KIND_DELIVERY:
                self._handle_delivery(event.payload)
            elif event.kind == SimEvent.KIND_TIMER:
                self._handle_timer(event.payload)

        final_states = {
            wf: run.instance.state.label() for wf, run in self.fabric.runs.items()
        }
        return RunResult(
            scenario=scenario,
            seed=self.seed,
            trace_lines=self.trace_lines,
            kpi_store=self.kpi_store,
            guard=self.guard,
            final_states=final_states,
        )

    # --- injections ------------------------------------------------------------

    def _handle_injection(self, payload: dict) -> None:
        kind = payload["kind"]
        now = self.queue.clock
        if kind == "provision":
            provision(
                list(self.scenario.policies),
                self.fabric,
                set(self.scenario.domains),
                strict=self.strict_governance,
            )
            for policy in self.scenario.policies:
                self.guard.set_constraints(policy.governance_constraints)
            self.trace(
                KNOWLEDGE_ENTITY,
                "provision",
                " ".join(p.policy_id for p in self.scenario.policies) or "none",
            )
        elif kind == "advertise":
            for node_id in sorted(self.nodes):
                node = self.nodes[node_id]
                self.send(node_id, FABRIC_ENTITY, agents.advertise(node))
                self.trace(node_id, "advertise", f"role={node.role.value}")
        elif kind == "anomaly":
            script = payload["event"]
            self._workflow_counter += 1
            workflow_id = f"wf-{self._workflow_counter:04d}"
            self._outcome_oracle[workflow_id] = script.outcome
            node = self.nodes[script.origin]
            self.trace(script.origin, "stage_enter", f"{workflow_id} detection")
            report = agents.build_anomaly_report(node, workflow_id)
            if script.template_id:
                report = E2Report(
                    node=report.node,
                    payload_class=report.payload_class,
                    extensions=report.extensions.with_entry(
                        "TemplateID", script.template_id
                    ),
                )
            self.send(script.origin, FABRIC_ENTITY, report)
        elif kind == "misdeclared":
            script = payload["event"]
            rogue = E2Report(
                node=script.origin,
                payload_class=PayloadClass.metadata(MetadataKind.COMPLETION_STATUS_FLAG),
                extensions=ExtensionContainer.of(
                    ("clinical_bytes", "deadbeef"),
                ),
            )
            self.trace(script.origin, "misdeclared_inject", f"dst={script.dst}")
            self.send(script.origin, script.dst, rogue)
        elif kind == "reprovision":
            script = payload["event"]
            policy = self.scenario.policies[script.policy_index]
            self.fabric.install_policies(list(self.scenario.policies))
            self.guard.set_constraints(policy.governance_constraints)
            self.trace(KNOWLEDGE_ENTITY, "reprovision", policy.policy_id)

    # --- deliveries -------------------------------------------------------------

    def _handle_delivery(self, payload: dict) -> None:
        now = self.queue.clock
        src, dst, raw = payload["src"], payload["dst"], payload["raw"]
        src_domain = self.scenario.entity_domain(src)
        dst_domain = self.scenario.entity_domain(dst)
        record = self.guard.gate(raw, src_domain, dst_domain, now)
        msg_type = record.msg_type
        if record.verdict != VERDICT_ALLOW:
            self.trace(dst, "deny", f"{src}->{dst} {msg_type} ({record.reason})")
            return
        self.trace(dst, "deliver", f"{src}->{dst} {msg_type}")
        if dst == FABRIC_ENTITY:
            self._deliver_to_fabric(raw, src_domain, now)
        elif dst == KNOWLEDGE_ENTITY:
            pass  # the knowledge tier consumes KPI events directly
        else:
            self._deliver_to_node(self.nodes[dst], raw, now)

    def _deliver_to_fabric(self, raw: str, src_domain: str, now: int) -> None:
        msg = wire.decode_message(raw, wire.MODE_EXTENDED)
        if isinstance(msg, CapabilityAdvert):
            self.fabric.on_advert(msg, now)
            self.fabric.set_roster_domain(msg.node_id, src_domain)
        elif isinstance(msg, RrcAck):
            self.fabric.on_rrc_ack(msg, now)
        elif isinstance(msg, E2Report):
            self.fabric.on_e2_report(msg, src_domain, now)
        else:
            self.trace(FABRIC_ENTITY, "ignore", f"unhandled {type(msg).__name__}")

    def _deliver_to_node(self, node: AgentNode, raw: str, now: int) -> None:
        if self.strip_legacy_extensions and not node.caip_enabled:
            raw = wire.strip_extensions(raw)
        mode = wire.MODE_EXTENDED if node.caip_enabled else wire.MODE_LEGACY
        msg = wire.decode_message(raw, mode)
        if isinstance(msg, RrcReconfig):
            ack = agents.handle_rrc(node, raw, now)
            params = ",".join(f"{k}={v}" for k, v in sorted(node.session_params.items()))
            self.trace(node.node_id, "session_update", params)
            if ack is not None:
                self.trace(node.node_id, "ack", f"group={ack.group_id}")
                self.send(node.node_id, FABRIC_ENTITY, ack)
        elif isinstance(msg, E2Control) and msg.directive == "validate":
            if not node.caip_enabled:
                self.trace(node.node_id, "ignore", "validate directive (legacy)")
                return
            if msg.workflow_id in node.active_tasks:
                self.trace(node.node_id, "ignore", f"duplicate task {msg.workflow_id}")
                return
            task_id = msg.extensions.get("TaskID", msg.workflow_id)
            done_at = agents.perform_validation(
                node, ValidationTask(workflow_id=msg.workflow_id, task_id=task_id), now
            )
            node.active_tasks.add(msg.workflow_id)
            self.trace(
                node.node_id, "validation_start", f"{msg.workflow_id} done_at={done_at}"
            )
            self.queue.schedule(
                done_at,
                SimEvent.KIND_TIMER,
                {"owner": node.node_id, "kind": "validation_done", "wf": msg.workflow_id},
            )
        elif isinstance(msg, E2Control) and msg.directive == "escalate":
            if not node.caip_enabled:
                self.trace(node.node_id, "ignore", "escalate directive (legacy)")
                return
            self.trace(node.node_id, "escalation_ack", msg.workflow_id)
            self.send(
                node.node_id,
                FABRIC_ENTITY,
                agents.build_escalation_ack(node, msg.workflow_id),
            )
        else:
            self.trace(node.node_id, "ignore", f"unhandled {type(msg).__name__}")

    # --- timers ----------------------------------------------------------------

    def _handle_timer(self, payload: dict) -> None:
        now = self.queue.clock
        owner = payload["owner"]
        if owner == FABRIC_ENTITY:
            self.trace(
                FABRIC_ENTITY,
                "timer",
                f"{payload.get('kind')} {payload.get('wf', '')}".rstrip(),
            )
            self.fabric.on_timer(payload, now)
            return
        node = self.nodes[owner]
        if payload.get("kind") == "validation_done":
            workflow_id = payload["wf"]
            outcome = self._outcome_oracle.get(workflow_id, "refuted")
            self.trace(owner, "validation_outcome", f"{workflow_id} {outcome}")
            report = agents.build_outcome_report(node, workflow_id, outcome, now)
            prioritized = node.flow_id is not None and self.fabric.sdap_table.is_prioritized(
                node.flow_id
            )
            self.send(owner, FABRIC_ENTITY, report, prioritized=prioritized)


# --- artifact emission ---------------------------------------------------------

def run_scenario(
    scenario: Scenario,
    seed_override: Optional[int] = None,
    strip_legacy_extensions: bool = False,
) -> RunResult:
    return SimulationRun(
        scenario,
        seed_override=seed_override,
        strip_legacy_extensions=strip_legacy_extensions,
    ).run()


def emit(text: str, path: str) -> None:
    """Write canonical newline-terminated bytes."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(text)


def write_artifacts(result: RunResult, out_dir: str, report_format: str = "all") -> list:
    """Write trace, audit, KPI record stream, and the KPI report; returns paths."""
    paths = []
    os.makedirs(out_dir, exist_ok=True)

    trace_path = os.path.join(out_dir, "trace.tsv")
    emit(result.trace_text(), trace_path)
    paths.append(trace_path)

    audit_path = os.path.join(out_dir, "audit.tsv")
    emit(result.audit_text(), audit_path)
    paths.append(audit_path)

    records_path = os.path.join(out_dir, "kpi_records.jsonl")
    emit(result.kpi_store.dump_jsonl(), records_path)
    paths.append(records_path)

    report = result.report()
    if report_format in ("all", "structured"):
        path = os.path.join(out_dir, "kpi.json")
        emit(report.render_structured(), path)
        paths.append(path)
    if report_format in ("all", "flat"):
        path = os.path.join(out_dir, "kpi.tsv")
        emit(report.render_flat(), path)
        paths.append(path)
    return paths


def compare_traces(path_a: str, path_b: str):
    """Byte comparison with first-divergence reporting.

    Returns ("equal", None) or ("divergence", (line_no, a_line, b_line)).
    """
    with open(path_a, "rb") as fa, open(path_b, "rb") as fb:
        lines_a = fa.read().split(b"\n")
        lines_b = fb.read().split(b"\n")
    for idx in range(max(len(lines_a), len(lines_b))):
        a = lines_a[idx] if idx < len(lines_a) else None
        b = lines_b[idx] if idx < len(lines_b) else None
        if a != b:
            return (
                "divergence",
                (
                    idx + 1,
                    a.decode("utf-8", "replace") if a is not None else "<missing>",
                    b.decode("utf-8", "replace") if b is not None else "<missing>",
                ),
            )
    return ("equal", None)
