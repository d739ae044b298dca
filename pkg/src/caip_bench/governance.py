"""Governance-boundary enforcement: payload classification, gating, audit log.

Every delivery between entities passes through the guard. Clinical
payloads never cross a domain boundary; cross-domain coordination
metadata passes only if its kind is on the source domain's outbound
allow-list. Denied deliveries are dropped silently (the sender observes
the consequence via round timeouts) and every decision is audited.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional

from .model import MetadataKind, PayloadClass
from .wire import parse_document, _payload_class_from_doc

VERDICT_ALLOW = "allow"
VERDICT_DENY = "deny"

DENY_CROSS_DOMAIN_CLINICAL = "cross_domain_clinical_payload"
DENY_KIND_NOT_ALLOWED = "metadata_kind_not_allowed"
DENY_NO_CONSTRAINTS = "no_outbound_constraints"


class MisdeclaredPayload(Exception):
    """Metadata-declared message embedding clinical bytes; gated as clinical."""


def _contains_clinical_bytes(node: Any) -> bool:
    if isinstance(node, dict):
        for key, value in node.items():
            if key == "clinical_bytes" and value:
                return True
            if _contains_clinical_bytes(value):
                return True
    elif isinstance(node, list):
        if len(node) == 2 and node[0] == "clinical_bytes" and node[1]:
            return True
        for item in node:
            if _contains_clinical_bytes(item):
                return True
    return False


def classify(raw_doc: str) -> PayloadClass:
    """Declared payload class, after a deep scan for smuggled clinical bytes.

    Raises MisdeclaredPayload when a metadata-declared document embeds
    clinical bytes anywhere; callers gating deliveries must treat that
    case as ClinicalPayload (fail closed).
    """
    doc = parse_document(raw_doc)
    declared = _payload_class_from_doc(doc.get("payload_class", {}))
    if declared.category == PayloadClass.CATEGORY_METADATA:
        body = {k: v for k, v in doc.items() if k != "payload_class"}
        if _contains_clinical_bytes(body):
            raise MisdeclaredPayload(
                f"metadata-declared {doc.get('type')} embeds clinical bytes"
            )
    return declared


def classify_for_gating(raw_doc: str) -> tuple[PayloadClass, bool]:
    """(effective class, misdeclared flag); misdeclared gates as clinical."""
    try:
        return classify(raw_doc), False
    except MisdeclaredPayload:
        return PayloadClass(category=PayloadClass.CATEGORY_CLINICAL), True


@dataclass(frozen=True)
class AuditRecord:
    time: int
    msg_type: str
    payload_category: str
    metadata_kind: Optional[str]
    src_domain: str
    dst_domain: str
    verdict: str
    reason: Optional[str] = None

    def flat_line(self) -> str:
        category = self.payload_category
        if self.metadata_kind:
            category = f"{category}:{self.metadata_kind}"
        verdict = self.verdict
        if self.reason:
            verdict = f"{verdict}({self.reason})"
        return f"{self.time}\t{self.src_domain}\t{self.dst_domain}\t{category}\t{verdict}"


class GovernanceGuard:
    """Gates deliveries against per-domain outbound allow-lists; owns the audit log."""

    def __init__(self, strict: bool = True) -> None:
        self.strict = strict
        # domain_id -> frozenset of MetadataKind allowed outbound
        self.allowed_outbound: dict = {}
        self.audit_log: list = []

    def set_constraints(self, constraints) -> None:
        """Install (domain, kinds) pairs from a provisioned policy."""
        for dom, kinds in constraints:
            self.allowed_outbound[dom] = frozenset(kinds)

    def gate(self, raw_doc: str, src_domain: str, dst_domain: str, now: int) -> AuditRecord:
        """Gate one delivery attempt; appends and returns the audit record.

        Verdict depends only on (payload class, src_domain, dst_domain,
        installed constraints): same inputs, same verdict.
        """
        doc = parse_document(raw_doc)
        effective, misdeclared = classify_for_gating(raw_doc)

        verdict = VERDICT_ALLOW
        reason: Optional[str] = None
        if src_domain != dst_domain:
            if effective.is_clinical:
                verdict, reason = VERDICT_DENY, DENY_CROSS_DOMAIN_CLINICAL
            else:
                allowed = self.allowed_outbound.get(src_domain)
                if allowed is None:
                    if self.strict:
                        verdict, reason = VERDICT_DENY, DENY_NO_CONSTRAINTS
                elif effective.kind not in allowed:
                    verdict, reason = VERDICT_DENY, DENY_KIND_NOT_ALLOWED

        record = AuditRecord(
            time=now,
            msg_type=str(doc.get("type")),
            payload_category=(
                "misdeclared" if misdeclared else effective.category
            ),
            metadata_kind=effective.kind.value if effective.kind else None,
            src_domain=src_domain,
            dst_domain=dst_domain,
            verdict=verdict,
            reason=reason,
        )
        self.audit_log.append(record)
        return record

    def audit_query(
        self,
        verdict: Optional[str] = None,
        domain: Optional[str] = None,
        time_range: Optional[tuple] = None,
    ) -> list:
        """Matching records in time order (the log is already time-ordered)."""
        out = []
        for record in self.audit_log:
            if verdict is not None and record.verdict != verdict:
                continue
            if domain is not None and domain not in (record.src_domain, record.dst_domain):
                continue
            if time_range is not None:
                lo, hi = time_range
                if not (lo <= record.time <= hi):
                    continue
            out.append(record)
        return out

    def deny_count(self) -> int:
        return sum(1 for r in self.audit_log if r.verdict == VERDICT_DENY)
