"""caip-bench: deterministic coordination-plane simulator for clinical workflows.

A discrete-event simulator and protocol library for workflow-scoped
coordination contexts carried over simulated RAN control interfaces
(RRC-like reconfiguration, SDAP flow association, E2-like reports and
controls, A1-like policy objects), with deadline-paced bounded
coordination rounds, governance-boundary enforcement, and KPI reporting.
"""

__version__ = "0.1.0"
