"""End-to-end runs, artifact emission, trace comparison, and the CLI contract."""

import json
import os

import pytest

from caip_bench import cli
from caip_bench.runner import (
    AUDIT_COLUMNS,
    TRACE_COLUMNS,
    compare_traces,
    run_scenario,
    write_artifacts,
)
from caip_bench.scenario import load_bundled, scenario_from_doc

import _fuzz


@pytest.fixture(scope="module")
def icu_result():
    return run_scenario(load_bundled("icu_reference"))


class TestReferenceRun:
    def test_terminal_state(self, icu_result):
        assert icu_result.final_states == {"wf-0001": "completed(escalated=true)"}

    def test_stage_order_in_trace(self, icu_result):
        stages = [
            line.split("\t")[4].split()[1]
            for line in icu_result.trace_lines
            if line.split("\t")[3] == "stage_enter"
        ]
        assert stages == [
            "detection", "group_formation", "validation", "escalation",
            "completed(escalated=true)",
        ]

    def test_report_headline_numbers(self, icu_result):
        report = icu_result.report()
        assert report.totals == {
            "instantiated": 1, "completed": 1, "failed": 0,
            "failed_by_reason": {reason: 0 for reason in
                                 report.totals["failed_by_reason"]},
        }
        assert report.deadline_satisfaction_ratio == "1.0000"
        row = report.workflows[0]
        assert row["deadline_satisfied"] is True
        assert row["escalated"] is True

    def test_no_denials_in_reference_scenario(self, icu_result):
        assert icu_result.guard.deny_count() == 0
        assert len(icu_result.guard.audit_log) > 0

    def test_trace_and_audit_headers(self, icu_result):
        assert icu_result.trace_text().split("\n")[0] == "\t".join(TRACE_COLUMNS)
        assert icu_result.audit_text().split("\n")[0] == "\t".join(AUDIT_COLUMNS)

    def test_repeat_run_is_byte_identical(self, icu_result):
        again = run_scenario(load_bundled("icu_reference"))
        assert again.trace_text() == icu_result.trace_text()
        assert again.audit_text() == icu_result.audit_text()
        assert again.kpi_store.dump_jsonl() == icu_result.kpi_store.dump_jsonl()


class TestMisdeclaredInjection:
    def _scenario_with_cross_domain_rogue(self):
        doc = _fuzz.generate_scenario_doc(0)
        # force a two-domain layout with the rogue sender outside the
        # fabric's domain, so its clinical bytes must cross a boundary
        if len(doc["domains"]) < 2:
            doc["domains"].append("dom-z")
            for policy in doc["policies"]:
                policy["governance_constraints"]["dom-z"] = [
                    "workflow_identifier", "deadline_indicator",
                    "role_alignment_signal", "completion_status_flag",
                    "escalation_indicator",
                ]
        outside = next(d for d in doc["domains"] if d != doc["fabric"]["domain"])
        doc["nodes"][0]["domain"] = outside
        doc["script"] = [{"kind": "misdeclared", "at_ms": 0,
                          "origin": doc["nodes"][0]["id"], "dst": "fabric"}]
        return scenario_from_doc(doc)

    def test_rogue_payload_is_denied_and_audited(self):
        result = run_scenario(self._scenario_with_cross_domain_rogue())
        denies = result.guard.audit_query(verdict="deny")
        assert any(r.payload_category == "misdeclared" for r in denies)
        assert any(r.reason == "cross_domain_clinical_payload" for r in denies)
        deny_lines = [l for l in result.trace_lines if l.split("\t")[3] == "deny"]
        assert len(deny_lines) == result.guard.deny_count()


class TestArtifacts:
    def test_write_artifacts_layout(self, icu_result, tmp_path):
        paths = write_artifacts(icu_result, str(tmp_path), "all")
        names = sorted(os.path.basename(p) for p in paths)
        assert names == ["audit.tsv", "kpi.json", "kpi.tsv", "kpi_records.jsonl",
                         "trace.tsv"]
        report = json.loads((tmp_path / "kpi.json").read_text())
        assert report["totals"]["instantiated"] == 1

    def test_format_selects_report_flavor(self, icu_result, tmp_path):
        paths = write_artifacts(icu_result, str(tmp_path / "s"), "structured")
        assert not any(p.endswith("kpi.tsv") for p in paths)
        paths = write_artifacts(icu_result, str(tmp_path / "f"), "flat")
        assert not any(p.endswith("kpi.json") for p in paths)

    def test_compare_traces(self, icu_result, tmp_path):
        a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
        a.write_text(icu_result.trace_text())
        b.write_text(icu_result.trace_text())
        c.write_text(icu_result.trace_text().replace("wf-0001", "wf-9999", 1))
        assert compare_traces(str(a), str(b)) == ("equal", None)
        verdict, detail = compare_traces(str(a), str(c))
        assert verdict == "divergence"
        assert detail[0] >= 1 and "wf-0001" in detail[1]

    def test_compare_traces_length_mismatch(self, icu_result, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        a.write_text("x\ny")
        b.write_text("x")
        verdict, detail = compare_traces(str(a), str(b))
        assert verdict == "divergence"
        assert detail[2] == "<missing>"


class TestLegacyStripTwin:
    def test_session_events_identical_under_stripping(self):
        doc = _fuzz.generate_scenario_doc(3)
        for node in doc["nodes"][1:]:
            node["mode"] = "legacy"
        scenario = scenario_from_doc(doc)
        plain = run_scenario(scenario)
        stripped = run_scenario(scenario, strip_legacy_extensions=True)
        legacy_ids = {n["id"] for n in doc["nodes"] if n["mode"] == "legacy"}

        def session_events(result, node_id):
            return [line for line in result.trace_lines
                    if line.split("\t")[2] == node_id
                    and line.split("\t")[3] == "session_update"]

        for node_id in legacy_ids:
            assert session_events(plain, node_id) == session_events(stripped, node_id)


class TestCli:
    def test_run_bundled_scenario(self, tmp_path, capsys):
        status = cli.main(["run", "--scenario", "icu_reference",
                           "--out", str(tmp_path)])
        assert status == cli.EXIT_OK
        assert (tmp_path / "trace.tsv").exists()
        assert (tmp_path / "kpi.json").exists()
        assert str(tmp_path / "trace.tsv") in capsys.readouterr().out

    def test_run_scenario_file(self, tmp_path):
        import yaml

        path = tmp_path / "scenario.yaml"
        path.write_text(yaml.safe_dump(_fuzz.generate_scenario_doc(1)))
        status = cli.main(["run", "--scenario", str(path),
                           "--out", str(tmp_path / "out")])
        assert status == cli.EXIT_OK

    def test_batch_runs_one_directory_per_seed(self, tmp_path):
        status = cli.main(["run", "--scenario", "icu_reference",
                           "--out", str(tmp_path), "--batch", "3..5"])
        assert status == cli.EXIT_OK
        assert sorted(os.listdir(tmp_path)) == ["seed-3", "seed-4", "seed-5"]

    def test_validate_ok(self, capsys):
        assert cli.main(["validate", "--scenario", "icu_reference"]) == cli.EXIT_OK
        assert "ok: icu_reference" in capsys.readouterr().out

    def test_missing_scenario_is_a_scenario_error(self, capsys):
        status = cli.main(["run", "--scenario", "/nope/missing.yaml", "--out", "x"])
        assert status == cli.EXIT_SCENARIO_ERROR
        assert "scenario error" in capsys.readouterr().err

    def test_invalid_scenario_file_is_a_scenario_error(self, tmp_path):
        path = tmp_path / "broken.yaml"
        path.write_text("nodes: {bad\n")
        assert (
            cli.main(["run", "--scenario", str(path), "--out", str(tmp_path)])
            == cli.EXIT_SCENARIO_ERROR
        )

    def test_io_error_exit_code(self, tmp_path, capsys):
        blocker = tmp_path / "file-not-a-dir"
        blocker.write_text("occupied")
        status = cli.main(["run", "--scenario", "icu_reference",
                           "--out", str(blocker)])
        assert status == cli.EXIT_IO_ERROR
        assert "i/o error" in capsys.readouterr().err

    def test_diff_equal_and_divergent(self, tmp_path, capsys):
        cli.main(["run", "--scenario", "icu_reference", "--out", str(tmp_path / "a")])
        cli.main(["run", "--scenario", "icu_reference", "--out", str(tmp_path / "b")])
        capsys.readouterr()
        assert cli.main(["diff", str(tmp_path / "a" / "trace.tsv"),
                         str(tmp_path / "b" / "trace.tsv")]) == cli.EXIT_OK
        assert "equal" in capsys.readouterr().out

        mutated = tmp_path / "mutated.tsv"
        text = (tmp_path / "a" / "trace.tsv").read_text()
        mutated.write_text(text.replace("grp-0001", "grp-XXXX"))
        assert cli.main(["diff", str(tmp_path / "a" / "trace.tsv"),
                         str(mutated)]) == cli.EXIT_SCENARIO_ERROR
        assert "first divergence" in capsys.readouterr().out

    def test_report_reaggregates_stored_records(self, tmp_path, capsys):
        cli.main(["run", "--scenario", "icu_reference", "--out", str(tmp_path / "a")])
        capsys.readouterr()
        status = cli.main(["report", "--kpi", str(tmp_path / "a" / "kpi_records.jsonl"),
                           "--out", str(tmp_path / "rep")])
        assert status == cli.EXIT_OK
        regenerated = json.loads((tmp_path / "rep" / "kpi.json").read_text())
        original = json.loads((tmp_path / "a" / "kpi.json").read_text())
        assert regenerated == original

    def test_governance_flags_are_exclusive(self):
        with pytest.raises(SystemExit):
            cli.main(["run", "--scenario", "icu_reference",
                      "--strict", "--permissive"])

    def test_permissive_flag_relaxes_validation(self, tmp_path):
        import yaml

        doc = _fuzz.generate_scenario_doc(2)
        doc["parameters"]["strict_governance"] = True
        first_domain = doc["domains"][0]
        doc["policies"][0]["governance_constraints"] = {
            first_domain: ["workflow_identifier", "deadline_indicator",
                           "role_alignment_signal", "completion_status_flag",
                           "escalation_indicator"]
        }
        if len(doc["domains"]) == 1:
            doc["domains"].append("dom-extra")
        path = tmp_path / "scenario.yaml"
        path.write_text(yaml.safe_dump(doc))
        assert (
            cli.main(["run", "--scenario", str(path), "--out", str(tmp_path / "s")])
            == cli.EXIT_SCENARIO_ERROR
        )
        assert (
            cli.main(["run", "--scenario", str(path), "--permissive",
                      "--out", str(tmp_path / "p")])
            == cli.EXIT_OK
        )
