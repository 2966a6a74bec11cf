import pytest

from db_manager import ResultsDatabase
from eval_harness import ProbeReport, ProbeResult, SuccessReport
from models import ProbeRecord


@pytest.fixture
def db(tmp_path):
    return ResultsDatabase(str(tmp_path / "results.db"))


def _report(label, rates):
    report = SuccessReport(label, ["Reach", "Pick"], list(rates))
    for task in report.tasks:
        for variant, wins in rates.items():
            cell = report.cell(task, variant, 1000)
            cell.episodes, cell.successes, cell.policy_calls = 10, wins, 12
    return report


def test_add_run_and_update_status(db):
    run_id = db.add_run("full", "/runs/full/final.ckpt", "abc", "hash", 0, "trained")
    assert run_id is not None
    assert db.update_run_status(run_id, "failed")
    assert not db.update_run_status(run_id + 100, "failed")
    runs = db.get_runs()
    assert runs[0]["arm"] == "full" and runs[0]["status"] == "failed"
    assert not runs[0]["complete"]


def test_record_success_report_marks_run_evaluated(db):
    run_id = db.add_run("full")
    assert db.record_success_report(run_id, _report("full", {"Matching": 9, "RandomBackground": 6}))
    run = db.get_runs("full")[0]
    assert run["status"] == "evaluated" and run["complete"]
    assert db.get_runs("baseline") == []


def test_search_cells_filters_and_wildcards(db):
    full = db.add_run("full")
    baseline = db.add_run("baseline")
    db.record_success_report(full, _report("full", {"Matching": 9, "Distractors2Similar": 4}))
    db.record_success_report(baseline, _report("baseline", {"Matching": 5, "Distractors2Similar": 1}))

    assert len(db.search_cells({})) == 8
    picks = db.search_cells({"arm": "full", "task": "Pick"})
    assert [c["variant"] for c in picks] == ["Matching", "Distractors2Similar"]
    distractors = db.search_cells({"variant": "Distractors*"})
    assert {c["arm"] for c in distractors} == {"full", "baseline"}
    assert all(c["variant"] == "Distractors2Similar" for c in distractors)
    # unknown fields are ignored, empty values skipped
    assert len(db.search_cells({"colour": "red", "task": ""})) == 8


def test_arm_summary(db):
    full = db.add_run("full")
    db.record_success_report(full, _report("full", {"Matching": 9, "LightingShift": 7}))
    summary = db.arm_summary()
    assert summary == {"full": {"Matching": pytest.approx(0.9), "LightingShift": pytest.approx(0.7)}}


def test_record_probe_report(db):
    run_id = db.add_run("dual_robot")
    report = ProbeReport("dual_robot", [ProbeResult("frozen", 0.8, 24, 100, 50),
                                        ProbeResult("trainable", 0.6, 24, 100, 50)])
    assert db.record_probe_report(run_id, report)
    with db.Session() as session:
        rows = session.query(ProbeRecord).order_by(ProbeRecord.probe_id).all()
    assert [(r.role, r.accuracy, r.num_samples) for r in rows] == [("frozen", 0.8, 50), ("trainable", 0.6, 50)]
