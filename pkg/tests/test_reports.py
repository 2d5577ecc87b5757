import json

from deepcsp.reports import append_jsonl, build_summary, metrics_record, write_json
from deepcsp.training import Metrics


def test_status_follows_worst_issue():
    warning = {"severity": "warning", "component": "synth", "message": "weak"}
    error = {"severity": "error", "component": "training", "message": "bad"}
    assert build_summary("synth", {})["status"] == "OK"
    assert build_summary("synth", {}, [[warning], None])["status"] == "Warning"
    summary = build_summary("train", {"epochs_run": 3}, [[warning], [error]])
    assert summary["status"] == "Error"
    assert summary["epochs_run"] == 3
    assert len(summary["issues"]) == 2
    assert summary["finished_at"].endswith("Z")


def test_metrics_record_replaces_nan():
    record = metrics_record(Metrics(accuracy=0.5, per_class_accuracy=(1.0, float("nan")), cross_entropy=0.7))
    assert record["per_class_accuracy"] == [1.0, None]
    assert record["eigenvalues"] == []


def test_json_writers(tmp_path):
    path = tmp_path / "summary.json"
    write_json(str(path), {"b": float("inf"), "a": 1})
    assert json.loads(path.read_text()) == {"a": 1, "b": None}
    assert not (tmp_path / "summary.json.tmp").exists()

    lines = tmp_path / "metrics.jsonl"
    append_jsonl(str(lines), {"epoch": 0})
    append_jsonl(str(lines), {"epoch": 1})
    assert [json.loads(line)["epoch"] for line in lines.read_text().splitlines()] == [0, 1]
