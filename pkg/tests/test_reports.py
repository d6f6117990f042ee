import csv
import json
import os
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from concept_ablation.ablation import StepRecord, TrainingLog
from concept_ablation.concepts import Vocabulary
from concept_ablation.config import default_vocabulary_path
from concept_ablation.evaluation import EvalReport, alignment_score
from concept_ablation.reports import LOG_COLUMNS, SCORE_COLUMNS, canonical_json, emit_reports

VOCAB = Vocabulary.load(default_vocabulary_path())


def make_report():
    cands = [VOCAB.parse(c) for c in ("grumpy_cat", "cat", "dog")]
    report = EvalReport(metadata={"seed": 0, "config_hash": "abc"})
    for i, (label, text) in enumerate([("target", "grumpy_cat"), ("anchor", "cat"), ("far", "dog")]):
        for j, tag in enumerate(("baseline", "ablated")):
            x = VOCAB.sample_ground_truth(VOCAB.parse(text), 120, np.random.default_rng(10 * i + j))
            report.scores.append(alignment_score(VOCAB, x, VOCAB.parse(text), cands, model=tag, label=label))
    return report


def make_logs():
    logs = {}
    for method, drop in (("model", 0.2), ("noise", 0.1)):
        log = TrainingLog(probe_interval=2, method=method, initial_score=0.9)
        for step in range(1, 5):
            log.records.append(StepRecord(step, 1.0 / step, 0.9 - drop * step if step % 2 == 0 else None, wall_time=float(step)))
        logs[method] = log
    return logs


def test_report_files_and_row_count(tmp_path):
    report = make_report()
    files = emit_reports(report, make_logs(), tmp_path)
    for rel in files.values():
        assert (tmp_path / rel).is_file()
    with open(tmp_path / "scores.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == SCORE_COLUMNS
    assert len(rows) - 1 == len(report.scores)
    with open(tmp_path / "training_log.csv") as fh:
        log_rows = list(csv.reader(fh))
    assert tuple(log_rows[0]) == LOG_COLUMNS
    assert len(log_rows) - 1 == 8
    doc = json.loads((tmp_path / "report.json").read_text())
    assert len(doc["scores"]) == len(report.scores)


def test_charts_are_well_formed_svg(tmp_path):
    files = emit_reports(make_report(), make_logs(), tmp_path)
    for key in ("chart:scores", "chart:target_alignment"):
        root = ET.parse(tmp_path / files[key]).getroot()
        assert root.tag.endswith("svg")


def test_no_training_log_without_logs(tmp_path):
    files = emit_reports(make_report(), {}, tmp_path)
    assert "training_log" not in files
    assert not (tmp_path / "training_log.csv").exists()


def test_identical_bytes_across_runs(tmp_path):
    a = emit_reports(make_report(), make_logs(), tmp_path / "a")
    b = emit_reports(make_report(), make_logs(), tmp_path / "b")
    assert a == b
    for rel in a.values():
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_wall_time_does_not_reach_data_files(tmp_path):
    logs = make_logs()
    emit_reports(make_report(), logs, tmp_path / "a")
    for log in logs.values():
        for r in log.records:
            r.wall_time += 100.0
    emit_reports(make_report(), logs, tmp_path / "b")
    assert (tmp_path / "a" / "training_log.csv").read_bytes() == (tmp_path / "b" / "training_log.csv").read_bytes()


def test_canonical_json_orders_keys():
    assert canonical_json({"b": 1, "a": {"d": 2, "c": 3}}) == canonical_json({"a": {"c": 3, "d": 2}, "b": 1})


@pytest.mark.skipif(os.geteuid() == 0, reason="permission bits do not bind root")
def test_unwritable_directory(tmp_path):
    locked = tmp_path / "locked"
    locked.mkdir()
    locked.chmod(0o500)
    with pytest.raises(OSError):
        emit_reports(make_report(), {}, locked)


def test_output_path_is_a_file(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_reports(make_report(), {}, blocker)
