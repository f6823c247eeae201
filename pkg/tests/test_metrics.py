import math

import pytest

from actsel import metrics
from actsel.loop import MetricsRecord, RunResult


def records():
    return [MetricsRecord(0, "holdout_accuracy", 0.1, float("nan"), float("nan"), 0, 0, 7),
            MetricsRecord(50, "holdout_accuracy", 0.123456789012345678, 1.25, 0.0625, 10**15, 3, 7),
            MetricsRecord(100, "holdout_accuracy", 1 / 3, 0.5, 0.2, 2 * 10**15, 6, 7)]


def test_exact_round_trip(tmp_path):
    run = RunResult(records(), meta={"policy": "learnability", "seed": 3})
    path = metrics.write_metrics(tmp_path / "m.jsonl", run)
    back = metrics.read_metrics(path)
    assert back.meta == {"policy": "learnability", "seed": 3}
    for a, b in zip(back.records, run.records):
        for field in metrics.FIELDS + metrics.EXTRA_FIELDS:
            x, y = getattr(a, field), getattr(b, field)
            assert (math.isnan(x) and math.isnan(y)) if isinstance(y, float) and math.isnan(y) else x == y


def test_empty_run_is_header_only(tmp_path):
    path = metrics.write_metrics(tmp_path / "e.jsonl", RunResult([]), meta={"seed": 0})
    lines = path.read_text().splitlines()
    assert len(lines) == 1 and lines[0].startswith(metrics.HEADER_PREFIX)
    assert metrics.read_metrics(path).records == []


def test_bad_row_names_line(tmp_path):
    p = tmp_path / "b.jsonl"
    p.write_text(metrics.HEADER_PREFIX + "{}\n" + '{"step": 0}\n')
    with pytest.raises(ValueError, match=":2:"):
        metrics.read_metrics(p)


def test_rows_flushed_immediately(tmp_path):
    sink = metrics.MetricsSink(tmp_path / "s.jsonl")
    sink.write(records()[1])
    sink.write_row("taylor_slope", 2.0)
    assert len((tmp_path / "s.jsonl").read_text().splitlines()) == 3
    sink.close()
    back = metrics.read_metrics(tmp_path / "s.jsonl")
    assert back.records[1].metric == "taylor_slope" and back.records[1].value == 2.0


def test_speedup_from_files(tmp_path):
    base = RunResult([MetricsRecord(s, "acc", s / 1000, 0, 0, 0, 0, 0) for s in range(0, 1001, 100)])
    act = RunResult([MetricsRecord(s, "acc", min(1.0, s / 500), 0, 0, 0, 0, 0) for s in range(0, 1001, 100)])
    a = metrics.write_metrics(tmp_path / "a.jsonl", act)
    b = metrics.write_metrics(tmp_path / "b.jsonl", base)
    assert metrics.speedup_from_files(a, b, window=1).beta == pytest.approx(0.5)
