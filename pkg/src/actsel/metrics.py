"""JSON-lines metrics files.

The first line is a ``#`` comment carrying run metadata as JSON; every later
line is one eval record. Floats are written with ``repr`` precision so a reload
reproduces the in-memory records exactly (NaN is written as the bare ``NaN``
token that :mod:`json` reads back).
"""

from __future__ import annotations

import json
from pathlib import Path

from .loop import MetricsRecord, RunResult, Speedup, speedup_beta

HEADER_PREFIX = "# actsel-metrics v1 "
FIELDS = ("step", "metric", "value", "cum_flops_learner", "cum_flops_actor", "cum_flops_ref")
EXTRA_FIELDS = ("learner_loss", "selected_noise")


def record_to_dict(r: MetricsRecord) -> dict:
    return {k: getattr(r, k) for k in FIELDS + EXTRA_FIELDS}


class MetricsSink:
    """Append-only writer; every row is flushed as soon as it is written."""

    def __init__(self, path, meta: dict | None = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("w", encoding="utf-8")
        self._fh.write(HEADER_PREFIX + json.dumps(meta or {}, sort_keys=True, default=str) + "\n")
        self._fh.flush()
        self.count = 0

    def write(self, record: MetricsRecord):
        self._fh.write(json.dumps(record_to_dict(record)) + "\n")
        self._fh.flush()
        self.count += 1

    def write_row(self, metric: str, value, step: int = 0, **extra):
        """A row that is not a training eval; flop columns default to zero."""
        row = {"step": step, "metric": metric, "value": value, "cum_flops_learner": 0,
               "cum_flops_actor": 0, "cum_flops_ref": 0}
        row.update(extra)
        self._fh.write(json.dumps(row, default=float) + "\n")
        self._fh.flush()
        self.count += 1

    def write_all(self, records):
        for r in records:
            self.write(r)

    def close(self):
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_metrics(path, result: RunResult, meta: dict | None = None) -> Path:
    with MetricsSink(path, meta if meta is not None else result.meta) as sink:
        sink.write_all(result.records)
    return Path(path)


def read_metrics(path) -> RunResult:
    records, meta = [], {}
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                if lineno == 1 and line.startswith(HEADER_PREFIX):
                    meta = json.loads(line[len(HEADER_PREFIX):])
                continue
            try:
                row = json.loads(line)
                records.append(MetricsRecord(
                    int(row["step"]), row["metric"], float(row["value"]),
                    float(row.get("learner_loss", float("nan"))),
                    float(row.get("selected_noise", float("nan"))),
                    int(row["cum_flops_learner"]), int(row["cum_flops_actor"]),
                    int(row["cum_flops_ref"])))
            except (KeyError, ValueError, TypeError) as err:
                raise ValueError(f"{path}:{lineno}: bad metrics row ({err})") from None
    return RunResult(records, meta=meta)


def speedup_from_files(active_path, baseline_path, window: int = 5) -> Speedup:
    return speedup_beta(read_metrics(active_path), read_metrics(baseline_path), window)
