import json
import math
import os
import subprocess
import sys
import time

import pytest
from hypothesis import given, settings, strategies as st

from coboost.metrics import (
    DuplicateMetricError,
    MetricRecord,
    MetricsSink,
    ResultSummary,
    emit_curves,
    emit_table,
    format_cell,
    read_records,
    records_by_name,
)


def test_duplicate_key_rejected(tmp_path):
    with MetricsSink(tmp_path / "m.jsonl", "run") as sink:
        sink.log(0, "kd_loss", 1.0)
        with pytest.raises(DuplicateMetricError):
            sink.log(0, "kd_loss", 2.0)
        sink.log(1, "kd_loss", 0.5)
    assert [r.value for r in read_records(tmp_path / "m.jsonl")] == [1.0, 0.5]


def test_vector_value(tmp_path):
    w = [0.1, 0.2, 0.3, 0.4]
    with MetricsSink(tmp_path / "m.jsonl", "run") as sink:
        sink.log(0, "w", w)
    line = (tmp_path / "m.jsonl").read_text().strip()
    assert json.loads(line)["value"] == w


def test_torn_line_is_ignored(tmp_path):
    path = tmp_path / "m.jsonl"
    with MetricsSink(path, "run") as sink:
        sink.log(0, "a", 1.0)
        sink.log(1, "a", 2.0)
    with open(path, "a") as fh:
        fh.write('{"run_id": "run", "epo')
    assert [r.epoch for r in read_records(path)] == [0, 1]


WRITER = """
import sys, time
from coboost.metrics import MetricsSink
with MetricsSink(sys.argv[1], "crash") as sink:
    for t in range(100000):
        sink.log(t, "x", float(t))
        if t == 20:
            print("ready", flush=True)
"""


def test_kill_and_reread(tmp_path):
    path = tmp_path / "m.jsonl"
    proc = subprocess.Popen([sys.executable, "-c", WRITER, str(path)], stdout=subprocess.PIPE, text=True)
    assert proc.stdout.readline().strip() == "ready"
    time.sleep(0.05)
    proc.kill()
    proc.wait()
    records = read_records(path)
    assert len(records) >= 21
    assert [r.epoch for r in records] == list(range(len(records)))
    assert all(r.value == float(r.epoch) for r in records)


values = st.one_of(
    st.floats(allow_nan=False, allow_infinity=False),
    st.integers(-(10**9), 10**9),
    st.lists(st.floats(allow_nan=False, allow_infinity=False), max_size=12),
)


@settings(max_examples=100, deadline=None)
@given(st.text(min_size=1, max_size=10), st.integers(0, 10**6), st.text(min_size=1, max_size=20), values)
def test_round_trip(run_id, epoch, name, value):
    rec = MetricRecord(run_id, epoch, name, value)
    assert MetricRecord.from_json(rec.to_json()) == rec


def test_sink_output_is_deterministic(tmp_path):
    for name in ("a", "b"):
        with MetricsSink(tmp_path / f"{name}.jsonl", "r") as sink:
            sink.append_many(0, {"acc": 0.5, "w": [0.5, 0.5]})
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    by_name = records_by_name(read_records(tmp_path / "a.jsonl"))
    assert by_name["w"] == [(0, [0.5, 0.5])]


def test_format_cell():
    assert format_cell([0.9]) == "90.00"
    vals = [0.90, 0.92, 0.94]
    assert format_cell(vals) == "92.00±2.00"
    assert format_cell([]) == "n/a"


def test_single_run_table():
    table = emit_table([ResultSummary("co_boosting", 0, 0.8123)])
    lines = table.strip().splitlines()
    assert len(lines) == 3
    assert "81.23" in lines[2]


def test_four_method_table_order():
    methods = ["fedavg", "fedens", "plain_distill", "co_boosting"]
    results = [ResultSummary(m, s, 0.1 * (i + 1) + 0.01 * s, row="Dir(0.1)") for i, m in enumerate(methods) for s in range(3)]
    results.reverse()
    table = emit_table(results, methods=methods)
    header, _, row = table.strip().splitlines()
    assert [c.strip() for c in header.split("|")] == ["setting", *methods]
    cells = [c.strip() for c in row.split("|")]
    assert cells[0] == "Dir(0.1)"
    assert cells[1] == format_cell([0.10, 0.11, 0.12])
    assert cells[4] == format_cell([0.40, 0.41, 0.42])


def test_missing_cells():
    results = [ResultSummary("fedavg", 0, 0.5), ResultSummary("co_boosting", 0, None), ResultSummary("fedens", 0, math.nan)]
    row = emit_table(results).strip().splitlines()[2]
    assert row.count("n/a") == 2
    with pytest.raises(ValueError):
        emit_table([])


def test_curves_written(tmp_path):
    results = [
        ResultSummary("co_boosting", s, 0.8, curve=[0.1, 0.5, 0.8]) for s in range(2)
    ] + [ResultSummary("fedens", 0, 0.6, curve=[0.6])]
    path = emit_curves(results, tmp_path / "curves.png")
    assert path.exists() and path.stat().st_size > 0
