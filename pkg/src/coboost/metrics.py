"""Append-only JSONL metrics sink plus table and curve emitters."""

from __future__ import annotations

import json
import math
import os
import statistics
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np


class DuplicateMetricError(KeyError):
    pass


def _plain(value: Any) -> Any:
    if hasattr(value, "tolist"):
        value = value.tolist()
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


@dataclass
class MetricRecord:
    run_id: str
    epoch: int
    name: str
    value: float | list
    timestamp: float | None = None

    def to_json(self) -> str:
        doc = {"run_id": self.run_id, "epoch": self.epoch, "name": self.name, "value": _plain(self.value)}
        if self.timestamp is not None:
            doc["timestamp"] = self.timestamp
        return json.dumps(doc, sort_keys=True, allow_nan=True)

    @classmethod
    def from_json(cls, line: str) -> "MetricRecord":
        d = json.loads(line)
        return cls(d["run_id"], d["epoch"], d["name"], d["value"], d.get("timestamp"))


class MetricsSink:
    """One JSON object per line, flushed and fsynced on every append.

    ``(run_id, epoch, name)`` must be unique.  Timestamps are off by default
    so that repeated runs produce byte-identical files.
    """

    def __init__(self, path: str | Path, run_id: str, timestamps: bool = False):
        self.path = Path(path)
        self.run_id = run_id
        self.timestamps = timestamps
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._keys = {(r.run_id, r.epoch, r.name) for r in read_records(self.path)} if self.path.exists() else set()
        self._fh = open(self.path, "a", encoding="utf-8")

    def __enter__(self) -> "MetricsSink":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()

    def append(self, record: MetricRecord) -> None:
        key = (record.run_id, record.epoch, record.name)
        if key in self._keys:
            raise DuplicateMetricError(f"metric {key} already recorded")
        if self.timestamps and record.timestamp is None:
            record.timestamp = time.time()
        self._fh.write(record.to_json() + "\n")
        self._fh.flush()
        os.fsync(self._fh.fileno())
        self._keys.add(key)

    def log(self, epoch: int, name: str, value) -> None:
        self.append(MetricRecord(self.run_id, epoch, name, _plain(value)))

    def append_many(self, epoch: int, values: Mapping[str, Any]) -> None:
        for name, value in values.items():
            self.log(epoch, name, value)


def read_records(path: str | Path) -> list[MetricRecord]:
    """Parse every complete line; a torn final line (no newline) is ignored."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    # the chunk after the last newline is either empty or an unfinished write
    out = []
    for line in lines[:-1]:
        if line.strip():
            out.append(MetricRecord.from_json(line))
    return out


def records_by_name(records: Iterable[MetricRecord]) -> dict[str, list[tuple[int, Any]]]:
    out: dict[str, list[tuple[int, Any]]] = {}
    for r in records:
        out.setdefault(r.name, []).append((r.epoch, r.value))
    return out


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------------- reporting


@dataclass
class ResultSummary:
    """The slice of a run result the emitters need."""

    method: str
    seed: int
    final_server_acc: float | None
    curve: list[float] = field(default_factory=list)
    row: str = ""


def format_cell(values: Sequence[float], digits: int = 2) -> str:
    """``mean±std`` in percent; sample std, omitted for a single value."""
    if not values:
        return "n/a"
    pct = [100.0 * v for v in values]
    mean = statistics.fmean(pct)
    if len(pct) == 1:
        return f"{mean:.{digits}f}"
    return f"{mean:.{digits}f}±{statistics.stdev(pct):.{digits}f}"


def emit_table(results: Sequence[Any], methods: Sequence[str] | None = None, row_label: str = "setting") -> str:
    """Aligned text table with one column per method and one row per setting.

    ``results`` are objects with ``method``, ``final_server_acc`` and an
    optional ``row`` attribute.  Missing or failed runs appear as ``n/a``.
    """
    if not results:
        raise ValueError("no results to tabulate")
    if methods is None:
        methods = list(dict.fromkeys(r.method for r in results))
    rows = list(dict.fromkeys(getattr(r, "row", "") or "-" for r in results))
    header = [row_label, *methods]
    body = []
    for row in rows:
        cells = [row]
        for m in methods:
            vals = [
                r.final_server_acc
                for r in results
                if r.method == m and (getattr(r, "row", "") or "-") == row
                and r.final_server_acc is not None and not math.isnan(r.final_server_acc)
            ]
            cells.append(format_cell(vals))
        body.append(cells)
    widths = [max(len(str(line[i])) for line in [header, *body]) for i in range(len(header))]
    fmt = lambda line: " | ".join(str(c).ljust(w) for c, w in zip(line, widths)).rstrip()
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(header), sep, *(fmt(line) for line in body)]) + "\n"


def emit_curves(results: Sequence[Any], path: str | Path, methods: Sequence[str] | None = None, title: str = "") -> Path:
    """Server accuracy against epoch, one line per method (mean over seeds)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if methods is None:
        methods = list(dict.fromkeys(r.method for r in results))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for m in methods:
        curves = [r.curve for r in results if r.method == m and r.curve]
        if not curves:
            continue
        length = min(len(c) for c in curves)
        mean = np.mean([c[:length] for c in curves], axis=0) * 100
        if length == 1:
            ax.axhline(mean[0], label=m, linestyle="--")
        else:
            ax.plot(np.arange(length), mean, label=m)
    ax.set_xlabel("epoch")
    ax.set_ylabel("test accuracy (%)")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path
