"""Line-delimited JSON metrics: one header, one record per round, one summary.

Records are written with sorted keys and no timestamps so that two runs with
the same configuration produce byte-identical files.  Each line is flushed as
soon as it is written; a reader that finds a partial last line or no summary
reports the file as truncated.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import MetricsError

SCHEMA_VERSION = 1
METRICS_FILE = "metrics.jsonl"


def _plain(value):
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    return value


def _dumps(record: dict) -> str:
    return json.dumps(_plain(record), sort_keys=True, separators=(",", ":"), allow_nan=True)


class MetricsWriter:
    """Append-only writer; use as a context manager."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = None

    def __enter__(self) -> "MetricsWriter":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("w", encoding="utf-8", newline="\n")
        return self

    def __exit__(self, *exc) -> None:
        self._fh.close()

    def write(self, record: dict) -> None:
        self._fh.write(_dumps(record) + "\n")
        self._fh.flush()

    def header(self, method: str, config: dict, extra: dict | None = None) -> None:
        self.write({"type": "header", "schema": SCHEMA_VERSION, "method": method,
                    "config": config, **(extra or {})})

    def round(self, metrics) -> None:
        self.write(metrics.to_record())

    def summary(self, record: dict) -> None:
        self.write({"type": "summary", **record})


@dataclass
class RunRecords:
    path: Path
    header: dict
    rounds: list
    summary: dict

    @property
    def method(self) -> str:
        return self.header["method"]

    @property
    def final(self) -> dict:
        return self.rounds[-1]


def read_metrics(path) -> RunRecords:
    """Parse and sanity-check a metrics file; raises MetricsError naming the problem."""
    path = Path(path)
    if path.is_dir():
        path = path / METRICS_FILE
    if not path.exists():
        raise MetricsError(f"{path}: metrics file not found")
    text = path.read_text(encoding="utf-8")
    if not text:
        raise MetricsError(f"{path}: empty metrics file")
    if not text.endswith("\n"):
        raise MetricsError(f"{path}: truncated (last line incomplete)")
    records = []
    for n, line in enumerate(text.splitlines(), start=1):
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError:
            raise MetricsError(f"{path}: line {n} is not valid JSON") from None
    header = records[0]
    if header.get("type") != "header":
        raise MetricsError(f"{path}: first record is not a header")
    if header.get("schema") != SCHEMA_VERSION:
        raise MetricsError(f"{path}: unsupported schema {header.get('schema')!r}")
    if records[-1].get("type") != "summary":
        raise MetricsError(f"{path}: truncated (no summary record)")
    rounds = [r for r in records[1:-1] if r.get("type") == "round"]
    if not rounds:
        raise MetricsError(f"{path}: no round records")
    expected = list(range(rounds[0]["round"], rounds[0]["round"] + len(rounds)))
    if [r["round"] for r in rounds] != expected:
        raise MetricsError(f"{path}: round records are not consecutive")
    return RunRecords(path, header, rounds, records[-1])
