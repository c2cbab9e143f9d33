"""Line-delimited metrics records, CSV export, and derived series.

A metrics file starts with exactly one header line carrying the schema tag
and run name; every following line is one JSON record. Records in a file
have strictly increasing steps. Timing is kept out of the canonical stream
(train writes wall-clock durations to a sidecar) so two runs with the same
config produce byte-identical metrics files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

SCHEMA = "metrics/1"

_FIELDS = None  # populated after the dataclass is defined


@dataclass
class MetricsRecord:
    step: int
    task: str
    shield_active: bool
    loss_total: float
    loss_disc: float
    loss_aux: float
    loss_img: float | None = None
    loss_lm: float | None = None
    loss_mmu: float | None = None
    loss_t2i: float | None = None
    loss_t2i_long: float | None = None
    aux_per_group: dict[str, float] = field(default_factory=dict)
    capacity_rate: float | None = None
    capacity_text: float | None = None
    capacity_vit: float | None = None
    capacity_vae: float | None = None
    imbalance: dict[str, dict[str, float]] | None = None
    eval_und: float | None = None
    eval_probe: float | None = None
    grad_norm: float | None = None
    tokens_text: int = 0
    tokens_vit: int = 0
    tokens_vae: int = 0
    duration_ms: float | None = None


_FIELDS = list(MetricsRecord.__dataclass_fields__)


class MetricsWriter:
    """Append-only single-writer sink, flushed per record."""

    def __init__(self, path, run_name: str):
        self.path = Path(path)
        self._fh = open(self.path, "w", encoding="utf-8")
        self._fh.write(json.dumps({"schema": SCHEMA, "run": run_name}) + "\n")
        self._fh.flush()
        self._last_step = None

    def emit(self, record: MetricsRecord) -> None:
        if self._last_step is not None and record.step <= self._last_step:
            raise ValueError(f"non-increasing step {record.step} after {self._last_step}")
        self._last_step = record.step
        self._fh.write(json.dumps(asdict(record)) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def emit_record(sink: MetricsWriter, record: MetricsRecord) -> None:
    sink.emit(record)


def parse_record(line: str) -> MetricsRecord:
    payload = json.loads(line)
    unknown = set(payload) - set(_FIELDS)
    if unknown:
        raise ValueError(f"unknown metrics fields {sorted(unknown)}")
    return MetricsRecord(**payload)


def read_metrics(path) -> tuple[dict, list[MetricsRecord]]:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != SCHEMA:
            raise ValueError(f"{path} is not a metrics file (missing {SCHEMA} header)")
        records = [parse_record(line) for line in fh if line.strip()]
    steps = [r.step for r in records]
    if any(b <= a for a, b in zip(steps, steps[1:])):
        raise ValueError(f"{path} has non-monotone steps")
    return header, records


def numeric_keys() -> list[str]:
    skip = {"task", "aux_per_group", "imbalance"}
    return [f for f in _FIELDS if f not in skip]


def cumulative_tokens(records: list[MetricsRecord]) -> dict[str, list[int]]:
    """Running totals of tokens seen per modality, in record order."""
    totals = {"text": [], "vit": [], "vae": []}
    t = v = a = 0
    for r in records:
        t += r.tokens_text
        v += r.tokens_vit
        a += r.tokens_vae
        totals["text"].append(t)
        totals["vit"].append(v)
        totals["vae"].append(a)
    return totals


def export_csv(metrics_path, csv_path) -> None:
    """Flatten records to CSV with one column per scalar field."""
    _, records = read_metrics(metrics_path)
    cols = numeric_keys()
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(["task"] + cols) + "\n")
        for r in records:
            row = [r.task]
            for c in cols:
                value = getattr(r, c)
                row.append("" if value is None else repr(value)
                           if isinstance(value, float) else str(value))
            fh.write(",".join(row) + "\n")
