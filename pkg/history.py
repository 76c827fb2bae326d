"""
history.py - append-only JSON-lines training history: one record per
optimizer step plus one summary record per epoch, and the replay helpers
that rebuild epoch summaries from step records.
"""

import json
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional

from loguru import logger


class RecordKind(Enum):
    STEP = "step"
    EPOCH = "epoch"


@dataclass
class HistoryRecord:
    """
    Step records are numbered 0, 1, 2, ... without gaps. An epoch record
    carries the number of the last step record it summarizes (-1 before any
    step), so step numbers never collide with a later step record.
    """
    kind: str
    step: int
    epoch: int
    values: Dict[str, Any] = field(default_factory=dict)


class HistoryTranslator:
    """
    Translates history records to and from the JSON lines they are
    persisted as. Non-finite floats are written as null.
    """
    @staticmethod
    def record_to_json(record: HistoryRecord) -> str:
        def clean(value):
            if isinstance(value, float) and not math.isfinite(value):
                return None
            if isinstance(value, dict):
                return {k: clean(v) for k, v in value.items()}
            if isinstance(value, (list, tuple)):
                return [clean(v) for v in value]
            return value

        return json.dumps({
            "kind": record.kind,
            "step": record.step,
            "epoch": record.epoch,
            "values": clean(record.values),
        }, sort_keys=True)

    @staticmethod
    def json_to_record(line: str) -> Optional[HistoryRecord]:
        try:
            data = json.loads(line)
            return HistoryRecord(kind=data["kind"], step=int(data["step"]), epoch=int(data["epoch"]),
                                 values=data.get("values", {}))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            logger.error(f"Error parsing history line: {e}")
            return None


class HistoryWriter:
    """Append-only JSON-lines history; every record is flushed as it is written."""

    def __init__(self, path: Optional[str] = None, records: Optional[List[HistoryRecord]] = None):
        self.path = path
        self.records: List[HistoryRecord] = []
        self._file = None
        if path is not None:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            self._file = open(path, "a")
        for record in records or []:
            self.append(record)

    @property
    def next_step(self) -> int:
        steps = [r.step for r in self.records if r.kind == RecordKind.STEP.value]
        return steps[-1] + 1 if steps else 0

    def append(self, record: HistoryRecord):
        self.records.append(record)
        if self._file is not None:
            self._file.write(HistoryTranslator.record_to_json(record) + "\n")
            self._file.flush()

    def step(self, epoch, values) -> HistoryRecord:
        record = HistoryRecord(RecordKind.STEP.value, self.next_step, epoch, dict(values))
        self.append(record)
        return record

    def epoch(self, epoch, values) -> HistoryRecord:
        record = HistoryRecord(RecordKind.EPOCH.value, self.next_step - 1, epoch, dict(values))
        self.append(record)
        return record

    def close(self):
        if self._file is not None:
            self._file.close()
            self._file = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_history(path) -> List[HistoryRecord]:
    records = []
    with open(path) as f:
        for line in f:
            if line.strip():
                record = HistoryTranslator.json_to_record(line)
                if record is not None:
                    records.append(record)
    return records


def step_records(records: Iterable[HistoryRecord]) -> List[HistoryRecord]:
    return [r for r in records if r.kind == RecordKind.STEP.value]


def summarize(records: Iterable[HistoryRecord]) -> Dict[int, Dict[str, float]]:
    """
    Per-epoch mean of every numeric step value. Used both when the trainer
    writes its epoch records and when a history file is replayed.
    """
    sums: Dict[int, Dict[str, float]] = defaultdict(dict)
    counts: Dict[int, Dict[str, int]] = defaultdict(dict)
    for record in step_records(records):
        for key, value in record.values.items():
            if isinstance(value, bool) or not isinstance(value, (int, float)) or value is None:
                continue
            if not math.isfinite(value):
                continue
            sums[record.epoch][key] = sums[record.epoch].get(key, 0.0) + float(value)
            counts[record.epoch][key] = counts[record.epoch].get(key, 0) + 1
    return {
        epoch: {key: sums[epoch][key] / counts[epoch][key] for key in sorted(sums[epoch])}
        for epoch in sorted(sums)
    }
