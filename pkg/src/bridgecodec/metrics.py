"""Metrics report schema and JSON-lines training logs."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path


@dataclass
class MetricsReport:
    """Fixed-schema summary written by the CLI commands."""

    token_rate_hz: float
    ar_steps_per_second_of_speech: float
    rtf_ratio: float | None = None
    reconstruction_mse: float | None = None
    token_accuracy: float | None = None
    curves: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


class JsonlLogger:
    """Append-only JSON-lines metrics log (one record per call)."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w")

    def log(self, record: dict):
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False
