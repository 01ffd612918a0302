"""Dedicated logger and timeline store for training metrics."""

import logging
import math
import sys
from typing import Dict, List, Optional

import pandas as pd

from .exceptions import FileProcessingError
from .file_utils import ensure_parent_directory

TIMELINE_COLUMNS = ["step", "metric", "value"]


class MetricTimeline:
    """Records ``(step, metric, value)`` rows and logs them every ``log_interval`` steps."""

    def __init__(self, name: str = "training_metrics", log_interval: int = 100, level: int = logging.INFO):
        self.logger = logging.getLogger(name)
        self.logger.setLevel(level)
        self.log_interval = max(1, int(log_interval))
        self.rows: List[Dict] = []
        self._pending: Dict[str, List[float]] = {}

        # one handler per named logger even if several timelines are created
        if not self.logger.handlers:
            handler = logging.StreamHandler(sys.stderr)
            handler.setLevel(level)
            handler.setFormatter(logging.Formatter("📈 %(asctime)s - %(name)s - %(message)s"))
            self.logger.addHandler(handler)
            self.logger.propagate = False

    def log(self, step: int, metric: str, value: float) -> None:
        """Record a value; emits the running mean of a metric at interval steps."""
        value = float(value)
        self.rows.append({"step": int(step), "metric": metric, "value": value})
        self._pending.setdefault(metric, []).append(value)
        if step % self.log_interval == 0:
            self.flush(step)

    def flush(self, step: Optional[int] = None) -> None:
        if not self._pending:
            return
        parts = []
        for metric, values in sorted(self._pending.items()):
            mean = sum(values) / len(values)
            parts.append(f"{metric}={mean:.5f}" if math.isfinite(mean) else f"{metric}={mean}")
        label = f"step {step}" if step is not None else "final"
        self.logger.info(f"{label}: " + ", ".join(parts))
        self._pending.clear()

    def values(self, metric: str) -> List[float]:
        return [row["value"] for row in self.rows if row["metric"] == metric]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=TIMELINE_COLUMNS)

    def to_csv(self, path: str) -> None:
        ensure_parent_directory(path)
        try:
            self.to_frame().to_csv(path, index=False)
        except OSError as e:
            raise FileProcessingError(f"Failed to write metric timeline {path}: {e}")
