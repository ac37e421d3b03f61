"""
Metric Logger for the BASEN toolkit
Appends one JSON object per training step to a metrics.jsonl file and reads
logs back as pandas DataFrames.
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Union

import pandas as pd

logger = logging.getLogger(__name__)

STEP_FIELDS = ("step", "si_sdr_db", "l_d", "l_reg", "total", "lr", "tau")


class MetricLogger:
    """Line-buffered JSON-lines writer."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        os.makedirs(self.path.parent, exist_ok=True)
        self._file = open(self.path, "a", encoding="utf-8", buffering=1)

    def log(self, record: Dict[str, Any]) -> None:
        missing = [key for key in STEP_FIELDS if key not in record]
        if missing:
            raise ValueError(f"Metric record is missing {missing}")
        self._file.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        if not self._file.closed:
            self._file.close()

    def __enter__(self) -> "MetricLogger":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_metrics(path: Union[str, Path]) -> pd.DataFrame:
    """Load a metrics.jsonl file; an empty or missing file gives an empty frame."""
    path = Path(path)
    if not path.is_file() or path.stat().st_size == 0:
        logger.warning("No metrics found at %s", path)
        return pd.DataFrame(columns=list(STEP_FIELDS))
    return pd.read_json(path, lines=True)
