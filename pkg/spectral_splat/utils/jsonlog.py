"""
JSON-lines stream for training metrics and densification stats.
One object per line; infinities serialize as the string "inf".
"""

import json
import math
import sys
from typing import IO, Any, Dict, Optional

import numpy as np


def _sanitize(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _sanitize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_sanitize(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_sanitize(v) for v in value.tolist()]
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        if math.isnan(value):
            return "nan"
        return value
    return value


def dumps(record: Dict[str, Any]) -> str:
    """Serialize one record to a single JSON line (no trailing newline)."""
    return json.dumps(_sanitize(record), sort_keys=False)


class JsonLineWriter:
    """Writes records to stdout or to a file opened in append mode."""

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self._stream: IO[str] = open(path, "a", encoding="utf-8") if path else sys.stdout

    def write(self, record: Dict[str, Any]) -> None:
        self._stream.write(dumps(record) + "\n")
        self._stream.flush()

    def close(self) -> None:
        if self.path:
            self._stream.close()

    def __enter__(self) -> "JsonLineWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
