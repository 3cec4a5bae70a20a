"""Line-delimited metrics emission.

One JSON object per line, stable key order, flushed per record so an
interrupted run keeps its partial history.  The metrics stream is fully
determined by (config, seed); wall-clock timings go to a separate
sidecar file so the stream stays byte-reproducible.
"""

from __future__ import annotations

import json
import time


class MetricsWriter:
    def __init__(self, path, timing_path=None):
        self.path = path
        self.timing_path = timing_path
        self._f = open(path, "a")
        self._t = open(timing_path, "a") if timing_path else None
        self._last = time.monotonic()

    def emit(self, record):
        for v in record.values():
            if isinstance(v, float) and not (v == v and abs(v) != float("inf")):
                raise ValueError(f"non-finite metric in record: {record}")
        self._f.write(json.dumps(record, sort_keys=True) + "\n")
        self._f.flush()
        if self._t is not None:
            now = time.monotonic()
            self._t.write(json.dumps({"wall_clock_ms": (now - self._last) * 1e3},
                                     sort_keys=True) + "\n")
            self._t.flush()
            self._last = now

    def close(self):
        self._f.close()
        if self._t is not None:
            self._t.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
