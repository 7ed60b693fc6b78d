"""Per-tick stage timing, process CPU and achieved tick rate, logged as CSV."""
from __future__ import annotations

import collections
import contextlib
import csv
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import psutil

STAGES = ("render", "protocol", "track")
HEADER = ["tick", "wall", "stage:render", "stage:protocol", "stage:track", "cpu_pct", "fps"]

log = logging.getLogger(__name__)


@dataclass
class ProfileSample:
    tick: int
    wall_time: float
    stages_ms: dict[str, float] = field(default_factory=dict)
    cpu_pct: float = 0.0
    frames: int = 0
    fps: float = 0.0

    def row(self) -> list[str]:
        return [
            str(self.tick),
            f"{self.wall_time:.6f}",
            *(f"{self.stages_ms.get(s, 0.0):.4f}" for s in STAGES),
            f"{self.cpu_pct:.1f}",
            f"{self.fps:.3f}",
        ]


class Profiler:
    """Collects one sample per tick.

    ``instrument`` scopes may nest; time is attributed to the innermost open
    stage only. Writing is best-effort: an I/O failure is logged once and
    later rows are dropped, the simulation keeps going.
    """

    def __init__(self, path: str | Path | None = None, window: float = 1.0, keep: bool = True):
        self.window = window
        self.keep = keep
        self.samples: list[ProfileSample] = []
        self.write_error: Optional[OSError] = None
        self._local = threading.local()
        self._lock = threading.Lock()
        self._pending: dict[str, float] = collections.defaultdict(float)
        self._times: collections.deque[float] = collections.deque()
        self._t0 = time.perf_counter()
        self._last_wall = 0.0
        self._proc = psutil.Process()
        self._proc.cpu_percent(None)
        self._fh = None
        self._writer = None
        if path is not None:
            try:
                self._fh = open(path, "w", newline="")
                self._writer = csv.writer(self._fh, lineterminator="\n")
                self._writer.writerow(HEADER)
                self._fh.flush()
            except OSError as exc:
                self._fail(exc)

    def _fail(self, exc: OSError) -> None:
        if self.write_error is None:
            log.warning("profile log disabled: %s", exc)
        self.write_error = exc
        self._writer = None

    def _stack(self) -> list:
        st = getattr(self._local, "stack", None)
        if st is None:
            st = self._local.stack = []
        return st

    @contextlib.contextmanager
    def instrument(self, stage: str) -> Iterator[None]:
        stack = self._stack()
        now = time.perf_counter()
        if stack:
            parent, since = stack[-1]
            self._add(parent, now - since)
        stack.append([stage, now])
        try:
            yield
        finally:
            end = time.perf_counter()
            name, since = stack.pop()
            self._add(name, end - since)
            if stack:
                stack[-1][1] = end

    def add(self, stage: str, seconds: float) -> None:
        self._add(stage, seconds)

    def _add(self, stage: str, seconds: float) -> None:
        with self._lock:
            self._pending[stage] += max(seconds, 0.0) * 1000.0

    def end_tick(self, tick: int, frames: int = 0) -> ProfileSample:
        wall = max(time.perf_counter() - self._t0, self._last_wall)
        self._last_wall = wall
        self._times.append(wall)
        while len(self._times) > 1 and wall - self._times[0] > self.window:
            self._times.popleft()
        span = self._times[-1] - self._times[0]
        fps = (len(self._times) - 1) / span if span > 0 else 0.0
        with self._lock:
            stages, self._pending = dict(self._pending), collections.defaultdict(float)
        sample = ProfileSample(tick, wall, stages, self._proc.cpu_percent(None), frames, fps)
        if self.keep:
            self.samples.append(sample)
        if self._writer is not None:
            try:
                self._writer.writerow(sample.row())
                self._fh.flush()
            except OSError as exc:
                self._fail(exc)
        return sample

    def close(self) -> None:
        if self._fh is not None:
            try:
                self._fh.close()
            except OSError as exc:
                self._fail(exc)
            self._fh = None


class NullProfiler(Profiler):
    def __init__(self):
        self.samples = []
        self.write_error = None

    @contextlib.contextmanager
    def instrument(self, stage: str) -> Iterator[None]:
        yield

    def add(self, stage: str, seconds: float) -> None:
        pass

    def end_tick(self, tick: int, frames: int = 0) -> None:
        return None

    def close(self) -> None:
        pass


def emit(samples, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for s in samples:
            w.writerow(s.row())


def read_profile(path: str | Path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != HEADER:
            raise ValueError(f"unexpected profile header {reader.fieldnames}")
        return [{k: float(v) for k, v in row.items()} for row in reader]


def window_rates(walls, window: float = 1.0) -> list[float]:
    """Ticks completed in each consecutive ``window``-second bucket (partial last bucket dropped)."""
    if len(walls) < 2:
        return []
    t0 = walls[0]
    n = int((walls[-1] - t0) // window)
    counts = [0] * n
    for w in walls[1:]:
        k = int((w - t0) // window)
        if k < n:
            counts[k] += 1
    return [c / window for c in counts]
