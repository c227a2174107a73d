"""Caffe-format training-log analytics: line grammar, batch and streaming
parsing, per-session metric series, and CSV export.

parse_log_line is total: any line that matches no production becomes an
Unrecognized event and never raises.
"""

from __future__ import annotations

import re
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path


class MetricsError(Exception):
    pass


class UnknownKey(MetricsError):
    def __init__(self, key: str, bundle: str):
        self.key = key
        self.bundle = bundle
        super().__init__(f"bundle {bundle!r} has no series {key!r}")


# ---------------------------------------------------------------------------
# Events

@dataclass(frozen=True)
class TrainLoss:
    iteration: int
    value: float


@dataclass(frozen=True)
class TrainOutput:
    iteration: int
    name: str
    value: float


@dataclass(frozen=True)
class TestBegin:
    iteration: int
    test_net_index: int


@dataclass(frozen=True)
class TestOutput:
    iteration: int
    output_index: int
    name: str
    value: float
    test_net_index: int = 0


@dataclass(frozen=True)
class LearningRate:
    iteration: int
    value: float


@dataclass(frozen=True)
class SnapshotWritten:
    iteration: int
    path: str


@dataclass(frozen=True)
class OptimizationDone:
    pass


@dataclass(frozen=True)
class Unrecognized:
    raw_line: str


@dataclass(frozen=True)
class Truncated:
    """Stream notice: the followed file shrank and is re-read from offset 0."""


@dataclass(frozen=True)
class ParserState:
    current_test_iteration: int | None = None
    current_test_net: int | None = None
    last_train_iteration: int | None = None
    last_snapshot_iteration: int | None = None


_PREFIX = r"[IWEF]\d{4} \d\d:\d\d:\d\d\.\d{6}\s+\d+\s+[^\]]+\]"
_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?|[-+]?inf|nan"

_TRAIN_LOSS_RE = re.compile(
    rf"^{_PREFIX}\s+Iteration (\d+)(?: \(({_NUM}) iters?/s, ({_NUM})s/(\d+) iters?\))?"
    rf", loss = ({_NUM})\s*$")
_TEST_BEGIN_RE = re.compile(
    rf"^{_PREFIX}\s+Iteration (\d+), Testing net \(#(\d+)\)\s*$")
_TEST_OUTPUT_RE = re.compile(
    rf"^{_PREFIX}\s+Test net output #(\d+): (\S+) = ({_NUM})"
    rf"(?: \(\* ({_NUM}) = ({_NUM}) loss\))?\s*$")
_TRAIN_OUTPUT_RE = re.compile(
    rf"^{_PREFIX}\s+Train net output #(\d+): (\S+) = ({_NUM})\s*$")
_LR_RE = re.compile(rf"^{_PREFIX}\s+Iteration (\d+), lr = ({_NUM})\s*$")
_SNAPSHOT_RE = re.compile(
    rf"^{_PREFIX}\s+Snapshotting to binary proto file (\S+)\s*$")
_DONE_RE = re.compile(rf"^{_PREFIX}\s+Optimization Done\.\s*$")
_SNAPSHOT_ITER_RE = re.compile(r"^{0}\s+Iteration (\d+), Snapshotting".format(_PREFIX))


def parse_log_line(state: ParserState, line: str) -> tuple[ParserState, list]:
    """Parse one log line; returns the next state and emitted events."""
    line = line.rstrip("\n")

    m = _TRAIN_LOSS_RE.match(line)
    if m:
        try:
            iteration, value = int(m.group(1)), float(m.group(5))
        except ValueError:
            return state, [Unrecognized(line)]
        new = replace(state, current_test_iteration=None, current_test_net=None,
                      last_train_iteration=iteration)
        return new, [TrainLoss(iteration, value)]

    m = _TEST_BEGIN_RE.match(line)
    if m:
        iteration, index = int(m.group(1)), int(m.group(2))
        new = replace(state, current_test_iteration=iteration,
                      current_test_net=index)
        return new, [TestBegin(iteration, index)]

    m = _TEST_OUTPUT_RE.match(line)
    if m:
        if state.current_test_iteration is None:
            return state, [Unrecognized(line)]
        try:
            value = float(m.group(3))
        except ValueError:
            return state, [Unrecognized(line)]
        event = TestOutput(state.current_test_iteration, int(m.group(1)),
                           m.group(2), value, state.current_test_net or 0)
        return state, [event]

    m = _TRAIN_OUTPUT_RE.match(line)
    if m:
        if state.last_train_iteration is None:
            return state, [Unrecognized(line)]
        try:
            value = float(m.group(3))
        except ValueError:
            return state, [Unrecognized(line)]
        return state, [TrainOutput(state.last_train_iteration, m.group(2), value)]

    m = _LR_RE.match(line)
    if m:
        try:
            iteration, value = int(m.group(1)), float(m.group(2))
        except ValueError:
            return state, [Unrecognized(line)]
        new = replace(state, current_test_iteration=None, current_test_net=None)
        return new, [LearningRate(iteration, value)]

    m = _SNAPSHOT_RE.match(line)
    if m:
        iteration = (state.last_train_iteration
                     if state.last_train_iteration is not None else 0)
        return state, [SnapshotWritten(iteration, m.group(1))]

    if _DONE_RE.match(line):
        return state, [OptimizationDone()]

    return state, [Unrecognized(line)]


def parse_log_text(text: str) -> list:
    """Batch-parse a whole log; skips the trailing empty fragment."""
    state = ParserState()
    events: list = []
    for line in text.splitlines():
        state, new_events = parse_log_line(state, line)
        events.extend(new_events)
    return events


# ---------------------------------------------------------------------------
# Series store

def series_key(event) -> str | None:
    if isinstance(event, TrainLoss):
        return "train/loss"
    if isinstance(event, TrainOutput):
        return f"train/{event.name}"
    if isinstance(event, TestOutput):
        return f"test{event.test_net_index}/{event.name}"
    if isinstance(event, LearningRate):
        return "lr"
    return None


@dataclass
class MetricBundle:
    """Named collection of metric series (one session or one imported log)."""
    label: str
    series: dict[str, list[tuple[int, float]]] = field(default_factory=dict)
    unrecognized: int = 0
    total_lines: int = 0

    @property
    def unrecognized_fraction(self) -> float:
        return self.unrecognized / self.total_lines if self.total_lines else 0.0

    def keys(self) -> list[str]:
        return sorted(self.series)


def ingest(bundle: MetricBundle, events) -> MetricBundle:
    for event in events:
        bundle.total_lines += 1
        if isinstance(event, Unrecognized):
            bundle.unrecognized += 1
            continue
        key = series_key(event)
        if key is None:
            continue
        bundle.series.setdefault(key, []).append((event.iteration, event.value))
    return bundle


def bundle_from_events(label: str, events) -> MetricBundle:
    return ingest(MetricBundle(label), events)


def import_external_log(path, label: str | None = None) -> MetricBundle:
    path = Path(path)
    raw = path.read_bytes().decode("utf-8", errors="replace")
    return bundle_from_events(label or path.stem, parse_log_text(raw))


# ---------------------------------------------------------------------------
# Streaming

class LogFollower:
    """Tail a log file: replay existing content, then poll for appends.

    Yields LogEvent objects plus Truncated notices when the file shrinks.
    Stop with .stop(); iteration also ends when `until` returns True at EOF.
    """

    def __init__(self, path, poll_interval: float = 0.1,
                 until=None, start_offset: int = 0):
        self.path = Path(path)
        self.poll_interval = poll_interval
        self.until = until
        self.offset = start_offset
        self._stop = threading.Event()
        self._buffer = ""
        self._state = ParserState()

    def stop(self) -> None:
        self._stop.set()

    def __iter__(self):
        while not self._stop.is_set():
            if not self.path.exists():
                if self.until is not None and self.until():
                    return
                time.sleep(self.poll_interval)
                continue
            size = self.path.stat().st_size
            if size < self.offset:
                yield Truncated()
                self.offset = 0
                self._buffer = ""
                self._state = ParserState()
            if size > self.offset:
                with open(self.path, "rb") as fh:
                    fh.seek(self.offset)
                    chunk = fh.read()
                self.offset += len(chunk)
                self._buffer += chunk.decode("utf-8", errors="replace")
                while "\n" in self._buffer:
                    line, self._buffer = self._buffer.split("\n", 1)
                    self._state, events = parse_log_line(self._state, line)
                    yield from events
            else:
                if self.until is not None and self.until():
                    if self._buffer:  # final line without trailing newline
                        self._state, events = parse_log_line(self._state, self._buffer)
                        self._buffer = ""
                        yield from events
                    return
                time.sleep(self.poll_interval)


def follow_log(path, poll_interval: float = 0.1, until=None) -> LogFollower:
    return LogFollower(path, poll_interval=poll_interval, until=until)


# ---------------------------------------------------------------------------
# CSV export

def _format_value(value: float) -> str:
    text = f"{value:.6g}"
    return text


def export_csv(bundles: list[MetricBundle], keys: list[str]) -> tuple[str, list[str]]:
    """Export selected series as CSV; returns (text, warnings).

    One column per (bundle, key); unknown keys warn and yield empty columns.
    """
    if not keys:
        raise MetricsError("at least one series key is required")
    warnings: list[str] = []
    columns: list[tuple[str, dict[int, float]]] = []
    for bundle in bundles:
        for key in keys:
            header = f"{bundle.label}/{key}"
            points = bundle.series.get(key)
            if points is None:
                warnings.append(f"bundle {bundle.label!r} has no series {key!r}")
                columns.append((header, {}))
            else:
                columns.append((header, dict(points)))

    iterations = sorted({i for _, pts in columns for i in pts})
    lines = ["iteration," + ",".join(h for h, _ in columns)]
    for iteration in iterations:
        cells = [str(iteration)]
        for _, pts in columns:
            cells.append(_format_value(pts[iteration]) if iteration in pts else "")
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n", warnings


def parse_csv(text: str) -> dict[str, list[tuple[int, float]]]:
    """Inverse of export_csv for round-trip checks."""
    lines = [l for l in text.split("\n") if l]
    header = lines[0].split(",")
    series: dict[str, list[tuple[int, float]]] = {name: [] for name in header[1:]}
    for line in lines[1:]:
        cells = line.split(",")
        iteration = int(cells[0])
        for name, cell in zip(header[1:], cells[1:]):
            if cell:
                series[name].append((iteration, float(cell)))
    return series
