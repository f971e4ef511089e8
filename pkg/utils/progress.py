"""Progress reporting for training loops, with ETA."""

import sys
import time
from collections import deque
from typing import Callable, Optional

ProgressFn = Callable[[str, int, int], None]


def notify(on_progress: Optional[ProgressFn], step_name: str, done: int, total: int) -> None:
    """Call ``on_progress`` if one was given."""
    if on_progress is not None:
        on_progress(step_name, done, total)


class ProgressTracker:
    """Tracks completed units (epochs, rounds, seeds) for one step.

    ETA uses the mean of the last ``window_size`` per-unit durations.
    """

    def __init__(self, total: int, window_size: int = 10, step_name: str = ""):
        self.total = total
        self.done = 0
        self.step_name = step_name
        self._last_time: Optional[float] = None
        self._durations: deque = deque(maxlen=window_size)

    def start(self):
        self._last_time = time.monotonic()

    def advance_to(self, done: int):
        """Record progress up to ``done`` units."""
        now = time.monotonic()
        step = done - self.done
        if step > 0 and self._last_time is not None:
            self._durations.append((now - self._last_time) / step)
        self._last_time = now
        self.done = max(self.done, done)

    @property
    def percent(self) -> float:
        if self.total == 0:
            return 100.0
        return 100.0 * self.done / self.total

    @property
    def seconds_per_unit(self) -> float:
        if not self._durations:
            return 0.0
        return sum(self._durations) / len(self._durations)

    @property
    def eta_seconds(self) -> Optional[float]:
        if not self._durations or self.done >= self.total:
            return None
        return (self.total - self.done) * self.seconds_per_unit

    def format_progress(self) -> str:
        """[step] done/total (pct%) | s/unit | ETA: time"""
        parts = []
        if self.step_name:
            parts.append(f"[{self.step_name}]")
        parts.append(f"{self.done}/{self.total}")
        parts.append(f"({self.percent:.0f}%)")
        if self.seconds_per_unit > 0:
            parts.append(f"| {self.seconds_per_unit:.2f} s/it")
        eta = self.eta_seconds
        if eta is not None:
            parts.append(f"| ETA: {format_duration(eta)}")
        return " ".join(parts)


def format_duration(seconds: float) -> str:
    """'1h 23m 45s', '2m 5s' or '45s'."""
    if seconds < 0:
        return "N/A"
    seconds = int(seconds)
    if seconds < 60:
        return f"{seconds}s"
    minutes, seconds = divmod(seconds, 60)
    if minutes < 60:
        return f"{minutes}m {seconds}s"
    hours, minutes = divmod(minutes, 60)
    return f"{hours}h {minutes}m {seconds}s"


class ProgressCallback:
    """``on_progress`` implementation that redraws one status line per step on stderr."""

    def __init__(self, print_interval: int = 1, stream=None):
        self.print_interval = print_interval
        self.stream = stream or sys.stderr
        self._trackers: dict[str, ProgressTracker] = {}
        self._last_printed: dict[str, int] = {}

    def __call__(self, step_name: str, done: int, total: int):
        tracker = self._trackers.get(step_name)
        if tracker is None or tracker.total != total or done < tracker.done:
            tracker = ProgressTracker(total, step_name=step_name)
            tracker.start()
            self._trackers[step_name] = tracker
            self._last_printed[step_name] = 0

        tracker.advance_to(done)

        if done == total or done - self._last_printed[step_name] >= self.print_interval:
            print(f"\r{tracker.format_progress()}", end="", file=self.stream, flush=True)
            self._last_printed[step_name] = done
            if done == total:
                print(file=self.stream)


def create_progress_callback(print_every: int = 1) -> ProgressFn:
    """Progress callback for trainers and the active-learning loop."""
    return ProgressCallback(print_interval=print_every)
