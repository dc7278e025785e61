"""Per-region availability from upload-batch rates, with hysteresis.

Each region's uploads are counted in fixed windows aligned to multiples of
``window`` seconds. The baseline is the mean of the last ``k`` windows evaluated
as healthy and is frozen while a region is degraded or recovering.

    healthy    -> degraded    rate <  theta_low  * baseline
    degraded   -> recovering  rate >= theta_high * baseline
    recovering -> healthy     r further consecutive windows >= theta_high * baseline
    recovering -> degraded    rate <  theta_low  * baseline

A recovering window below ``theta_high`` but not below ``theta_low`` just resets the
consecutive count. Until ``k`` windows have been seen a region is
``indeterminate``; leaving that warm-up state is not reported as a transition.
"""

from __future__ import annotations

import enum
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Iterable

from nel_scope.collector import MeasurementRecord


class State(str, enum.Enum):
    INDETERMINATE = "indeterminate"
    HEALTHY = "healthy"
    DEGRADED = "degraded"
    RECOVERING = "recovering"


@dataclass(frozen=True)
class MonitorConfig:
    window: float = 60.0
    k: int = 5
    theta_low: float = 0.5
    theta_high: float = 0.8
    r: int = 3

    def __post_init__(self) -> None:
        if self.window <= 0 or self.k < 1 or self.r < 1:
            raise ValueError("window must be > 0, k and r >= 1")
        if not 0 <= self.theta_low < self.theta_high:
            raise ValueError("need 0 <= theta_low < theta_high")


@dataclass(frozen=True)
class RegionHealth:
    region_id: str
    window: float
    baseline_rate: float
    current_rate: int
    state: State


@dataclass(frozen=True)
class Transition:
    ts: float
    region_id: str
    old_state: State
    new_state: State

    def line(self) -> str:
        return f"{self.ts:g},{self.region_id},{self.old_state.value},{self.new_state.value}"


@dataclass
class _Region:
    first_window: int
    next_window: int
    state: State = State.INDETERMINATE
    history: deque = field(default_factory=deque)
    baseline: float = 0.0
    current: int = 0
    streak: int = 0


class AvailabilityMonitor:
    def __init__(self, config: MonitorConfig | None = None) -> None:
        self.config = config or MonitorConfig()
        self._counts: dict[str, dict[int, set]] = defaultdict(lambda: defaultdict(set))
        self._regions: dict[str, _Region] = {}
        self.transitions: list[Transition] = []

    def _window_of(self, ts: float) -> int:
        return int(ts // self.config.window)

    def track(self, region_id: str, since: float) -> None:
        """Start counting ``region_id`` from the window containing ``since`` even before uploads arrive."""
        if region_id not in self._regions:
            w = self._window_of(since)
            self._regions[region_id] = _Region(first_window=w, next_window=w)

    def ingest(self, record: MeasurementRecord) -> None:
        if not record.upload:
            return
        self.track(record.region_id, record.ts)
        key = record.batch_id if record.batch_id is not None else object()
        self._counts[record.region_id][self._window_of(record.ts)].add(key)

    def ingest_all(self, records: Iterable[MeasurementRecord]) -> None:
        for r in records:
            self.ingest(r)

    def window_count(self, region_id: str, window_index: int) -> int:
        return len(self._counts[region_id].get(window_index, ()))

    def evaluate(self, region_id: str, now: float) -> RegionHealth:
        """Advance ``region_id`` through every window that has closed by ``now``."""
        cfg = self.config
        reg = self._regions.get(region_id)
        if reg is None:
            return RegionHealth(region_id, cfg.window, 0.0, 0, State.INDETERMINATE)
        while (reg.next_window + 1) * cfg.window <= now:
            w = reg.next_window
            reg.next_window += 1
            self._step(region_id, reg, self.window_count(region_id, w), (w + 1) * cfg.window)
        return RegionHealth(region_id, cfg.window, reg.baseline, reg.current, reg.state)

    def evaluate_all(self, now: float) -> dict[str, RegionHealth]:
        return {rid: self.evaluate(rid, now) for rid in sorted(self._regions)}

    def _step(self, region_id: str, reg: _Region, count: int, ts: float) -> None:
        cfg = self.config
        reg.current = count
        if reg.state is State.INDETERMINATE:
            reg.history.append(count)
            if len(reg.history) >= cfg.k:
                reg.baseline = sum(reg.history) / len(reg.history)
                reg.state = State.HEALTHY
            return

        low = cfg.theta_low * reg.baseline
        high = cfg.theta_high * reg.baseline
        old = reg.state
        if old is State.HEALTHY:
            if count < low:
                reg.state = State.DEGRADED
            else:
                reg.history.append(count)
                while len(reg.history) > cfg.k:
                    reg.history.popleft()
                reg.baseline = sum(reg.history) / len(reg.history)
        elif old is State.DEGRADED:
            if count >= high:
                reg.state = State.RECOVERING
                reg.streak = 0
        elif old is State.RECOVERING:
            if count < low:
                reg.state = State.DEGRADED
            elif count >= high:
                reg.streak += 1
                if reg.streak >= cfg.r:
                    reg.state = State.HEALTHY
            else:
                reg.streak = 0
        if reg.state is not old:
            self.transitions.append(Transition(ts, region_id, old, reg.state))
