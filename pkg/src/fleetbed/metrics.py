"""Fleet activity metrics computed from the heartbeat ledger."""

from __future__ import annotations

import bisect
from collections import defaultdict
from dataclasses import dataclass

from .core import utc_day
from .errors import InvalidArgument, UndefinedRatioError


@dataclass(frozen=True)
class DayActivity:
    day: int  # days since the Unix epoch (UTC)
    active: int
    enrolled: int

    @property
    def ratio(self) -> float:
        return self.active / self.enrolled


def daily_active(ledger, enrolled, first_day: int | None = None, last_day: int | None = None):
    """Per-UTC-day active counts.

    A device is active on day ``d`` when at least one of its heartbeats was
    received that day. ``ledger`` holds mappings with ``device`` and
    ``received_at`` keys. The day span defaults to the ledger's own span.
    """
    enrolled = set(enrolled)
    if not enrolled:
        raise UndefinedRatioError("no enrolled devices; daily active ratio is undefined")
    seen = defaultdict(set)
    for entry in ledger:
        device = entry["device"]
        if device in enrolled:
            seen[utc_day(entry["received_at"])].add(device)
    if first_day is None:
        first_day = min(seen) if seen else 0
    if last_day is None:
        last_day = max(seen) if seen else first_day
    return [DayActivity(d, len(seen.get(d, ())), len(enrolled)) for d in range(first_day, last_day + 1)]


class RatioCDF:
    """Empirical CDF of a ratio series; a right-continuous step function."""

    def __init__(self, series):
        values = sorted(float(x) for x in series)
        if not values:
            raise InvalidArgument("ratio CDF needs a non-empty series")
        self._values = values
        n = len(values)
        self.points = []
        for i, x in enumerate(values):
            if i + 1 < n and values[i + 1] == x:
                continue
            self.points.append((x, (i + 1) / n))

    def __call__(self, x: float) -> float:
        return bisect.bisect_right(self._values, x) / len(self._values)

    def __len__(self):
        return len(self._values)

    def median(self) -> float:
        v = self._values
        n = len(v)
        mid = n // 2
        return v[mid] if n % 2 else (v[mid - 1] + v[mid]) / 2


def ratio_cdf(series) -> RatioCDF:
    return RatioCDF(series)
