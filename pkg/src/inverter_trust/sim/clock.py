from __future__ import annotations

from datetime import datetime, timedelta


class ClockError(ValueError):
    pass


class SimClock:
    """Monotonic simulated UTC clock; moves only when told to."""

    def __init__(self, start: datetime):
        if start.tzinfo is None:
            raise ClockError("clock start must be timezone-aware")
        self._now = start

    def now(self) -> datetime:
        return self._now

    __call__ = now

    def advance_to(self, when: datetime) -> None:
        if when < self._now:
            raise ClockError(f"clock cannot move backwards from {self._now.isoformat()} to {when.isoformat()}")
        self._now = when

    def advance(self, delta: timedelta) -> None:
        self.advance_to(self._now + delta)
