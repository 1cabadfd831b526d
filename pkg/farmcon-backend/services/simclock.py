"""
Clocks

SimClock is the logical clock shared by the simulated farm and every module
under test: time only moves when someone advances it, and timers fire in
(deadline, insertion) order. WallClock has the same interface on real time.

Both expose `wait(cond, timeout)`, used by blocking reads: on the wall clock
it is a condition wait, on the simulated clock it advances time up to the
next due timer (or the deadline) and runs those timers, which is where
simulated peers produce the bytes the reader is waiting for.
"""

import heapq
import itertools
import re
import threading
import time
from datetime import datetime, timedelta, timezone
from typing import Callable, List, Optional, Tuple

from errors import BadRequest

# Simulated time zero; only used to render RFC3339 timestamps.
SIM_EPOCH = datetime(2003, 3, 24, 0, 0, 0, tzinfo=timezone.utc)


def rfc3339(dt: datetime) -> str:
    return dt.astimezone(timezone.utc).isoformat(timespec="milliseconds").replace("+00:00", "Z")


_RFC3339 = re.compile(
    r"^(\d{4}-\d{2}-\d{2})[Tt ](\d{2}:\d{2}:\d{2})(?:\.(\d{1,9}))?([Zz]|[+-]\d{2}:\d{2})?$"
)


def parse_rfc3339(text: str) -> datetime:
    """RFC3339 with any fraction length; a missing offset means UTC"""
    m = _RFC3339.match(text.strip())
    if m is None:
        raise ValueError(f"not an RFC3339 timestamp: {text!r}")
    date, clock, fraction, offset = m.groups()
    micros = f".{(fraction or '0')[:6]:0<6}"
    if offset is None or offset in ("Z", "z"):
        offset = "+00:00"
    return datetime.fromisoformat(f"{date}T{clock}{micros}{offset}")


def time_filter(text: Optional[str]) -> Optional[datetime]:
    """Parse a since/until filter; empty means no bound"""
    if not text:
        return None
    try:
        return parse_rfc3339(text)
    except ValueError:
        raise BadRequest(f"bad timestamp {text!r}")


class Timer:
    """Handle returned by call_at/call_later; cancel() prevents firing"""

    __slots__ = ("deadline", "callback", "cancelled")

    def __init__(self, deadline: float, callback: Callable[[], None]):
        self.deadline = deadline
        self.callback = callback
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class SimClock:
    """Deterministic logical clock with a pending timer queue"""

    def __init__(self, t0: float = 0.0, epoch: datetime = SIM_EPOCH):
        self._t = t0
        self._epoch = epoch
        self._queue: List[Tuple[float, int, Timer]] = []
        self._seq = itertools.count()
        self._lock = threading.RLock()

    def now(self) -> float:
        return self._t

    def datetime(self) -> datetime:
        return self._epoch + timedelta(seconds=self._t)

    def timestamp(self) -> str:
        return rfc3339(self.datetime())

    def to_datetime(self, t: float) -> datetime:
        return self._epoch + timedelta(seconds=t)

    def call_at(self, deadline: float, callback: Callable[[], None]) -> Timer:
        timer = Timer(max(deadline, self._t), callback)
        with self._lock:
            heapq.heappush(self._queue, (timer.deadline, next(self._seq), timer))
        return timer

    def call_later(self, delay: float, callback: Callable[[], None]) -> Timer:
        return self.call_at(self._t + delay, callback)

    def next_deadline(self) -> Optional[float]:
        with self._lock:
            while self._queue and self._queue[0][2].cancelled:
                heapq.heappop(self._queue)
            return self._queue[0][0] if self._queue else None

    def advance_to(self, target: float) -> None:
        """Run every timer due at or before target, then set time to target"""
        while True:
            with self._lock:
                if not self._queue or self._queue[0][0] > target:
                    break
                deadline, _, timer = heapq.heappop(self._queue)
                if timer.cancelled:
                    continue
                self._t = max(self._t, deadline)
            timer.callback()
        with self._lock:
            self._t = max(self._t, target)

    def advance(self, dt: float) -> float:
        self.advance_to(self._t + dt)
        return self._t

    def sleep(self, dt: float) -> None:
        self.advance(dt)

    def wait(self, cond: threading.Condition, timeout: float) -> None:
        # Caller holds cond; release it so firing timers can write to peers.
        target = self._t + timeout
        nxt = self.next_deadline()
        if nxt is not None and nxt < target:
            target = nxt
        cond.release()
        try:
            self.advance_to(target)
        finally:
            cond.acquire()


class WallClock:
    """Real-time clock with the SimClock interface (demo runs, production)"""

    def __init__(self):
        self._t0 = time.monotonic()
        self._epoch = datetime.now(timezone.utc)
        self._timers: List[Timer] = []

    def now(self) -> float:
        return time.monotonic() - self._t0

    def datetime(self) -> datetime:
        return self._epoch + timedelta(seconds=self.now())

    def timestamp(self) -> str:
        return rfc3339(self.datetime())

    def to_datetime(self, t: float) -> datetime:
        return self._epoch + timedelta(seconds=t)

    def call_at(self, deadline: float, callback: Callable[[], None]) -> Timer:
        timer = Timer(deadline, callback)

        def fire():
            if not timer.cancelled:
                callback()

        thread = threading.Timer(max(0.0, deadline - self.now()), fire)
        thread.daemon = True
        thread.start()
        return timer

    def call_later(self, delay: float, callback: Callable[[], None]) -> Timer:
        return self.call_at(self.now() + delay, callback)

    def sleep(self, dt: float) -> None:
        time.sleep(dt)

    def wait(self, cond: threading.Condition, timeout: float) -> None:
        cond.wait(timeout)
