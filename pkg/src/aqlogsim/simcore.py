"""Deterministic discrete-event core: simulated clock, event queue, seeded randomness."""

from __future__ import annotations

import hashlib
import heapq
from dataclasses import dataclass
from statistics import NormalDist
from typing import Callable

SimTime = int  # integer milliseconds from simulation start

SECOND_MS = 1_000
MINUTE_MS = 60 * SECOND_MS
HOUR_MS = 60 * MINUTE_MS
DAY_MS = 24 * HOUR_MS


class SchedulingError(ValueError):
    """Event scheduled before the current clock, or run target in the past."""


@dataclass
class Event:
    """A scheduled callback: delivered to the handler registered for `target`."""

    fire_at: SimTime
    target: str
    kind: str
    payload: bytes = b""


class RandomStream:
    """Counter-based random stream keyed by (seed, stream_id).

    Draw k is blake2b(key=H(seed, stream_id), data=k), so any draw is a pure
    function of (seed, stream_id, index). Streams never interact: adding a
    consumer of one stream cannot shift the values seen by another.
    """

    __slots__ = ("seed", "stream_id", "draws", "_key")

    def __init__(self, seed: int, stream_id: str):
        self.seed = seed
        self.stream_id = stream_id
        self.draws = 0
        self._key = hashlib.blake2b(
            seed.to_bytes(8, "little", signed=True) + stream_id.encode(),
            digest_size=32,
        ).digest()

    def _next_u64(self) -> int:
        digest = hashlib.blake2b(
            self.draws.to_bytes(8, "little"), key=self._key, digest_size=8
        ).digest()
        self.draws += 1
        return int.from_bytes(digest, "little")

    def random(self) -> float:
        """Uniform float in [0, 1)."""
        return self._next_u64() / 2.0**64

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.random()

    def randint(self, low: int, high: int) -> int:
        # modulo bias is ~2^-50 for the ranges used here
        return low + self._next_u64() % (high - low + 1)

    def normal(self, mean: float = 0.0, sd: float = 1.0) -> float:
        u = (self._next_u64() + 0.5) / 2.0**64
        return mean + sd * NormalDist().inv_cdf(u)

    def bernoulli(self, p: float) -> bool:
        return self.random() < p


Handler = Callable[["Simulator", Event], None]


class Simulator:
    """Single-threaded event loop with FIFO tie-breaking among equal fire times.

    Entities register a handler under their identifier; events address entities
    by that identifier. Randomness is handed out as per-entity RandomStreams
    derived from the run seed.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.now: SimTime = 0
        self._heap: list[tuple[SimTime, int, Event]] = []
        self._insertions = 0
        self._pending: dict[int, Event] = {}
        self._cancelled: set[int] = set()
        self._handlers: dict[str, Handler] = {}
        self._streams: dict[str, RandomStream] = {}
        self.scheduled_count = 0
        self.fired_count = 0
        self.cancelled_count = 0

    # -- randomness -------------------------------------------------------

    def stream(self, stream_id: str) -> RandomStream:
        st = self._streams.get(stream_id)
        if st is None:
            st = self._streams[stream_id] = RandomStream(self.seed, stream_id)
        return st

    # -- scheduling -------------------------------------------------------

    def register(self, target: str, handler: Handler) -> None:
        self._handlers[target] = handler

    def schedule(self, event: Event) -> int:
        """Enqueue `event`; returns a handle usable with cancel()."""
        if event.fire_at < self.now:
            raise SchedulingError(
                f"event at t={event.fire_at} is in the past (clock={self.now})"
            )
        handle = self._insertions
        self._insertions += 1
        heapq.heappush(self._heap, (event.fire_at, handle, event))
        self._pending[handle] = event
        self.scheduled_count += 1
        return handle

    def schedule_at(
        self, fire_at: SimTime, target: str, kind: str, payload: bytes = b""
    ) -> int:
        return self.schedule(Event(fire_at, target, kind, payload))

    def cancel(self, handle: int) -> bool:
        """Cancel a pending event. Returns False if it already fired or was cancelled."""
        if handle not in self._pending:
            return False
        del self._pending[handle]
        self._cancelled.add(handle)
        self.cancelled_count += 1
        return True

    def cancel_target(self, target: str) -> int:
        """Cancel every pending event addressed to `target`."""
        handles = [h for h, ev in self._pending.items() if ev.target == target]
        for h in handles:
            self.cancel(h)
        return len(handles)

    def drain(self) -> int:
        """Cancel all remaining pending events (end-of-run cleanup)."""
        handles = list(self._pending)
        for h in handles:
            self.cancel(h)
        return len(handles)

    @property
    def pending_count(self) -> int:
        return len(self._pending)

    # -- execution --------------------------------------------------------

    def run_until(self, end: SimTime) -> int:
        """Execute all events with fire_at <= end in order; leaves clock at end."""
        if end < self.now:
            raise SchedulingError(f"run_until({end}) is before clock={self.now}")
        steps = 0
        while self._heap and self._heap[0][0] <= end:
            fire_at, handle, event = heapq.heappop(self._heap)
            if handle in self._cancelled:
                self._cancelled.discard(handle)
                continue
            del self._pending[handle]
            self.now = fire_at
            handler = self._handlers.get(event.target)
            if handler is None:
                raise LookupError(f"no handler registered for target {event.target!r}")
            self.fired_count += 1
            steps += 1
            handler(self, event)
        self.now = end
        return steps
