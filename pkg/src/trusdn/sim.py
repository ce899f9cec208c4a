"""Deterministic discrete-event message fabric.

Every hop takes one tick.  Nodes are plain callables registered by name;
events at the same tick run in the order they were scheduled, so a run is a
pure function of the seed.  An optional tap (see :mod:`trusdn.adversary`)
observes and may rewrite every message.
"""

from __future__ import annotations

import enum
import heapq
import logging
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Optional

from .errors import TransportError

log = logging.getLogger(__name__)

HOP = 1


class Segment(str, enum.Enum):
    ALPHA = "alpha"  # controller <-> switch (and controller <-> compute task)
    BETA = "beta"  # switch <-> switch across hosts
    GAMMA = "gamma"  # switch <-> compute task
    PHYSICAL = "physical"


@dataclass(frozen=True)
class Envelope:
    src: str
    dst: str
    segment: Segment
    data: bytes


@dataclass(frozen=True)
class Event:
    tick: int
    source: str
    kind: str
    detail: str = ""


class Network:
    def __init__(self, tap=None):
        self.tick = 0
        self.nodes: dict[str, Callable[[Envelope], None]] = {}
        self.events: list[Event] = []
        self.counters: Counter = Counter()
        self.tap = tap
        self._queue: list = []
        self._seq = 0
        self._busy_until: dict[str, int] = {}
        if tap is not None:
            tap.attach(self)

    def now(self) -> int:
        return self.tick

    def register(self, name: str, handler: Callable[[Envelope], None]) -> None:
        self.nodes[name] = handler

    def schedule(self, delay: int, callback: Callable[[], None]) -> None:
        self.schedule_at(self.tick + delay, callback)

    def schedule_at(self, tick: int, callback: Callable[[], None]) -> None:
        heapq.heappush(self._queue, (max(tick, self.tick), self._seq, callback))
        self._seq += 1

    def record(self, source: str, kind: str, detail: str = "") -> None:
        self.events.append(Event(self.tick, source, kind, detail))

    def events_of(self, kind: str, source: Optional[str] = None) -> list[Event]:
        return [e for e in self.events if e.kind == kind and (source is None or e.source == source)]

    def send(self, src: str, dst: str, segment: Segment, data: bytes, *, serialize: bool = False) -> int:
        """Queue ``data`` for delivery.  With ``serialize`` the sender's output
        link carries one message per tick (the controller's control channel).
        Returns the departure tick."""
        depart = self.tick
        if serialize:
            depart = max(depart, self._busy_until.get(src, 0))
            self._busy_until[src] = depart + 1
        env = Envelope(src, dst, Segment(segment), data)
        self.counters[f"sent.{env.segment.value}"] += 1
        if self.tap is None:
            self._deliver_at(depart + HOP, env)
        else:
            for extra, out in self.tap.on_send(self.tick, env):
                self._deliver_at(depart + HOP + extra, out)
        return depart

    def inject(self, env: Envelope, delay: int = HOP) -> None:
        """Adversary injection path: bypasses the tap's recording."""
        self._deliver_at(self.tick + delay, env)

    def _deliver_at(self, tick: int, env: Envelope) -> None:
        self.schedule_at(tick, lambda env=env: self._deliver(env))

    def _deliver(self, env: Envelope) -> None:
        handler = self.nodes.get(env.dst)
        if handler is None:
            self.record("network", "undeliverable", env.dst)
            return
        self.counters[f"delivered.{env.segment.value}"] += 1
        handler(env)

    def exchange(self, src: str, dst: str, segment: Segment, data: bytes) -> bytes:
        """Synchronous hop used during deployment (attestation, enrollment).
        The tap sees and may rewrite it; a dropped message is a transport error."""
        env = Envelope(src, dst, Segment(segment), data)
        self.counters[f"sent.{env.segment.value}"] += 1
        if self.tap is not None:
            out = self.tap.on_exchange(self.tick, env)
            if out is None:
                raise TransportError(f"{src} -> {dst} message lost")
            return out
        return data

    def exchanger(self, segment: Segment = Segment.ALPHA):
        return lambda src, dst, data: self.exchange(src, dst, segment, data)

    def step(self) -> bool:
        if not self._queue:
            return False
        tick, _, callback = heapq.heappop(self._queue)
        self.tick = tick
        callback()
        return True

    def run(self, max_ticks: Optional[int] = None) -> int:
        """Run to quiescence (or until ``max_ticks``); returns the final tick."""
        limit = None if max_ticks is None else self.tick + max_ticks
        while self._queue:
            if limit is not None and self._queue[0][0] > limit:
                self.tick = limit
                break
            self.step()
        return self.tick

    @property
    def idle(self) -> bool:
        return not self._queue
