"""Ordered publish/subscribe bus for instance-lifecycle and task-outcome events.

All coordination in the control plane is reactive: nothing polls, handlers
run only when events arrive. Delivery is at-least-once with a global
sequence number, so consumers are expected to be idempotent (keyed by seq).
A subscription whose handler raises is paused with the failed event still
pending; resuming it redelivers from the cursor, which is exactly the
crash-recovery story.
"""

from __future__ import annotations

import json
import threading
from collections import deque
from typing import Any, Callable, Iterable, Mapping, Optional

from .core import Event, EventKind, event_to_doc

DEFAULT_RETENTION = 1_000_000


class SeqTruncated(Exception):
    def __init__(self, from_seq: int, horizon: int):
        super().__init__(f"seq {from_seq} precedes retention horizon {horizon}")
        self.horizon = horizon


class Subscription:
    """A handler's view of the bus: subscribed kinds plus a delivery cursor."""

    def __init__(self, kinds: frozenset, handler: Callable[[Event], None],
                 handler_id: str, cursor: int):
        self.kinds = kinds
        self.handler = handler
        self.handler_id = handler_id
        self.cursor = cursor  # last processed seq
        self.paused = False
        self.last_error: Optional[BaseException] = None
        self._pending: deque[Event] = deque()
        self._state_lock = threading.Lock()
        self._draining = False


class EventBus:
    """In-process bus with a bounded, replayable event log."""

    def __init__(self, clock=None, retention: int = DEFAULT_RETENTION):
        self._clock = clock
        self._lock = threading.Lock()
        self._next_seq = 1
        self._horizon = 1  # lowest retained seq
        self._log: deque[Event] = deque()
        self._retention = retention
        self._subs: list[Subscription] = []
        self.handler_invocations = 0

    @property
    def max_seq(self) -> int:
        return self._next_seq - 1

    def publish(self, kind: EventKind, subject_id: str, payload: Mapping[str, Any],
                timestamp: Optional[int] = None) -> int:
        """Append an event and deliver it to matching subscriptions; returns its seq."""
        if timestamp is None:
            timestamp = self._clock.now_ms() if self._clock is not None else 0
        with self._lock:
            seq = self._next_seq
            self._next_seq += 1
            ev = Event(seq=seq, kind=kind, subject_id=subject_id,
                       payload=dict(payload), timestamp=timestamp)
            self._log.append(ev)
            while len(self._log) > self._retention:
                self._log.popleft()
                self._horizon += 1
            matching = [sub for sub in self._subs if kind in sub.kinds]
            for sub in matching:
                with sub._state_lock:
                    sub._pending.append(ev)
        for sub in matching:
            self._drain(sub)
        return seq

    def subscribe(self, kinds: Iterable[EventKind], handler: Callable[[Event], None],
                  handler_id: str = "", from_seq: Optional[int] = None) -> Subscription:
        """Register a handler; ``from_seq`` backfills retained history first."""
        kindset = frozenset(kinds)
        with self._lock:
            if from_seq is None:
                cursor = self.max_seq
                backlog: list[Event] = []
            else:
                if from_seq < self._horizon and from_seq <= self.max_seq:
                    raise SeqTruncated(from_seq, self._horizon)
                cursor = from_seq - 1
                backlog = [ev for ev in self._log if ev.seq >= from_seq and ev.kind in kindset]
            sub = Subscription(kindset, handler, handler_id, cursor)
            sub._pending.extend(backlog)
            self._subs.append(sub)
        self._drain(sub)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            if sub in self._subs:
                self._subs.remove(sub)

    def resume(self, sub: Subscription) -> None:
        """Unpause a crashed subscription and redeliver everything past its cursor."""
        with self._lock:
            with sub._state_lock:
                sub.paused = False
                sub.last_error = None
                sub._pending.clear()
                backlog = [ev for ev in self._log
                           if ev.seq > sub.cursor and ev.kind in sub.kinds]
                sub._pending.extend(backlog)
        self._drain(sub)

    def replay(self, from_seq: int, kinds: Optional[Iterable[EventKind]] = None) -> list[Event]:
        """All retained events with seq >= from_seq, in order; empty if in the future."""
        with self._lock:
            if from_seq > self.max_seq:
                return []
            if from_seq < self._horizon:
                raise SeqTruncated(from_seq, self._horizon)
            kindset = frozenset(kinds) if kinds is not None else None
            return [ev for ev in self._log
                    if ev.seq >= from_seq and (kindset is None or ev.kind in kindset)]

    def _drain(self, sub: Subscription) -> None:
        # One drainer at a time per subscription keeps handler invocations
        # serial and in seq order even with concurrent publishers; the outer
        # loop re-checks for events that arrived while we held the flag.
        while True:
            with sub._state_lock:
                if sub._draining or sub.paused or not sub._pending:
                    return
                sub._draining = True
            try:
                while True:
                    with sub._state_lock:
                        if sub.paused or not sub._pending:
                            break
                        ev = sub._pending.popleft()
                    if ev.seq <= sub.cursor:
                        continue
                    self.handler_invocations += 1
                    try:
                        sub.handler(ev)
                    except Exception as exc:  # handler crash: keep event pending
                        with sub._state_lock:
                            sub._pending.appendleft(ev)
                            sub.paused = True
                            sub.last_error = exc
                        break
                    sub.cursor = ev.seq
            finally:
                with sub._state_lock:
                    sub._draining = False

    def dump_jsonl(self) -> str:
        """Serialize the retained log as JSON lines (deterministic byte output)."""
        with self._lock:
            events = list(self._log)
        return "".join(json.dumps(event_to_doc(ev), sort_keys=True) + "\n" for ev in events)

    def events_for_subject(self, subject_id: str) -> list[Event]:
        with self._lock:
            return [ev for ev in self._log if ev.subject_id == subject_id]
