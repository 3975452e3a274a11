"""Three-tier concurrency control: model-call rate gate, capacity semaphore, quotas.

The tiers are independent gates applied in sequence at admission (quota,
then capacity) with the rate gate consulted later, once per model call.
Disabling one tier never loosens another.
"""

from __future__ import annotations

import math
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Optional


class RequestExceedsTotalCapacity(Exception):
    pass


class DoubleRelease(Exception):
    pass


class QuotaExceeded(Exception):
    def __init__(self, owner: str, reason: str, remaining_hours: float):
        super().__init__(f"quota denied for {owner!r}: {reason} (remaining {remaining_hours:.4g} h)")
        self.owner = owner
        self.reason = reason
        self.remaining_hours = remaining_hours


class RateGate:
    """Token bucket over caller-supplied timestamps.

    Grants over any window [t, t+d] never exceed burst + rate_per_sec * d.
    The bucket starts full; ``acquire`` returns None on grant, otherwise the
    milliseconds until a token will exist.
    """

    def __init__(self, rate_per_sec: float, burst: int):
        if rate_per_sec <= 0 or burst < 1:
            raise ValueError("rate_per_sec must be > 0 and burst >= 1")
        self.rate_per_sec = rate_per_sec
        self.burst = burst
        self._tokens = float(burst)
        self._last_refill_ms: Optional[int] = None
        self._lock = threading.Lock()

    def _refill(self, now_ms: int) -> None:
        if self._last_refill_ms is None:
            self._last_refill_ms = now_ms
            return
        elapsed_ms = max(0, now_ms - self._last_refill_ms)
        self._tokens = min(float(self.burst),
                           self._tokens + elapsed_ms / 1000.0 * self.rate_per_sec)
        self._last_refill_ms = now_ms

    def acquire(self, now_ms: int) -> Optional[int]:
        with self._lock:
            self._refill(now_ms)
            if self._tokens >= 1.0:
                self._tokens -= 1.0
                return None
            deficit = 1.0 - self._tokens
            return max(1, math.ceil(deficit / self.rate_per_sec * 1000.0))

    @property
    def tokens(self) -> float:
        return self._tokens


@dataclass(frozen=True)
class Ticket:
    ticket_id: int
    n: int


class CapacitySemaphore:
    """Counting semaphore with FIFO waiters and ticketed, double-release-safe release."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._held = 0
        self._cond = threading.Condition()
        self._waiters: deque[dict] = deque()
        self._next_ticket = 1
        self._outstanding: set[int] = set()
        self.max_held_observed = 0

    @property
    def held(self) -> int:
        return self._held

    def _grant_locked(self, n: int) -> Ticket:
        self._held += n
        self.max_held_observed = max(self.max_held_observed, self._held)
        ticket = Ticket(self._next_ticket, n)
        self._next_ticket += 1
        self._outstanding.add(ticket.ticket_id)
        return ticket

    def try_acquire(self, n: int = 1) -> Optional[Ticket]:
        """Non-blocking acquire; defers to queued waiters to preserve FIFO order."""
        if n > self.capacity:
            raise RequestExceedsTotalCapacity(f"{n} > capacity {self.capacity}")
        with self._cond:
            if self._waiters or self._held + n > self.capacity:
                return None
            return self._grant_locked(n)

    def acquire(self, n: int = 1, timeout: Optional[float] = None) -> Optional[Ticket]:
        """Blocking acquire; waiters are served strictly in arrival order."""
        if n > self.capacity:
            raise RequestExceedsTotalCapacity(f"{n} > capacity {self.capacity}")
        with self._cond:
            if not self._waiters and self._held + n <= self.capacity:
                return self._grant_locked(n)
            waiter = {"n": n, "ticket": None}
            self._waiters.append(waiter)
            granted = self._cond.wait_for(lambda: waiter["ticket"] is not None, timeout)
            if not granted:
                if waiter in self._waiters:
                    self._waiters.remove(waiter)
                return None
            return waiter["ticket"]

    def release(self, ticket: Ticket) -> None:
        with self._cond:
            if ticket.ticket_id not in self._outstanding:
                raise DoubleRelease(f"ticket {ticket.ticket_id} not outstanding")
            self._outstanding.discard(ticket.ticket_id)
            self._held -= ticket.n
            # FIFO wakeup: grant consecutive head waiters that now fit.
            while self._waiters and self._held + self._waiters[0]["n"] <= self.capacity:
                waiter = self._waiters.popleft()
                waiter["ticket"] = self._grant_locked(waiter["n"])
            self._cond.notify_all()


@dataclass
class Reservation:
    owner: str
    hours: float
    reservation_id: int


@dataclass
class _OwnerAccount:
    limit_hours: float = math.inf
    max_in_flight: int = 2**31
    consumed: float = 0.0
    reserved: float = 0.0
    in_flight: int = 0
    reservations: dict = field(default_factory=dict)


class QuotaLedger:
    """Per-owner instance-hour budgets, reserved at admission and settled on completion."""

    def __init__(self):
        self._lock = threading.Lock()
        self._accounts: dict[str, _OwnerAccount] = {}
        self._next_id = 1

    def set_quota(self, owner: str, limit_hours: float,
                  max_in_flight: Optional[int] = None) -> None:
        with self._lock:
            acct = self._accounts.setdefault(owner, _OwnerAccount())
            acct.limit_hours = limit_hours
            if max_in_flight is not None:
                acct.max_in_flight = max_in_flight

    def _account(self, owner: str) -> _OwnerAccount:
        return self._accounts.setdefault(owner, _OwnerAccount())

    def remaining_hours(self, owner: str) -> float:
        with self._lock:
            acct = self._account(owner)
            return acct.limit_hours - acct.consumed - acct.reserved

    def admit(self, owner: str, estimated_hours: float) -> Reservation:
        if estimated_hours < 0:
            raise ValueError("estimated_hours must be >= 0")
        with self._lock:
            acct = self._account(owner)
            remaining = acct.limit_hours - acct.consumed - acct.reserved
            if acct.consumed + acct.reserved + estimated_hours > acct.limit_hours:
                raise QuotaExceeded(owner, "instance-hour budget exhausted", remaining)
            if acct.in_flight + 1 > acct.max_in_flight:
                raise QuotaExceeded(owner, "max in-flight tasks reached", remaining)
            res = Reservation(owner, estimated_hours, self._next_id)
            self._next_id += 1
            acct.reserved += estimated_hours
            acct.in_flight += 1
            acct.reservations[res.reservation_id] = res
            return res

    def settle(self, owner: str, actual_hours: float,
               reservation: Optional[Reservation] = None) -> None:
        """Replace a reservation with actual consumption (oldest first if unspecified)."""
        with self._lock:
            acct = self._account(owner)
            res = self._take_reservation(acct, reservation)
            acct.reserved -= res.hours
            acct.consumed += max(0.0, actual_hours)
            acct.in_flight -= 1

    def cancel(self, reservation: Reservation) -> None:
        """Release a reservation without consuming anything (admission unwound)."""
        with self._lock:
            acct = self._account(reservation.owner)
            res = self._take_reservation(acct, reservation)
            acct.reserved -= res.hours
            acct.in_flight -= 1

    @staticmethod
    def _take_reservation(acct: _OwnerAccount, reservation: Optional[Reservation]) -> Reservation:
        if reservation is not None:
            found = acct.reservations.pop(reservation.reservation_id, None)
            if found is None:
                raise KeyError("reservation not outstanding")
            return found
        if not acct.reservations:
            raise KeyError("no outstanding reservation for owner")
        oldest_id = min(acct.reservations)
        return acct.reservations.pop(oldest_id)

    def consumed_hours(self, owner: str) -> float:
        with self._lock:
            return self._account(owner).consumed


@dataclass
class AdmissionGates:
    """The tier stack the scheduler consults; individual tiers may be disabled."""

    rate_gate: Optional[RateGate] = None
    capacity: Optional[CapacitySemaphore] = None
    quota: Optional[QuotaLedger] = None
