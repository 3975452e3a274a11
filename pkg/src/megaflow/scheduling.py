"""FIFO dispatch engine: admission gates, ephemeral and pooled paths, retries.

One logical dispatch loop consumes the queue. Admission applies the tier
gates in order (quota, then capacity; the rate gate applies later, per
model call) and is strictly FIFO with intentional head-of-line blocking:
if the head task cannot be admitted, nothing behind it dispatches in that
cycle. Everything after admission is event-driven -- instance lifecycle
events bind tasks to instances, task outcome events release resources.
"""

from __future__ import annotations

import logging
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .clock import Clock
from .core import (EventKind, ExecutionMode, InstanceState, TaskRecord, TaskStatus,
                   TaskSubmission, instance_to_doc, record_from_doc, record_to_doc,
                   transition_task_state, with_enqueue_seq, with_phase_timestamp,
                   with_result_ref)
from .events import EventBus
from .limits import AdmissionGates, QuotaExceeded, Ticket
from .persistence import MetadataStore, TaskQueue

log = logging.getLogger("megaflow.scheduler")


@dataclass(frozen=True)
class DispatchDecision:
    """A task bound to a running instance."""

    task_id: str
    instance_id: str
    mode: ExecutionMode
    decided_at: int
    enqueue_seq: int


class InstancePool:
    """Persistent-mode instance pool with least-loaded placement.

    Members are reused across tasks; a failed member is dropped and replaced
    on demand. ``pool_max`` bounds members plus in-flight provisions.
    """

    def __init__(self, pool_max: int, backend, profile, image_ref: str = "pool/base:latest"):
        if pool_max < 1:
            raise ValueError("pool_max must be >= 1")
        self.pool_max = pool_max
        self.backend = backend
        self.profile = profile
        self.image_ref = image_ref
        self.members: list[str] = []
        self.provisioning: set[str] = set()

    def size(self) -> int:
        return len(self.members) + len(self.provisioning)

    def can_grow(self) -> bool:
        return self.size() < self.pool_max and self.backend.fleet_headroom() > 0

    def grow(self) -> str:
        instance_id = self.backend.provision(self.profile, self.image_ref,
                                             ExecutionMode.PERSISTENT)
        self.provisioning.add(instance_id)
        # Warm backends report Running synchronously, before the lifecycle
        # event could find this id in the provisioning set.
        if self.backend.describe(instance_id).state is InstanceState.RUNNING:
            self.note_running(instance_id)
        return instance_id

    def note_running(self, instance_id: str) -> None:
        if instance_id in self.provisioning:
            self.provisioning.discard(instance_id)
            self.members.append(instance_id)

    def remove(self, instance_id: str) -> None:
        self.provisioning.discard(instance_id)
        if instance_id in self.members:
            self.members.remove(instance_id)

    def take(self) -> Optional[str]:
        """Least-loaded running member with a free slot, ties by join order."""
        best = None
        best_load = None
        for instance_id in self.members:
            desc = self.backend.describe(instance_id)
            if desc.state is not InstanceState.RUNNING:
                continue
            load = len(desc.active_tasks)
            if load >= self.profile.max_concurrent_tasks:
                continue
            if best_load is None or load < best_load:
                best, best_load = instance_id, load
        return best

    def idle_ids(self) -> list[str]:
        return [i for i in self.members
                if self.backend.describe(i).state is InstanceState.RUNNING
                and not self.backend.describe(i).active_tasks]

    def terminate_all(self) -> None:
        for instance_id in list(self.members):
            self.backend.terminate(instance_id)


@dataclass
class _TaskRuntime:
    """Scheduler-side mutable state for one task attempt."""

    ticket: Optional[Ticket] = None
    reservation: Optional[object] = None
    instance_id: Optional[str] = None
    settled: bool = False
    denials: int = 0


class Scheduler:
    """The dispatch engine over one backend, one queue, and one event bus."""

    def __init__(self, *, clock: Clock, bus: EventBus, queue: TaskQueue,
                 metadata: MetadataStore, gates: AdmissionGates, backend,
                 executor, profile, pool: Optional[InstancePool] = None,
                 retry_max: int = 3, mode_default: ExecutionMode = ExecutionMode.PERSISTENT,
                 quota_estimate_hours: float = 0.0, submit_latency_ms: int = 0,
                 ephemeral_image_ref: str = "task/base:latest"):
        self.clock = clock
        self.bus = bus
        self.queue = queue
        self.metadata = metadata
        self.gates = gates
        self.backend = backend
        self.executor = executor
        self.profile = profile
        self.pool = pool
        self.retry_max = retry_max
        self.mode_default = mode_default
        self.quota_estimate_hours = quota_estimate_hours
        self.submit_latency_ms = submit_latency_ms
        self.ephemeral_image_ref = ephemeral_image_ref

        self._lock = threading.RLock()
        self._runtime: dict[str, _TaskRuntime] = {}
        self._record_cache: dict[str, TaskRecord] = {}
        self._pending_instance: dict[str, str] = {}  # instance_id -> task_id awaiting Running
        self._pool_waiters: deque[str] = deque()
        self._next_task = 1
        self._cycle_pending = False

        self.decisions: list[DispatchDecision] = []
        self.admission_order: list[str] = []
        self.unknown_completions = 0

        executor.attach(self)
        self._instance_sub = bus.subscribe([EventKind.INSTANCE_STATE_CHANGED],
                                           self._on_instance_event, handler_id="scheduler-instances")
        self._task_sub = bus.subscribe([EventKind.TASK_COMPLETED, EventKind.TASK_FAILED],
                                       self.handle_completion, handler_id="scheduler-tasks")

    # ------------------------------------------------------------------
    # Records
    # ------------------------------------------------------------------

    def record(self, task_id: str) -> TaskRecord:
        rec = self._record_cache.get(task_id)
        if rec is None:
            rec = record_from_doc(self.metadata.get_record(f"task/{task_id}")[1])
            self._record_cache[task_id] = rec
        return rec

    def _put_record(self, rec: TaskRecord) -> None:
        self.metadata.put_record(f"task/{rec.task_id}", record_to_doc(rec))
        self._record_cache[rec.task_id] = rec

    def records(self) -> list[TaskRecord]:
        return [self.record(k.split("/", 1)[1]) for k in self.metadata.keys("task/")]

    # ------------------------------------------------------------------
    # Submission
    # ------------------------------------------------------------------

    def submit(self, submission: TaskSubmission, task_id: Optional[str] = None) -> str:
        with self._lock:
            if task_id is None:
                task_id = f"t-{self._next_task:06d}"
            self._next_task += 1
            now = self.clock.now_ms()
            seq = self.queue.enqueue(task_id)
            rec = TaskRecord(task_id=task_id, submission=submission, status=TaskStatus.QUEUED,
                             enqueue_seq=seq, phase_timestamps={"submitted": now})
            self._put_record(rec)
            self._runtime[task_id] = _TaskRuntime()
            self._kick(self.submit_latency_ms)
            return task_id

    def cancel(self, task_id: str, expected_version: Optional[int] = None) -> TaskRecord:
        with self._lock:
            version, doc = self.metadata.get_record(f"task/{task_id}")
            rec = record_from_doc(doc)
            rec = transition_task_state(rec, TaskStatus.CANCELLED, self.clock.now_ms())
            self.metadata.put_record(f"task/{task_id}", record_to_doc(rec),
                                     expected_version=expected_version)
            return rec

    def _kick(self, delay_ms: int = 0) -> None:
        if self._cycle_pending:
            return
        self._cycle_pending = True

        def _entry():
            with self._lock:
                self._cycle_pending = False
            self.run_dispatch_cycle()

        self.clock.call_later(delay_ms, _entry)

    # ------------------------------------------------------------------
    # Dispatch
    # ------------------------------------------------------------------

    def run_dispatch_cycle(self) -> list[DispatchDecision]:
        """Admit and route queued tasks FIFO until the head blocks; returns
        the decisions finalized during this cycle (ephemeral decisions land
        later, when their instance reports Running)."""
        cycle_decisions: list[DispatchDecision] = []
        with self._lock:
            while True:
                task_id = self.queue.peek()
                if task_id is None:
                    break
                rec = self.record(task_id)
                if rec.status is TaskStatus.CANCELLED:
                    self.queue.dequeue()
                    continue
                rt = self._runtime[task_id]
                mode = rec.submission.mode

                if mode is ExecutionMode.EPHEMERAL and self.backend.fleet_headroom() <= 0:
                    rt.denials += 1
                    break
                if mode is ExecutionMode.PERSISTENT and self.pool is None:
                    raise RuntimeError("persistent submission with no configured pool")

                reservation = None
                if self.gates.quota is not None:
                    try:
                        reservation = self.gates.quota.admit(rec.submission.owner,
                                                             self.quota_estimate_hours)
                    except QuotaExceeded:
                        rt.denials += 1
                        break
                ticket = None
                if self.gates.capacity is not None:
                    ticket = self.gates.capacity.try_acquire(1)
                    if ticket is None:
                        if reservation is not None:
                            self.gates.quota.cancel(reservation)
                        rt.denials += 1
                        break

                self.queue.dequeue()
                self.admission_order.append(task_id)
                rt.ticket = ticket
                rt.reservation = reservation
                rec = transition_task_state(rec, TaskStatus.SCHEDULED, self.clock.now_ms())
                self._put_record(rec)

                if mode is ExecutionMode.EPHEMERAL:
                    self._dispatch_ephemeral(task_id, rec)
                else:
                    decision = self._dispatch_persistent(task_id)
                    if decision is not None:
                        cycle_decisions.append(decision)
        return cycle_decisions

    def _dispatch_ephemeral(self, task_id: str, rec: TaskRecord) -> None:
        instance_id = self.backend.provision(self.profile, self.ephemeral_image_ref,
                                             ExecutionMode.EPHEMERAL)
        self._pending_instance[instance_id] = task_id
        rec = transition_task_state(rec, TaskStatus.PROVISIONING, self.clock.now_ms())
        self._put_record(rec)
        if self.backend.describe(instance_id).state is InstanceState.RUNNING:
            # Backend came up synchronously; the Running event preceded registration.
            pending = self._pending_instance.pop(instance_id, None)
            if pending is not None:
                self._bind(pending, instance_id)

    def _dispatch_persistent(self, task_id: str) -> Optional[DispatchDecision]:
        instance_id = self.pool.take()
        if instance_id is not None:
            return self._bind(task_id, instance_id)
        if self.pool.can_grow():
            self.pool.grow()
        self._pool_waiters.append(task_id)  # FIFO wait for an idle slot
        self._serve_pool_waiters()
        return None

    def _bind(self, task_id: str, instance_id: str) -> Optional[DispatchDecision]:
        rec = self.record(task_id)
        if rec.status is TaskStatus.CANCELLED:
            self._release_resources(task_id, actual_hours=0.0)
            if rec.submission.mode is ExecutionMode.EPHEMERAL:
                self.backend.terminate(instance_id)
            return None
        desc = self.backend.describe(instance_id)
        if desc.state is not InstanceState.RUNNING:
            raise RuntimeError(f"refusing to dispatch {task_id} to non-running {instance_id}")
        self.backend.assign_task(instance_id, task_id)
        rt = self._runtime[task_id]
        rt.instance_id = instance_id
        decision = DispatchDecision(task_id=task_id, instance_id=instance_id,
                                    mode=rec.submission.mode, decided_at=self.clock.now_ms(),
                                    enqueue_seq=rec.enqueue_seq)
        self.decisions.append(decision)
        log.info("DISPATCH task=%s instance=%s mode=%s seq=%d", task_id, instance_id,
                 rec.submission.mode.value, rec.enqueue_seq)
        self.executor.start(rec, instance_id)
        return decision

    def mark_executing(self, task_id: str) -> None:
        """Stamp environment readiness and move the record to Executing."""
        with self._lock:
            now = self.clock.now_ms()
            rec = with_phase_timestamp(self.record(task_id), "env_ready", now)
            rec = transition_task_state(rec, TaskStatus.EXECUTING, now)
            self._put_record(rec)

    # ------------------------------------------------------------------
    # Event handlers
    # ------------------------------------------------------------------

    def _on_instance_event(self, ev) -> None:
        with self._lock:
            instance_id = ev.subject_id
            self.metadata.put_record(f"instance/{instance_id}",
                                     instance_to_doc(self.backend.describe(instance_id)))
            new = ev.payload.get("new")
            if new == InstanceState.RUNNING.value:
                if self.pool is not None and instance_id in self.pool.provisioning:
                    self.pool.note_running(instance_id)
                    self._serve_pool_waiters()
                task_id = self._pending_instance.pop(instance_id, None)
                if task_id is not None:
                    self._bind(task_id, instance_id)
            elif new == InstanceState.FAILED.value:
                task_id = self._pending_instance.pop(instance_id, None)
                if task_id is not None:
                    self._fail_task(task_id, reason="provision_failed")
                if self.pool is not None and instance_id in (set(self.pool.members)
                                                             | self.pool.provisioning):
                    self.pool.remove(instance_id)
                    if self._pool_waiters and self.pool.can_grow():
                        self.pool.grow()  # replacement on demand

    def _serve_pool_waiters(self) -> None:
        while self._pool_waiters:
            instance_id = self.pool.take()
            if instance_id is None:
                break
            task_id = self._pool_waiters.popleft()
            self._bind(task_id, instance_id)

    def _fail_task(self, task_id: str, reason: str) -> None:
        rec = self.record(task_id)
        self.bus.publish(EventKind.TASK_FAILED, task_id,
                         {"reason": reason, "retryable": True, "attempt": rec.attempt},
                         timestamp=self.clock.now_ms())

    def handle_completion(self, ev) -> None:
        """React to a task outcome: record it, reclaim resources exactly once,
        tear down or recycle the instance, and retry failed attempts."""
        with self._lock:
            task_id = ev.subject_id
            rt = self._runtime.get(task_id)
            if rt is None:
                self.unknown_completions += 1
                log.warning("completion event for unknown task %s ignored", task_id)
                return
            rec = self.record(task_id)
            ev_attempt = ev.payload.get("attempt", rec.attempt)
            if rt.settled or ev_attempt != rec.attempt:
                return  # duplicate delivery; resources already reclaimed
            rt.settled = True

            now = ev.timestamp
            if ev.kind is EventKind.TASK_COMPLETED:
                rec = transition_task_state(rec, TaskStatus.COMPLETED, now)
                result_key = ev.payload.get("result_key")
                if result_key:
                    rec = with_result_ref(rec, result_key)
                self._put_record(rec)
            else:
                rec = transition_task_state(rec, TaskStatus.FAILED, now)
                self._put_record(rec)

            exec_end = rec.phase("exec_end") or now
            env_ready = rec.phase("env_ready")
            actual_hours = max(0.0, (exec_end - env_ready) / 3_600_000.0) if env_ready else 0.0
            self._release_resources(task_id, actual_hours=actual_hours)

            instance_id = rt.instance_id
            if instance_id is not None:
                self.backend.unassign_task(instance_id, task_id)
                if rec.submission.mode is ExecutionMode.EPHEMERAL:
                    self.backend.terminate(instance_id)
                else:
                    self._serve_pool_waiters()

            if (ev.kind is EventKind.TASK_FAILED
                    and ev.payload.get("retryable", True)
                    and rec.attempt < self.retry_max):
                retried = transition_task_state(rec, TaskStatus.QUEUED, self.clock.now_ms())
                retried = with_enqueue_seq(retried, self.queue.enqueue(task_id))
                self._put_record(retried)
                self._runtime[task_id] = _TaskRuntime()
            self._kick(0)

    def _release_resources(self, task_id: str, actual_hours: float) -> None:
        rt = self._runtime[task_id]
        if rt.ticket is not None and self.gates.capacity is not None:
            self.gates.capacity.release(rt.ticket)
            rt.ticket = None
        if rt.reservation is not None and self.gates.quota is not None:
            rec = self.record(task_id)
            self.gates.quota.settle(rec.submission.owner, actual_hours, rt.reservation)
            rt.reservation = None

    # ------------------------------------------------------------------
    # Pool management helpers
    # ------------------------------------------------------------------

    def prewarm_pool(self, count: int) -> None:
        if self.pool is None:
            raise RuntimeError("no pool configured")
        with self._lock:
            for _ in range(count):
                if not self.pool.can_grow():
                    break
                self.pool.grow()

    def shutdown_pool(self) -> None:
        if self.pool is not None:
            self.pool.terminate_all()

    # ------------------------------------------------------------------
    # Introspection
    # ------------------------------------------------------------------

    def terminal(self, task_id: str) -> bool:
        # A retryable failure re-enters Queued within the completion handler,
        # so any record still in Failed is terminally failed.
        status = self.record(task_id).status
        return status in (TaskStatus.COMPLETED, TaskStatus.CANCELLED, TaskStatus.FAILED)

    def all_terminal(self, task_ids) -> bool:
        return all(self.terminal(t) for t in task_ids)
