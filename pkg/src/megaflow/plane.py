"""Control-plane assembly: wire the stores, bus, gates, backend, and scheduler.

``build_sim_plane`` produces a fully virtual plane (discrete-event backend,
virtual clock) used by experiments and fan-out batches; ``build_local_plane``
produces a wall-clock plane over the subprocess backend. Both expose the
same surface, so callers never branch on the execution substrate.
"""

from __future__ import annotations

import tempfile
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

from .clock import Clock, VirtualClock, WallClock
from .core import EventKind, ExecutionMode, TaskRecord
from .environments.base import (SimConfig, Strategy, contention_inflation,
                                sample_execution_duration_min)
from .environments.sim import SimCloudBackend
from .events import EventBus
from .limits import AdmissionGates, CapacitySemaphore, QuotaLedger, RateGate
from .persistence import ArtifactStore, MetadataStore, TaskQueue
from .policy import ModelService, NeverFinishPolicy
from .rollouts import RolloutExecutor
from .scheduling import InstancePool, Scheduler


class DurationExecutor:
    """Workload executor for synthetic benchmark tasks.

    Execution is a single sampled duration, inflated by instance co-location;
    no agent loop runs and no artifacts are written. This is the workload
    behind the fleet-level experiments.
    """

    def __init__(self, backend: SimCloudBackend, clock: Clock, bus: EventBus):
        self.backend = backend
        self.clock = clock
        self.bus = bus
        self.results: dict = {}
        self._scheduler = None

    def attach(self, scheduler) -> None:
        self._scheduler = scheduler

    def start(self, rec: TaskRecord, instance_id: str) -> None:
        task = rec.submission.task
        self.backend.open_env(instance_id, task.env_spec, task.task_key,
                              on_ready=lambda opening: self._begin(rec, instance_id, opening))

    def _begin(self, rec: TaskRecord, instance_id: str, opening) -> None:
        self._scheduler.mark_executing(rec.task_id)
        cfg = self.backend.cfg
        co_located = max(1, self.backend.active_count(instance_id))
        duration_min = (sample_execution_duration_min(cfg, self.backend.rng)
                        * contention_inflation(cfg, co_located))
        duration_ms = int(round(duration_min * 60_000))
        faulted = cfg.exec_fault_rate > 0 and self.backend.rng.random() < cfg.exec_fault_rate

        def _finish():
            self.backend.close_env(opening.handle)
            if faulted:
                self.bus.publish(EventKind.TASK_FAILED, rec.task_id,
                                 {"reason": "exec_fault", "retryable": True,
                                  "attempt": rec.attempt},
                                 timestamp=self.clock.now_ms())
            else:
                self.bus.publish(EventKind.TASK_COMPLETED, rec.task_id,
                                 {"attempt": rec.attempt},
                                 timestamp=self.clock.now_ms())

        self.clock.call_later(duration_ms // 3 if faulted else duration_ms, _finish)


@dataclass
class ControlPlane:
    """Everything one orchestration domain needs, wired together."""

    clock: Clock
    bus: EventBus
    queue: TaskQueue
    metadata: MetadataStore
    artifacts: ArtifactStore
    gates: AdmissionGates
    backend: object
    scheduler: Scheduler
    executor: object
    model: Optional[ModelService] = None
    run_id: str = "run-0"
    sim_config: Optional[SimConfig] = None
    _virtual: bool = field(default=True)

    def wait_for(self, task_ids, timeout_s: float = 300.0) -> None:
        """Block until every listed task reaches a terminal state."""
        if self._virtual:
            while not self.scheduler.all_terminal(task_ids):
                if not self.clock.step():
                    pending = [t for t in task_ids if not self.scheduler.terminal(t)]
                    raise RuntimeError(
                        f"simulation stalled with {len(pending)} non-terminal tasks "
                        f"(head-of-line block with no pending events?)")
            return
        done = threading.Event()
        sub = self.bus.subscribe([EventKind.TASK_COMPLETED, EventKind.TASK_FAILED],
                                 lambda ev: done.set(), handler_id="plane-wait")
        try:
            deadline = time.monotonic() + timeout_s
            while not self.scheduler.all_terminal(task_ids):
                if time.monotonic() > deadline:
                    raise TimeoutError("tasks did not reach terminal state in time")
                done.wait(0.05)
                done.clear()
        finally:
            self.bus.unsubscribe(sub)

    def run_until_idle(self) -> None:
        if self._virtual:
            self.clock.run()

    def shutdown(self) -> None:
        """Terminate pool instances and drain remaining virtual events."""
        self.scheduler.shutdown_pool()
        self.run_until_idle()
        self.metadata.close()


def build_sim_plane(cfg: SimConfig, *, workload: str = "duration",
                    mode_default: ExecutionMode = ExecutionMode.PERSISTENT,
                    capacity: Optional[int] = None,
                    pool_max: Optional[int] = None,
                    rate_per_sec: Optional[float] = None, rate_burst: int = 100,
                    quota_hours: Optional[dict] = None,
                    retry_max: int = 3,
                    run_id: str = "run-0",
                    artifacts_root: Optional[str] = None,
                    model: Optional[ModelService] = None,
                    policy_factory=None,
                    master_seed: int = 0,
                    journal_path: Optional[str] = None) -> ControlPlane:
    """Assemble a simulated control plane for one strategy.

    Capacity defaults to the strategy's full schedulable slots (fleet cap x
    slots per instance); the pool covers persistent-mode dispatch and is
    grown on demand up to ``pool_max``.
    """
    clock = VirtualClock()
    bus = EventBus(clock=clock)
    queue = TaskQueue()
    metadata = MetadataStore(journal_path=journal_path)
    artifacts = ArtifactStore(artifacts_root or tempfile.mkdtemp(prefix="megaflow-artifacts-"))
    backend = SimCloudBackend(cfg, clock, bus)

    gates = AdmissionGates(
        rate_gate=RateGate(rate_per_sec, rate_burst) if rate_per_sec else None,
        capacity=CapacitySemaphore(capacity or cfg.max_schedulable_tasks),
        quota=QuotaLedger(),
    )
    if quota_hours:
        for owner, limit in quota_hours.items():
            if isinstance(limit, tuple):
                gates.quota.set_quota(owner, limit[0], limit[1])
            else:
                gates.quota.set_quota(owner, limit)

    pool = InstancePool(pool_max or cfg.fleet_cap, backend, cfg.profile)

    if workload == "rollout":
        model = model or ModelService(NeverFinishPolicy(), artifacts=artifacts, run_id=run_id)
        executor = RolloutExecutor(backend=backend, clock=clock, bus=bus, artifacts=artifacts,
                                   model=model, rate_gate=gates.rate_gate, run_id=run_id,
                                   round_latency_ms=cfg.rollout_round_latency_ms,
                                   master_seed=master_seed, threaded=False,
                                   policy_factory=policy_factory)
    else:
        executor = DurationExecutor(backend, clock, bus)

    scheduler = Scheduler(
        clock=clock, bus=bus, queue=queue, metadata=metadata, gates=gates, backend=backend,
        executor=executor, profile=cfg.profile, pool=pool, retry_max=retry_max,
        mode_default=mode_default, quota_estimate_hours=cfg.exec_mean_min / 60.0,
        submit_latency_ms=int(round(cfg.submit_to_sched_min * 60_000)),
    )
    return ControlPlane(clock=clock, bus=bus, queue=queue, metadata=metadata,
                        artifacts=artifacts, gates=gates, backend=backend, scheduler=scheduler,
                        executor=executor, model=model, run_id=run_id, sim_config=cfg,
                        _virtual=True)


def build_local_plane(*, root_dir: Optional[str] = None,
                      model: Optional[ModelService] = None,
                      capacity: int = 8, pool_max: int = 4,
                      rate_per_sec: Optional[float] = None, rate_burst: int = 100,
                      retry_max: int = 3, run_id: str = "run-0",
                      round_latency_ms: int = 0,
                      allow_commands: Optional[set] = None,
                      journal_path: Optional[str] = None) -> ControlPlane:
    """Assemble a wall-clock plane over the local subprocess backend."""
    from .environments.local import LOCAL_PROFILE, LocalBackend

    clock = WallClock()
    bus = EventBus(clock=clock)
    queue = TaskQueue()
    metadata = MetadataStore(journal_path=journal_path)
    root = root_dir or tempfile.mkdtemp(prefix="megaflow-local-")
    artifacts = ArtifactStore(f"{root}/artifacts")
    backend = LocalBackend(root_dir=f"{root}/instances", clock=clock, bus=bus,
                           allow_commands=allow_commands)

    gates = AdmissionGates(
        rate_gate=RateGate(rate_per_sec, rate_burst) if rate_per_sec else None,
        capacity=CapacitySemaphore(capacity),
        quota=QuotaLedger(),
    )
    model = model or ModelService(NeverFinishPolicy(), artifacts=artifacts, run_id=run_id)
    executor = RolloutExecutor(backend=backend, clock=clock, bus=bus, artifacts=artifacts,
                               model=model, rate_gate=gates.rate_gate, run_id=run_id,
                               round_latency_ms=round_latency_ms, threaded=True)
    pool = InstancePool(pool_max, backend, LOCAL_PROFILE)
    scheduler = Scheduler(
        clock=clock, bus=bus, queue=queue, metadata=metadata, gates=gates, backend=backend,
        executor=executor, profile=LOCAL_PROFILE, pool=pool, retry_max=retry_max,
        quota_estimate_hours=0.0, submit_latency_ms=0,
    )
    return ControlPlane(clock=clock, bus=bus, queue=queue, metadata=metadata,
                        artifacts=artifacts, gates=gates, backend=backend, scheduler=scheduler,
                        executor=executor, model=model, run_id=run_id, _virtual=False)
