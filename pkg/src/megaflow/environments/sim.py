"""Discrete-event simulated cloud: instances, environments, and their latencies.

The backend is single-threaded over a virtual clock. Provisioning publishes
Requested -> Provisioning -> Running lifecycle events with latencies drawn
from the startup model; environment steps advance a deterministic digest.
Identical config and seed therefore reproduce bit-identical event logs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..clock import Clock
from ..core import (Action, ActionKind, EnvSpec, ExecutionMode, EventKind, InstanceDescriptor,
                    InstanceState, ResourceProfile, State)
from ..events import EventBus
from .base import (EnvHandle, EnvOpening, FleetCapExceeded, HandleClosed, InstanceNotRunning,
                   SimConfig, StepFault, decode_init_payload, initial_state, startup_time_min)


def _min_to_ms(minutes: float) -> int:
    return int(round(minutes * 60_000))


@dataclass
class _SimInstance:
    instance_id: str
    profile: ResourceProfile
    mode: ExecutionMode
    image_ref: str
    state: InstanceState
    created_at: int
    terminated_at: Optional[int] = None
    active: set = field(default_factory=set)
    ever_assigned: set = field(default_factory=set)


class SimCloudBackend:
    """Simulated compute fleet for one strategy.

    ``startup_fn`` is the pluggable startup-scaling model; the default is
    the calibrated linear curve from :mod:`.base`.
    """

    def __init__(self, cfg: SimConfig, clock: Clock, bus: EventBus,
                 startup_fn: Callable[..., float] = startup_time_min):
        self.cfg = cfg
        self.clock = clock
        self.bus = bus
        self.startup_fn = startup_fn
        self.rng = np.random.default_rng(cfg.seed)
        self._instances: dict[str, _SimInstance] = {}
        self._handles: dict[str, EnvHandle] = {}
        self._next_instance = 1
        self._next_handle = 1
        self._startups_in_flight = 0
        self._opens_in_flight = 0

    # ------------------------------------------------------------------
    # Instance lifecycle
    # ------------------------------------------------------------------

    def live_fleet_size(self) -> int:
        return sum(1 for inst in self._instances.values()
                   if inst.state not in (InstanceState.TERMINATED, InstanceState.FAILED))

    def fleet_headroom(self) -> int:
        return self.cfg.fleet_cap - self.live_fleet_size()

    def provision(self, profile: ResourceProfile, image_ref: str, mode: ExecutionMode) -> str:
        if self.live_fleet_size() >= self.cfg.fleet_cap:
            raise FleetCapExceeded(
                f"fleet cap {self.cfg.fleet_cap} reached for {self.cfg.strategy.value}")
        now = self.clock.now_ms()
        instance_id = f"i-{self._next_instance:05d}"
        self._next_instance += 1
        inst = _SimInstance(instance_id=instance_id, profile=profile, mode=mode,
                            image_ref=image_ref, state=InstanceState.REQUESTED, created_at=now)
        self._instances[instance_id] = inst
        self._publish_state(inst, None, InstanceState.REQUESTED)

        warm = self.cfg.warm_pool and mode is ExecutionMode.PERSISTENT
        if warm:
            # Steady-state pool member: no boot latency in this run's timeline.
            self._transition(inst, InstanceState.PROVISIONING)
            self._transition(inst, InstanceState.RUNNING)
            return instance_id

        self._transition(inst, InstanceState.PROVISIONING)
        self._startups_in_flight += 1
        fault = (self.cfg.provision_fault_rate > 0
                 and self.rng.random() < self.cfg.provision_fault_rate)

        def _price():
            # Deferred one tick so every startup of a simultaneous burst sees
            # the full burst as its contention level.
            concurrent = max(1, self._startups_in_flight)
            startup_min = self.startup_fn(self.cfg.strategy, mode, concurrent)
            ready_ms = _min_to_ms(self.cfg.boot_time_min + startup_min)
            if fault:
                self.clock.call_later(max(1, ready_ms // 2),
                                      lambda: self._finish_startup(inst, ok=False))
            else:
                self.clock.call_later(ready_ms, lambda: self._finish_startup(inst, ok=True))

        self.clock.call_later(0, _price)
        return instance_id

    def _finish_startup(self, inst: _SimInstance, ok: bool) -> None:
        self._startups_in_flight -= 1
        if inst.state is not InstanceState.PROVISIONING:
            return  # terminated while provisioning
        self._transition(inst, InstanceState.RUNNING if ok else InstanceState.FAILED)

    def terminate(self, instance_id: str) -> None:
        inst = self._instances[instance_id]
        if inst.state in (InstanceState.TERMINATED, InstanceState.FAILED):
            return  # idempotent
        if inst.state in (InstanceState.REQUESTED, InstanceState.PROVISIONING):
            self._transition(inst, InstanceState.TERMINATED)
            inst.terminated_at = self.clock.now_ms()
            return
        if inst.active:
            self._transition(inst, InstanceState.DRAINING)

        def _finish():
            if inst.state in (InstanceState.TERMINATED, InstanceState.FAILED):
                return
            self._transition(inst, InstanceState.TERMINATED)
            inst.terminated_at = self.clock.now_ms()

        self.clock.call_later(_min_to_ms(self.cfg.terminate_delay_min), _finish)

    def inject_instance_failure(self, instance_id: str) -> None:
        """Test hook: a running instance fails its health check."""
        inst = self._instances[instance_id]
        if inst.state in (InstanceState.TERMINATED, InstanceState.FAILED):
            return
        self._transition(inst, InstanceState.FAILED)
        inst.terminated_at = self.clock.now_ms()

    def _transition(self, inst: _SimInstance, new: InstanceState) -> None:
        old = inst.state
        inst.state = new
        self._publish_state(inst, old, new)

    def _publish_state(self, inst: _SimInstance, old: Optional[InstanceState],
                       new: InstanceState) -> None:
        self.bus.publish(EventKind.INSTANCE_STATE_CHANGED, inst.instance_id, {
            "old": old.value if old else None,
            "new": new.value,
            "mode": inst.mode.value,
        }, timestamp=self.clock.now_ms())

    # ------------------------------------------------------------------
    # Task placement bookkeeping
    # ------------------------------------------------------------------

    def assign_task(self, instance_id: str, task_id: str) -> None:
        inst = self._instances[instance_id]
        if inst.state is not InstanceState.RUNNING:
            raise InstanceNotRunning(instance_id)
        if len(inst.active) >= inst.profile.max_concurrent_tasks:
            raise RuntimeError(f"instance {instance_id} is at capacity")
        if inst.mode is ExecutionMode.EPHEMERAL and inst.ever_assigned:
            raise RuntimeError(f"ephemeral instance {instance_id} cannot be reused")
        inst.active.add(task_id)
        inst.ever_assigned.add(task_id)

    def unassign_task(self, instance_id: str, task_id: str) -> None:
        self._instances[instance_id].active.discard(task_id)

    def active_count(self, instance_id: str) -> int:
        return len(self._instances[instance_id].active)

    # ------------------------------------------------------------------
    # Environments
    # ------------------------------------------------------------------

    def open_env(self, instance_id: str, env_spec: EnvSpec, task_key: str,
                 on_ready=None) -> EnvOpening:
        """Open an environment; ``on_ready(opening)`` fires once it is usable.

        Readiness latency for pooled environments follows the startup model
        at the burst's concurrency; ephemeral environments were prepared
        during instance startup and are ready immediately.
        """
        inst = self._instances[instance_id]
        if inst.state is not InstanceState.RUNNING:
            raise InstanceNotRunning(instance_id)
        handle = EnvHandle(handle_id=f"h-{self._next_handle:06d}", instance_id=instance_id,
                           task_key=task_key, state=initial_state(env_spec, task_key))
        handle.meta["init"] = dict(decode_init_payload(env_spec))
        self._next_handle += 1
        self._handles[handle.handle_id] = handle
        opening = EnvOpening(handle=handle, initial_state=handle.state, ready_delay_ms=0)

        if inst.mode is ExecutionMode.EPHEMERAL:
            if on_ready is not None:
                self.clock.call_later(0, lambda: on_ready(opening))
            return opening

        self._opens_in_flight += 1

        def _price():
            if self.cfg.env_open_override_min is not None:
                delay_min = self.cfg.env_open_override_min
            else:
                concurrent = max(1, self._opens_in_flight)
                delay_min = self.startup_fn(self.cfg.strategy, inst.mode, concurrent)
            delay_ms = _min_to_ms(delay_min)

            def _opened():
                self._opens_in_flight -= 1
                if on_ready is not None:
                    on_ready(opening)

            self.clock.call_later(delay_ms, _opened)

        self.clock.call_later(0, _price)
        return opening

    def env_step(self, handle: EnvHandle, action: Action) -> tuple[State, bool]:
        if handle.closed:
            raise HandleClosed(handle.handle_id)
        inst = self._instances[handle.instance_id]
        if inst.state is not InstanceState.RUNNING:
            raise InstanceNotRunning(handle.instance_id)
        handle.step_count += 1
        init = handle.meta.get("init", {})
        fail_at = init.get("fail_at_step")
        if fail_at is not None and handle.step_count >= int(fail_at):
            raise StepFault(f"injected fault at step {handle.step_count}")
        if self.cfg.step_fault_rate > 0 and self.rng.random() < self.cfg.step_fault_rate:
            raise StepFault(f"simulated fault at step {handle.step_count}")
        entropy = action.kind.value.encode() + b"\x00" + action.payload
        handle.state = handle.state.advanced(entropy)
        done = action.kind is ActionKind.FINISH
        succeed_after = init.get("succeed_after")
        if succeed_after is not None and handle.step_count >= int(succeed_after):
            done = True
        return handle.state, done

    def close_env(self, handle: EnvHandle) -> None:
        handle.closed = True
        self._handles.pop(handle.handle_id, None)

    # ------------------------------------------------------------------
    # Introspection
    # ------------------------------------------------------------------

    def describe(self, instance_id: str) -> InstanceDescriptor:
        inst = self._instances[instance_id]
        active = frozenset(inst.active) if inst.state is InstanceState.RUNNING else frozenset()
        return InstanceDescriptor(
            instance_id=inst.instance_id,
            profile=inst.profile,
            state=inst.state,
            mode=inst.mode,
            active_tasks=active,
            created_at=inst.created_at,
            terminated_at=inst.terminated_at,
        )

    def instances(self) -> list[InstanceDescriptor]:
        return [self.describe(i) for i in sorted(self._instances)]

    def instance_state(self, instance_id: str) -> InstanceState:
        return self._instances[instance_id].state

    def tasks_ever_assigned(self, instance_id: str) -> frozenset:
        return frozenset(self._instances[instance_id].ever_assigned)
