"""Local execution backend: real subprocesses in isolated working directories.

Instances are logical worker slots; each opened environment gets its own
working directory under the instance root, so concurrent tasks cannot see
each other's files. Commands run through ``/bin/sh -c`` but only after the
line passes a shell-metacharacter screen and its first token is on the
allow-list. Real container runtimes are out of scope; this backend exists
to run the same control-plane code against genuine processes.
"""

from __future__ import annotations

import json
import shlex
import shutil
import subprocess
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from ..clock import Clock
from ..core import (Action, ActionKind, EnvSpec, EventKind, ExecutionMode, InstanceDescriptor,
                    InstanceState, ResourceProfile, State)
from ..events import EventBus
from .base import (EnvHandle, EnvOpening, FleetCapExceeded, HandleClosed, InstanceNotRunning,
                   StepFault, decode_init_payload, initial_state)

LOCAL_PROFILE = ResourceProfile(cpu_cores=2, memory_gb=4, bandwidth_mbps=100,
                                max_concurrent_tasks=4, hourly_rate_usd=0.0)

DEFAULT_ALLOW_COMMANDS = frozenset({
    "echo", "printf", "true", "false", "exit", "test", "ls", "cat", "head", "tail",
    "wc", "pwd", "touch", "mkdir", "cp", "mv", "sleep", "env", "grep", "sort",
})

_FORBIDDEN_CHARS = set(";|&`$<>\\\n")


class CommandRejected(StepFault):
    """Command outside the allow-list or containing shell metacharacters."""


@dataclass
class _LocalInstance:
    instance_id: str
    mode: ExecutionMode
    root: Path
    state: InstanceState
    created_at: int
    terminated_at: Optional[int] = None
    active: set = field(default_factory=set)
    ever_assigned: set = field(default_factory=set)
    env_counter: int = 0


class LocalBackend:
    """Worker-slot fleet running actions as real subprocesses."""

    def __init__(self, root_dir: str, clock: Clock, bus: EventBus,
                 fleet_cap: int = 16, allow_commands: Optional[set] = None,
                 command_timeout_s: float = 20.0):
        self.root = Path(root_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self.clock = clock
        self.bus = bus
        self.fleet_cap = fleet_cap
        self.allow_commands = frozenset(allow_commands) if allow_commands else DEFAULT_ALLOW_COMMANDS
        self.command_timeout_s = command_timeout_s
        self._lock = threading.RLock()
        self._instances: dict[str, _LocalInstance] = {}
        self._handles: dict[str, EnvHandle] = {}
        self._next_instance = 1
        self._next_handle = 1

    # ------------------------------------------------------------------
    # Instance lifecycle
    # ------------------------------------------------------------------

    def live_fleet_size(self) -> int:
        with self._lock:
            return sum(1 for inst in self._instances.values()
                       if inst.state not in (InstanceState.TERMINATED, InstanceState.FAILED))

    def fleet_headroom(self) -> int:
        return self.fleet_cap - self.live_fleet_size()

    def provision(self, profile: ResourceProfile, image_ref: str, mode: ExecutionMode) -> str:
        with self._lock:
            if self.live_fleet_size() >= self.fleet_cap:
                raise FleetCapExceeded(f"local fleet cap {self.fleet_cap} reached")
            instance_id = f"local-{self._next_instance:04d}"
            self._next_instance += 1
            inst = _LocalInstance(instance_id=instance_id, mode=mode,
                                  root=self.root / instance_id,
                                  state=InstanceState.REQUESTED,
                                  created_at=self.clock.now_ms())
            inst.root.mkdir(parents=True, exist_ok=True)
            self._instances[instance_id] = inst
        self._publish(inst, None, InstanceState.REQUESTED)
        self._set_state(inst, InstanceState.PROVISIONING)
        self._set_state(inst, InstanceState.RUNNING)
        return instance_id

    def terminate(self, instance_id: str) -> None:
        with self._lock:
            inst = self._instances[instance_id]
            if inst.state in (InstanceState.TERMINATED, InstanceState.FAILED):
                return
        self._set_state(inst, InstanceState.TERMINATED)
        inst.terminated_at = self.clock.now_ms()

    def cleanup(self) -> None:
        shutil.rmtree(self.root, ignore_errors=True)

    def _set_state(self, inst: _LocalInstance, new: InstanceState) -> None:
        old = inst.state
        inst.state = new
        self._publish(inst, old, new)

    def _publish(self, inst: _LocalInstance, old, new) -> None:
        self.bus.publish(EventKind.INSTANCE_STATE_CHANGED, inst.instance_id, {
            "old": old.value if old else None,
            "new": new.value,
            "mode": inst.mode.value,
        }, timestamp=self.clock.now_ms())

    def assign_task(self, instance_id: str, task_id: str) -> None:
        with self._lock:
            inst = self._instances[instance_id]
            if inst.state is not InstanceState.RUNNING:
                raise InstanceNotRunning(instance_id)
            if inst.mode is ExecutionMode.EPHEMERAL and inst.ever_assigned:
                raise RuntimeError(f"ephemeral instance {instance_id} cannot be reused")
            inst.active.add(task_id)
            inst.ever_assigned.add(task_id)

    def unassign_task(self, instance_id: str, task_id: str) -> None:
        with self._lock:
            self._instances[instance_id].active.discard(task_id)

    def active_count(self, instance_id: str) -> int:
        with self._lock:
            return len(self._instances[instance_id].active)

    # ------------------------------------------------------------------
    # Environments
    # ------------------------------------------------------------------

    def open_env(self, instance_id: str, env_spec: EnvSpec, task_key: str,
                 on_ready=None) -> EnvOpening:
        with self._lock:
            inst = self._instances[instance_id]
            if inst.state is not InstanceState.RUNNING:
                raise InstanceNotRunning(instance_id)
            inst.env_counter += 1
            workdir = inst.root / f"env-{inst.env_counter:04d}"
            handle = EnvHandle(handle_id=f"lh-{self._next_handle:06d}", instance_id=instance_id,
                               task_key=task_key, state=initial_state(env_spec, task_key))
            self._next_handle += 1
            self._handles[handle.handle_id] = handle
        workdir.mkdir(parents=True, exist_ok=True)
        handle.meta["workdir"] = str(workdir)
        for name, content in decode_init_payload(env_spec).get("files", {}).items():
            target = self._resolve_in(workdir, name)
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(content, encoding="utf-8")
        opening = EnvOpening(handle=handle, initial_state=handle.state, ready_delay_ms=0)
        if on_ready is not None:
            on_ready(opening)
        return opening

    def env_step(self, handle: EnvHandle, action: Action) -> tuple[State, bool]:
        if handle.closed:
            raise HandleClosed(handle.handle_id)
        inst = self._instances[handle.instance_id]
        if inst.state is not InstanceState.RUNNING:
            raise InstanceNotRunning(handle.instance_id)
        handle.step_count += 1
        workdir = Path(handle.meta["workdir"])
        exit_status = 0
        if action.kind is ActionKind.COMMAND:
            exit_status = self._run_command(handle, workdir, action.payload)
        elif action.kind is ActionKind.EDIT:
            self._apply_edit(workdir, action.payload)
        entropy = (action.kind.value.encode() + b"\x00" + action.payload
                   + b"\x00" + str(exit_status).encode())
        handle.state = handle.state.advanced(entropy)
        handle.meta["last_exit"] = exit_status
        return handle.state, action.kind is ActionKind.FINISH

    def _run_command(self, handle: EnvHandle, workdir: Path, payload: bytes) -> int:
        line = payload.decode("utf-8", errors="replace").strip()
        if not line:
            raise CommandRejected("empty command")
        if set(line) & _FORBIDDEN_CHARS:
            raise CommandRejected(f"shell metacharacters rejected: {line!r}")
        try:
            argv = shlex.split(line)
        except ValueError as exc:
            raise CommandRejected(str(exc)) from exc
        if not argv or argv[0] not in self.allow_commands:
            raise CommandRejected(f"command {argv[0] if argv else ''!r} not on allow-list")
        try:
            proc = subprocess.run(["/bin/sh", "-c", line], cwd=workdir,
                                  capture_output=True, text=True,
                                  timeout=self.command_timeout_s)
        except subprocess.TimeoutExpired as exc:
            raise StepFault(f"command timed out: {line!r}") from exc
        handle.meta["last_stdout"] = proc.stdout
        handle.meta["last_stderr"] = proc.stderr
        return proc.returncode

    def _apply_edit(self, workdir: Path, payload: bytes) -> None:
        try:
            doc = json.loads(payload.decode("utf-8"))
            path, content = doc["path"], doc["content"]
        except (ValueError, KeyError) as exc:
            raise StepFault(f"malformed edit payload: {exc}") from exc
        target = self._resolve_in(workdir, path)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(content, encoding="utf-8")

    @staticmethod
    def _resolve_in(workdir: Path, relative: str) -> Path:
        target = (workdir / relative).resolve()
        if not str(target).startswith(str(workdir.resolve())):
            raise StepFault(f"path escapes working directory: {relative!r}")
        return target

    def close_env(self, handle: EnvHandle) -> None:
        handle.closed = True
        self._handles.pop(handle.handle_id, None)

    # ------------------------------------------------------------------
    # Introspection
    # ------------------------------------------------------------------

    def describe(self, instance_id: str) -> InstanceDescriptor:
        with self._lock:
            inst = self._instances[instance_id]
            active = frozenset(inst.active) if inst.state is InstanceState.RUNNING else frozenset()
            return InstanceDescriptor(
                instance_id=inst.instance_id,
                profile=LOCAL_PROFILE,
                state=inst.state,
                mode=inst.mode,
                active_tasks=active,
                created_at=inst.created_at,
                terminated_at=inst.terminated_at,
            )

    def instances(self) -> list[InstanceDescriptor]:
        with self._lock:
            ids = sorted(self._instances)
        return [self.describe(i) for i in ids]
