"""Domain model for agent-task orchestration.

Every type in this module is an immutable value object; the operations on
them are pure transformations that return new values. Nothing here performs
I/O, so the same model is shared by the simulated and local execution
backends.

Timestamps are integer milliseconds on whatever clock the surrounding
system uses (virtual or wall), so records are comparable across backends.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Mapping, Optional


class ActionKind(str, Enum):
    COMMAND = "command"
    EDIT = "edit"
    FINISH = "finish"


class TerminationCause(str, Enum):
    FINISH = "finish"
    STEP_LIMIT = "step_limit"
    ENVIRONMENT_FAILURE = "environment_failure"


class ExecutionMode(str, Enum):
    EPHEMERAL = "ephemeral"
    PERSISTENT = "persistent"


class TaskStatus(str, Enum):
    QUEUED = "queued"
    SCHEDULED = "scheduled"
    PROVISIONING = "provisioning"
    EXECUTING = "executing"
    COMPLETED = "completed"
    FAILED = "failed"
    CANCELLED = "cancelled"


class InstanceState(str, Enum):
    REQUESTED = "requested"
    PROVISIONING = "provisioning"
    RUNNING = "running"
    DRAINING = "draining"
    TERMINATED = "terminated"
    FAILED = "failed"


class EventKind(str, Enum):
    INSTANCE_STATE_CHANGED = "instance_state_changed"
    TASK_COMPLETED = "task_completed"
    TASK_FAILED = "task_failed"


class TrajectoryError(Exception):
    """Base class for trajectory manipulation errors."""


class AppendAfterTermination(TrajectoryError):
    pass


class StepLimitExceeded(TrajectoryError):
    pass


class AlreadyFinalized(TrajectoryError):
    pass


class IllegalTransition(Exception):
    def __init__(self, current: TaskStatus, requested: TaskStatus):
        super().__init__(f"illegal task transition {current.value} -> {requested.value}")
        self.current = current
        self.requested = requested


@dataclass(frozen=True)
class EnvSpec:
    """Opaque environment specification: an image reference plus init payload."""

    image_ref: str
    init_payload: bytes = b""

    def __post_init__(self):
        if not self.image_ref:
            raise ValueError("env_spec image reference must be non-empty")


@dataclass(frozen=True)
class GoalEvaluator:
    """Deterministic reward function applied to a complete trajectory.

    ``table-lookup`` evaluators map the owning task's key to a fixed reward;
    ``script`` evaluators name a registered callable. Trajectories that end
    without an explicit finish (step limit or environment failure) receive
    ``non_termination_penalty`` instead of the evaluated reward.
    """

    evaluator_kind: str  # "script" | "table-lookup"
    spec: Mapping[str, Any] = field(default_factory=dict)
    non_termination_penalty: float = -0.5

    def __post_init__(self):
        if self.evaluator_kind not in ("script", "table-lookup"):
            raise ValueError(f"unknown evaluator kind {self.evaluator_kind!r}")

    def evaluate(self, trajectory: "Trajectory", task_key: str) -> float:
        if self.evaluator_kind == "table-lookup":
            table = self.spec.get("table", {})
            return float(table.get(task_key, self.spec.get("default", 0.0)))
        name = self.spec.get("name")
        fn = SCRIPT_EVALUATORS.get(name)
        if fn is None:
            raise KeyError(f"no script evaluator registered under {name!r}")
        return float(fn(trajectory, dict(self.spec.get("args", {}))))


# Registry for "script" goal evaluators; keyed by the name carried in
# GoalEvaluator.spec. Entries must be deterministic functions of the
# trajectory.
SCRIPT_EVALUATORS: dict[str, Callable[["Trajectory", dict], float]] = {}


def register_script_evaluator(name: str, fn: Callable[["Trajectory", dict], float]) -> None:
    SCRIPT_EVALUATORS[name] = fn


register_script_evaluator("constant", lambda traj, args: args.get("value", 1.0))


@dataclass(frozen=True)
class AgentTask:
    """An interactive problem-solving environment plus its success criteria."""

    task_key: str
    env_spec: EnvSpec
    description: str
    goal: GoalEvaluator
    action_space: frozenset = frozenset({ActionKind.COMMAND, ActionKind.EDIT, ActionKind.FINISH})
    max_steps: int = 100

    def __post_init__(self):
        if not self.task_key:
            raise ValueError("task_key must be non-empty")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not self.action_space:
            raise ValueError("action_space must be non-empty")


@dataclass(frozen=True)
class State:
    """Environment state summary at one point in a rollout."""

    digest: bytes
    step_index: int = 0

    def advanced(self, entropy: bytes) -> "State":
        """Successor state: digest folded over the transition, index + 1."""
        new_digest = hashlib.sha256(self.digest + entropy).digest()
        return State(digest=new_digest, step_index=self.step_index + 1)


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    payload: bytes = b""


@dataclass(frozen=True)
class Trajectory:
    """Ordered (state, action) pairs; rewarded only once terminated."""

    steps: tuple = ()
    terminated: bool = False
    termination_cause: Optional[TerminationCause] = None
    reward: Optional[float] = None

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def finalized(self) -> bool:
        return self.reward is not None


@dataclass(frozen=True)
class ResourceProfile:
    """Standardized compute instance shape used for capacity accounting."""

    cpu_cores: int
    memory_gb: int
    bandwidth_mbps: int
    max_concurrent_tasks: int
    hourly_rate_usd: float

    def __post_init__(self):
        for name in ("cpu_cores", "memory_gb", "bandwidth_mbps", "max_concurrent_tasks"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.hourly_rate_usd < 0:
            raise ValueError("hourly_rate_usd must be >= 0")


@dataclass(frozen=True)
class TaskSubmission:
    """What a caller hands to the control plane: the task plus run options."""

    task: AgentTask
    mode: ExecutionMode = ExecutionMode.PERSISTENT
    owner: str = "default"
    workload: str = "rollout"  # "rollout" | "duration"
    replica_index: int = 0


# Pipeline phases stamped on a task record, in order.
PHASES = ("submitted", "scheduled", "env_ready", "exec_start", "exec_end")

# Legal task status transitions. Failed -> Queued is the retry edge.
LEGAL_TRANSITIONS: dict[TaskStatus, frozenset] = {
    TaskStatus.QUEUED: frozenset({TaskStatus.SCHEDULED, TaskStatus.CANCELLED}),
    TaskStatus.SCHEDULED: frozenset({TaskStatus.PROVISIONING, TaskStatus.EXECUTING, TaskStatus.CANCELLED}),
    TaskStatus.PROVISIONING: frozenset({TaskStatus.EXECUTING, TaskStatus.FAILED}),
    TaskStatus.EXECUTING: frozenset({TaskStatus.COMPLETED, TaskStatus.FAILED}),
    TaskStatus.FAILED: frozenset({TaskStatus.QUEUED}),
    TaskStatus.COMPLETED: frozenset(),
    TaskStatus.CANCELLED: frozenset(),
}

_TRANSITION_STAMPS = {
    TaskStatus.SCHEDULED: "scheduled",
    TaskStatus.EXECUTING: "exec_start",
    TaskStatus.COMPLETED: "exec_end",
}


@dataclass(frozen=True)
class TaskRecord:
    """Full lifecycle state of one submitted task."""

    task_id: str
    submission: TaskSubmission
    status: TaskStatus
    enqueue_seq: int
    attempt: int = 0
    phase_timestamps: Mapping[str, int] = field(default_factory=dict)
    result_ref: Optional[str] = None

    def __post_init__(self):
        stamps = [self.phase_timestamps[p] for p in PHASES if p in self.phase_timestamps]
        if any(b < a for a, b in zip(stamps, stamps[1:])):
            raise ValueError("phase timestamps must be non-decreasing in pipeline order")

    def phase(self, name: str) -> Optional[int]:
        return self.phase_timestamps.get(name)


@dataclass(frozen=True)
class InstanceDescriptor:
    """A compute instance as the control plane sees it."""

    instance_id: str
    profile: ResourceProfile
    state: InstanceState
    mode: ExecutionMode
    active_tasks: frozenset = frozenset()
    created_at: int = 0
    terminated_at: Optional[int] = None

    def __post_init__(self):
        if len(self.active_tasks) > self.profile.max_concurrent_tasks:
            raise ValueError("active task count exceeds profile capacity")
        if self.active_tasks and self.state is not InstanceState.RUNNING:
            raise ValueError("only running instances may hold active tasks")
        if self.mode is ExecutionMode.EPHEMERAL and len(self.active_tasks) > 1:
            raise ValueError("ephemeral instances execute at most one task")


@dataclass(frozen=True)
class Event:
    """Ordered lifecycle or completion notification."""

    seq: int
    kind: EventKind
    subject_id: str
    payload: Mapping[str, Any]
    timestamp: int


@dataclass(frozen=True)
class ExperienceBatch:
    """Terminated trajectories handed to the model service for training."""

    trajectories: tuple  # of (task_key, Trajectory)
    params_version_hint: int = 0

    def __post_init__(self):
        for key, traj in self.trajectories:
            if not traj.terminated:
                raise ValueError(f"trajectory for {key!r} is not terminated")


def append_step(traj: Trajectory, state: State, action: Action, task: AgentTask) -> Trajectory:
    """Append one (state, action) pair; a finish action terminates the trajectory."""
    if traj.terminated:
        raise AppendAfterTermination("cannot append to a terminated trajectory")
    if len(traj.steps) >= task.max_steps:
        raise StepLimitExceeded(
            f"trajectory already at max_steps={task.max_steps}; finalize with step_limit"
        )
    if action.kind not in task.action_space:
        raise ValueError(f"action kind {action.kind.value!r} outside task action space")
    finished = action.kind is ActionKind.FINISH
    return replace(
        traj,
        steps=traj.steps + ((state, action),),
        terminated=finished,
        termination_cause=TerminationCause.FINISH if finished else None,
    )


def finalize_trajectory(traj: Trajectory, goal: GoalEvaluator, cause: TerminationCause,
                        task_key: str = "") -> Trajectory:
    """Mark the trajectory terminated and attach its reward.

    An explicit finish earns the evaluated reward; step-limit and
    environment-failure terminations earn the non-termination penalty.
    """
    if traj.finalized:
        raise AlreadyFinalized("trajectory already carries a reward")
    if traj.terminated and traj.termination_cause is not None and traj.termination_cause != cause:
        raise ValueError(
            f"trajectory terminated with {traj.termination_cause.value}, cannot finalize as {cause.value}"
        )
    if cause is TerminationCause.FINISH:
        reward = goal.evaluate(traj, task_key)
    else:
        reward = goal.non_termination_penalty
    return replace(traj, terminated=True, termination_cause=cause, reward=reward)


def transition_task_state(rec: TaskRecord, next_status: TaskStatus, now_ms: int) -> TaskRecord:
    """Move a record along the legal status graph, stamping the matching phase."""
    if next_status not in LEGAL_TRANSITIONS[rec.status]:
        raise IllegalTransition(rec.status, next_status)
    stamps = dict(rec.phase_timestamps)
    phase = _TRANSITION_STAMPS.get(next_status)
    if phase is not None:
        stamps[phase] = now_ms
    attempt = rec.attempt + 1 if next_status is TaskStatus.QUEUED else rec.attempt
    return replace(rec, status=next_status, phase_timestamps=stamps, attempt=attempt)


def with_phase_timestamp(rec: TaskRecord, phase: str, now_ms: int) -> TaskRecord:
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    stamps = dict(rec.phase_timestamps)
    stamps[phase] = now_ms
    return replace(rec, phase_timestamps=stamps)


def with_enqueue_seq(rec: TaskRecord, seq: int) -> TaskRecord:
    return replace(rec, enqueue_seq=seq)


def with_result_ref(rec: TaskRecord, ref: str) -> TaskRecord:
    return replace(rec, result_ref=ref)


# ---------------------------------------------------------------------------
# Canonical JSON serialization (snake_case keys, bytes as base64)
# ---------------------------------------------------------------------------

def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _unb64(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"))


def action_to_doc(action: Action) -> dict:
    return {"kind": action.kind.value, "payload": _b64(action.payload)}


def action_from_doc(doc: Mapping[str, Any]) -> Action:
    return Action(kind=ActionKind(doc["kind"]), payload=_unb64(doc["payload"]))


def state_to_doc(state: State) -> dict:
    return {"digest": _b64(state.digest), "step_index": state.step_index}


def state_from_doc(doc: Mapping[str, Any]) -> State:
    return State(digest=_unb64(doc["digest"]), step_index=doc["step_index"])


def task_to_doc(task: AgentTask) -> dict:
    return {
        "task_key": task.task_key,
        "env_spec": {"image_ref": task.env_spec.image_ref,
                     "init_payload": _b64(task.env_spec.init_payload)},
        "description": task.description,
        "goal": {"evaluator_kind": task.goal.evaluator_kind,
                 "spec": dict(task.goal.spec),
                 "non_termination_penalty": task.goal.non_termination_penalty},
        "action_space": sorted(kind.value for kind in task.action_space),
        "max_steps": task.max_steps,
    }


def task_from_doc(doc: Mapping[str, Any]) -> AgentTask:
    return AgentTask(
        task_key=doc["task_key"],
        env_spec=EnvSpec(image_ref=doc["env_spec"]["image_ref"],
                         init_payload=_unb64(doc["env_spec"].get("init_payload", ""))),
        description=doc["description"],
        goal=GoalEvaluator(evaluator_kind=doc["goal"]["evaluator_kind"],
                           spec=doc["goal"].get("spec", {}),
                           non_termination_penalty=doc["goal"].get("non_termination_penalty", -0.5)),
        action_space=frozenset(ActionKind(k) for k in doc["action_space"]),
        max_steps=doc["max_steps"],
    )


def record_to_doc(rec: TaskRecord) -> dict:
    return {
        "task_id": rec.task_id,
        "task": task_to_doc(rec.submission.task),
        "mode": rec.submission.mode.value,
        "owner": rec.submission.owner,
        "workload": rec.submission.workload,
        "replica_index": rec.submission.replica_index,
        "status": rec.status.value,
        "attempt": rec.attempt,
        "enqueue_seq": rec.enqueue_seq,
        "phase_timestamps": dict(rec.phase_timestamps),
        "result_ref": rec.result_ref,
    }


def record_from_doc(doc: Mapping[str, Any]) -> TaskRecord:
    return TaskRecord(
        task_id=doc["task_id"],
        submission=TaskSubmission(
            task=task_from_doc(doc["task"]),
            mode=ExecutionMode(doc["mode"]),
            owner=doc["owner"],
            workload=doc.get("workload", "rollout"),
            replica_index=doc.get("replica_index", 0),
        ),
        status=TaskStatus(doc["status"]),
        attempt=doc["attempt"],
        enqueue_seq=doc["enqueue_seq"],
        phase_timestamps=dict(doc["phase_timestamps"]),
        result_ref=doc.get("result_ref"),
    )


def instance_to_doc(inst: InstanceDescriptor) -> dict:
    return {
        "instance_id": inst.instance_id,
        "profile": {
            "cpu_cores": inst.profile.cpu_cores,
            "memory_gb": inst.profile.memory_gb,
            "bandwidth_mbps": inst.profile.bandwidth_mbps,
            "max_concurrent_tasks": inst.profile.max_concurrent_tasks,
            "hourly_rate_usd": inst.profile.hourly_rate_usd,
        },
        "state": inst.state.value,
        "mode": inst.mode.value,
        "active_tasks": sorted(inst.active_tasks),
        "created_at": inst.created_at,
        "terminated_at": inst.terminated_at,
    }


def instance_from_doc(doc: Mapping[str, Any]) -> InstanceDescriptor:
    return InstanceDescriptor(
        instance_id=doc["instance_id"],
        profile=ResourceProfile(**doc["profile"]),
        state=InstanceState(doc["state"]),
        mode=ExecutionMode(doc["mode"]),
        active_tasks=frozenset(doc["active_tasks"]),
        created_at=doc["created_at"],
        terminated_at=doc.get("terminated_at"),
    )


def event_to_doc(ev: Event) -> dict:
    return {
        "seq": ev.seq,
        "kind": ev.kind.value,
        "subject_id": ev.subject_id,
        "payload": dict(ev.payload),
        "timestamp": ev.timestamp,
    }


def event_from_doc(doc: Mapping[str, Any]) -> Event:
    return Event(seq=doc["seq"], kind=EventKind(doc["kind"]), subject_id=doc["subject_id"],
                 payload=doc["payload"], timestamp=doc["timestamp"])


def trajectory_to_jsonl(traj: Trajectory) -> str:
    """One step per line; the final line is the termination record."""
    lines = []
    for state, action in traj.steps:
        lines.append(json.dumps({"state": state_to_doc(state), "action": action_to_doc(action)},
                                sort_keys=True))
    lines.append(json.dumps({
        "terminated": traj.terminated,
        "termination_cause": traj.termination_cause.value if traj.termination_cause else None,
        "reward": traj.reward,
    }, sort_keys=True))
    return "\n".join(lines) + "\n"


def trajectory_from_jsonl(text: str) -> Trajectory:
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise ValueError("empty trajectory document")
    steps = []
    for line in lines[:-1]:
        doc = json.loads(line)
        steps.append((state_from_doc(doc["state"]), action_from_doc(doc["action"])))
    tail = json.loads(lines[-1])
    cause = tail.get("termination_cause")
    return Trajectory(
        steps=tuple(steps),
        terminated=tail["terminated"],
        termination_cause=TerminationCause(cause) if cause else None,
        reward=tail.get("reward"),
    )
