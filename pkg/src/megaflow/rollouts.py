"""Agent service: interaction loops, replica fan-out, metrics, dataset filtering.

A rollout is the infer -> act -> step loop for one task replica, bounded by
the task's step limit and rewarded only at termination. ``run_batch`` fans a
plan of k tasks x n replicas through the scheduler, preserving hierarchical
identity (task_key, replica_index) on every result. Rollout rounds are
written as generators that yield wait durations, so the same loop runs on
the virtual clock (simulation) and on worker threads (local execution).
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

from .core import (ActionKind, AgentTask, EventKind, ExecutionMode, TaskRecord, TaskSubmission,
                   TerminationCause, Trajectory, append_step, finalize_trajectory,
                   trajectory_from_jsonl, trajectory_to_jsonl)
from .environments.base import StepFault
from .limits import RateGate
from .persistence import ArtifactStore, artifact_key
from .policy import ExperienceBatch, ModelService, ParamsVersion, PolicyContext


class EmptyResultSet(Exception):
    pass


@dataclass(frozen=True)
class RolloutResult:
    """Outcome of one replica: where its trajectory lives and how it ended."""

    task_key: str
    replica_index: int
    task_id: str
    trajectory_key: Optional[str]
    reward: float
    rounds: int
    termination_cause: TerminationCause
    wall_duration_ms: int


@dataclass(frozen=True)
class RolloutPlan:
    """k distinct tasks, n replicas each: k*n parallel environments."""

    tasks: tuple  # of AgentTask
    replicas: int
    mode: ExecutionMode = ExecutionMode.PERSISTENT
    policy_id: str = "default"

    def __post_init__(self):
        if len(self.tasks) < 1 or self.replicas < 1:
            raise ValueError("plan needs at least one task and one replica")

    @property
    def total_environments(self) -> int:
        return len(self.tasks) * self.replicas


@dataclass(frozen=True)
class PassRateTable:
    rates: Mapping[str, float]

    def __post_init__(self):
        bad = {k: v for k, v in self.rates.items() if not 0.0 <= v <= 1.0}
        if bad:
            raise ValueError(f"pass rates outside [0,1]: {bad}")


def replica_seed(master_seed: int, task_key: str, replica_index: int) -> int:
    """Stable per-replica seed (not salted like hash(), so runs reproduce)."""
    digest = hashlib.sha256(f"{master_seed}:{task_key}:{replica_index}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def rollout_rounds(task: AgentTask, model: ModelService, backend, handle,
                   rate_gate: Optional[RateGate], clock, round_latency_ms: int):
    """Generator running one rollout; yields wait durations in ms between rounds.

    Returns (trajectory, cause) via StopIteration. The trajectory always
    includes the round during which an environment fault occurred.
    """
    traj = Trajectory()
    state = handle.state
    while True:
        if rate_gate is not None:
            while True:
                wait_ms = rate_gate.acquire(clock.now_ms())
                if wait_ms is None:
                    break
                yield wait_ms
        ctx = PolicyContext(task_key=task.task_key, description=task.description,
                            steps=traj.steps, params_version=model.params.version)
        dist = model.infer(ctx)
        action = dist.argmax()
        traj = append_step(traj, state, action, task)
        if traj.terminated:  # explicit finish decision
            return traj, TerminationCause.FINISH
        try:
            state, env_done = backend.env_step(handle, action)
        except StepFault:
            return traj, TerminationCause.ENVIRONMENT_FAILURE
        if env_done:
            return traj, TerminationCause.FINISH
        if len(traj) >= task.max_steps:
            return traj, TerminationCause.STEP_LIMIT
        yield round_latency_ms


class RolloutExecutor:
    """Workload executor that drives rollout generators for the scheduler.

    In simulation the generator is pumped by clock callbacks; with
    ``threaded=True`` (local backend) each rollout runs on its own worker
    thread with real sleeps. Results are collected per task id and the
    finalized trajectory is persisted before the completion event fires.
    """

    def __init__(self, *, backend, clock, bus, artifacts: ArtifactStore,
                 model: ModelService, rate_gate: Optional[RateGate] = None,
                 run_id: str = "run-0", round_latency_ms: int = 1000,
                 master_seed: int = 0, threaded: bool = False,
                 policy_factory: Optional[Callable[[int], object]] = None):
        self.backend = backend
        self.clock = clock
        self.bus = bus
        self.artifacts = artifacts
        self.model = model
        self.rate_gate = rate_gate
        self.run_id = run_id
        self.round_latency_ms = round_latency_ms
        self.master_seed = master_seed
        self.threaded = threaded
        self.policy_factory = policy_factory
        self.results: dict[str, RolloutResult] = {}
        self._scheduler = None
        self._threads: list[threading.Thread] = []

    def attach(self, scheduler) -> None:
        self._scheduler = scheduler

    def _model_for(self, rec: TaskRecord):
        if self.policy_factory is None:
            return self.model
        seed = replica_seed(self.master_seed, rec.submission.task.task_key,
                            rec.submission.replica_index)
        return _PolicyView(self.model, self.policy_factory(seed))

    def start(self, rec: TaskRecord, instance_id: str) -> None:
        task = rec.submission.task
        if self.threaded:
            def _ready(opening):
                thread = threading.Thread(
                    target=self._run_threaded, args=(rec, instance_id, opening), daemon=True)
                self._threads.append(thread)
                thread.start()
        else:
            def _ready(opening):
                self._begin_sim(rec, instance_id, opening)
        self.backend.open_env(instance_id, task.env_spec, task.task_key, on_ready=_ready)

    # -- virtual-clock driver -------------------------------------------------

    def _begin_sim(self, rec: TaskRecord, instance_id: str, opening) -> None:
        self._scheduler.mark_executing(rec.task_id)
        started = self.clock.now_ms()
        gen = rollout_rounds(rec.submission.task, self._model_for(rec), self.backend,
                             opening.handle, self.rate_gate, self.clock, self.round_latency_ms)

        def pump():
            try:
                delay_ms = next(gen)
            except StopIteration as stop:
                traj, cause = stop.value
                self._complete(rec, instance_id, opening.handle, traj, cause, started)
                return
            self.clock.call_later(delay_ms, pump)

        pump()

    # -- worker-thread driver -------------------------------------------------

    def _run_threaded(self, rec: TaskRecord, instance_id: str, opening) -> None:
        self._scheduler.mark_executing(rec.task_id)
        started = self.clock.now_ms()
        gen = rollout_rounds(rec.submission.task, self._model_for(rec), self.backend,
                             opening.handle, self.rate_gate, self.clock, self.round_latency_ms)
        while True:
            try:
                delay_ms = next(gen)
            except StopIteration as stop:
                traj, cause = stop.value
                self._complete(rec, instance_id, opening.handle, traj, cause, started)
                return
            if delay_ms:
                time.sleep(delay_ms / 1000.0)

    def _complete(self, rec: TaskRecord, instance_id: str, handle, traj: Trajectory,
                  cause: TerminationCause, started_ms: int) -> None:
        task = rec.submission.task
        final = finalize_trajectory(traj, task.goal, cause, task_key=task.task_key)
        self.backend.close_env(handle)
        key = artifact_key(self.run_id, rec.task_id, "trajectory.jsonl")
        self.artifacts.put_artifact(key, trajectory_to_jsonl(final).encode("utf-8"))
        now = self.clock.now_ms()
        result = RolloutResult(
            task_key=task.task_key,
            replica_index=rec.submission.replica_index,
            task_id=rec.task_id,
            trajectory_key=key,
            reward=final.reward,
            rounds=len(final),
            termination_cause=final.termination_cause,
            wall_duration_ms=now - started_ms,
        )
        self.results[rec.task_id] = result
        self.bus.publish(EventKind.TASK_COMPLETED, rec.task_id, {
            "result_key": key,
            "reward": final.reward,
            "rounds": len(final),
            "cause": final.termination_cause.value,
            "attempt": rec.attempt,
        }, timestamp=now)

    def join_threads(self, timeout: float = 60.0) -> None:
        deadline = time.monotonic() + timeout
        for thread in self._threads:
            thread.join(max(0.0, deadline - time.monotonic()))


class _PolicyView:
    """Per-replica policy bound to the shared model's version and call counter."""

    def __init__(self, base: ModelService, policy):
        self._base = base
        self._policy = policy

    @property
    def params(self) -> ParamsVersion:
        return self._base.params

    def infer(self, ctx: PolicyContext):
        self._base.infer_calls += 1
        return self._policy.infer(ctx)


class AgentService:
    """Coordinates rollouts through a control plane and feeds experiences back."""

    def __init__(self, plane, master_seed: int = 0):
        self.plane = plane
        self.master_seed = master_seed

    def run_rollout(self, task: AgentTask, mode: ExecutionMode = ExecutionMode.PERSISTENT,
                    owner: str = "default") -> RolloutResult:
        plan = RolloutPlan(tasks=(task,), replicas=1, mode=mode)
        return self.run_batch(plan, owner=owner)[0]

    def run_batch(self, plan: RolloutPlan, owner: str = "default") -> list[RolloutResult]:
        """Submit every (task, replica) pair and collect all results.

        Partial failures are reported per result; the batch never aborts.
        """
        keys = [t.task_key for t in plan.tasks]
        if len(set(keys)) != len(keys):
            raise ValueError("task keys within a plan must be distinct")
        submitted: list[tuple[str, AgentTask, int]] = []
        for task in plan.tasks:
            for replica in range(plan.replicas):
                submission = TaskSubmission(task=task, mode=plan.mode, owner=owner,
                                            workload="rollout", replica_index=replica)
                task_id = self.plane.scheduler.submit(submission)
                submitted.append((task_id, task, replica))
        self.plane.wait_for([task_id for task_id, _, _ in submitted])
        results = []
        for task_id, task, replica in submitted:
            result = self.plane.executor.results.get(task_id)
            if result is None:
                result = self._failed_result(task_id, task, replica)
            results.append(result)
        return results

    def _failed_result(self, task_id: str, task: AgentTask, replica: int) -> RolloutResult:
        # The task died before its rollout produced anything (for example
        # provisioning failures past the retry budget): persist an empty
        # failed trajectory so the result still references an artifact.
        traj = finalize_trajectory(Trajectory(), task.goal,
                                   TerminationCause.ENVIRONMENT_FAILURE, task_key=task.task_key)
        key = artifact_key(self.plane.run_id, task_id, "trajectory.jsonl")
        if not self.plane.artifacts.exists(key):
            self.plane.artifacts.put_artifact(key, trajectory_to_jsonl(traj).encode("utf-8"))
        return RolloutResult(task_key=task.task_key, replica_index=replica, task_id=task_id,
                             trajectory_key=key, reward=traj.reward, rounds=0,
                             termination_cause=TerminationCause.ENVIRONMENT_FAILURE,
                             wall_duration_ms=0)

    def feed_experiences(self, results: Sequence[RolloutResult],
                         model: Optional[ModelService] = None) -> ParamsVersion:
        """Build an experience batch from persisted trajectories and train on it."""
        model = model or self.plane.model
        pairs = []
        for result in results:
            if result.trajectory_key is None:
                continue
            text = self.plane.artifacts.get_artifact(result.trajectory_key).decode("utf-8")
            pairs.append((result.task_key, trajectory_from_jsonl(text)))
        batch = ExperienceBatch(trajectories=tuple(pairs),
                                params_version_hint=model.params.version)
        return model.train(batch)


def aggregate_metrics(results: Sequence[RolloutResult]) -> dict:
    """Per-task pass rates plus a global summary (mean reward, rounds, causes)."""
    if not results:
        raise EmptyResultSet("no rollout results to aggregate")
    by_task: dict[str, list[RolloutResult]] = {}
    for result in results:
        by_task.setdefault(result.task_key, []).append(result)
    pass_rates = {key: sum(1 for r in group if r.reward > 0) / len(group)
                  for key, group in sorted(by_task.items())}
    causes = Counter(r.termination_cause.value for r in results)
    return {
        "pass_rates": pass_rates,
        "summary": {
            "results": len(results),
            "tasks": len(by_task),
            "mean_reward": sum(r.reward for r in results) / len(results),
            "mean_rounds": sum(r.rounds for r in results) / len(results),
            "causes": dict(sorted(causes.items())),
        },
    }


def filter_environments(table: PassRateTable) -> set:
    """Keys with pass rate strictly inside (0, 1); trivial and impossible tasks drop."""
    return {key for key, rate in table.rates.items() if 0.0 < rate < 1.0}


def write_metrics_artifact(store: ArtifactStore, run_id: str,
                           metrics: Mapping) -> str:
    key = f"runs/{run_id}/metrics.json"
    store.put_artifact(key, json.dumps(metrics, sort_keys=True, indent=2).encode("utf-8"))
    return key
