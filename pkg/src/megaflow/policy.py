"""Policy inference and the parameter-update stub.

Real inference engines and training frameworks sit behind these interfaces;
the implementations here are deliberately scriptable so rollouts stay
deterministic and end-to-end rewards are predictable. ``train`` records
batch statistics and bumps the parameter version without doing any actual
optimization.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np

from .core import Action, ActionKind, ExperienceBatch, Trajectory
from .persistence import ArtifactStore


class ScriptExhausted(Exception):
    pass


class UnterminatedTrajectory(Exception):
    pass


@dataclass(frozen=True)
class PolicyContext:
    """What the policy sees: task identity plus the trajectory so far."""

    task_key: str
    description: str
    steps: tuple = ()  # (State, Action) pairs of the live trajectory
    params_version: int = 0

    @property
    def round_index(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class WeightedAction:
    action: Action
    weight: float


@dataclass(frozen=True)
class ActionDistribution:
    """Normalized weights over candidate actions."""

    candidates: tuple  # of WeightedAction

    def __post_init__(self):
        if not self.candidates:
            raise ValueError("distribution must be non-empty")
        total = sum(c.weight for c in self.candidates)
        if any(c.weight < 0 for c in self.candidates) or abs(total - 1.0) > 1e-9:
            raise ValueError(f"weights must be >= 0 and sum to 1 (got {total})")

    def argmax(self) -> Action:
        """Highest-weight action, lowest index winning ties."""
        best = self.candidates[0]
        for cand in self.candidates[1:]:
            if cand.weight > best.weight:
                best = cand
        return best.action


def point_mass(action: Action) -> ActionDistribution:
    return ActionDistribution(candidates=(WeightedAction(action, 1.0),))


@dataclass(frozen=True)
class ParamsVersion:
    version: int = 0
    tag: str = ""


class Policy(Protocol):
    def infer(self, ctx: PolicyContext) -> ActionDistribution: ...


@dataclass(frozen=True)
class PolicyScript:
    """Fixed per-task action sequence ending in a finish at ``finish_at``."""

    task_key: str
    actions: tuple  # of Action, used for rounds 1..finish_at-1
    finish_at: int

    def __post_init__(self):
        if self.finish_at < 1:
            raise ValueError("finish_at must be >= 1")


class ScriptedPolicy:
    """Replays a per-task script; the final call returns finish with weight 1."""

    def __init__(self, scripts: Sequence[PolicyScript]):
        self._scripts = {s.task_key: s for s in scripts}

    def infer(self, ctx: PolicyContext) -> ActionDistribution:
        script = self._scripts.get(ctx.task_key)
        if script is None:
            raise KeyError(f"no script for task {ctx.task_key!r}")
        round_index = ctx.round_index  # 0-based: call N has round_index N-1
        if round_index == script.finish_at - 1:
            return point_mass(Action(ActionKind.FINISH))
        if round_index < len(script.actions):
            return point_mass(script.actions[round_index])
        raise ScriptExhausted(
            f"script for {ctx.task_key!r} has no action for round {round_index + 1}")


class RandomPolicy:
    """Uniform draws over the configured action kinds with a seeded generator."""

    def __init__(self, seed: int, action_kinds: Sequence[ActionKind] = (
            ActionKind.COMMAND, ActionKind.EDIT, ActionKind.FINISH)):
        self._kinds = tuple(sorted(action_kinds, key=lambda k: k.value))
        self._rng = np.random.default_rng(seed)

    def infer(self, ctx: PolicyContext) -> ActionDistribution:
        kind = self._kinds[int(self._rng.integers(0, len(self._kinds)))]
        return point_mass(Action(kind))


class NeverFinishPolicy:
    """Emits command actions forever; rollouts terminate only at the step limit."""

    def infer(self, ctx: PolicyContext) -> ActionDistribution:
        return point_mass(Action(ActionKind.COMMAND, b"noop"))


class LatencyWrapper:
    """Wraps a policy with a configured reply delay (consulted by rollout drivers)."""

    def __init__(self, inner: Policy, delay_ms: int):
        self.inner = inner
        self.delay_ms = delay_ms

    def infer(self, ctx: PolicyContext) -> ActionDistribution:
        return self.inner.infer(ctx)


def load_policy_scripts(path: str | Path) -> list[PolicyScript]:
    """Load scripts from a JSON file: a list of {task_key, actions, finish_at}."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    scripts = []
    for entry in raw:
        actions = tuple(Action(ActionKind(a["kind"]), a.get("payload", "").encode("utf-8"))
                        for a in entry.get("actions", []))
        scripts.append(PolicyScript(task_key=entry["task_key"], actions=actions,
                                    finish_at=entry["finish_at"]))
    return scripts


class ModelService:
    """Policy inference plus the training stub with a monotone params version.

    ``infer`` is safe for unbounded concurrent callers (the caller holds the
    rate-gate grant); ``train`` is serialized so version monotonicity is
    trivial.
    """

    def __init__(self, policy: Policy, artifacts: Optional[ArtifactStore] = None,
                 run_id: str = "run-0"):
        self.policy = policy
        self.artifacts = artifacts
        self.run_id = run_id
        self.params = ParamsVersion(0)
        self.infer_calls = 0
        self._train_lock = threading.Lock()

    def infer(self, ctx: PolicyContext) -> ActionDistribution:
        self.infer_calls += 1
        return self.policy.infer(ctx)

    def train(self, batch: ExperienceBatch, params: Optional[ParamsVersion] = None) -> ParamsVersion:
        with self._train_lock:
            current = params if params is not None else self.params
            for key, traj in batch.trajectories:
                if not traj.terminated or traj.reward is None:
                    raise UnterminatedTrajectory(key)
            rewards = [traj.reward for _, traj in batch.trajectories]
            stats = {
                "count": len(rewards),
                "mean_reward": float(np.mean(rewards)) if rewards else 0.0,
                "params_version": current.version + 1,
            }
            new_version = ParamsVersion(current.version + 1, tag=f"step-{current.version + 1}")
            if self.artifacts is not None:
                key = f"runs/{self.run_id}/training/step-{new_version.version:04d}.json"
                self.artifacts.put_artifact(key, json.dumps(stats, sort_keys=True).encode())
            self.params = new_version
            return new_version
