"""Experiment harness: fleet-scale runs in virtual time plus their statistics.

Four experiments are supported:

* ``throughput``     -- makespan and cost across a task-count grid, per strategy
* ``latency_breakdown`` -- per-phase durations for the three pipeline variants
* ``utilization``    -- CPU/memory traces over normalized execution time
* ``startup_scaling``-- the environment startup curve across concurrency

Every run drives the full control plane (queue, gates, scheduler, simulated
backend) on a virtual clock, so a 10,000-task grid completes in seconds of
wall time. Outputs are plain CSV files with frozen schemas plus a JSON-lines
event log; identical spec and seed reproduce identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import (AgentTask, EnvSpec, ExecutionMode, GoalEvaluator, InstanceDescriptor,
                   TaskSubmission)
from .environments.base import SimConfig, Strategy, startup_time_min, utilization_trace
from .plane import ControlPlane, build_sim_plane

TIMING_COLUMNS = ("task_id", "submitted", "scheduled", "env_ready", "exec_start", "exec_end")


class EmptySample(Exception):
    pass


@dataclass(frozen=True)
class ExperimentSpec:
    """What to run: one experiment kind, one strategy, a task-count grid."""

    experiment: str  # throughput | latency_breakdown | utilization | startup_scaling
    strategy: Strategy = Strategy.DISTRIBUTED
    task_counts: tuple = (1, 100, 1000, 2000)
    seed: int = 0
    repetitions: int = 1

    def __post_init__(self):
        valid = {"throughput", "latency_breakdown", "utilization", "startup_scaling"}
        if self.experiment not in valid:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        counts = tuple(self.task_counts)
        if any(c <= 0 for c in counts) or list(counts) != sorted(set(counts)):
            raise ValueError("task_counts must be positive and strictly increasing")
        cap = SimConfig.for_strategy(self.strategy).max_schedulable_tasks
        if counts and counts[-1] > cap:
            raise ValueError(
                f"{self.strategy.value} refuses {counts[-1]} tasks: "
                f"fleet availability caps concurrency at {cap}")


@dataclass(frozen=True)
class CostLine:
    label: str
    instance_count: int
    instance_hours: float
    hourly_rate_usd: float
    cost_usd: float


@dataclass(frozen=True)
class CostReport:
    lines: tuple  # of CostLine
    total_usd: float

    @property
    def instance_hours(self) -> float:
        return sum(line.instance_hours for line in self.lines)


def compute_cost(instances: Sequence[InstanceDescriptor]) -> CostReport:
    """Bill every instance from creation to termination at its profile rate.

    Billing granularity is exact milliseconds (no rounding to billing
    periods), so the report is recomputable from raw timing data.
    """
    by_rate: dict[float, list[InstanceDescriptor]] = {}
    for inst in instances:
        if inst.terminated_at is None:
            raise ValueError(f"instance {inst.instance_id} not terminated; cannot bill")
        by_rate.setdefault(inst.profile.hourly_rate_usd, []).append(inst)
    lines = []
    for rate in sorted(by_rate):
        group = by_rate[rate]
        hours = sum((inst.terminated_at - inst.created_at) / 3_600_000.0 for inst in group)
        lines.append(CostLine(label=f"rate-{rate}", instance_count=len(group),
                              instance_hours=hours, hourly_rate_usd=rate,
                              cost_usd=hours * rate))
    return CostReport(lines=tuple(lines), total_usd=sum(l.cost_usd for l in lines))


def cost_reduction(baseline_usd: float, candidate_usd: float) -> float:
    if baseline_usd <= 0:
        raise ValueError("baseline cost must be positive")
    return 1.0 - candidate_usd / baseline_usd


def bootstrap_ci(samples: Sequence[float], iterations: int = 100, level: float = 0.95,
                 seed: int = 0) -> tuple[float, float, float]:
    """Percentile bootstrap of the mean: (mean, lo, hi)."""
    if len(samples) == 0:
        raise EmptySample("cannot bootstrap an empty sample")
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    data = np.asarray(samples, dtype=float)
    rng = np.random.default_rng(seed)
    means = np.empty(iterations)
    for i in range(iterations):
        means[i] = data[rng.integers(0, len(data), size=len(data))].mean()
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(means, [100.0 * alpha, 100.0 * (1.0 - alpha)])
    return float(data.mean()), float(lo), float(hi)


# ---------------------------------------------------------------------------
# Fleet runs
# ---------------------------------------------------------------------------

def synthetic_task(index: int, max_steps: int = 100) -> AgentTask:
    return AgentTask(
        task_key=f"bench-{index:05d}",
        env_spec=EnvSpec(image_ref="bench/workload:latest"),
        description="synthetic benchmark workload",
        goal=GoalEvaluator(evaluator_kind="table-lookup", spec={"default": 1.0}),
        max_steps=max_steps,
    )


@dataclass
class FleetRunResult:
    records: list
    instances: list
    makespan_min: float
    per_task_total_min: list
    events_jsonl: str
    cost: CostReport


def run_fleet_batch(cfg: SimConfig, count: int, mode: ExecutionMode,
                    owner: str = "bench") -> FleetRunResult:
    """Drive ``count`` synthetic duration tasks through a fresh control plane."""
    instances_needed = min(
        cfg.fleet_cap,
        -(-count // cfg.profile.max_concurrent_tasks),  # ceil division
    )
    plane = build_sim_plane(cfg, workload="duration", pool_max=max(1, instances_needed))
    if mode is ExecutionMode.PERSISTENT:
        plane.scheduler.prewarm_pool(instances_needed)
        plane.run_until_idle()
    task_ids = [plane.scheduler.submit(TaskSubmission(task=synthetic_task(i), mode=mode,
                                                      owner=owner, workload="duration"))
                for i in range(count)]
    plane.wait_for(task_ids)
    plane.shutdown()

    records = plane.scheduler.records()
    instances = plane.backend.instances()
    submitted = [r.phase("submitted") for r in records]
    finished = [r.phase("exec_end") for r in records if r.phase("exec_end") is not None]
    if len(finished) != len(records):
        raise RuntimeError("not every task completed; cannot compute makespan")
    makespan_min = (max(finished) - min(submitted)) / 60_000.0
    totals = [(r.phase("exec_end") - r.phase("submitted")) / 60_000.0 for r in records]
    return FleetRunResult(records=records, instances=instances, makespan_min=makespan_min,
                          per_task_total_min=totals, events_jsonl=plane.bus.dump_jsonl(),
                          cost=compute_cost(instances))


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def _timing_rows(records) -> list:
    rows = []
    for rec in sorted(records, key=lambda r: r.task_id):
        rows.append([rec.task_id] + [rec.phase(p) for p in TIMING_COLUMNS[1:]])
    return rows


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

def run_throughput(spec: ExperimentSpec, out_dir: Path) -> dict:
    """Makespan/cost across the task-count grid for one strategy (steady-state
    fleet calibration: warm pooled instances, execution-contention slowdown)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    summary_rows = []
    cost_rows = []
    for count in spec.task_counts:
        cfg = SimConfig.throughput_calibration(spec.strategy, seed=spec.seed)
        run = run_fleet_batch(cfg, count, ExecutionMode.PERSISTENT)
        mean, lo, hi = bootstrap_ci(run.per_task_total_min, seed=spec.seed)
        summary_rows.append([spec.strategy.value, count, run.makespan_min, mean, lo, hi,
                             run.cost.instance_hours, run.cost.total_usd])
        cost_rows.append([spec.strategy.value, count, len(run.instances),
                          run.cost.instance_hours, run.cost.total_usd])
        _write_csv(out_dir / f"timings_{spec.strategy.value}_{count}.csv",
                   TIMING_COLUMNS, _timing_rows(run.records))
        (out_dir / f"events_{spec.strategy.value}_{count}.jsonl").write_text(
            run.events_jsonl, encoding="utf-8")
    summary_path = out_dir / f"throughput_{spec.strategy.value}.csv"
    _write_csv(summary_path,
               ("strategy", "tasks", "makespan_min", "mean_total_min", "ci_lo_min",
                "ci_hi_min", "instance_hours", "cost_usd"),
               summary_rows)
    cost_path = out_dir / f"cost_{spec.strategy.value}.csv"
    _write_csv(cost_path, ("strategy", "tasks", "instances", "instance_hours", "cost_usd"),
               cost_rows)
    return {"summary": summary_path, "cost": cost_path,
            "rows": summary_rows}


LATENCY_VARIANTS = {
    # variant -> (strategy, mode, reference task count)
    "persistent": (Strategy.DISTRIBUTED, ExecutionMode.PERSISTENT, 1000),
    "ephemeral": (Strategy.DISTRIBUTED, ExecutionMode.EPHEMERAL, 1000),
    "centralized": (Strategy.CENTRALIZED, ExecutionMode.PERSISTENT, 2000),
}


def run_latency_breakdown(spec: ExperimentSpec, out_dir: Path,
                          variants: Optional[Sequence[str]] = None) -> dict:
    """Per-phase mean durations for each pipeline variant at its reference scale.

    Phases are the stamp deltas: submission (submitted->scheduled), startup
    (scheduled->env_ready), dispatch (env_ready->exec_start), execution
    (exec_start->exec_end); their sum telescopes to the end-to-end total.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for name in variants or LATENCY_VARIANTS:
        strategy, mode, count = LATENCY_VARIANTS[name]
        cfg = SimConfig.for_strategy(strategy, seed=spec.seed)
        run = run_fleet_batch(cfg, count, mode)
        phases = {"submission": [], "startup": [], "dispatch": [], "execution": []}
        for rec in run.records:
            stamps = [rec.phase(p) for p in TIMING_COLUMNS[1:]]
            deltas = [(b - a) / 60_000.0 for a, b in zip(stamps, stamps[1:])]
            for key, value in zip(phases, deltas):
                phases[key].append(value)
        means = {key: float(np.mean(vals)) for key, vals in phases.items()}
        total = sum(means.values())
        rows.append([name, count, means["submission"], means["startup"],
                     means["dispatch"], means["execution"], total])
        _write_csv(out_dir / f"timings_latency_{name}.csv",
                   TIMING_COLUMNS, _timing_rows(run.records))
    path = out_dir / "latency_breakdown.csv"
    _write_csv(path, ("variant", "tasks", "submission_min", "startup_min", "dispatch_min",
                      "execution_min", "total_min"), rows)
    return {"summary": path, "rows": rows}


def run_startup_scaling(spec: ExperimentSpec, out_dir: Path,
                        grid: Sequence[int] = (1, 10, 100, 500, 1000, 2000, 5000, 10000)) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    curves = (
        ("centralized", Strategy.CENTRALIZED, ExecutionMode.PERSISTENT),
        ("ephemeral_distributed", Strategy.DISTRIBUTED, ExecutionMode.EPHEMERAL),
        ("persistent_distributed", Strategy.DISTRIBUTED, ExecutionMode.PERSISTENT),
    )
    for label, strategy, mode in curves:
        for c in grid:
            rows.append([label, c, startup_time_min(strategy, mode, c)])
    path = out_dir / "startup_scaling.csv"
    _write_csv(path, ("variant", "concurrent", "startup_min"), rows)
    return {"summary": path, "rows": rows}


def run_utilization(spec: ExperimentSpec, out_dir: Path, samples: int = 100) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = {}
    for strategy in (Strategy.CENTRALIZED, Strategy.DISTRIBUTED):
        trace = utilization_trace(strategy, samples, seed=spec.seed)
        path = out_dir / f"utilization_{strategy.value}.csv"
        _write_csv(path, ("t_norm", "cpu_pct", "mem_pct"),
                   [[s.t_norm, s.cpu_pct, s.mem_pct] for s in trace])
        outputs[strategy.value] = path
    return outputs


def run_experiment(spec: ExperimentSpec, out_dir: str | Path) -> dict:
    """Dispatch to the experiment runner; returns the emitted file map."""
    out = Path(out_dir)
    if spec.experiment == "throughput":
        return run_throughput(spec, out)
    if spec.experiment == "latency_breakdown":
        return run_latency_breakdown(spec, out)
    if spec.experiment == "startup_scaling":
        return run_startup_scaling(spec, out)
    return run_utilization(spec, out)


def load_summary_csv(path: str | Path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
    header = lines[0].split(",")
    return [dict(zip(header, line.split(","))) for line in lines[1:]]


def recompute_cost_from_timings(instances_csv_rows: Sequence[dict],
                                rate: float) -> float:
    """Independent cost recomputation from raw instance timing rows."""
    total_hours = sum((int(row["terminated_at"]) - int(row["created_at"])) / 3_600_000.0
                      for row in instances_csv_rows)
    return total_hours * rate


def write_cost_report_json(path: Path, distributed: CostReport,
                           centralized: CostReport) -> dict:
    report = {
        "distributed_usd": distributed.total_usd,
        "centralized_usd": centralized.total_usd,
        "reduction": cost_reduction(centralized.total_usd, distributed.total_usd),
    }
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return report
