"""Hierarchical temporal aggregation with more inputs: forecast plans and latent rollout.

Step labels: the five history latents are -4..0, predicted leads are 1..n.
Every predictor consumes two latents spaced by its own interval ``s`` and
produces the latent ``s`` steps after the later one.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import torch

from .errors import ConfigError

HISTORY = 5
INTERVALS = (1, 2, 4)
UNREACHABLE = None


@dataclass(frozen=True)
class PlanStep:
    target: int
    interval: int
    inputs: tuple

    def __post_init__(self):
        a, b = self.inputs
        if not (a < b < self.target):
            raise ValueError(f"inputs {self.inputs} must be increasing and precede target {self.target}")
        if b - a != self.interval or self.target - b != self.interval:
            raise ValueError(f"step {self} spacing does not match interval {self.interval}")
        if a < 1 - HISTORY:
            raise ValueError(f"input {a} is older than the {HISTORY}-step history")

    @property
    def model(self) -> str:
        return f"LPM{self.interval}"


@dataclass(frozen=True)
class ForecastPlan:
    steps: tuple
    depth: dict

    @property
    def n(self) -> int:
        return len(self.steps)

    @property
    def max_depth(self) -> int:
        return max(self.depth[s.target] for s in self.steps)

    def to_json(self) -> str:
        return json.dumps([
            {"target": s.target, "model": s.model, "interval": s.interval,
             "inputs": list(s.inputs), "depth": self.depth[s.target]}
            for s in self.steps
        ])

    def table(self) -> str:
        rows = [f"{'target':>6}  {'model':<5}  {'inputs':<10}  {'depth':>5}"]
        for s in self.steps:
            rows.append(f"{s.target:>6}  {s.model:<5}  {str(s.inputs):<10}  {self.depth[s.target]:>5}")
        return "\n".join(rows)


def _step_for(i: int) -> PlanStep:
    if i == 1:
        return PlanStep(1, 1, (-1, 0))
    if i == 2:
        return PlanStep(2, 2, (-2, 0))
    if i == 3:
        return PlanStep(3, 1, (1, 2))
    return PlanStep(i, 4, (i - 8, i - 4))


def build_plan(n: int) -> ForecastPlan:
    """The fixed inference plan: leads 1-3 special-cased, every later lead from LPM4."""
    if n < 1:
        raise ValueError(f"number of lead steps must be >= 1, got {n}")
    depth = {j: 0 for j in range(1 - HISTORY, 1)}
    steps = []
    for i in range(1, n + 1):
        st = _step_for(i)
        depth[i] = 1 + max(depth[j] for j in st.inputs)
        steps.append(st)
    return ForecastPlan(tuple(steps), {i: depth[i] for i in range(1, n + 1)})


def optimal_depth(n: int, intervals=INTERVALS, history: int = HISTORY) -> dict:
    """Minimal iteration depth per lead by dynamic programming over interval choices.

    depth(j) = 0 for history labels; depth(i) = min_s 1 + max(depth(i-s), depth(i-2s)).
    Leads with no admissible chain map to ``UNREACHABLE``.
    """
    intervals = tuple(intervals)
    if not intervals:
        raise ValueError("need at least one interval")
    depth = {j: 0 for j in range(1 - history, 1)}
    for i in range(1, n + 1):
        best = math.inf
        for s in intervals:
            a, b = i - 2 * s, i - s
            if a < 1 - history:
                continue
            da, db = depth[a], depth[b]
            if da is UNREACHABLE or db is UNREACHABLE:
                continue
            best = min(best, 1 + max(da, db))
        depth[i] = UNREACHABLE if best == math.inf else int(best)
    return {i: depth[i] for i in range(1, n + 1)}


def rollout(model, history: torch.Tensor, n: int, history_hours, dt_hours: float = 6.0,
            plan: ForecastPlan | None = None) -> torch.Tensor:
    """Execute the plan in latent space.

    history: [B, 5, d, H, W] latents for labels -4..0.
    history_hours: hours since epoch of label 0, shape [B] (or scalar).
    Returns [B, n, d, H, W] for labels 1..n.
    """
    if history.ndim != 5 or history.shape[1] != HISTORY:
        raise ValueError(f"rollout needs [B, {HISTORY}, d, H, W] history, got {tuple(history.shape)}")
    plan = plan or build_plan(n)
    have = set(int(s) for s in getattr(model, "intervals", INTERVALS))
    missing = {st.interval for st in plan.steps} - have
    if missing:
        raise ConfigError(f"plan needs predictors for intervals {sorted(missing)}, model has {sorted(have)}")
    B = history.shape[0]
    t0 = torch.as_tensor(history_hours, dtype=torch.float64).reshape(-1).expand(B)
    latents = {label: history[:, label + HISTORY - 1] for label in range(1 - HISTORY, 1)}
    for st in plan.steps:
        a, b = st.inputs
        latents[st.target] = model.lpm_step(
            latents[a], latents[b], t0 + a * dt_hours, t0 + b * dt_hours, st.interval
        )
    return torch.stack([latents[i] for i in range(1, n + 1)], dim=1)
