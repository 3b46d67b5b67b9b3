"""Verifiable reward components and the combined scalar reward.

Three binary components: correctness (prediction vs gold), format (strict
output structure plus the chat/safety no-tool rule), and tool use (error-free
executions within the call budget). The combined reward
R = R_c * (0.1 + 0.9 * [R_t = 1 and R_f = 1]) grants full credit only when
all three hold, so its image is exactly {0, 0.1, 1.0}.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Sequence

from .parsing import validate_format
from .prompts import DEFAULT_NO_TOOL_DOMAINS
from .sandbox import ExecStatus
from .trajectory import (
    Domain,
    JudgeTask,
    PointwiseRole,
    Preference,
    Score,
    SegmentKind,
    Trajectory,
    pair_key,
)

DEFAULT_MAX_TOOL_CALLS = 3


class MissingGold(Exception):
    """The task carries no ground-truth label."""


@dataclass(frozen=True)
class RewardBreakdown:
    r_c: int
    r_f: int
    r_t: int
    total: float

    def __post_init__(self) -> None:
        for name, value in (("r_c", self.r_c), ("r_f", self.r_f), ("r_t", self.r_t)):
            if value not in (0, 1):
                raise ValueError(f"{name} must be 0 or 1, got {value}")
        if self.total != total_reward(self.r_c, self.r_f, self.r_t):
            raise ValueError("total inconsistent with components")

    @classmethod
    def compute(cls, r_c: int, r_f: int, r_t: int) -> "RewardBreakdown":
        return cls(r_c=r_c, r_f=r_f, r_t=r_t, total=total_reward(r_c, r_f, r_t))

    def to_dict(self) -> dict[str, Any]:
        return {"r_c": self.r_c, "r_f": self.r_f, "r_t": self.r_t, "total": self.total}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RewardBreakdown":
        return cls(int(data["r_c"]), int(data["r_f"]), int(data["r_t"]), float(data["total"]))


def total_reward(r_c: int, r_f: int, r_t: int) -> float:
    """R = R_c * (0.1 + 0.9 * [R_t=1 and R_f=1]); image {0, 0.1, 1.0}."""
    for value in (r_c, r_f, r_t):
        if value not in (0, 1):
            raise ValueError(f"reward components must be 0 or 1, got {value}")
    return r_c * (0.1 + 0.9 * (1 if (r_t == 1 and r_f == 1) else 0))


def correctness_preference(traj: Trajectory, task: JudgeTask) -> int:
    """1 iff the predicted index equals the gold preferred index."""
    if task.gold is None or task.gold.preferred_index is None:
        raise MissingGold(f"task {task.id} has no preference label")
    pred = traj.prediction
    if isinstance(pred, Preference) and pred.index == task.gold.preferred_index:
        return 1
    return 0


def correctness_pointwise(chosen: Trajectory, rejected: Trajectory) -> int:
    """1 iff both rollouts scored and the chosen score is strictly higher."""
    a, b = chosen.prediction, rejected.prediction
    if isinstance(a, Score) and isinstance(b, Score) and a.value > b.value:
        return 1
    return 0


def tool_reward(traj: Trajectory, max_calls: int = DEFAULT_MAX_TOOL_CALLS) -> int:
    """1 iff every execution succeeded and the call budget was respected.

    Zero tool calls are vacuously error-free. Timeouts count as errors.
    """
    if traj.tool_calls > max_calls:
        return 0
    for seg in traj.segments:
        if seg.kind is SegmentKind.OUTPUT and seg.status is not ExecStatus.OK:
            return 0
    return 1


def format_reward(
    traj: Trajectory,
    task: JudgeTask,
    no_tool_domains: frozenset[Domain] = DEFAULT_NO_TOOL_DOMAINS,
) -> int:
    return 1 if validate_format(traj, task, no_tool_domains) else 0


def breakdown_for_preference(
    traj: Trajectory,
    task: JudgeTask,
    max_calls: int = DEFAULT_MAX_TOOL_CALLS,
    no_tool_domains: frozenset[Domain] = DEFAULT_NO_TOOL_DOMAINS,
) -> RewardBreakdown:
    return RewardBreakdown.compute(
        r_c=correctness_preference(traj, task),
        r_f=format_reward(traj, task, no_tool_domains),
        r_t=tool_reward(traj, max_calls),
    )


def breakdown_for_pointwise_pair(
    chosen: tuple[Trajectory, JudgeTask],
    rejected: tuple[Trajectory, JudgeTask],
    max_calls: int = DEFAULT_MAX_TOOL_CALLS,
    no_tool_domains: frozenset[Domain] = DEFAULT_NO_TOOL_DOMAINS,
) -> tuple[RewardBreakdown, RewardBreakdown]:
    """Score a linked chosen/rejected rollout pair.

    Correctness is shared (chosen must out-score rejected strictly); format
    and tool rewards are per-rollout.
    """
    chosen_traj, chosen_task = chosen
    rejected_traj, rejected_task = rejected
    for t in (chosen_task, rejected_task):
        if t.gold is None or t.gold.pointwise_role is None:
            raise MissingGold(f"task {t.id} has no pointwise role label")
    if chosen_task.gold.pointwise_role is not PointwiseRole.CHOSEN:
        raise ValueError(f"task {chosen_task.id} is not the chosen-role task")
    if rejected_task.gold.pointwise_role is not PointwiseRole.REJECTED:
        raise ValueError(f"task {rejected_task.id} is not the rejected-role task")
    r_c = correctness_pointwise(chosen_traj, rejected_traj)
    results = []
    for traj, task in ((chosen_traj, chosen_task), (rejected_traj, rejected_task)):
        results.append(
            RewardBreakdown.compute(
                r_c=r_c,
                r_f=format_reward(traj, task, no_tool_domains),
                r_t=tool_reward(traj, max_calls),
            )
        )
    return results[0], results[1]


def assess_rewards(
    tasks: Iterable[JudgeTask],
    trajectories: Sequence[Trajectory],
    max_calls: int = DEFAULT_MAX_TOOL_CALLS,
    no_tool_domains: frozenset[Domain] = DEFAULT_NO_TOOL_DOMAINS,
) -> list[tuple[Trajectory, RewardBreakdown]]:
    """Reward every trajectory against its task.

    Pairwise/listwise trajectories score independently. Pointwise tasks are
    linked chosen/rejected pairs sharing an id stem ("t1#chosen"/"t1#rejected");
    rollouts pair up positionally within each stem.
    """
    by_id: dict[str, JudgeTask] = {t.id: t for t in tasks}
    out: list[tuple[Trajectory, RewardBreakdown] | None] = [None] * len(trajectories)
    pointwise_slots: dict[str, dict[PointwiseRole, list[int]]] = {}

    for i, traj in enumerate(trajectories):
        task = by_id.get(traj.task_id)
        if task is None:
            raise KeyError(f"no task with id {traj.task_id!r}")
        if task.kind.value != "pointwise":
            out[i] = (traj, breakdown_for_preference(traj, task, max_calls, no_tool_domains))
            continue
        if task.gold is None or task.gold.pointwise_role is None:
            raise MissingGold(f"task {task.id} has no pointwise role label")
        stem = pair_key(task.id)
        pointwise_slots.setdefault(stem, {}).setdefault(task.gold.pointwise_role, []).append(i)

    for stem, roles in pointwise_slots.items():
        chosen_idx = roles.get(PointwiseRole.CHOSEN, [])
        rejected_idx = roles.get(PointwiseRole.REJECTED, [])
        if len(chosen_idx) != len(rejected_idx):
            raise ValueError(
                f"pointwise pair {stem!r} has {len(chosen_idx)} chosen vs "
                f"{len(rejected_idx)} rejected rollouts"
            )
        for ci, ri in zip(chosen_idx, rejected_idx):
            b_chosen, b_rejected = breakdown_for_pointwise_pair(
                (trajectories[ci], by_id[trajectories[ci].task_id]),
                (trajectories[ri], by_id[trajectories[ri].task_id]),
                max_calls,
                no_tool_domains,
            )
            out[ci] = (trajectories[ci], b_chosen)
            out[ri] = (trajectories[ri], b_rejected)

    return [entry for entry in out if entry is not None]
