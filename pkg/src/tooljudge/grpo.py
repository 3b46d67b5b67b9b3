"""Group-relative advantages, dynamic-sampling filter, and clipped objective.

Advantages normalize each rollout's reward within its group of G samples
(population std); the same scalar broadcasts to every trainable token of that
rollout. Groups whose rollouts are uniformly correct or uniformly wrong carry
no signal and are dropped. The clipped objective is evaluated on supplied
log-probabilities only — no weight update happens here; kept groups export as
JSONL for an external trainer.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any, Iterable, Iterator, Literal, Sequence

import numpy as np

from .prompts import PromptTemplate
from .trajectory import Trajectory, prediction_to_dict, serialize

DEGENERACY_TOL = 1e-6
DEFAULT_EPS_LOW = 0.2
DEFAULT_EPS_HIGH = 0.3
DEFAULT_KL_COEFF = 0.01


class DegenerateGroup(Exception):
    """Reward spread too small to normalize; the group should be filtered."""


class LengthMismatch(Exception):
    """Token sequences or advantages are not aligned."""


@dataclass(frozen=True)
class RolloutGroup:
    """G rollouts for one task, the unit of advantage normalization."""

    task_id: str
    trajectories: tuple[Trajectory, ...] = ()
    rewards: tuple[float, ...] | None = None
    advantages: tuple[float, ...] | None = None
    kept: bool = True

    @property
    def size(self) -> int:
        if self.rewards is not None:
            return len(self.rewards)
        return len(self.trajectories)


def group_advantages(rewards: Sequence[float], tol: float = DEGENERACY_TOL) -> list[float]:
    """(R_i - mean) / std over the group, population std.

    Raises DegenerateGroup when the population std is <= tol; callers must
    have filtered uniform groups first.
    """
    if len(rewards) < 2:
        raise ValueError(f"group needs >= 2 rollouts, got {len(rewards)}")
    arr = np.asarray(rewards, dtype=np.float64)
    std = float(arr.std())
    if std <= tol:
        raise DegenerateGroup(f"population std {std:.3e} <= {tol:.0e}")
    return ((arr - arr.mean()) / std).tolist()


def keep_group(correctness: Sequence[int]) -> bool:
    """Dynamic-sampling rule: keep iff correctness is mixed (0 < hits < G)."""
    hits = sum(1 for c in correctness if c == 1)
    return 0 < hits < len(correctness)


def filter_groups(
    groups: Sequence[RolloutGroup], correctness: Sequence[Sequence[int]]
) -> list[RolloutGroup]:
    """Set kept flags from per-rollout correctness; order preserved."""
    if len(groups) != len(correctness):
        raise LengthMismatch(f"{len(groups)} groups vs {len(correctness)} correctness rows")
    return [replace(g, kept=keep_group(r_c)) for g, r_c in zip(groups, correctness)]


@dataclass(frozen=True)
class TokenSequence:
    """Per-token log-probabilities for one rollout, aligned by position.

    trainable is False exactly on interpreter-output positions.
    """

    logp_new: np.ndarray
    logp_old: np.ndarray
    logp_ref: np.ndarray
    trainable: np.ndarray

    def __post_init__(self) -> None:
        lengths = {
            len(self.logp_new),
            len(self.logp_old),
            len(self.logp_ref),
            len(self.trainable),
        }
        if len(lengths) != 1:
            raise LengthMismatch(f"sequence arrays have mixed lengths {sorted(lengths)}")

    @classmethod
    def build(
        cls,
        logp_new: Sequence[float],
        logp_old: Sequence[float],
        logp_ref: Sequence[float] | None = None,
        trainable: Sequence[bool] | None = None,
    ) -> "TokenSequence":
        new = np.asarray(logp_new, dtype=np.float64)
        old = np.asarray(logp_old, dtype=np.float64)
        ref = new.copy() if logp_ref is None else np.asarray(logp_ref, dtype=np.float64)
        mask = (
            np.ones(len(new), dtype=bool)
            if trainable is None
            else np.asarray(trainable, dtype=bool)
        )
        return cls(new, old, ref, mask)


@dataclass(frozen=True)
class ObjectiveInputs:
    sequences: tuple[TokenSequence, ...]
    eps_low: float = DEFAULT_EPS_LOW
    eps_high: float = DEFAULT_EPS_HIGH
    kl_coeff: float = DEFAULT_KL_COEFF
    kl_estimator: Literal["k3", "plain"] = "k3"


def kl_penalty(
    logp_new: np.ndarray | Sequence[float],
    logp_ref: np.ndarray | Sequence[float],
    estimator: Literal["k3", "plain"] = "k3",
) -> np.ndarray:
    """Per-token KL(new || ref) estimate.

    k3: exp(d) - d - 1 with d = logp_ref - logp_new (nonnegative, low
    variance); plain: logp_new - logp_ref.
    """
    new = np.asarray(logp_new, dtype=np.float64)
    ref = np.asarray(logp_ref, dtype=np.float64)
    if new.shape != ref.shape:
        raise LengthMismatch(f"logp_new {new.shape} vs logp_ref {ref.shape}")
    if estimator == "k3":
        delta = ref - new
        return np.exp(delta) - delta - 1.0
    if estimator == "plain":
        return new - ref
    raise ValueError(f"unknown KL estimator {estimator!r}")


def clipped_objective(inputs: ObjectiveInputs, advantages: Sequence[float]) -> float:
    """Token-mean clipped surrogate minus the KL penalty, trainable tokens only.

    Per token: min(ratio * A, clip(ratio, 1-eps_low, 1+eps_high) * A)
    - kl_coeff * kl, with ratio = exp(logp_new - logp_old) and the rollout's
    scalar advantage A broadcast over its tokens. Normalized by the total
    trainable token count across the group.
    """
    if len(inputs.sequences) != len(advantages):
        raise LengthMismatch(
            f"{len(inputs.sequences)} sequences vs {len(advantages)} advantages"
        )
    total = 0.0
    n_tokens = 0
    for seq, adv in zip(inputs.sequences, advantages):
        ratio = np.exp(seq.logp_new - seq.logp_old)
        clipped = np.clip(ratio, 1.0 - inputs.eps_low, 1.0 + inputs.eps_high)
        surrogate = np.minimum(ratio * adv, clipped * adv)
        kl = kl_penalty(seq.logp_new, seq.logp_ref, inputs.kl_estimator)
        term = surrogate - inputs.kl_coeff * kl
        total += float(term[seq.trainable].sum())
        n_tokens += int(seq.trainable.sum())
    if n_tokens == 0:
        return 0.0
    return total / n_tokens


def attach_advantages(group: RolloutGroup, tol: float = DEGENERACY_TOL) -> RolloutGroup:
    if group.rewards is None:
        raise ValueError(f"group {group.task_id} has no rewards")
    return replace(group, advantages=tuple(group_advantages(group.rewards, tol)))


def export_groups(
    groups: Iterable[RolloutGroup], template: PromptTemplate | None = None
) -> Iterator[dict[str, Any]]:
    """Kept groups as trainer-ready records: rewards, advantages, serialized
    trajectories with mask spans."""
    for group in groups:
        if not group.kept:
            continue
        trajs = []
        for traj in group.trajectories:
            text, spans = serialize(traj, template)
            trajs.append(
                {
                    "text": text,
                    "mask_spans": [list(span) for span in spans],
                    "tool_calls": traj.tool_calls,
                    "prediction": prediction_to_dict(traj.prediction),
                }
            )
        yield {
            "task_id": group.task_id,
            "rewards": list(group.rewards or ()),
            "advantages": list(group.advantages) if group.advantages is not None else None,
            "trajectories": trajs,
        }
