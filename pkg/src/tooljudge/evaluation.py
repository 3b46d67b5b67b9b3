"""Benchmark protocols and best-of-N response selection.

Pointwise scoring grants 0.5 credit on ties; pairwise accuracy uses a single
seeded random ordering per item; listwise accuracy is exact-match on the
best index. Best-of-N offers a knockout tournament (champion vs challenger,
exactly n-1 comparisons) and pointwise scoring with majority voting over the
extracted answers of the top-scored responses. Every protocol returns a
machine-readable report with per-item verdicts sufficient to recompute the
headline number.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol, Sequence, TYPE_CHECKING

from .pipeline import normalize_answer

if TYPE_CHECKING:
    from .rollout import PolicyClient, RolloutBudget
    from .sandbox import SandboxClient
from .trajectory import (
    CandidateResponse,
    Domain,
    GoldLabel,
    JudgeTask,
    PointwiseRole,
    Prediction,
    Preference,
    Score,
    TaskKind,
)

logger = logging.getLogger(__name__)


class JudgeFn(Protocol):
    """Anything that can judge a task; None means abstention."""

    def judge(self, task: JudgeTask) -> Prediction | None: ...


@dataclass(frozen=True)
class PreferencePair:
    """One labelled evaluation item: prompt with a chosen/rejected response."""

    id: str
    prompt: str
    chosen: str
    rejected: str
    domain: Domain = Domain.REASONING


@dataclass
class EvalReport:
    protocol: str
    accuracy: float
    items: list[dict[str, Any]]
    abstentions: int
    seed: int | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "protocol": self.protocol,
            "accuracy": self.accuracy,
            "n_items": len(self.items),
            "abstentions": self.abstentions,
            "seed": self.seed,
            "items": self.items,
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2)


def _pointwise_task(pair: PreferencePair, role: PointwiseRole, text: str) -> JudgeTask:
    return JudgeTask(
        id=f"{pair.id}#{role.value}",
        prompt=pair.prompt,
        candidates=(CandidateResponse(text),),
        kind=TaskKind.POINTWISE,
        domain=pair.domain,
        gold=GoldLabel(pointwise_role=role),
    )


def eval_pointwise(judge: JudgeFn, pairs: Sequence[PreferencePair]) -> EvalReport:
    """Score chosen and rejected independently; credit 1 for a strict win,
    0.5 for a tie, 0 otherwise. Abstentions score 0 and are tallied."""
    items: list[dict[str, Any]] = []
    abstentions = 0
    total = 0.0
    for pair in pairs:
        preds = []
        for role, text in (
            (PointwiseRole.CHOSEN, pair.chosen),
            (PointwiseRole.REJECTED, pair.rejected),
        ):
            pred = judge.judge(_pointwise_task(pair, role, text))
            preds.append(pred.value if isinstance(pred, Score) else None)
        score_chosen, score_rejected = preds
        abstained = score_chosen is None or score_rejected is None
        if abstained:
            abstentions += 1
            credit = 0.0
        elif score_chosen > score_rejected:
            credit = 1.0
        elif score_chosen == score_rejected:
            credit = 0.5
        else:
            credit = 0.0
        total += credit
        items.append(
            {
                "id": pair.id,
                "score_chosen": score_chosen,
                "score_rejected": score_rejected,
                "credit": credit,
                "abstained": abstained,
            }
        )
    accuracy = total / len(pairs) if pairs else 0.0
    return EvalReport("pointwise", accuracy, items, abstentions)


def eval_pairwise(judge: JudgeFn, pairs: Sequence[PreferencePair], seed: int = 0) -> EvalReport:
    """Accuracy over a single seeded random A/B ordering per item.

    The ordering stream is random.Random(seed).randrange(2) consumed in item
    order; 1 puts the chosen response in slot B. Each item's ordering is
    logged for replay.
    """
    rng = random.Random(seed)
    items: list[dict[str, Any]] = []
    abstentions = 0
    correct = 0
    for pair in pairs:
        chosen_position = rng.randrange(2)
        texts = [pair.rejected, pair.chosen] if chosen_position == 1 else [pair.chosen, pair.rejected]
        task = JudgeTask(
            id=pair.id,
            prompt=pair.prompt,
            candidates=tuple(CandidateResponse(t) for t in texts),
            kind=TaskKind.PAIRWISE,
            domain=pair.domain,
            gold=GoldLabel(preferred_index=chosen_position),
        )
        pred = judge.judge(task)
        abstained = not isinstance(pred, Preference)
        if abstained:
            abstentions += 1
            hit = False
        else:
            hit = pred.index == chosen_position
        correct += int(hit)
        items.append(
            {
                "id": pair.id,
                "chosen_position": chosen_position,
                "predicted": pred.index if isinstance(pred, Preference) else None,
                "correct": hit,
                "abstained": abstained,
            }
        )
    accuracy = correct / len(pairs) if pairs else 0.0
    return EvalReport("pairwise", accuracy, items, abstentions, seed=seed)


def eval_listwise(judge: JudgeFn, items: Sequence[JudgeTask]) -> EvalReport:
    """Exact-match accuracy on the best-response index for listwise tasks."""
    verdicts: list[dict[str, Any]] = []
    abstentions = 0
    correct = 0
    for task in items:
        if task.kind is not TaskKind.LISTWISE:
            raise ValueError(f"task {task.id} is not listwise")
        if task.gold is None or task.gold.preferred_index is None:
            raise ValueError(f"task {task.id} has no gold index")
        pred = judge.judge(task)
        abstained = not isinstance(pred, Preference)
        if abstained:
            abstentions += 1
            hit = False
        else:
            hit = pred.index == task.gold.preferred_index
        correct += int(hit)
        verdicts.append(
            {
                "id": task.id,
                "gold": task.gold.preferred_index,
                "predicted": pred.index if isinstance(pred, Preference) else None,
                "correct": hit,
                "abstained": abstained,
            }
        )
    accuracy = correct / len(items) if items else 0.0
    return EvalReport("listwise", accuracy, verdicts, abstentions)


@dataclass
class KnockoutResult:
    """Winner of a sequential knockout plus the full comparison log."""

    winner: int
    comparisons: list[dict[str, Any]]
    abstentions: int

    @property
    def judge_calls(self) -> int:
        return len(self.comparisons)


def best_of_n_knockout(
    judge: JudgeFn,
    prompt: str,
    responses: Sequence[str],
    domain: Domain = Domain.REASONING,
    task_prefix: str = "bon",
) -> KnockoutResult:
    """Champion-vs-challenger tournament in exactly n-1 pairwise judgments.

    Seeding order is input order. The champion holds slot A, the challenger
    slot B; on abstention the champion is retained.
    """
    if not responses:
        raise ValueError("need at least one response")
    champion = 0
    comparisons: list[dict[str, Any]] = []
    abstentions = 0
    for challenger in range(1, len(responses)):
        task = JudgeTask(
            id=f"{task_prefix}-{champion}v{challenger}",
            prompt=prompt,
            candidates=(
                CandidateResponse(responses[champion]),
                CandidateResponse(responses[challenger]),
            ),
            kind=TaskKind.PAIRWISE,
            domain=domain,
        )
        pred = judge.judge(task)
        if isinstance(pred, Preference):
            winner = champion if pred.index == 0 else challenger
        else:
            abstentions += 1
            winner = champion
            logger.info("knockout %s: abstention, champion %d retained", task.id, champion)
        comparisons.append(
            {
                "champion": champion,
                "challenger": challenger,
                "predicted": pred.index if isinstance(pred, Preference) else None,
                "winner": winner,
            }
        )
        champion = winner
    return KnockoutResult(winner=champion, comparisons=comparisons, abstentions=abstentions)


@dataclass
class PointwiseBonResult:
    answer: str
    scores: list[int | None]
    top_indices: list[int]


def best_of_n_pointwise(
    judge: JudgeFn,
    prompt: str,
    responses: Sequence[str],
    answer_extractor: Callable[[str], str] = normalize_answer,
    domain: Domain = Domain.REASONING,
    task_prefix: str = "bon",
) -> PointwiseBonResult:
    """Score every response; majority-vote the answers of the top-scored set.

    Abstentions never enter the top set unless every response abstained, in
    which case the vote runs over all answers.
    """
    if not responses:
        raise ValueError("need at least one response")
    scores: list[int | None] = []
    for i, text in enumerate(responses):
        task = JudgeTask(
            id=f"{task_prefix}-{i}",
            prompt=prompt,
            candidates=(CandidateResponse(text),),
            kind=TaskKind.POINTWISE,
            domain=domain,
        )
        pred = judge.judge(task)
        scores.append(pred.value if isinstance(pred, Score) else None)
    valid = [s for s in scores if s is not None]
    if valid:
        best = max(valid)
        top = [i for i, s in enumerate(scores) if s == best]
    else:
        top = list(range(len(responses)))
    answers = [answer_extractor(responses[i]) for i in top]
    return PointwiseBonResult(answer=majority_vote(answers), scores=scores, top_indices=top)


def majority_vote(answers: Sequence[str], normalize: Callable[[str], str] = lambda a: a) -> str:
    """Most frequent answer after normalization; ties go to the earliest."""
    if not answers:
        raise ValueError("majority_vote needs at least one answer")
    counts: dict[str, int] = {}
    for answer in answers:
        key = normalize(answer)
        counts[key] = counts.get(key, 0) + 1
    best = max(counts.values())
    for answer in answers:
        if counts[normalize(answer)] == best:
            return answer
    raise AssertionError("unreachable")


class RolloutJudge:
    """JudgeFn adapter that runs a full tool-augmented rollout per task."""

    def __init__(
        self,
        policy: "PolicyClient",
        sandbox: "SandboxClient",
        budget: "RolloutBudget | None" = None,
        no_tool_domains: frozenset[Domain] | None = None,
        seed: int | None = None,
    ):
        self.policy = policy
        self.sandbox = sandbox
        self.budget = budget
        self.no_tool_domains = no_tool_domains
        self.seed = seed

    def judge(self, task: JudgeTask) -> Prediction | None:
        from .prompts import DEFAULT_NO_TOOL_DOMAINS, template_for
        from .rollout import run_judgment

        domains = self.no_tool_domains or DEFAULT_NO_TOOL_DOMAINS
        traj = run_judgment(
            task,
            self.policy,
            self.sandbox,
            budget=self.budget,
            template=template_for(task, domains),
            seed=self.seed,
        )
        return traj.prediction
