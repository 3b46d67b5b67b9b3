"""Training-data machinery: verifiers, rejection sampling, SFT export,
synthetic preference construction, and n-gram decontamination.

The loop per prompt: sample a rollout group, reward it, keep only rollouts
with full reward, pick one canonical trajectory (fewest tool calls, then
shortest), and emit an SFT record whose interpreter-output spans are masked.
Preference pairs are manufactured by crossing verifier-passing responses with
failing ones; listwise items add distinct-answer negatives.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Protocol, Sequence

from .prompts import PromptTemplate, template_for
from .rewards import RewardBreakdown
from .sandbox import SandboxClient
from .trajectory import (
    CandidateResponse,
    Domain,
    GoldLabel,
    JudgeTask,
    TaskKind,
    Trajectory,
    serialize,
)


class EmptySet(Exception):
    """Canonical selection over an empty candidate list."""


class InsufficientNegatives(Exception):
    """Fewer than the minimum distinct-answer negatives qualify."""


# --- answer normalization and verifiers --------------------------------------

_BOXED_RE = re.compile(r"\\boxed\{([^{}]*)\}")
_NUMBER_RE = re.compile(r"-?\d+(?:,\d{3})*(?:\.\d+)?(?:/\d+)?")


def extract_final_answer(text: str) -> str | None:
    """Last \\boxed{} span if present, else the last number, else None."""
    boxed = _BOXED_RE.findall(text)
    if boxed:
        return boxed[-1]
    numbers = _NUMBER_RE.findall(text)
    if numbers:
        return numbers[-1]
    return None


def normalize_answer(text: str) -> str:
    """Canonical comparison form: trimmed, lowercased, thousands commas and
    edge punctuation dropped, inner whitespace collapsed."""
    answer = extract_final_answer(text)
    if answer is None:
        answer = text
    answer = answer.strip().lower()
    answer = answer.strip(" \t\n.,;:!?$")
    answer = answer.replace(",", "")
    return re.sub(r"\s+", " ", answer)


@dataclass(frozen=True)
class VerifyResult:
    passed: bool
    answer: str | None = None


class Verifier(Protocol):
    """Deterministic pass/fail checker used to manufacture preference labels."""

    def verify(self, prompt: str, response: str) -> VerifyResult: ...


class ExactMatchVerifier:
    """Compare the response's final answer against a gold answer."""

    def __init__(self, gold: str):
        self.gold = normalize_answer(gold)

    def verify(self, prompt: str, response: str) -> VerifyResult:
        answer = extract_final_answer(response)
        if answer is None:
            return VerifyResult(False, None)
        return VerifyResult(normalize_answer(answer) == self.gold, normalize_answer(answer))


_SCRIPT_DRIVER = """
_PROMPT = {prompt!r}
_RESPONSE = {response!r}
_result = check(_PROMPT, _RESPONSE)
if isinstance(_result, tuple):
    _ok, _answer = _result
    print("ANSWER:" + str(_answer))
else:
    _ok = _result
print("PASS" if _ok else "FAIL")
"""


class ScriptVerifier:
    """Run a user-supplied checker script in the sandbox.

    The script must define check(prompt, response) returning a bool or a
    (bool, answer) tuple; the driver prints PASS/FAIL plus an optional
    ANSWER: line.
    """

    def __init__(self, script_source: str, sandbox: SandboxClient):
        self.script_source = script_source
        self.sandbox = sandbox

    def verify(self, prompt: str, response: str) -> VerifyResult:
        program = self.script_source + "\n" + _SCRIPT_DRIVER.format(
            prompt=prompt, response=response
        )
        result = self.sandbox.run(program)
        if not result.ok:
            return VerifyResult(False, None)
        answer: str | None = None
        verdict = False
        for line in result.stdout.splitlines():
            if line.startswith("ANSWER:"):
                answer = line[len("ANSWER:"):]
            elif line.strip() in ("PASS", "FAIL"):
                verdict = line.strip() == "PASS"
        return VerifyResult(verdict, answer)


# --- rejection sampling and SFT records ---------------------------------------

def rejection_filter(
    trajectories: Sequence[Trajectory], rewards: Sequence[RewardBreakdown]
) -> list[Trajectory]:
    """Keep the rollouts that earned full reward (correct, well-formatted,
    error-free); order preserved."""
    if len(trajectories) != len(rewards):
        raise ValueError(f"{len(trajectories)} trajectories vs {len(rewards)} rewards")
    return [traj for traj, r in zip(trajectories, rewards) if r.total == 1.0]


def select_canonical(
    valid: Sequence[Trajectory], template: PromptTemplate | None = None
) -> Trajectory:
    """Cheapest full-reward trajectory: fewest tool calls, then shortest
    serialization, then lowest rollout index."""
    if not valid:
        raise EmptySet("no valid trajectories to select from")
    keyed = [
        (traj.tool_calls, len(serialize(traj, template)[0]), index)
        for index, traj in enumerate(valid)
    ]
    _, _, best = min(keyed)
    return valid[best]


@dataclass(frozen=True)
class SftRecord:
    """One supervised training example with interpreter-output masking."""

    prompt: str
    target: str
    mask_spans: tuple[tuple[int, int], ...]
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for start, end in self.mask_spans:
            if not 0 <= start < end <= len(self.target):
                raise ValueError(f"mask span ({start}, {end}) outside target bounds")

    def to_dict(self) -> dict[str, Any]:
        return {
            "prompt": self.prompt,
            "target": self.target,
            "mask_spans": [list(span) for span in self.mask_spans],
            "meta": self.meta,
        }


def build_sft_record(
    task: JudgeTask,
    traj: Trajectory,
    template: PromptTemplate | None = None,
    reward: RewardBreakdown | None = None,
) -> SftRecord:
    template = template or template_for(task)
    target, spans = serialize(traj, template)
    meta: dict[str, Any] = {"task_id": task.id, "tool_calls": traj.tool_calls}
    if reward is not None:
        meta["reward"] = reward.to_dict()
    return SftRecord(
        prompt=template.render(task),
        target=target,
        mask_spans=tuple(spans),
        meta=meta,
    )


# --- synthetic preference construction ----------------------------------------

def build_synthetic_pairs(
    prompt: str, responses: Sequence[str], verifier: Verifier
) -> list[tuple[str, str]]:
    """Cross every verifier-passing response with every failing one.

    Empty when the responses are uniformly right or uniformly wrong.
    """
    if len(responses) < 2:
        raise ValueError(f"need >= 2 responses, got {len(responses)}")
    passes = [r for r in responses if verifier.verify(prompt, r).passed]
    fails = [r for r in responses if not verifier.verify(prompt, r).passed]
    return [(good, bad) for good in passes for bad in fails]


def build_listwise_item(
    prompt: str,
    chosen: str,
    negatives_pool: Sequence[str],
    verifier: Verifier,
    k_range: tuple[int, int] = (3, 5),
    seed: int = 0,
    item_id: str = "listwise-0",
    domain: Domain = Domain.REASONING,
) -> JudgeTask:
    """Listwise task: the chosen response among 3-5 distinct-answer negatives.

    Negatives whose extracted answer matches the chosen one are excluded to
    block shortcut solutions. Candidate order is shuffled with the given seed
    (record the seed to replay the item).
    """
    chosen_check = verifier.verify(prompt, chosen)
    if not chosen_check.passed:
        raise ValueError("chosen response does not pass the verifier")
    chosen_answer = chosen_check.answer
    qualified = []
    for neg in negatives_pool:
        check = verifier.verify(prompt, neg)
        if check.answer is None or check.answer != chosen_answer:
            qualified.append(neg)
    low, high = k_range
    if len(qualified) < low:
        raise InsufficientNegatives(
            f"need >= {low} distinct-answer negatives, found {len(qualified)}"
        )
    rng = random.Random(seed)
    k = rng.randint(low, min(high, len(qualified)))
    negatives = rng.sample(qualified, k)
    candidates = [chosen] + negatives
    order = list(range(len(candidates)))
    rng.shuffle(order)
    shuffled = [candidates[i] for i in order]
    gold_index = order.index(0)
    return JudgeTask(
        id=item_id,
        prompt=prompt,
        candidates=tuple(CandidateResponse(text) for text in shuffled),
        kind=TaskKind.LISTWISE,
        domain=domain,
        gold=GoldLabel(preferred_index=gold_index),
    )


# --- decontamination -----------------------------------------------------------

def _ngrams(text: str, n: int) -> set[tuple[str, ...]]:
    tokens = text.lower().split()
    return {tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)}


def decontaminate(
    train_prompts: Sequence[str], eval_prompts: Iterable[str], n: int = 8
) -> tuple[list[str], list[str]]:
    """Drop training prompts sharing any contiguous n-gram with eval prompts.

    Tokenization is whitespace splitting on lowercased text. Returns
    (kept, removed), both in input order.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    eval_index: set[tuple[str, ...]] = set()
    for prompt in eval_prompts:
        eval_index |= _ngrams(prompt, n)
    kept: list[str] = []
    removed: list[str] = []
    for prompt in train_prompts:
        if _ngrams(prompt, n) & eval_index:
            removed.append(prompt)
        else:
            kept.append(prompt)
    return kept, removed


# --- iteration bookkeeping ------------------------------------------------------

def dataset_hash(records: Iterable[dict[str, Any]]) -> str:
    digest = hashlib.sha256()
    for record in records:
        digest.update(json.dumps(record, sort_keys=True, ensure_ascii=False).encode("utf-8"))
        digest.update(b"\n")
    return digest.hexdigest()[:16]


def write_iteration_manifest(
    path: str | Path, iteration: int, checkpoint_tag: str, data_hash: str
) -> dict[str, Any]:
    """Audit record for one RS -> SFT -> RL cycle (training happens elsewhere)."""
    entry = {"iteration": iteration, "checkpoint": checkpoint_tag, "dataset_hash": data_hash}
    path = Path(path)
    history: list[dict[str, Any]] = []
    if path.exists():
        history = json.loads(path.read_text(encoding="utf-8"))
    history.append(entry)
    path.write_text(json.dumps(history, indent=2) + "\n", encoding="utf-8")
    return entry
