"""Multi-turn judge controller: generate, execute fenced code, feed back.

The loop asks the policy for a continuation, scans it for the first closed
```python block, executes the block, appends the masked output to the
context, and repeats — until a verdict tag appears, generation ends, or a
budget (tool calls, turns, context characters) runs out. Budget-exhausted
trajectories are kept with the prediction unset so group statistics stay
size-G.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

from .grpo import RolloutGroup
from .parsing import iter_code_blocks, parse_prediction, strip_output_fences
from .prompts import PromptTemplate, template_for
from .sandbox import SandboxClient, SandboxUnavailable
from .trajectory import JudgeTask, Trajectory, append_step, finalize, serialize

logger = logging.getLogger(__name__)

FENCE_CLOSE_MARKER = "\n```"


class PolicyError(Exception):
    """Transport or model failure from the policy endpoint; retryable."""


class PolicyClient(Protocol):
    """Text-completion interface the controller drives.

    stop_markers are advisory early-exit hints; clients that honor them must
    return the text up to and including the matched marker, never its
    continuation. The controller re-scans returned text for fence closure
    itself, so ignoring the markers is always safe.
    """

    def generate(
        self,
        context: str,
        stop_markers: Sequence[str],
        max_new: int,
        seed: int | None = None,
    ) -> tuple[str, str]: ...


@dataclass(frozen=True)
class RolloutBudget:
    max_tool_calls: int = 3
    max_total_chars: int = 32768  # 8192-token response cap at ~4 chars/token
    max_turns: int = 8

    def __post_init__(self) -> None:
        if self.max_tool_calls <= 0 or self.max_total_chars <= 0 or self.max_turns <= 0:
            raise ValueError("all rollout budgets must be positive")


class ScriptedPolicy:
    """Deterministic test double: replays canned chunks, one per call."""

    def __init__(self, chunks: Sequence[str]):
        self._chunks = list(chunks)
        self._cursor = 0

    def generate(
        self,
        context: str,
        stop_markers: Sequence[str],
        max_new: int,
        seed: int | None = None,
    ) -> tuple[str, str]:
        if self._cursor >= len(self._chunks):
            return "", "stop"
        chunk = self._chunks[self._cursor]
        self._cursor += 1
        return chunk, "scripted"


class HttpPolicyClient:
    """Chat-completions client for any OpenAI-style endpoint.

    Sends the judging context as a single user message. Retries transport
    failures with backoff; the API key comes from the TIR_API_KEY env var.
    Endpoints swallow matched stop sequences, so a response that ends inside
    an open code block gets its closing fence re-appended.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        temperature: float = 0.9,
        top_p: float = 0.95,
        chars_per_token: int = 4,
        max_retries: int = 3,
        request_timeout: float = 180.0,
        api_key: str | None = None,
        seed: int | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.temperature = temperature
        self.top_p = top_p
        self.chars_per_token = max(1, chars_per_token)
        self.max_retries = max_retries
        self.request_timeout = request_timeout
        self.api_key = api_key if api_key is not None else os.environ.get("TIR_API_KEY")
        self.seed = seed

    def generate(
        self,
        context: str,
        stop_markers: Sequence[str],
        max_new: int,
        seed: int | None = None,
    ) -> tuple[str, str]:
        import requests

        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": context}],
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_tokens": max(1, max_new // self.chars_per_token),
        }
        if stop_markers:
            payload["stop"] = list(stop_markers)
        effective_seed = seed if seed is not None else self.seed
        if effective_seed is not None:
            payload["seed"] = effective_seed
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"

        last_error: Exception | None = None
        for attempt in range(self.max_retries):
            try:
                resp = requests.post(
                    f"{self.base_url}/chat/completions",
                    json=payload,
                    headers=headers,
                    timeout=self.request_timeout,
                )
                if resp.status_code >= 500:
                    raise PolicyError(f"server error {resp.status_code}")
                if resp.status_code != 200:
                    raise PolicyError(f"endpoint error {resp.status_code}: {resp.text[:200]}")
                choice = resp.json()["choices"][0]
                text = choice["message"]["content"] or ""
                reason = choice.get("finish_reason") or "stop"
                return self._reattach_fence(text, stop_markers, reason), reason
            except PolicyError as exc:
                last_error = exc
            except (requests.RequestException, KeyError, ValueError, IndexError) as exc:
                last_error = PolicyError(f"transport failure: {exc}")
            if attempt + 1 < self.max_retries:
                time.sleep(min(2.0**attempt, 8.0))
        raise last_error if last_error is not None else PolicyError("generation failed")

    @staticmethod
    def _reattach_fence(text: str, stop_markers: Sequence[str], reason: str) -> str:
        if FENCE_CLOSE_MARKER not in stop_markers or reason != "stop":
            return text
        _, open_fence = iter_code_blocks(text)
        return text + FENCE_CLOSE_MARKER if open_fence else text


def _first_closed_block(text: str) -> tuple[str, str, str] | None:
    """Split text at its first closed code block: (before, source, after)."""
    blocks, _ = iter_code_blocks(text)
    if not blocks:
        return None
    fence_start, fence_end, source = blocks[0]
    before = text[:fence_start]
    if before.endswith("\n"):
        before = before[:-1]
    return before, source, text[fence_end:]


def run_judgment(
    task: JudgeTask,
    policy: PolicyClient,
    sandbox: SandboxClient,
    budget: RolloutBudget | None = None,
    template: PromptTemplate | None = None,
    seed: int | None = None,
) -> Trajectory:
    """Drive one judging conversation to a final prediction or budget stop."""
    budget = budget or RolloutBudget()
    template = template or template_for(task)
    base = template.render(task)
    traj = Trajectory.new(task.id)

    for _ in range(budget.max_turns):
        tail, _ = serialize(traj, template)
        context = base + tail
        remaining = budget.max_total_chars - len(tail)
        if remaining <= 0:
            logger.info("task %s: context budget exhausted", task.id)
            break
        text, stop_reason = policy.generate(
            context, stop_markers=(FENCE_CLOSE_MARKER,), max_new=remaining, seed=seed
        )
        text, stripped = strip_output_fences(text)
        if stripped:
            logger.warning("task %s: stripped %d model-emitted output fence(s)", task.id, stripped)
        block = _first_closed_block(text)
        if block is not None:
            before, source, after = block
            if after.strip():
                logger.info("task %s: discarded %d chars after code fence", task.id, len(after))
            if traj.tool_calls < budget.max_tool_calls:
                result = sandbox.run(source)
                traj = append_step(traj, before, source, result)
                continue
            # out of call budget: record the block unexecuted and stop
            traj = append_step(traj, before, source, None)
            logger.info("task %s: tool-call budget exhausted", task.id)
            break
        prediction = parse_prediction(text, task)
        if text:
            traj = append_step(traj, text)
        if prediction is not None:
            traj = finalize(traj, prediction)
        else:
            logger.info(
                "task %s: generation ended (%s) without a prediction", task.id, stop_reason
            )
        break
    return traj


PolicyFactory = Callable[[int], PolicyClient]


def sample_group(
    task: JudgeTask,
    policy: PolicyClient | PolicyFactory,
    group_size: int,
    sandbox: SandboxClient,
    budget: RolloutBudget | None = None,
    template: PromptTemplate | None = None,
    retries: int = 1,
    seed: int = 0,
    parallelism: int = 1,
) -> RolloutGroup:
    """Sample G independent rollouts for one task.

    policy may be a client (reused across slots) or a factory(slot) -> client
    for per-slot state/seeds. Failed slots retry up to `retries` times, then
    contribute an empty trajectory (which rewards to 0).
    """
    if group_size < 2:
        raise ValueError(f"group size must be >= 2, got {group_size}")

    def make_policy(slot: int) -> PolicyClient:
        if callable(policy) and not hasattr(policy, "generate"):
            return policy(slot)
        return policy  # type: ignore[return-value]

    def one_slot(slot: int) -> Trajectory:
        last: Exception | None = None
        for _attempt in range(retries + 1):
            try:
                return run_judgment(
                    task, make_policy(slot), sandbox, budget, template, seed=seed + slot
                )
            except (PolicyError, SandboxUnavailable) as exc:
                last = exc
        logger.error("task %s slot %d failed after %d retries: %s", task.id, slot, retries, last)
        return Trajectory.new(task.id)

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            trajectories = list(pool.map(one_slot, range(group_size)))
    else:
        trajectories = [one_slot(slot) for slot in range(group_size)]
    return RolloutGroup(task_id=task.id, trajectories=tuple(trajectories))
