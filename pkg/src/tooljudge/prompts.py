"""Judge prompt templates for pointwise, pairwise, and listwise tasks.

Each template renders the full judging context for one task: role preamble,
optional code-use instructions, the instruction and labelled responses, and
the guidelines naming the required verdict tag (<score>N</score> for
pointwise, <preference>X</preference> otherwise). Chat/safety prompts use the
no-tool variants, which ask for textual reasoning only.
"""

from __future__ import annotations

from dataclasses import dataclass

from .trajectory import Domain, JudgeTask, TaskKind, candidate_letter

DEFAULT_NO_TOOL_DOMAINS = frozenset({Domain.CHAT, Domain.SAFETY})


@dataclass(frozen=True)
class FenceSet:
    """Fence markers for code and execution-output blocks."""

    code_open: str = "```python"
    output_open: str = "```output"
    close: str = "```"


def default_fences() -> FenceSet:
    return FenceSet()


_PREAMBLE = (
    "You are an expert judge evaluating whether model-generated responses "
    "correctly answer the user's instruction. Read the instruction and the "
    "response(s) below carefully. Judge strictly on correctness and "
    "instruction compliance; ignore style, tone, and fluency unless they "
    "affect compliance."
)

_TOOL_NOTE = (
    "You may run Python to support your evaluation: write code between the "
    "{code_open} and {close} tags, and its execution result will appear "
    "between {output_open} and {close} tags. Each {code_open} block runs as "
    "an independent program. This helps with counting characters, words, or "
    "keywords, checking capitalization and placeholders, verifying "
    "calculation steps, and running test cases against code responses."
)

_NO_TOOL_NOTE = "Reason step by step in text before giving your final verdict."

_SCORE_GUIDELINE = (
    "At the end of your response, give the response a score in range 1 to 10 "
    "in the format such as <score>10</score>. A score of 10 means the "
    "response fully satisfies the instruction with a correct answer; a score "
    "of 1 means it is irrelevant, evasive, or misses key requirements."
)

_PREFERENCE_GUIDELINE = (
    "At the end of your response, give a preference in the format such as "
    "<preference>A</preference> to indicate the better response."
)


@dataclass(frozen=True)
class PromptTemplate:
    """Renders the judging context for tasks of one kind."""

    kind: TaskKind
    tools_enabled: bool = True
    fences: FenceSet = FenceSet()

    def render(self, task: JudgeTask) -> str:
        if task.kind is not self.kind:
            raise ValueError(f"template is for {self.kind.value}, task is {task.kind.value}")
        parts = [_PREAMBLE]
        if self.tools_enabled:
            parts.append(
                _TOOL_NOTE.format(
                    code_open=self.fences.code_open,
                    output_open=self.fences.output_open,
                    close=self.fences.close,
                )
            )
        else:
            parts.append(_NO_TOOL_NOTE)
        parts.append(f"Instruction:\n{task.prompt}")
        if task.kind is TaskKind.POINTWISE:
            parts.append(f"Response:\n{task.candidates[0].text}")
        else:
            for i, cand in enumerate(task.candidates):
                parts.append(f"Response {candidate_letter(i)}:\n{cand.text}")
        guideline = (
            _SCORE_GUIDELINE if task.kind is TaskKind.POINTWISE else _PREFERENCE_GUIDELINE
        )
        parts.append(f"Guidelines:\n{guideline}")
        return "\n\n".join(parts) + "\n\n"


def template_for(
    task: JudgeTask,
    no_tool_domains: frozenset[Domain] = DEFAULT_NO_TOOL_DOMAINS,
    fences: FenceSet | None = None,
) -> PromptTemplate:
    """Pick the kind-matching template; chat/safety get the no-tool variant."""
    return PromptTemplate(
        kind=task.kind,
        tools_enabled=task.domain not in no_tool_domains,
        fences=fences or FenceSet(),
    )
