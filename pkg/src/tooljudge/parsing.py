"""Extract code blocks, scores, and preferences from raw model text.

Parsing is total: malformed input never raises, it surfaces as flags or None.
Duplicated verdict tags resolve to the last occurrence (the committed
answer); tag names are case-sensitive while tag values tolerate surrounding
whitespace. Out-of-range values invalidate rather than clamp.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Literal

from .prompts import DEFAULT_NO_TOOL_DOMAINS
from .trajectory import (
    Domain,
    JudgeTask,
    Preference,
    Score,
    SegmentKind,
    TaskKind,
    Trajectory,
)

_OPEN_RE = re.compile(r"(?:^|(?<=\n))```python[ \t]*\n")
_CLOSE_RE = re.compile(r"\n```[ \t]*(?=\n|$)")
_SCORE_RE = re.compile(r"<score>(.*?)</score>", re.DOTALL)
_PREF_RE = re.compile(r"<preference>(.*?)</preference>", re.DOTALL)
_INT_RE = re.compile(r"[+-]?\d+")
_OUTPUT_BLOCK_RE = re.compile(r"(?:^|\n)```output[ \t]*\n.*?\n```[ \t]*(?=\n|$)", re.DOTALL)


@dataclass(frozen=True)
class ParsedPiece:
    kind: Literal["reasoning", "code"]
    text: str


@dataclass(frozen=True)
class ParsedOutput:
    """Segmented model text plus whatever verdict tags it carries.

    score is range-checked (None outside 1..10); preference is the raw
    letter index, range-checked later against the candidate count.
    """

    segments: tuple[ParsedPiece, ...]
    score: int | None
    preference: int | None
    trailing_open_fence: bool

    @property
    def code_blocks(self) -> list[str]:
        return [p.text for p in self.segments if p.kind == "code"]


def _trim_boundary(text: str, leading: bool, trailing: bool) -> str:
    """Drop the single newline that joined this chunk to an adjacent fence."""
    if leading and text.startswith("\n"):
        text = text[1:]
    if trailing and text.endswith("\n"):
        text = text[:-1]
    return text


def iter_code_blocks(text: str) -> tuple[list[tuple[int, int, str]], bool]:
    """Locate closed ```python blocks: (fence_start, fence_end, source).

    fence_start/fence_end delimit the whole fenced block in `text`. The bool
    reports a trailing unterminated opening fence.
    """
    blocks: list[tuple[int, int, str]] = []
    pos = 0
    while True:
        opened = _OPEN_RE.search(text, pos)
        if opened is None:
            return blocks, False
        closed = _CLOSE_RE.search(text, opened.end())
        if closed is None:
            return blocks, True
        blocks.append((opened.start(), closed.end(), text[opened.end() : closed.start()]))
        pos = closed.end()


def extract_segments(text: str) -> ParsedOutput:
    """Split raw model text into reasoning and code pieces.

    Text outside well-formed ```python fences becomes reasoning; an
    unterminated fence sets trailing_open_fence and its fragment stays in
    reasoning rather than becoming code.
    """
    blocks, open_fence = iter_code_blocks(text)
    pieces: list[ParsedPiece] = []
    cursor = 0
    for fence_start, fence_end, source in blocks:
        before = _trim_boundary(text[cursor:fence_start], leading=cursor > 0, trailing=True)
        if before:
            pieces.append(ParsedPiece("reasoning", before))
        pieces.append(ParsedPiece("code", source))
        cursor = fence_end
    tail = _trim_boundary(text[cursor:], leading=cursor > 0, trailing=False)
    if tail:
        pieces.append(ParsedPiece("reasoning", tail))
    return ParsedOutput(
        segments=tuple(pieces),
        score=extract_score(text),
        preference=_preference_letter(text),
        trailing_open_fence=open_fence,
    )


def extract_score(text: str) -> int | None:
    """Integer inside the last <score>...</score> pair, None if absent,
    non-integer, or outside 1..10."""
    matches = _SCORE_RE.findall(text)
    if not matches:
        return None
    value = matches[-1].strip()
    if not _INT_RE.fullmatch(value):
        return None
    score = int(value)
    return score if 1 <= score <= 10 else None


def _preference_letter(text: str) -> int | None:
    matches = _PREF_RE.findall(text)
    if not matches:
        return None
    value = matches[-1].strip()
    if len(value) != 1 or not "A" <= value <= "Z":
        return None
    return ord(value) - ord("A")


def extract_preference(text: str, n: int) -> int | None:
    """0-based index from the last <preference>X</preference> pair, None if
    the letter falls outside the first n candidates."""
    if n < 2:
        raise ValueError(f"preference extraction needs n >= 2, got {n}")
    index = _preference_letter(text)
    if index is None or index >= n:
        return None
    return index


def parse_prediction(text: str, task: JudgeTask) -> Score | Preference | None:
    """Kind-appropriate verdict from raw text, or None."""
    if task.kind is TaskKind.POINTWISE:
        score = extract_score(text)
        return Score(score) if score is not None else None
    index = extract_preference(text, task.n_candidates)
    return Preference(index) if index is not None else None


def strip_output_fences(text: str) -> tuple[str, int]:
    """Remove model-emitted ```output blocks; returns (clean text, count).

    Models should never author output fences (the controller appends real
    execution feedback); any that appear are dropped from trainable text.
    """
    count = len(_OUTPUT_BLOCK_RE.findall(text))
    if count == 0:
        return text, 0
    return _OUTPUT_BLOCK_RE.sub("", text), count


def validate_format(
    traj: Trajectory,
    task: JudgeTask,
    no_tool_domains: frozenset[Domain] = DEFAULT_NO_TOOL_DOMAINS,
) -> bool:
    """Format-reward gate for a completed trajectory.

    True iff the prediction parsed and matches the task kind, no code fence
    was left unterminated, and chat/safety tasks invoked no tools.
    """
    pred = traj.prediction
    if task.kind is TaskKind.POINTWISE:
        if not isinstance(pred, Score):
            return False
    else:
        if not isinstance(pred, Preference) or pred.index >= task.n_candidates:
            return False
    for seg in traj.segments:
        if seg.kind is SegmentKind.REASONING:
            _, open_fence = iter_code_blocks(seg.text)
            if open_fence:
                return False
    if task.domain in no_tool_domains and traj.tool_calls > 0:
        return False
    return True
