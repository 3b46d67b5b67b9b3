"""Core domain types: judging tasks, interleaved trajectories, serialization.

A trajectory interleaves free-text reasoning, code blocks, and execution
feedback, ending in an optional prediction. All types are immutable after
build, so they can be shared freely between concurrent workers. Interpreter
feedback is never trainable: serialization reports character mask spans that
exactly cover every execution-output block.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence, TYPE_CHECKING

from .sandbox import ExecResult, ExecStatus

if TYPE_CHECKING:
    from .prompts import PromptTemplate

SCHEMA_VERSION = 1


class AlternationViolation(Exception):
    """Execution output supplied without a preceding code block."""


class Finalized(Exception):
    """The trajectory already carries a final prediction."""


class TaskKind(str, Enum):
    POINTWISE = "pointwise"
    PAIRWISE = "pairwise"
    LISTWISE = "listwise"


class Domain(str, Enum):
    MATH = "math"
    CODE = "code"
    IF = "if"
    REASONING = "reasoning"
    CHAT = "chat"
    SAFETY = "safety"


class PointwiseRole(str, Enum):
    CHOSEN = "chosen"
    REJECTED = "rejected"


def candidate_letter(index: int) -> str:
    """0 -> 'A', 1 -> 'B', ... (input order defines the labels)."""
    if not 0 <= index < 26:
        raise ValueError(f"candidate index {index} outside A..Z")
    return chr(ord("A") + index)


def letter_index(letter: str) -> int:
    if len(letter) != 1 or not "A" <= letter <= "Z":
        raise ValueError(f"not a candidate letter: {letter!r}")
    return ord(letter) - ord("A")


@dataclass(frozen=True)
class CandidateResponse:
    text: str
    source: str | None = None  # generating model, when known


@dataclass(frozen=True)
class GoldLabel:
    """Ground-truth label; exactly one variant is populated."""

    preferred_index: int | None = None
    pointwise_role: PointwiseRole | None = None

    def __post_init__(self) -> None:
        if (self.preferred_index is None) == (self.pointwise_role is None):
            raise ValueError("exactly one of preferred_index/pointwise_role must be set")
        if self.preferred_index is not None and self.preferred_index < 0:
            raise ValueError("preferred_index must be >= 0")


@dataclass(frozen=True)
class JudgeTask:
    """One evaluation item: a prompt plus candidate responses to judge."""

    id: str
    prompt: str
    candidates: tuple[CandidateResponse, ...]
    kind: TaskKind
    domain: Domain
    gold: GoldLabel | None = None

    def __post_init__(self) -> None:
        n = len(self.candidates)
        if self.kind is TaskKind.POINTWISE and n != 1:
            raise ValueError(f"pointwise task needs exactly 1 candidate, got {n}")
        if self.kind is TaskKind.PAIRWISE and n != 2:
            raise ValueError(f"pairwise task needs exactly 2 candidates, got {n}")
        if self.kind is TaskKind.LISTWISE and n < 3:
            raise ValueError(f"listwise task needs >= 3 candidates, got {n}")
        if self.gold is not None:
            if self.kind is TaskKind.POINTWISE:
                if self.gold.pointwise_role is None:
                    raise ValueError("pointwise gold label must carry a role")
            else:
                if self.gold.preferred_index is None:
                    raise ValueError(f"{self.kind.value} gold label must carry an index")
                if self.gold.preferred_index >= n:
                    raise ValueError("gold preferred_index outside candidate range")

    @property
    def n_candidates(self) -> int:
        return len(self.candidates)


def pair_key(task_id: str) -> str:
    """Stem shared by the two linked pointwise tasks ("t1#chosen" -> "t1")."""
    stem, sep, _ = task_id.rpartition("#")
    return stem if sep else task_id


@dataclass(frozen=True)
class Score:
    """Pointwise verdict, integer 1..10."""

    value: int

    def __post_init__(self) -> None:
        if not 1 <= self.value <= 10:
            raise ValueError(f"score must be in 1..10, got {self.value}")


@dataclass(frozen=True)
class Preference:
    """Pairwise/listwise verdict, 0-based candidate index."""

    index: int

    def __post_init__(self) -> None:
        if self.index < 0:
            raise ValueError("preference index must be >= 0")


Prediction = Score | Preference


class SegmentKind(str, Enum):
    REASONING = "r"
    CODE = "c"
    OUTPUT = "o"


@dataclass(frozen=True)
class Segment:
    """One piece of a trajectory: reasoning text, code source, or exec output.

    Output segments are always masked (execution feedback is never trainable)
    and carry the execution status so rewards can see error-free-ness.
    """

    kind: SegmentKind
    text: str
    masked: bool = False
    status: ExecStatus | None = None

    def __post_init__(self) -> None:
        if self.kind is SegmentKind.OUTPUT:
            if not self.masked:
                raise ValueError("execution output must be masked")
            if self.status is None:
                raise ValueError("execution output must carry a status")
        else:
            if self.masked or self.status is not None:
                raise ValueError("only output segments are masked/status-bearing")

    @classmethod
    def reasoning(cls, text: str) -> "Segment":
        return cls(SegmentKind.REASONING, text)

    @classmethod
    def code(cls, source: str) -> "Segment":
        return cls(SegmentKind.CODE, source)

    @classmethod
    def output(cls, text: str, status: ExecStatus) -> "Segment":
        return cls(SegmentKind.OUTPUT, text, masked=True, status=status)


@dataclass(frozen=True)
class Trajectory:
    """Ordered interleaving of reasoning/code/output plus a final prediction."""

    task_id: str
    segments: tuple[Segment, ...] = ()
    prediction: Prediction | None = None
    turns: int = 0
    tool_calls: int = 0

    def __post_init__(self) -> None:
        code_count = 0
        last = len(self.segments) - 1
        for i, seg in enumerate(self.segments):
            if seg.kind is SegmentKind.CODE:
                code_count += 1
                followed = i < last and self.segments[i + 1].kind is SegmentKind.OUTPUT
                if not followed and i != last:
                    raise AlternationViolation(
                        f"code segment {i} lacks an execution output"
                    )
            elif seg.kind is SegmentKind.OUTPUT:
                if i == 0 or self.segments[i - 1].kind is not SegmentKind.CODE:
                    raise AlternationViolation(
                        f"output segment {i} not preceded by a code segment"
                    )
        if code_count != self.tool_calls:
            raise ValueError(
                f"tool_calls={self.tool_calls} but trajectory has {code_count} code segments"
            )

    @classmethod
    def new(cls, task_id: str) -> "Trajectory":
        return cls(task_id=task_id)

    def count(self, kind: SegmentKind) -> int:
        return sum(1 for seg in self.segments if seg.kind is kind)

    @property
    def executions(self) -> int:
        return self.count(SegmentKind.OUTPUT)

    def reasoning_text(self) -> str:
        return "\n".join(s.text for s in self.segments if s.kind is SegmentKind.REASONING)


def feedback_text(result: ExecResult) -> str:
    """The string shown back to the model for one execution.

    Drops one trailing newline from stdout; the output fence supplies it.
    """
    if result.status is ExecStatus.OK:
        return result.stdout[:-1] if result.stdout.endswith("\n") else result.stdout
    return result.error_line or "unknown error"


def append_step(
    traj: Trajectory,
    reasoning: str,
    code: str | None = None,
    output: ExecResult | None = None,
) -> Trajectory:
    """Extend a trajectory with one generation round.

    Appends reasoning (if non-empty), then the code block and its masked
    execution output when present. The code may arrive without output when
    generation was cut off before execution.
    """
    if traj.prediction is not None:
        raise Finalized(f"trajectory for task {traj.task_id} already has a prediction")
    if output is not None and code is None:
        raise AlternationViolation("execution output supplied without code")
    added: list[Segment] = []
    if reasoning:
        added.append(Segment.reasoning(reasoning))
    if code is not None:
        added.append(Segment.code(code))
        if output is not None:
            added.append(Segment.output(feedback_text(output), output.status))
    return replace(
        traj,
        segments=traj.segments + tuple(added),
        turns=traj.turns + 1,
        tool_calls=traj.tool_calls + (1 if code is not None else 0),
    )


def finalize(traj: Trajectory, prediction: Prediction) -> Trajectory:
    if traj.prediction is not None:
        raise Finalized(f"trajectory for task {traj.task_id} already has a prediction")
    return replace(traj, prediction=prediction)


def serialize(
    traj: Trajectory, template: "PromptTemplate | None" = None
) -> tuple[str, list[tuple[int, int]]]:
    """Render a trajectory as model-context text plus output mask spans.

    Code blocks are fenced with the template's code fences, execution outputs
    with its output fence. Segments are joined by single newlines; each mask
    span covers one output block including its fences and the joining newline
    before it, so the characters outside all spans form exactly the
    serialization of the trajectory with outputs removed.
    """
    from .prompts import default_fences

    fences = template.fences if template is not None else default_fences()
    pieces: list[str] = []
    out_indices: list[int] = []
    for seg in traj.segments:
        if seg.kind is SegmentKind.REASONING:
            pieces.append(seg.text)
        elif seg.kind is SegmentKind.CODE:
            pieces.append(f"{fences.code_open}\n{seg.text}\n{fences.close}")
        else:
            out_indices.append(len(pieces))
            pieces.append(f"{fences.output_open}\n{seg.text}\n{fences.close}")
    spans: list[tuple[int, int]] = []
    offset = 0
    starts: list[int] = []
    for piece in pieces:
        starts.append(offset)
        offset += len(piece) + 1  # +1 for the joining newline
    text = "\n".join(pieces)
    for idx in out_indices:
        begin = starts[idx] - 1 if idx > 0 else starts[idx]
        spans.append((begin, starts[idx] + len(pieces[idx])))
    return text, spans


# --- JSONL schemas -----------------------------------------------------------

_KIND_CODES = {SegmentKind.REASONING: "r", SegmentKind.CODE: "c", SegmentKind.OUTPUT: "o"}


def task_to_dict(task: JudgeTask) -> dict[str, Any]:
    gold: dict[str, Any] | None = None
    if task.gold is not None:
        if task.gold.preferred_index is not None:
            gold = {"preferred_index": task.gold.preferred_index}
        else:
            gold = {"pointwise_role": task.gold.pointwise_role.value}
    return {
        "id": task.id,
        "prompt": task.prompt,
        "candidates": [
            {"text": c.text} if c.source is None else {"text": c.text, "source": c.source}
            for c in task.candidates
        ],
        "kind": task.kind.value,
        "domain": task.domain.value,
        "gold": gold,
    }


def task_from_dict(data: dict[str, Any]) -> JudgeTask:
    candidates = tuple(
        CandidateResponse(c, None) if isinstance(c, str)
        else CandidateResponse(c["text"], c.get("source"))
        for c in data["candidates"]
    )
    gold = None
    raw_gold = data.get("gold")
    if raw_gold:
        if "preferred_index" in raw_gold and raw_gold["preferred_index"] is not None:
            gold = GoldLabel(preferred_index=int(raw_gold["preferred_index"]))
        else:
            gold = GoldLabel(pointwise_role=PointwiseRole(raw_gold["pointwise_role"]))
    return JudgeTask(
        id=str(data["id"]),
        prompt=data["prompt"],
        candidates=candidates,
        kind=TaskKind(data["kind"]),
        domain=Domain(data["domain"]),
        gold=gold,
    )


def prediction_to_dict(pred: Prediction | None) -> dict[str, Any] | None:
    if pred is None:
        return None
    if isinstance(pred, Score):
        return {"score": pred.value}
    return {"preference": pred.index}


def prediction_from_dict(data: dict[str, Any] | None) -> Prediction | None:
    if not data:
        return None
    if "score" in data and data["score"] is not None:
        return Score(int(data["score"]))
    return Preference(int(data["preference"]))


def trajectory_to_dict(traj: Trajectory) -> dict[str, Any]:
    segments = []
    for seg in traj.segments:
        entry: dict[str, Any] = {"t": _KIND_CODES[seg.kind], "text": seg.text}
        if seg.kind is SegmentKind.OUTPUT:
            entry["masked"] = True
            entry["status"] = seg.status.value
        segments.append(entry)
    return {
        "v": SCHEMA_VERSION,
        "task_id": traj.task_id,
        "segments": segments,
        "prediction": prediction_to_dict(traj.prediction),
        "turns": traj.turns,
        "tool_calls": traj.tool_calls,
    }


def trajectory_from_dict(data: dict[str, Any]) -> Trajectory:
    segments: list[Segment] = []
    for entry in data["segments"]:
        code = entry["t"]
        if code == "r":
            segments.append(Segment.reasoning(entry["text"]))
        elif code == "c":
            segments.append(Segment.code(entry["text"]))
        elif code == "o":
            segments.append(
                Segment.output(entry["text"], ExecStatus(entry.get("status", "ok")))
            )
        else:
            raise ValueError(f"unknown segment type {code!r}")
    return Trajectory(
        task_id=str(data["task_id"]),
        segments=tuple(segments),
        prediction=prediction_from_dict(data.get("prediction")),
        turns=int(data.get("turns", 0)),
        tool_calls=int(data["tool_calls"]),
    )


# --- JSONL files -------------------------------------------------------------

def write_jsonl(
    path: str | Path,
    records: Iterable[dict[str, Any]],
    header: dict[str, Any] | None = None,
) -> int:
    """Write records one JSON object per line; optional _header first line."""
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        if header is not None:
            fh.write(json.dumps({"_header": header}, ensure_ascii=False) + "\n")
        for record in records:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
            count += 1
    return count


def read_jsonl(path: str | Path) -> Iterator[dict[str, Any]]:
    """Yield records from a JSONL file, skipping any _header line."""
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if isinstance(record, dict) and "_header" in record:
                continue
            yield record


def read_tasks(path: str | Path) -> list[JudgeTask]:
    return [task_from_dict(rec) for rec in read_jsonl(path)]


def read_trajectories(path: str | Path) -> list[Trajectory]:
    return [trajectory_from_dict(rec) for rec in read_jsonl(path)]


def write_tasks(path: str | Path, tasks: Sequence[JudgeTask], header: dict[str, Any] | None = None) -> int:
    return write_jsonl(path, (task_to_dict(t) for t in tasks), header=header)


def write_trajectories(
    path: str | Path, trajs: Sequence[Trajectory], header: dict[str, Any] | None = None
) -> int:
    return write_jsonl(path, (trajectory_to_dict(t) for t in trajs), header=header)
