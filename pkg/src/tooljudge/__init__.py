"""Rollout, reward, and evaluation stack for tool-augmented LLM judges."""

__version__ = "0.1.0"

from .trajectory import (  # noqa: F401
    CandidateResponse,
    Domain,
    GoldLabel,
    JudgeTask,
    PointwiseRole,
    Prediction,
    Preference,
    Score,
    Segment,
    SegmentKind,
    TaskKind,
    Trajectory,
    append_step,
    finalize,
    serialize,
)

__all__ = [
    "CandidateResponse",
    "Domain",
    "GoldLabel",
    "JudgeTask",
    "PointwiseRole",
    "Prediction",
    "Preference",
    "Score",
    "Segment",
    "SegmentKind",
    "TaskKind",
    "Trajectory",
    "append_step",
    "finalize",
    "serialize",
    "__version__",
]
