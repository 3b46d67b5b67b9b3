"""Shared builders for tasks, trajectories, and test judges."""

from __future__ import annotations

import random
import sys

import pytest


def pytest_runtest_logreport(report):
    """One visible PASS/FAIL line per acceptance criterion."""
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    outcome = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    sys.stderr.write(f"\nACCEPTANCE {name}: {outcome} ({report.duration:.2f}s)\n")

from tooljudge.sandbox import ExecLimits, ExecResult, ExecStatus, LocalSandbox
from tooljudge.trajectory import (
    CandidateResponse,
    Domain,
    GoldLabel,
    JudgeTask,
    PointwiseRole,
    Prediction,
    Preference,
    Score,
    Segment,
    TaskKind,
    Trajectory,
)


def make_task(
    kind: TaskKind = TaskKind.PAIRWISE,
    n: int | None = None,
    domain: Domain = Domain.MATH,
    gold_index: int | None = 0,
    role: PointwiseRole | None = None,
    task_id: str = "t1",
    prompt: str = "Which answer is right?",
) -> JudgeTask:
    if n is None:
        n = {TaskKind.POINTWISE: 1, TaskKind.PAIRWISE: 2, TaskKind.LISTWISE: 4}[kind]
    gold = None
    if kind is TaskKind.POINTWISE:
        if role is not None:
            gold = GoldLabel(pointwise_role=role)
    elif gold_index is not None:
        gold = GoldLabel(preferred_index=gold_index)
    return JudgeTask(
        id=task_id,
        prompt=prompt,
        candidates=tuple(CandidateResponse(f"answer {i}") for i in range(n)),
        kind=kind,
        domain=domain,
        gold=gold,
    )


def ok_result(stdout: str = "1\n") -> ExecResult:
    return ExecResult(ExecStatus.OK, stdout, None, 0.01)


def error_result(line: str = "ValueError: bad") -> ExecResult:
    return ExecResult(ExecStatus.ERROR, "", line, 0.01)


def timeout_result() -> ExecResult:
    return ExecResult(ExecStatus.TIMEOUT, "", "timeout", 1.0)


def finished_trajectory(
    task_id: str = "t1",
    prediction: Prediction | None = Preference(0),
    n_calls: int = 0,
    statuses: list[ExecStatus] | None = None,
    reasoning: str = "Looks right.",
) -> Trajectory:
    """Hand-built trajectory with n_calls executed code blocks."""
    segments: list[Segment] = []
    if reasoning:
        segments.append(Segment.reasoning(reasoning))
    statuses = statuses or [ExecStatus.OK] * n_calls
    for i in range(n_calls):
        segments.append(Segment.code(f"print({i})"))
        segments.append(Segment.output(str(i), statuses[i]))
    return Trajectory(
        task_id=task_id,
        segments=tuple(segments),
        prediction=prediction,
        turns=max(1, n_calls),
        tool_calls=n_calls,
    )


class OracleJudge:
    """Reads the gold label (or an embedded quality marker) and answers it."""

    def __init__(self, quality_marker: str = "quality="):
        self.marker = quality_marker
        self.calls = 0

    def _quality(self, text: str) -> int:
        # responses carry "quality=N" markers for unlabelled tasks
        if self.marker in text:
            return int(text.split(self.marker, 1)[1].split()[0])
        return 0

    def judge(self, task: JudgeTask) -> Prediction | None:
        self.calls += 1
        if task.kind is TaskKind.POINTWISE:
            if task.gold is not None and task.gold.pointwise_role is not None:
                value = 9 if task.gold.pointwise_role is PointwiseRole.CHOSEN else 3
                return Score(value)
            return Score(max(1, min(10, self._quality(task.candidates[0].text))))
        if task.gold is not None and task.gold.preferred_index is not None:
            return Preference(task.gold.preferred_index)
        qualities = [self._quality(c.text) for c in task.candidates]
        return Preference(qualities.index(max(qualities)))


class ConstantJudge:
    def __init__(self, prediction: Prediction | None):
        self.prediction = prediction
        self.calls = 0

    def judge(self, task: JudgeTask) -> Prediction | None:
        self.calls += 1
        return self.prediction


def random_trajectory(rng: random.Random, task_id: str = "t") -> Trajectory:
    """Small random trajectory for round-trip properties."""
    segments: list[Segment] = []
    calls = 0
    steps = rng.randrange(4)
    for step in range(steps):
        if rng.random() < 0.6:
            words = [rng.choice(["alpha", "beta", "gamma", "<score>7</score>"]) for _ in range(3)]
            segments.append(Segment.reasoning(" ".join(words)))
        else:
            segments.append(Segment.code(f"print({rng.randrange(100)})"))
            calls += 1
            # only the final code block may lack its output
            if step < steps - 1 or rng.random() < 0.8:
                status = rng.choice([ExecStatus.OK, ExecStatus.ERROR])
                text = str(rng.randrange(100)) if status is ExecStatus.OK else "NameError: x"
                segments.append(Segment.output(text, status))
    return Trajectory(task_id=task_id, segments=tuple(segments), tool_calls=calls)


@pytest.fixture(scope="session")
def quick_sandbox() -> LocalSandbox:
    return LocalSandbox(ExecLimits(wall_timeout=5.0, stdout_cap=2048))


@pytest.fixture()
def chat_stub():
    """Local chat-completions stub: scripted replies, optional 500 failures."""
    import json
    import threading
    from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

    state: dict = {"requests": [], "replies": [], "fail_times": 0, "cursor": 0}

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            length = int(self.headers.get("Content-Length", "0"))
            payload = json.loads(self.rfile.read(length).decode("utf-8"))
            state["requests"].append(payload)
            if state["fail_times"] > 0:
                state["fail_times"] -= 1
                self.send_response(500)
                self.end_headers()
                return
            replies = state["replies"]
            if state["cursor"] < len(replies):
                reply = replies[state["cursor"]]
                state["cursor"] += 1
            else:
                reply = replies[-1] if replies else ""
            body = json.dumps(
                {
                    "choices": [
                        {
                            "message": {"role": "assistant", "content": reply},
                            "finish_reason": "stop",
                        }
                    ]
                }
            ).encode("utf-8")
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def log_message(self, fmt, *args):
            pass

    server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    host, port = server.server_address[:2]
    yield f"http://{host}:{port}", state
    server.shutdown()
    server.server_close()
