"""Run untrusted code snippets in isolated subprocesses with resource limits.

Each snippet runs as an independent program: fresh interpreter, private
temporary working directory, minimal environment, no state carried across
calls. Error feedback is reduced to the final stderr line to keep contexts
short. Also exposes a small HTTP service so many rollout workers can share
one executor host.
"""

from __future__ import annotations

import json
import logging
import math
import os
import signal
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, replace
from enum import Enum
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Protocol

try:
    import resource
except ImportError:  # non-POSIX: run without rlimits
    resource = None  # type: ignore[assignment]

logger = logging.getLogger(__name__)

TRUNCATION_MARK = "…[truncated]"


class SandboxUnavailable(Exception):
    """The interpreter process could not be spawned (not a user-code failure)."""


class ExecStatus(str, Enum):
    OK = "ok"
    ERROR = "error"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class ExecLimits:
    """Resource budget for one execution.

    interpreter_cmd is a template argv; "{script}" is replaced with the path
    of the file holding the snippet. Swapping the template is how alternative
    isolation backends (containers, firejail, ...) are plugged in.
    """

    wall_timeout: float = 10.0
    memory_cap: int = 512 * 1024 * 1024
    stdout_cap: int = 2048
    interpreter_cmd: tuple[str, ...] = (sys.executable, "-I", "{script}")

    def __post_init__(self) -> None:
        if self.wall_timeout <= 0:
            raise ValueError("wall_timeout must be positive")
        if self.memory_cap <= 0:
            raise ValueError("memory_cap must be positive")
        if self.stdout_cap < 1:
            raise ValueError("stdout_cap must be >= 1")
        if not self.interpreter_cmd:
            raise ValueError("interpreter_cmd must not be empty")


@dataclass(frozen=True)
class ExecResult:
    """Outcome of one sandboxed run."""

    status: ExecStatus
    stdout: str
    error_line: str | None
    wall_time: float

    def __post_init__(self) -> None:
        if self.status is ExecStatus.OK and self.error_line is not None:
            raise ValueError("ok results carry no error line")
        if self.status is not ExecStatus.OK:
            if not self.error_line or "\n" in self.error_line:
                raise ValueError("failed results carry exactly one error line")

    @property
    def ok(self) -> bool:
        return self.status is ExecStatus.OK

    def to_dict(self) -> dict[str, Any]:
        return {
            "status": self.status.value,
            "stdout": self.stdout,
            "error_line": self.error_line,
            "wall_time": self.wall_time,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExecResult":
        return cls(
            status=ExecStatus(data["status"]),
            stdout=data["stdout"],
            error_line=data.get("error_line"),
            wall_time=float(data.get("wall_time", 0.0)),
        )


def truncate_error(stderr: str) -> str:
    """Reduce a stderr dump to its last non-empty line."""
    for line in reversed(stderr.splitlines()):
        line = line.strip()
        if line:
            return line
    return "unknown error"


def _truncate_stdout(text: str, cap: int) -> str:
    if len(text) <= cap:
        return text
    return text[:cap] + TRUNCATION_MARK


def _child_rlimits(limits: ExecLimits):
    """Build a preexec hook applying OS resource limits, if available."""
    if resource is None:
        return None
    mem = limits.memory_cap
    cpu = max(1, math.ceil(limits.wall_timeout))

    def apply() -> None:
        resource.setrlimit(resource.RLIMIT_AS, (mem, mem))
        resource.setrlimit(resource.RLIMIT_CPU, (cpu, cpu + 1))
        resource.setrlimit(resource.RLIMIT_NPROC, (64, 64))

    return apply


def _kill_group(proc: subprocess.Popen) -> None:
    """Kill the child's whole session (it is the session leader)."""
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError, OSError):
        proc.kill()


def execute(code: str, limits: ExecLimits | None = None) -> ExecResult:
    """Run one snippet to completion under the given limits.

    The snippet gets a private temp directory as cwd and home, so concurrent
    runs cannot see each other's files. Nonzero exit maps to ERROR with the
    final stderr line; exceeding wall_timeout maps to TIMEOUT (the whole
    process group is killed, so grandchildren cannot wedge the pipes).
    """
    limits = limits or ExecLimits()
    with tempfile.TemporaryDirectory(prefix="tirjob-") as workdir:
        script = os.path.join(workdir, "snippet.py")
        with open(script, "w", encoding="utf-8") as fh:
            fh.write(code)
        argv = [arg.replace("{script}", script) for arg in limits.interpreter_cmd]
        if "{script}" not in "".join(limits.interpreter_cmd):
            argv.append(script)
        env = {
            "PATH": os.environ.get("PATH", "/usr/bin:/bin"),
            "HOME": workdir,
            "LC_ALL": "C.UTF-8",
            "PYTHONDONTWRITEBYTECODE": "1",
        }
        started = time.monotonic()
        try:
            proc = subprocess.Popen(
                argv,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                cwd=workdir,
                env=env,
                preexec_fn=_child_rlimits(limits),
                start_new_session=True,
            )
        except (OSError, ValueError) as exc:
            raise SandboxUnavailable(f"cannot spawn interpreter {argv[0]!r}: {exc}") from exc
        try:
            out, err = proc.communicate(timeout=limits.wall_timeout)
        except subprocess.TimeoutExpired:
            _kill_group(proc)
            out, _ = proc.communicate()
            return ExecResult(
                status=ExecStatus.TIMEOUT,
                stdout=_truncate_stdout(out.decode("utf-8", "replace"), limits.stdout_cap),
                error_line="timeout",
                wall_time=time.monotonic() - started,
            )
        wall = time.monotonic() - started
        stdout = _truncate_stdout(out.decode("utf-8", "replace"), limits.stdout_cap)
        if proc.returncode == 0:
            return ExecResult(ExecStatus.OK, stdout, None, wall)
        return ExecResult(
            ExecStatus.ERROR, stdout, truncate_error(err.decode("utf-8", "replace")), wall
        )


class SandboxClient(Protocol):
    """Anything that can run a snippet and report an ExecResult."""

    def run(self, code: str) -> ExecResult: ...


class LocalSandbox:
    """Subprocess-backed executor with a bounded worker pool.

    Safe for concurrent use; at most max_workers child processes run at once.
    """

    def __init__(self, limits: ExecLimits | None = None, max_workers: int | None = None):
        self.limits = limits or ExecLimits()
        workers = max_workers if max_workers and max_workers > 0 else (os.cpu_count() or 1)
        self._slots = threading.BoundedSemaphore(workers)

    def run(self, code: str) -> ExecResult:
        with self._slots:
            return execute(code, self.limits)


class HttpSandbox:
    """Client for a sandbox served by `tir sandbox-serve`."""

    def __init__(self, base_url: str, timeout_s: float | None = None, request_timeout: float = 60.0):
        self.base_url = base_url.rstrip("/")
        self.timeout_s = timeout_s
        self.request_timeout = request_timeout

    def run(self, code: str) -> ExecResult:
        import requests

        payload: dict[str, Any] = {"code": code}
        if self.timeout_s is not None:
            payload["timeout_s"] = self.timeout_s
        try:
            resp = requests.post(
                f"{self.base_url}/execute", json=payload, timeout=self.request_timeout
            )
        except requests.RequestException as exc:
            raise SandboxUnavailable(f"sandbox service unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise SandboxUnavailable(f"sandbox service error {resp.status_code}: {resp.text[:200]}")
        return ExecResult.from_dict(resp.json())


class _ExecuteHandler(BaseHTTPRequestHandler):
    sandbox: LocalSandbox  # installed by make_server

    def do_POST(self) -> None:  # noqa: N802 (http.server API)
        if self.path != "/execute":
            self._reply(404, {"error": "not found"})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            body = json.loads(self.rfile.read(length).decode("utf-8"))
            code = body["code"]
            if not isinstance(code, str):
                raise TypeError("code must be a string")
        except (ValueError, KeyError, TypeError) as exc:
            self._reply(400, {"error": f"bad request: {exc}"})
            return
        limits = self.sandbox.limits
        timeout_s = body.get("timeout_s")
        if timeout_s is not None:
            limits = replace(limits, wall_timeout=float(timeout_s))
        try:
            result = execute(code, limits)
        except SandboxUnavailable as exc:
            self._reply(503, {"error": str(exc)})
            return
        self._reply(200, result.to_dict())

    def _reply(self, status: int, payload: dict[str, Any]) -> None:
        blob = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(blob)))
        self.end_headers()
        self.wfile.write(blob)

    def log_message(self, fmt: str, *args: Any) -> None:
        logger.debug("sandbox-serve: " + fmt, *args)


def make_server(
    host: str = "127.0.0.1",
    port: int = 8731,
    limits: ExecLimits | None = None,
    max_workers: int | None = None,
) -> ThreadingHTTPServer:
    """Build (but do not start) the HTTP execution service."""
    sandbox = LocalSandbox(limits=limits, max_workers=max_workers)
    handler = type("BoundExecuteHandler", (_ExecuteHandler,), {"sandbox": sandbox})
    return ThreadingHTTPServer((host, port), handler)


def serve_forever(host: str, port: int, limits: ExecLimits | None = None) -> None:
    server = make_server(host, port, limits)
    logger.info("sandbox service listening on %s:%d", host, port)
    try:
        server.serve_forever()
    finally:
        server.server_close()
