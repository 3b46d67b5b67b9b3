"""Run configuration and manifests.

The config file is a flat, comment-friendly key=value format; environment
variables named TIR_<KEY> override file values. Unknown keys are rejected and
all validation problems are reported at once. Every command writes a manifest
recording the resolved config, input hashes, and seeds, so any output file
can be traced back and replayed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import platform
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping

from . import __version__
from .grpo import DEFAULT_EPS_HIGH, DEFAULT_EPS_LOW, DEFAULT_KL_COEFF
from .rollout import RolloutBudget
from .sandbox import ExecLimits
from .trajectory import Domain

ENV_PREFIX = "TIR_"


class ParseError(Exception):
    """Config file is not well-formed key=value text."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = f" (line {line})" if line is not None else ""
        super().__init__(message + where)


class ValidationError(Exception):
    """One or more config values are invalid; carries the full list."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass(frozen=True)
class RunConfig:
    # policy endpoint
    endpoint: str = ""
    model: str = ""
    temperature: float = 0.9
    top_p: float = 0.95
    chars_per_token: int = 4
    max_response_tokens: int = 8192
    # rollout
    group_size: int = 8
    max_tool_calls: int = 3
    max_turns: int = 8
    retries: int = 1
    parallelism: int = 1
    # sandbox
    wall_timeout_s: float = 10.0
    memory_cap_mb: int = 512
    stdout_cap: int = 2048
    sandbox_url: str = ""
    sandbox_workers: int = 0  # 0 = cpu count
    # objective
    eps_low: float = DEFAULT_EPS_LOW
    eps_high: float = DEFAULT_EPS_HIGH
    kl_beta: float = DEFAULT_KL_COEFF
    # rewards / evaluation
    no_tool_domains: str = "chat,safety"
    eval_seed: int = 0

    @property
    def max_total_chars(self) -> int:
        return self.chars_per_token * self.max_response_tokens

    def rollout_budget(self) -> RolloutBudget:
        return RolloutBudget(
            max_tool_calls=self.max_tool_calls,
            max_total_chars=self.max_total_chars,
            max_turns=self.max_turns,
        )

    def exec_limits(self) -> ExecLimits:
        return ExecLimits(
            wall_timeout=self.wall_timeout_s,
            memory_cap=self.memory_cap_mb * 1024 * 1024,
            stdout_cap=self.stdout_cap,
        )

    def no_tool_domain_set(self) -> frozenset[Domain]:
        names = [d.strip() for d in self.no_tool_domains.split(",") if d.strip()]
        return frozenset(Domain(name) for name in names)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, raw: str) -> Any:
    kind = _FIELDS[name]
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def _parse_flat_file(path: str | Path) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ParseError(f"expected key = value, got {stripped!r}", line=lineno)
            key, _, value = stripped.partition("=")
            key = key.strip()
            value = value.split("#", 1)[0].strip()
            if not key:
                raise ParseError("empty key", line=lineno)
            values[key] = value
    return values


def _validate(config: RunConfig) -> list[str]:
    problems = []
    positive = {
        "chars_per_token": config.chars_per_token,
        "max_response_tokens": config.max_response_tokens,
        "max_tool_calls": config.max_tool_calls,
        "max_turns": config.max_turns,
        "wall_timeout_s": config.wall_timeout_s,
        "memory_cap_mb": config.memory_cap_mb,
        "stdout_cap": config.stdout_cap,
        "parallelism": config.parallelism,
    }
    for name, value in positive.items():
        if value <= 0:
            problems.append(f"{name} must be positive, got {value}")
    if config.group_size < 2:
        problems.append(f"group_size must be >= 2, got {config.group_size}")
    if config.retries < 0:
        problems.append(f"retries must be >= 0, got {config.retries}")
    if config.sandbox_workers < 0:
        problems.append(f"sandbox_workers must be >= 0, got {config.sandbox_workers}")
    if not 0 <= config.eps_low < 1:
        problems.append(f"eps_low must be in [0, 1), got {config.eps_low}")
    if config.eps_high < 0:
        problems.append(f"eps_high must be >= 0, got {config.eps_high}")
    if config.kl_beta < 0:
        problems.append(f"kl_beta must be >= 0, got {config.kl_beta}")
    if config.temperature < 0 or config.temperature > 2:
        problems.append(f"temperature must be in [0, 2], got {config.temperature}")
    if not 0 < config.top_p <= 1:
        problems.append(f"top_p must be in (0, 1], got {config.top_p}")
    try:
        config.no_tool_domain_set()
    except ValueError as exc:
        problems.append(f"no_tool_domains: {exc}")
    return problems


def load_config(
    path: str | Path | None = None, env: Mapping[str, str] | None = None
) -> RunConfig:
    """Resolve the run config: defaults <- file <- TIR_* env overrides."""
    env = os.environ if env is None else env
    raw: dict[str, str] = {}
    if path is not None:
        raw.update(_parse_flat_file(path))
    for name in _FIELDS:
        override = env.get(ENV_PREFIX + name.upper())
        if override is not None:
            raw[name] = override

    problems: list[str] = []
    values: dict[str, Any] = {}
    for key, text in raw.items():
        if key not in _FIELDS:
            problems.append(f"unknown key {key!r}")
            continue
        try:
            values[key] = _coerce(key, text)
        except ValueError:
            problems.append(f"{key}: cannot parse {text!r} as {_FIELDS[key]}")
    if problems:
        raise ValidationError(problems)
    config = RunConfig(**values)
    problems = _validate(config)
    if problems:
        raise ValidationError(problems)
    return config


# --- manifests -----------------------------------------------------------------

def _sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass(frozen=True)
class Manifest:
    id: str
    command: str
    config: dict[str, Any]
    inputs: dict[str, str]
    seeds: dict[str, int]
    versions: dict[str, str]
    created_at: float

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def run_manifest(
    command: str,
    config: RunConfig,
    inputs: Iterable[str | Path] = (),
    seeds: Mapping[str, int] | None = None,
) -> Manifest:
    """Fingerprint one command invocation.

    The id hashes everything except the timestamp, so identical runs produce
    identical manifests up to created_at.
    """
    input_hashes: dict[str, str] = {}
    for item in inputs:
        path = Path(item)
        if not path.exists():
            raise FileNotFoundError(f"manifest input missing: {path}")
        input_hashes[str(path)] = _sha256_file(path)
    body = {
        "command": command,
        "config": config.to_dict(),
        "inputs": input_hashes,
        "seeds": dict(seeds or {}),
        "versions": {
            "tooljudge": __version__,
            "python": platform.python_version(),
        },
    }
    blob = json.dumps(body, sort_keys=True, ensure_ascii=False).encode("utf-8")
    manifest_id = hashlib.sha256(blob).hexdigest()[:12]
    return Manifest(id=manifest_id, created_at=time.time(), **body)


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2) + "\n", encoding="utf-8")


def manifest_path_for(output: str | Path) -> Path:
    return Path(str(output) + ".manifest.json")
