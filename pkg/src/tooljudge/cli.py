"""Single `tir` entry point: rollouts, rewards, data pipeline, evaluation.

Exit codes: 0 success, 1 validation failure, 2 runtime failure, 3 partial
(some items failed but a report/output was written). Logs are line-delimited
JSON on stderr. Every data-producing command writes a manifest next to its
output and stamps the output JSONL with the manifest id.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Sequence

from . import config as config_mod
from . import evaluation, pipeline, rewards, rollout, sandbox
from .prompts import template_for
from .trajectory import (
    CandidateResponse,
    Domain,
    GoldLabel,
    JudgeTask,
    PointwiseRole,
    TaskKind,
    read_jsonl,
    read_tasks,
    read_trajectories,
    task_from_dict,
    task_to_dict,
    trajectory_to_dict,
    write_jsonl,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_PARTIAL = 3


class _JsonLineFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        entry = {
            "ts": round(record.created, 3),
            "level": record.levelname.lower(),
            "logger": record.name,
            "msg": record.getMessage(),
        }
        if record.exc_info:
            entry["exc"] = self.formatException(record.exc_info)
        return json.dumps(entry, ensure_ascii=False)


def setup_logging(verbose: bool = False) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonLineFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def _load_config(args: argparse.Namespace) -> config_mod.RunConfig:
    return config_mod.load_config(getattr(args, "config", None))


def _make_sandbox(cfg: config_mod.RunConfig) -> sandbox.SandboxClient:
    if cfg.sandbox_url:
        return sandbox.HttpSandbox(cfg.sandbox_url)
    workers = cfg.sandbox_workers or None
    return sandbox.LocalSandbox(limits=cfg.exec_limits(), max_workers=workers)


def _emit(
    out: str, records: list[dict[str, Any]], manifest: config_mod.Manifest
) -> None:
    config_mod.write_manifest(manifest, config_mod.manifest_path_for(out))
    write_jsonl(out, records, header={"manifest_id": manifest.id})
    logger.info("wrote %d records to %s (manifest %s)", len(records), out, manifest.id)


# --- subcommands ---------------------------------------------------------------

def cmd_rollout(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    tasks = read_tasks(args.tasks)
    group_size = args.group_size or cfg.group_size
    budget = rollout.RolloutBudget(
        max_tool_calls=args.max_tool_calls or cfg.max_tool_calls,
        max_total_chars=cfg.max_total_chars,
        max_turns=cfg.max_turns,
    )
    endpoint = args.endpoint or cfg.endpoint
    model = args.model or cfg.model
    if not endpoint or not model:
        raise config_mod.ValidationError(["rollout needs --endpoint and --model (or config)"])
    box = _make_sandbox(cfg)
    seed = args.seed if args.seed is not None else cfg.eval_seed

    def factory(slot: int) -> rollout.HttpPolicyClient:
        return rollout.HttpPolicyClient(
            endpoint,
            model,
            temperature=cfg.temperature,
            top_p=cfg.top_p,
            chars_per_token=cfg.chars_per_token,
        )

    manifest = config_mod.run_manifest(
        "rollout", cfg, inputs=[args.tasks], seeds={"rollout": seed}
    )
    records: list[dict[str, Any]] = []
    failures = 0
    for i, task in enumerate(tasks):
        template = template_for(task, cfg.no_tool_domain_set())
        group = rollout.sample_group(
            task,
            factory,
            group_size,
            box,
            budget=budget,
            template=template,
            retries=cfg.retries,
            seed=seed + i * group_size,
            parallelism=cfg.parallelism,
        )
        for traj in group.trajectories:
            if not traj.segments and traj.prediction is None:
                failures += 1
            records.append(trajectory_to_dict(traj))
    _emit(args.out, records, manifest)
    if failures:
        logger.warning("%d rollout slots failed", failures)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_reward(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    tasks = read_tasks(args.tasks)
    trajs = read_trajectories(args.trajs)
    manifest = config_mod.run_manifest("reward", cfg, inputs=[args.tasks, args.trajs])
    scored = rewards.assess_rewards(
        tasks, trajs, max_calls=cfg.max_tool_calls, no_tool_domains=cfg.no_tool_domain_set()
    )
    records = [
        {"task_id": traj.task_id, "index": i, **breakdown.to_dict()}
        for i, (traj, breakdown) in enumerate(scored)
    ]
    _emit(args.out, records, manifest)
    return EXIT_OK


def _grouped_rewards(
    tasks: Sequence[JudgeTask], trajs: Sequence[Any], cfg: config_mod.RunConfig
) -> dict[str, list[tuple[Any, rewards.RewardBreakdown]]]:
    scored = rewards.assess_rewards(
        tasks, trajs, max_calls=cfg.max_tool_calls, no_tool_domains=cfg.no_tool_domain_set()
    )
    groups: dict[str, list[tuple[Any, rewards.RewardBreakdown]]] = {}
    for traj, breakdown in scored:
        groups.setdefault(traj.task_id, []).append((traj, breakdown))
    return groups


def cmd_rs_filter(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    tasks = read_tasks(args.tasks)
    trajs = read_trajectories(args.trajs)
    manifest = config_mod.run_manifest("rs-filter", cfg, inputs=[args.tasks, args.trajs])
    records: list[dict[str, Any]] = []
    for task_id, pairs in _grouped_rewards(tasks, trajs, cfg).items():
        valid = pipeline.rejection_filter([t for t, _ in pairs], [b for _, b in pairs])
        records.extend(trajectory_to_dict(t) for t in valid)
    _emit(args.out, records, manifest)
    return EXIT_OK


def cmd_sft_export(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    tasks = read_tasks(args.tasks)
    by_id = {t.id: t for t in tasks}
    trajs = read_trajectories(args.trajs)
    manifest = config_mod.run_manifest("sft-export", cfg, inputs=[args.tasks, args.trajs])
    records: list[dict[str, Any]] = []
    for task_id, pairs in _grouped_rewards(tasks, trajs, cfg).items():
        group_trajs = [t for t, _ in pairs]
        breakdowns = [b for _, b in pairs]
        valid = pipeline.rejection_filter(group_trajs, breakdowns)
        if not valid:
            continue
        task = by_id[task_id]
        template = template_for(task, cfg.no_tool_domain_set())
        canonical = pipeline.select_canonical(valid, template)
        breakdown = breakdowns[group_trajs.index(canonical)]
        record = pipeline.build_sft_record(task, canonical, template, breakdown)
        records.append(record.to_dict())
    _emit(args.out, records, manifest)
    return EXIT_OK


def _verifier_for(spec: str, record: dict[str, Any], box: sandbox.SandboxClient) -> pipeline.Verifier:
    if spec == "exact":
        gold = record.get("gold_answer")
        if gold is None:
            raise config_mod.ValidationError(
                [f"record {record.get('id')!r} lacks gold_answer required by --verifier exact"]
            )
        return pipeline.ExactMatchVerifier(str(gold))
    if spec.startswith("script:"):
        source = Path(spec[len("script:"):]).read_text(encoding="utf-8")
        return pipeline.ScriptVerifier(source, box)
    raise config_mod.ValidationError([f"unknown verifier {spec!r}"])


def cmd_make_pairs(args: argparse.Namespace) -> int:
    import random

    cfg = _load_config(args)
    manifest = config_mod.run_manifest(
        "make-pairs", cfg, inputs=[args.input], seeds={"shuffle": args.seed}
    )
    box = _make_sandbox(cfg)
    rng = random.Random(args.seed)
    records: list[dict[str, Any]] = []
    skipped = 0
    for row in read_jsonl(args.input):
        base_id = str(row.get("id") or f"item-{len(records)}")
        prompt = row["prompt"]
        responses = [r if isinstance(r, str) else r["text"] for r in row["responses"]]
        domain = Domain(row.get("domain", "reasoning"))
        verifier = _verifier_for(args.verifier, row, box)
        if args.emit == "list":
            passing = [r for r in responses if verifier.verify(prompt, r).passed]
            if not passing:
                skipped += 1
                continue
            chosen = passing[0]
            pool = [r for r in responses if r != chosen]
            try:
                task = pipeline.build_listwise_item(
                    prompt, chosen, pool, verifier,
                    seed=rng.randrange(1 << 30), item_id=base_id, domain=domain,
                )
            except (pipeline.InsufficientNegatives, ValueError):
                skipped += 1
                continue
            records.append(task_to_dict(task))
            continue
        pairs = pipeline.build_synthetic_pairs(prompt, responses, verifier)
        if not pairs:
            skipped += 1
            continue
        for j, (chosen, rejected) in enumerate(pairs):
            pair_id = f"{base_id}-{j}" if len(pairs) > 1 else base_id
            if args.emit == "point":
                for role, text in (
                    (PointwiseRole.CHOSEN, chosen),
                    (PointwiseRole.REJECTED, rejected),
                ):
                    records.append(
                        task_to_dict(
                            JudgeTask(
                                id=f"{pair_id}#{role.value}",
                                prompt=prompt,
                                candidates=(CandidateResponse(text),),
                                kind=TaskKind.POINTWISE,
                                domain=domain,
                                gold=GoldLabel(pointwise_role=role),
                            )
                        )
                    )
            else:  # pairwise
                position = rng.randrange(2)
                texts = [rejected, chosen] if position == 1 else [chosen, rejected]
                records.append(
                    task_to_dict(
                        JudgeTask(
                            id=pair_id,
                            prompt=prompt,
                            candidates=tuple(CandidateResponse(t) for t in texts),
                            kind=TaskKind.PAIRWISE,
                            domain=domain,
                            gold=GoldLabel(preferred_index=position),
                        )
                    )
                )
    _emit(args.out, records, manifest)
    if skipped:
        logger.warning("%d input rows produced no items", skipped)
    return EXIT_OK


def cmd_decontaminate(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    manifest = config_mod.run_manifest(
        "decontaminate", cfg, inputs=[args.train, args.eval_file]
    )
    train_rows = list(read_jsonl(args.train))
    eval_prompts = [row["prompt"] for row in read_jsonl(args.eval_file)]
    train_prompts = [row["prompt"] for row in train_rows]
    kept_prompts, _ = pipeline.decontaminate(train_prompts, eval_prompts, n=args.n)
    kept_set = set(kept_prompts)
    kept_rows = [row for row in train_rows if row["prompt"] in kept_set]
    removed_rows = [row for row in train_rows if row["prompt"] not in kept_set]
    _emit(args.out, kept_rows, manifest)
    if args.removed:
        write_jsonl(args.removed, removed_rows, header={"manifest_id": manifest.id})
    logger.info("kept %d / removed %d prompts", len(kept_rows), len(removed_rows))
    return EXIT_OK


def _pairs_from_records(rows: list[dict[str, Any]]) -> list[evaluation.PreferencePair]:
    pairs = []
    for row in rows:
        if "chosen" in row:
            pairs.append(
                evaluation.PreferencePair(
                    id=str(row.get("id", len(pairs))),
                    prompt=row["prompt"],
                    chosen=row["chosen"],
                    rejected=row["rejected"],
                    domain=Domain(row.get("domain", "reasoning")),
                )
            )
            continue
        task = task_from_dict(row)
        if task.kind is not TaskKind.PAIRWISE or task.gold is None:
            raise config_mod.ValidationError(
                [f"task {task.id} is not a labelled pairwise task or chosen/rejected record"]
            )
        gold = task.gold.preferred_index
        pairs.append(
            evaluation.PreferencePair(
                id=task.id,
                prompt=task.prompt,
                chosen=task.candidates[gold].text,
                rejected=task.candidates[1 - gold].text,
                domain=task.domain,
            )
        )
    return pairs


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    endpoint = args.endpoint or cfg.endpoint
    model = args.model or cfg.model
    if not endpoint or not model:
        raise config_mod.ValidationError(["eval needs --endpoint and --model (or config)"])
    policy = rollout.HttpPolicyClient(
        endpoint,
        model,
        temperature=cfg.temperature,
        top_p=cfg.top_p,
        chars_per_token=cfg.chars_per_token,
    )
    judge = evaluation.RolloutJudge(
        policy,
        _make_sandbox(cfg),
        budget=cfg.rollout_budget(),
        no_tool_domains=cfg.no_tool_domain_set(),
    )
    manifest = config_mod.run_manifest(
        "eval", cfg, inputs=[args.tasks], seeds={"eval": args.seed}
    )
    rows = list(read_jsonl(args.tasks))
    if args.mode == "point":
        report = evaluation.eval_pointwise(judge, _pairs_from_records(rows))
    elif args.mode == "pair":
        report = evaluation.eval_pairwise(judge, _pairs_from_records(rows), seed=args.seed)
    else:
        report = evaluation.eval_listwise(judge, [task_from_dict(r) for r in rows])
    payload = report.to_dict()
    payload["manifest_id"] = manifest.id
    config_mod.write_manifest(manifest, config_mod.manifest_path_for(args.report))
    Path(args.report).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    logger.info("%s accuracy %.4f over %d items", args.mode, report.accuracy, len(report.items))
    return EXIT_PARTIAL if report.abstentions else EXIT_OK


def cmd_bon(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    endpoint = args.endpoint or cfg.endpoint
    model = args.model or cfg.model
    if not endpoint or not model:
        raise config_mod.ValidationError(["bon needs --endpoint and --model (or config)"])
    policy = rollout.HttpPolicyClient(
        endpoint, model, temperature=cfg.temperature, top_p=cfg.top_p
    )
    judge = evaluation.RolloutJudge(
        policy,
        _make_sandbox(cfg),
        budget=cfg.rollout_budget(),
        no_tool_domains=cfg.no_tool_domain_set(),
    )
    manifest = config_mod.run_manifest("bon", cfg, inputs=[args.responses])
    results: list[dict[str, Any]] = []
    abstentions = 0
    for row in read_jsonl(args.responses):
        prompt = row["prompt"]
        responses = [r if isinstance(r, str) else r["text"] for r in row["responses"]]
        domain = Domain(row.get("domain", "reasoning"))
        item_id = str(row.get("id", len(results)))
        if args.mode == "knockout":
            outcome = evaluation.best_of_n_knockout(
                judge, prompt, responses, domain=domain, task_prefix=item_id
            )
            abstentions += outcome.abstentions
            results.append(
                {
                    "id": item_id,
                    "winner_index": outcome.winner,
                    "judge_calls": outcome.judge_calls,
                    "comparisons": outcome.comparisons,
                }
            )
        else:
            outcome = evaluation.best_of_n_pointwise(
                judge, prompt, responses, domain=domain, task_prefix=item_id
            )
            results.append(
                {
                    "id": item_id,
                    "answer": outcome.answer,
                    "scores": outcome.scores,
                    "top_indices": outcome.top_indices,
                }
            )
    payload = {"mode": args.mode, "manifest_id": manifest.id, "items": results}
    config_mod.write_manifest(manifest, config_mod.manifest_path_for(args.report))
    Path(args.report).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return EXIT_PARTIAL if abstentions else EXIT_OK


def cmd_sandbox_serve(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    limits = cfg.exec_limits()
    if args.timeout is not None:
        import dataclasses

        limits = dataclasses.replace(limits, wall_timeout=args.timeout)
    sandbox.serve_forever(args.host, args.port, limits)
    return EXIT_OK


# --- wiring ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tir", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default=None, help="flat key=value config file")

    p = sub.add_parser("rollout", help="sample judge rollout groups")
    common(p)
    p.add_argument("--tasks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--group-size", type=int, default=None)
    p.add_argument("--endpoint", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--max-tool-calls", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("reward", help="score trajectories against tasks")
    common(p)
    p.add_argument("--trajs", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reward)

    p = sub.add_parser("rs-filter", help="keep full-reward trajectories")
    common(p)
    p.add_argument("--trajs", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rs_filter)

    p = sub.add_parser("sft-export", help="emit canonical SFT records")
    common(p)
    p.add_argument("--trajs", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sft_export)

    p = sub.add_parser("make-pairs", help="build preference items with a verifier")
    common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--verifier", default="exact", help="exact or script:PATH")
    p.add_argument("--emit", choices=("pair", "point", "list"), default="pair")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_pairs)

    p = sub.add_parser("decontaminate", help="drop training prompts overlapping eval")
    common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--eval", dest="eval_file", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--removed", default=None)
    p.add_argument("--n", type=int, default=8)
    p.set_defaults(func=cmd_decontaminate)

    p = sub.add_parser("eval", help="run a judging benchmark protocol")
    common(p)
    p.add_argument("--mode", choices=("point", "pair", "list"), required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--endpoint", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bon", help="best-of-N response selection")
    common(p)
    p.add_argument("--mode", choices=("knockout", "pointwise"), required=True)
    p.add_argument("--responses", required=True)
    p.add_argument("--endpoint", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_bon)

    p = sub.add_parser("sandbox-serve", help="serve the execution sandbox over HTTP")
    common(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8731)
    p.add_argument("--timeout", type=float, default=None)
    p.set_defaults(func=cmd_sandbox_serve)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    started = time.monotonic()
    try:
        code = args.func(args)
    except (config_mod.ParseError, config_mod.ValidationError, FileNotFoundError) as exc:
        logger.error("validation failure: %s", exc)
        return EXIT_VALIDATION
    except (rollout.PolicyError, sandbox.SandboxUnavailable) as exc:
        logger.error("runtime failure: %s", exc)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        logger.error("interrupted")
        return EXIT_RUNTIME
    except Exception:
        logger.exception("unexpected failure")
        return EXIT_RUNTIME
    logger.info("%s finished in %.2fs (exit %d)", args.command, time.monotonic() - started, code)
    return code


if __name__ == "__main__":
    sys.exit(main())
