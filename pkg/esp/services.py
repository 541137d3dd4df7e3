from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from django.conf import settings
from django.db import transaction
from rest_framework.exceptions import ValidationError

from .archive import SCHEMA_VERSION, dumps, find_archives, read_run_archive, write_csv, write_run_archive, write_trace_csv
from .choices import Method
from .engine import EVAL, rng_for, run_direct_evolution, run_esp
from .environments import RANDOM_AGENT, make_environment, rollout
from .exceptions import ArchiveError, ConfigError
from .metrics import CurveTable, RunResult, aggregate_runs, episodes_to_target, true_performance
from .models import ExperimentRun
from .serializers import esp_config_from, resolve_config

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ("episodes", "mean", "std", "n_runs")
REGRET_COLUMNS = (
    "episodes", "moving_regret_mean", "moving_regret_std",
    "cumulative_regret_mean", "cumulative_regret_std", "n_runs",
)


def worker_count(requested: int | None = None) -> int:
    """Requested parallelism, capped by the ESP_THREADS setting."""
    cap = max(1, int(getattr(settings, "ESP_THREADS", 1)))
    if requested is None:
        return cap
    return max(1, min(int(requested), cap))


# -------- config loading --------

def _flatten_errors(detail, prefix: tuple[str, ...] = ()):
    if isinstance(detail, dict):
        for key, value in detail.items():
            yield from _flatten_errors(value, prefix + (str(key),))
    elif isinstance(detail, list):
        for i, item in enumerate(detail):
            if isinstance(item, (dict, list)):
                yield from _flatten_errors(item, prefix + (str(i),))
            else:
                yield prefix, str(item)
    else:
        yield prefix, str(detail)


def _locate(text: str, keys: Sequence[str]) -> tuple[int, int]:
    lines = text.splitlines()
    line_no, col = 0, 0
    for key in keys:
        if key.isdigit() or key == "non_field_errors":
            continue
        needle = json.dumps(key)
        for i in range(line_no, len(lines)):
            pos = lines[i].find(needle)
            if pos >= 0:
                line_no, col = i, pos
                break
        else:
            # key came from a preset or an override, not from the file
            break
    return line_no + 1, col + 1


def anchored_messages(path: str, text: str, detail) -> list[str]:
    messages = []
    for keys, message in _flatten_errors(detail):
        line, col = _locate(text, keys)
        dotted = ".".join(k for k in keys if k != "non_field_errors")
        messages.append(f"{path}:{line}:{col}: {dotted + ': ' if dotted else ''}{message}")
    return messages


def parse_overrides(items: Iterable[str] | None) -> dict[str, Any]:
    """``key=value`` physics overrides; values are parsed as JSON when possible."""
    physics = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--domain-override expects key=value, got {item!r}.")
        try:
            physics[key.strip()] = json.loads(value)
        except json.JSONDecodeError:
            physics[key.strip()] = value
    return physics


def load_config(
    path: str | Path,
    method: str | None = None,
    seed: int | None = None,
    runs: int | None = None,
    out: str | None = None,
    physics: dict[str, Any] | None = None,
) -> dict[str, Any]:
    """Read, merge and validate an experiment config; errors are line-anchored ConfigErrors."""
    path = str(path)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror}).") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None

    overrides: dict[str, Any] = {}
    if method is not None:
        overrides["method"] = method
    if seed is not None:
        overrides["seed"] = seed
    if runs is not None:
        overrides["run_count"] = runs
    if out is not None:
        overrides["output_dir"] = out
    if physics:
        overrides["physics"] = physics
    try:
        return resolve_config(raw, overrides)
    except ValidationError as exc:
        raise ConfigError("\n".join(anchored_messages(path, text, exc.detail))) from None


# -------- run --------

def execute_runs(
    resolved: dict[str, Any],
    workers: int = 1,
    events: Callable[[dict], None] | None = None,
) -> list[Path]:
    """Run ``run_count`` seeded runs, archive each and write the aggregate curve table."""
    out_dir = Path(resolved["output_dir"])
    runner = run_esp if resolved["method"] == Method.ESP else run_direct_evolution
    results: list[RunResult] = []
    paths = []
    for index in range(resolved["run_count"]):
        seed = resolved["seed"] + index
        result = runner(esp_config_from(resolved, seed), workers, events)
        result.config = {**resolved, "seed": seed}
        paths.append(write_run_archive(result, out_dir))
        results.append(result)
        logger.info(
            "Archived %s/%s seed=%d (%d episodes, %.1fs) at %s",
            result.method, result.domain, seed, result.episodes_consumed, result.wall_time or 0.0, paths[-1],
        )
    table = aggregate_runs(results)
    write_curve_csv(out_dir / f"{resolved['method']}_{resolved['domain']}_aggregate.csv", table)
    return paths


def write_curve_csv(path: Path, table: CurveTable):
    write_csv(path, CURVE_COLUMNS, ((r.episodes, r.mean, r.std, r.n_runs) for r in table.rows))


# -------- report --------

@dataclass
class Report:
    domain: str
    files: list[Path] = field(default_factory=list)
    summary: dict[str, Any] = field(default_factory=dict)


def load_runs(archive_dir: str | Path) -> list[RunResult]:
    paths = find_archives(archive_dir)
    if not paths:
        raise ArchiveError(f"no archives found in {archive_dir}")
    return [read_run_archive(p) for p in paths]


def _run_summary(run: RunResult) -> dict[str, Any]:
    return {
        "seed": run.seed,
        "episodes_consumed": run.episodes_consumed,
        "final_true_performance": run.final_true_performance,
        "best_real_fitness": run.best_real_fitness,
        "episodes_to_target": episodes_to_target(run, run.config.get("success_threshold")),
    }


def summarize(runs: Sequence[RunResult]) -> dict[str, Any]:
    finals = [r.final_true_performance for r in runs if r.final_true_performance is not None]
    mean = sum(finals) / len(finals) if finals else None
    std = None
    if len(finals) > 1:
        std = (sum((f - mean) ** 2 for f in finals) / (len(finals) - 1)) ** 0.5
    elif finals:
        std = 0.0
    per_run = [_run_summary(r) for r in sorted(runs, key=lambda r: r.seed)]
    reached = [r["episodes_to_target"] for r in per_run if r["episodes_to_target"] is not None]
    return {
        "n_runs": len(runs),
        "final_performance_mean": mean,
        "final_performance_std": std,
        "runs_reaching_target": len(reached),
        "mean_episodes_to_target": sum(reached) / len(reached) if reached else None,
        "runs": per_run,
    }


def build_report(archive_dir: str | Path, out_dir: str | Path | None = None) -> Report:
    runs = load_runs(archive_dir)
    domains = sorted({r.domain for r in runs})
    if len(domains) > 1:
        raise ConfigError(f"Archives in {archive_dir} mix domains: {', '.join(domains)}.")
    out = Path(out_dir or archive_dir)
    out.mkdir(parents=True, exist_ok=True)

    by_method: dict[str, list[RunResult]] = defaultdict(list)
    for run in runs:
        by_method[run.method].append(run)

    report = Report(domain=domains[0])
    methods = {}
    for method in sorted(by_method):
        group = by_method[method]
        perf = out / f"{method}_true_performance.csv"
        write_curve_csv(perf, aggregate_runs(group, "true_performance"))

        moving = aggregate_runs(group, "regret_moving")
        cumulative = aggregate_runs(group, "regret_cumulative")
        regret = out / f"{method}_regret.csv"
        write_csv(regret, REGRET_COLUMNS, (
            (m.episodes, m.mean, m.std, c.mean, c.std, m.n_runs)
            for m, c in zip(moving.rows, cumulative.rows)
        ))
        report.files += [perf, regret]
        methods[method] = summarize(group)

    report.summary = {"schema_version": SCHEMA_VERSION, "domain": report.domain, "methods": methods}
    summary_path = out / "summary.json"
    summary_path.write_text(dumps(report.summary))
    report.files.append(summary_path)
    return report


@transaction.atomic
def register_runs(archive_dir: str | Path) -> list[ExperimentRun]:
    """Upsert one ExperimentRun row per archive under ``archive_dir``."""
    rows = []
    for path in find_archives(archive_dir):
        run = read_run_archive(path)
        summary = _run_summary(run)
        row, _ = ExperimentRun.objects.update_or_create(
            archive_path=str(path.resolve()),
            defaults={
                "method": run.method,
                "domain": run.domain,
                "seed": run.seed,
                "episodes_consumed": summary["episodes_consumed"],
                "final_true_performance": summary["final_true_performance"],
                "best_real_fitness": summary["best_real_fitness"],
                "episodes_to_target": summary["episodes_to_target"],
                "config": run.config,
            },
        )
        rows.append(row)
    return rows


def curve_for(runs: Iterable[ExperimentRun], metric: str) -> CurveTable:
    results = [read_run_archive(r.archive_path, verify=False) for r in runs]
    if not results:
        raise ArchiveError("No registered runs match the query.")
    return aggregate_runs(results, metric)


# -------- eval / replay --------

def evaluate_archive(path: str | Path, episodes: int | None = None, seed: int = 0) -> dict[str, Any]:
    run = read_run_archive(path)
    env = make_environment(run.domain, run.config.get("physics"))
    n = episodes or run.config.get("evaluation_episodes") or 100
    policy = run.best_policy if run.best_policy is not None else RANDOM_AGENT
    score = true_performance(policy, env, n, rng_for(seed, EVAL))
    return {
        "archive": str(path),
        "method": run.method,
        "domain": run.domain,
        "seed": run.seed,
        "episodes": n,
        "true_performance": score,
        "regret": env.optimum_reward - score,
    }


def replay_trace(path: str | Path, out: str | Path, seed: int = 0, max_steps: int | None = None) -> Path:
    """Roll the archived policy out once and store the episode as a versioned CSV trace."""
    run = read_run_archive(path)
    env = make_environment(run.domain, run.config.get("physics"))
    policy = run.best_policy if run.best_policy is not None else RANDOM_AGENT
    trace = rollout(env, policy, rng_for(seed, EVAL), max_steps=max_steps)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_trace_csv(out, env, trace)
    return out
