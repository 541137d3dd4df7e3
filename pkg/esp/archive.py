"""
Run archives: one self-describing directory per run.

    config.json       fully resolved experiment config
    series.csv        one row per real-domain training episode
    best_policy.json  returned Prescriptor
    predictor.bin     final Predictor (ESP runs only), versioned binary
    manifest.json     schema version, run identity and sha256 of every file

Files are written into a temporary sibling directory and renamed into place.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import shutil
import struct
import tempfile
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from django.core.serializers.json import DjangoJSONEncoder

from .environments import Environment, EpisodeTrace
from .exceptions import ArchiveError
from .metrics import RunResult, SeriesPoint
from .neuralnet import NetworkGenome
from .predictors import PredictorModel, predictor_from_state

SCHEMA_VERSION = 1
PREDICTOR_MAGIC = b"ESPPRED\x00"
TRACE_HEADER = f"#schema={SCHEMA_VERSION}"

SERIES_COLUMNS = ("episodes", "generation", "episode_reward", "regret", "true_performance")


def dumps(data: Any) -> str:
    return json.dumps(data, cls=DjangoJSONEncoder, indent=2, sort_keys=True) + "\n"


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def run_dir_name(method: str, domain: str, seed: int) -> str:
    return f"{method}-{domain}-seed{seed:04d}"


# -------- predictor binary --------

def encode_predictor(model: PredictorModel) -> bytes:
    meta, arrays = model.state()
    out = io.BytesIO()
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    out.write(PREDICTOR_MAGIC)
    out.write(struct.pack("<HII", SCHEMA_VERSION, len(meta_bytes), len(arrays)))
    out.write(meta_bytes)
    for name in sorted(arrays):
        buf = io.BytesIO()
        np.save(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
        data = buf.getvalue()
        encoded = name.encode()
        out.write(struct.pack("<HQ", len(encoded), len(data)))
        out.write(encoded)
        out.write(data)
    return out.getvalue()


def decode_predictor(blob: bytes) -> PredictorModel:
    view = io.BytesIO(blob)
    if view.read(len(PREDICTOR_MAGIC)) != PREDICTOR_MAGIC:
        raise ArchiveError("predictor.bin has an unknown format.")
    version, meta_len, n_arrays = struct.unpack("<HII", view.read(10))
    if version != SCHEMA_VERSION:
        raise ArchiveError(f"predictor.bin schema {version} is not supported (expected {SCHEMA_VERSION}).")
    meta = json.loads(view.read(meta_len))
    arrays = {}
    for _ in range(n_arrays):
        name_len, data_len = struct.unpack("<HQ", view.read(10))
        name = view.read(name_len).decode()
        arrays[name] = np.load(io.BytesIO(view.read(data_len)), allow_pickle=False)
    return predictor_from_state(meta, arrays)


# -------- CSV helpers --------

def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]], preamble: str | None = None):
    with open(path, "w", newline="") as fh:
        if preamble:
            fh.write(preamble + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) if isinstance(v, (int, float, np.number)) and not isinstance(v, bool) else v
                             for v in row])


def read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


def series_rows(series: Sequence[SeriesPoint]):
    for p in series:
        yield (p.episodes, p.generation, p.episode_reward, p.regret, p.true_performance)


def write_trace_csv(path: Path, env: Environment, trace: EpisodeTrace):
    header = ["step", *(f"obs_{i}" for i in range(env.observation_size)), "action", "reward", "done"]
    rows = []
    for t, step in enumerate(trace.steps):
        action = int(np.argmax(step.action)) if env.discrete else float(step.action[0])
        rows.append([t, *(float(v) for v in step.observation), action, float(step.reward), int(step.done)])
    write_csv(path, header, rows, preamble=TRACE_HEADER)


# -------- run archives --------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_run_archive(run: RunResult, out_dir: Path | str) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    final = out_dir / run_dir_name(run.method, run.domain, run.seed)
    tmp = Path(tempfile.mkdtemp(prefix=".tmp-", dir=out_dir))
    try:
        (tmp / "config.json").write_text(dumps(run.config))
        write_csv(tmp / "series.csv", SERIES_COLUMNS, series_rows(run.series))
        policy = run.best_policy.to_dict() if run.best_policy is not None else None
        (tmp / "best_policy.json").write_text(dumps({"schema_version": SCHEMA_VERSION, "policy": policy}))
        if run.predictor is not None:
            (tmp / "predictor.bin").write_bytes(encode_predictor(run.predictor))

        files = sorted(p.name for p in tmp.iterdir())
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "method": str(run.method),
            "domain": str(run.domain),
            "seed": run.seed,
            "episodes_consumed": run.episodes_consumed,
            "best_real_fitness": run.best_real_fitness,
            "files": {name: _sha256(tmp / name) for name in files},
        }
        (tmp / "manifest.json").write_text(dumps(manifest))
        os.chmod(tmp, 0o755)
        if final.exists():
            shutil.rmtree(final)
        os.replace(tmp, final)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return final


def read_manifest(path: Path | str) -> dict[str, Any]:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise ArchiveError(f"{path} is not a run archive (no manifest.json).") from None
    except json.JSONDecodeError as exc:
        raise ArchiveError(f"{path}/manifest.json is not valid JSON: {exc}") from None
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ArchiveError(f"{path}: unsupported archive schema {manifest.get('schema_version')!r}.")
    return manifest


def read_run_archive(path: Path | str, verify: bool = True) -> RunResult:
    path = Path(path)
    manifest = read_manifest(path)
    if verify:
        for name, digest in manifest["files"].items():
            target = path / name
            if not target.exists() or _sha256(target) != digest:
                raise ArchiveError(f"{target} is missing or does not match its manifest hash.")

    config = json.loads((path / "config.json").read_text())
    series = [
        SeriesPoint(
            int(row["episodes"]), int(row["generation"]), float(row["episode_reward"]),
            float(row["regret"]), float(row["true_performance"]),
        )
        for row in read_csv(path / "series.csv")
    ]
    policy = json.loads((path / "best_policy.json").read_text())["policy"]
    predictor_path = path / "predictor.bin"
    return RunResult(
        method=manifest["method"],
        domain=manifest["domain"],
        seed=manifest["seed"],
        series=series,
        best_policy=NetworkGenome.from_dict(policy) if policy else None,
        best_real_fitness=manifest.get("best_real_fitness"),
        predictor=decode_predictor(predictor_path.read_bytes()) if predictor_path.exists() else None,
        config=config,
    )


def find_archives(root: Path | str) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        return []
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "manifest.json").exists())
