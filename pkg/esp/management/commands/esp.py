import json
import logging

from django.core.management.base import BaseCommand, CommandError
from django.core.serializers.json import DjangoJSONEncoder

from esp.choices import Method
from esp.exceptions import ArchiveError, ConfigError, EspError
from esp.services import (
    build_report,
    evaluate_archive,
    execute_runs,
    load_config,
    parse_overrides,
    register_runs,
    replay_trace,
    worker_count,
)

USAGE_ERROR = 2
RUNTIME_ERROR = 1

logger = logging.getLogger(__name__)


class Command(BaseCommand):
    help = "Run, report, evaluate and replay surrogate-assisted prescription experiments."

    def add_arguments(self, parser):
        verbs = parser.add_subparsers(dest="verb", required=True)

        run = verbs.add_parser("run", help="Execute seeded runs and archive them")
        run.add_argument("--config", required=True, help="Experiment config (JSON)")
        run.add_argument("--method", choices=Method.values, help="Override the config's method")
        run.add_argument("--runs", type=int, help="Number of seeded runs (seeds = base seed + index)")
        run.add_argument("--seed", type=int, help="Base seed")
        run.add_argument("--out", help="Archive directory")
        run.add_argument("--parallel", type=int, default=1, help="Worker threads per run (capped by ESP_THREADS)")
        run.add_argument(
            "--domain-override",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="Physics parameter override; may be repeated",
        )
        run.add_argument("--progress", action="store_true", help="Print progress events as JSON lines")

        report = verbs.add_parser("report", help="Aggregate a directory of run archives")
        report.add_argument("archive_dir")
        report.add_argument("--out", help="Where to write the CSVs and summary.json (default: archive_dir)")
        report.add_argument("--register", action="store_true", help="Also index the archives in the database")

        ev = verbs.add_parser("eval", help="Evaluate an archived policy on fresh episodes")
        ev.add_argument("archive")
        ev.add_argument("--episodes", type=int, help="Evaluation episodes (default: from the archived config)")
        ev.add_argument("--seed", type=int, default=0)

        replay = verbs.add_parser("replay", help="Regenerate a golden trace from an archived policy")
        replay.add_argument("archive")
        replay.add_argument("--out", required=True, help="Trace CSV path")
        replay.add_argument("--seed", type=int, default=0)
        replay.add_argument("--max-steps", type=int)

    def handle(self, *args, **opts):
        handler = getattr(self, f"handle_{opts['verb']}")
        try:
            handler(opts)
        except (ConfigError, ArchiveError) as exc:
            raise CommandError(str(exc), returncode=USAGE_ERROR)
        except EspError as exc:
            raise CommandError(f"{type(exc).__name__}: {exc}", returncode=RUNTIME_ERROR)
        except OSError as exc:
            raise CommandError(f"I/O failure: {exc}", returncode=RUNTIME_ERROR)
        except Exception as exc:
            logger.exception("esp %s failed", opts["verb"])
            raise CommandError(f"Unexpected {type(exc).__name__}: {exc}", returncode=RUNTIME_ERROR)

    # ---------------- verbs ----------------

    def handle_run(self, opts):
        if opts["runs"] is not None and opts["runs"] < 1:
            raise ConfigError("--runs must be at least 1.")
        if opts["parallel"] < 1:
            raise ConfigError("--parallel must be at least 1.")
        resolved = load_config(
            opts["config"],
            method=opts["method"],
            seed=opts["seed"],
            runs=opts["runs"],
            out=opts["out"],
            physics=parse_overrides(opts["domain_override"]),
        )
        events = self._print_event if opts["progress"] else None
        paths = execute_runs(resolved, worker_count(opts["parallel"]), events)
        self.stdout.write(self.style.SUCCESS(
            f"Wrote {len(paths)} {resolved['method']} archive(s) to {resolved['output_dir']}"
        ))

    def handle_report(self, opts):
        report = build_report(opts["archive_dir"], opts["out"])
        for path in report.files:
            self.stdout.write(str(path))
        if opts["register"]:
            rows = register_runs(opts["archive_dir"])
            self.stdout.write(self.style.SUCCESS(f"Registered {len(rows)} run(s)"))

    def handle_eval(self, opts):
        if opts["episodes"] is not None and opts["episodes"] < 1:
            raise ConfigError("--episodes must be at least 1.")
        result = evaluate_archive(opts["archive"], opts["episodes"], opts["seed"])
        self.stdout.write(json.dumps(result, cls=DjangoJSONEncoder, sort_keys=True))

    def handle_replay(self, opts):
        path = replay_trace(opts["archive"], opts["out"], opts["seed"], opts["max_steps"])
        self.stdout.write(self.style.SUCCESS(f"Trace written to {path}"))

    def _print_event(self, event: dict):
        self.stdout.write(json.dumps(event, cls=DjangoJSONEncoder, sort_keys=True))
