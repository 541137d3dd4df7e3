import json
import shutil
import tempfile
from io import StringIO
from pathlib import Path
from unittest import mock

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import TestCase, override_settings

from .archive import read_csv, read_run_archive
from .models import ExperimentRun

SMALL_FUNCTION = {
    "domain": "function",
    "evolution": {"population_size": 10},
    "prescriptor": {"hidden_sizes": [4]},
    "predictor": {"hidden_sizes": [8], "epochs": 20, "batch_size": 32},
    "generations_per_predictor": 2,
    "initial_random_episodes": 5,
    "max_episodes": 12,
    "evaluation_episodes": 20,
}


class EspCommandTestBase(TestCase):

    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())
        self.addCleanup(shutil.rmtree, self.tmp, True)
        self.out = self.tmp / "runs"

    def write_config(self, data, name="config.json") -> Path:
        path = self.tmp / name
        path.write_text(json.dumps(data, indent=2))
        return path

    def esp(self, *args) -> str:
        buf = StringIO()
        call_command("esp", *[str(a) for a in args], stdout=buf)
        return buf.getvalue()

    def run_small(self, *extra, config=None):
        path = self.write_config(config or SMALL_FUNCTION)
        return self.esp("run", "--config", path, "--out", self.out, *extra)

    def assertExitCode(self, code, *args) -> CommandError:
        with self.assertRaises(CommandError) as ctx:
            self.esp(*args)
        self.assertEqual(ctx.exception.returncode, code)
        return ctx.exception


class RunCommandTests(EspCommandTestBase):

    def test_writes_archives_and_aggregate(self):
        """run writes one archive per seed plus the aggregate curve."""
        self.run_small("--runs", 2, "--seed", 7)
        names = sorted(p.name for p in self.out.iterdir())
        self.assertEqual(names, ["esp-function-seed0007", "esp-function-seed0008", "esp_function_aggregate.csv"])
        for archive in ("esp-function-seed0007", "esp-function-seed0008"):
            files = sorted(p.name for p in (self.out / archive).iterdir())
            self.assertEqual(files, ["best_policy.json", "config.json", "manifest.json", "predictor.bin", "series.csv"])
        rows = read_csv(self.out / "esp_function_aggregate.csv")
        self.assertEqual(list(rows[0]), ["episodes", "mean", "std", "n_runs"])
        self.assertEqual(rows[-1]["n_runs"], "2")

    def test_archive_embeds_resolved_config(self):
        """The archived config has presets and overrides resolved."""
        self.run_small("--runs", 1, "--seed", 4)
        config = json.loads((self.out / "esp-function-seed0004" / "config.json").read_text())
        self.assertEqual(config["seed"], 4)
        self.assertEqual(config["evolution"]["population_size"], 10)
        # preset defaults are filled in
        self.assertEqual(config["evolution"]["elite_fraction"], 0.1)
        self.assertEqual(config["best_policy_rule"], "population_top")

    @override_settings(ESP_THREADS=4)
    def test_rerun_is_byte_identical_regardless_of_parallelism(self):
        """A rerun with more threads produces the same bytes."""
        self.run_small("--runs", 1, "--seed", 7)
        archive = self.out / "esp-function-seed0007"
        first = {p.name: p.read_bytes() for p in archive.iterdir()}
        self.run_small("--runs", 1, "--seed", 7, "--parallel", 3)
        second = {p.name: p.read_bytes() for p in archive.iterdir()}
        self.assertEqual(first, second)

    def test_direct_evolution_method(self):
        """--method de runs direct evolution and archives no Predictor."""
        self.run_small("--runs", 1, "--method", "de")
        run = read_run_archive(self.out / "de-function-seed0000")
        self.assertEqual(run.method, "de")
        self.assertIsNone(run.predictor)
        self.assertEqual(run.episodes_consumed, 10)

    def test_cartpole_de_uses_configured_population(self):
        """Cart-pole direct evolution scores two generations of the preset population of 50."""
        config = {
            "domain": "cartpole",
            "prescriptor": {"hidden_sizes": [4]},
            "max_generations": 1,
            "de_episodes_per_candidate": 1,
            "evaluation_episodes": 2,
            "physics": {"max_steps": 20},
        }
        self.run_small("--runs", 1, "--method", "de", config=config)
        run = read_run_archive(self.out / "de-cartpole-seed0000")
        self.assertEqual(run.config["evolution"]["population_size"], 50)
        self.assertEqual(run.episodes_consumed, 100)

    def test_domain_override_reaches_the_environment(self):
        """--domain-override is archived and caps the episode length."""
        config = {
            "domain": "cartpole",
            "prescriptor": {"hidden_sizes": [4]},
            "max_generations": 1,
            "de_episodes_per_candidate": 1,
            "evaluation_episodes": 2,
        }
        self.run_small("--runs", 1, "--method", "de", "--domain-override", "max_steps=10", config=config)
        run = read_run_archive(self.out / "de-cartpole-seed0000")
        self.assertEqual(run.config["physics"], {"max_steps": 10})
        self.assertTrue(all(p.episode_reward <= 10 for p in run.series))

    def test_progress_events_are_json_lines(self):
        """--progress prints one JSON object per line."""
        out = self.run_small("--runs", 1, "--progress")
        events = [json.loads(line) for line in out.splitlines() if line.startswith("{")]
        self.assertEqual(events[0]["event"], "run_start")
        self.assertEqual(events[-1]["event"], "run_end")


class ConfigErrorTests(EspCommandTestBase):

    def test_unknown_key_is_line_anchored(self):
        """Unknown keys are reported with their file, line and column."""
        path = self.write_config({"domain": "function", "bogus": 1})
        err = self.assertExitCode(2, "run", "--config", path, "--out", self.out)
        self.assertIn(f"{path}:3:3: bogus: Unknown field.", str(err))

    def test_unknown_nested_key(self):
        """Unknown nested keys are reported with their dotted path."""
        path = self.write_config({"domain": "function", "evolution": {"popsize": 3}})
        err = self.assertExitCode(2, "run", "--config", path, "--out", self.out)
        self.assertIn(f"{path}:4:5: evolution.popsize: Unknown field.", str(err))

    def test_malformed_json(self):
        """Broken JSON is a usage error pointing at the bad line."""
        path = self.tmp / "broken.json"
        path.write_text('{\n  "domain": "function",\n  "seed": \n}')
        err = self.assertExitCode(2, "run", "--config", path)
        self.assertTrue(str(err).startswith(f"{path}:4:1:"))

    def test_missing_file(self):
        """A missing config file is a usage error."""
        self.assertExitCode(2, "run", "--config", self.tmp / "nope.json")

    def test_unknown_domain(self):
        """An unknown domain is a usage error."""
        path = self.write_config({"domain": "pong"})
        err = self.assertExitCode(2, "run", "--config", path)
        self.assertIn("domain", str(err))

    def test_missing_stopping_rule(self):
        """A config without any stopping rule is a usage error."""
        path = self.write_config({"domain": "function", "max_episodes": None})
        err = self.assertExitCode(2, "run", "--config", path)
        self.assertIn("max_generations or max_episodes", str(err))

    def test_out_of_range_value(self):
        """Out-of-range values are a usage error naming the field."""
        path = self.write_config({"domain": "cartpole", "gamma": 1.5})
        err = self.assertExitCode(2, "run", "--config", path)
        self.assertIn("gamma", str(err))

    def test_unknown_physics_override(self):
        """Overriding a physics parameter that does not exist is a usage error."""
        path = self.write_config(SMALL_FUNCTION)
        self.assertExitCode(2, "run", "--config", path, "--domain-override", "wind=3")

    def test_malformed_override(self):
        """An override without KEY=VALUE is a usage error."""
        path = self.write_config(SMALL_FUNCTION)
        self.assertExitCode(2, "run", "--config", path, "--domain-override", "wind")

    def test_nothing_is_written_on_config_error(self):
        """A rejected config leaves no output directory behind."""
        path = self.write_config({"domain": "function", "bogus": 1})
        self.assertExitCode(2, "run", "--config", path, "--out", self.out)
        self.assertFalse(self.out.exists())

    def test_invalid_flappy_physics(self):
        """Degenerate flappy geometry is caught while the config is validated."""
        path = self.write_config({"domain": "flappy"})
        err = self.assertExitCode(2, "run", "--config", path, "--domain-override", "pipe_spacing=0")
        self.assertIn("pipe_spacing", str(err))

    def test_unexpected_failure_is_a_runtime_error(self):
        """An unforeseen exception is logged and exits with the runtime error code."""
        path = self.write_config(SMALL_FUNCTION)
        with mock.patch("esp.management.commands.esp.execute_runs", side_effect=IndexError("list index out of range")):
            with self.assertLogs("esp", level="ERROR"):
                err = self.assertExitCode(1, "run", "--config", path, "--out", self.out)
        self.assertIn("IndexError", str(err))


class ReportCommandTests(EspCommandTestBase):

    def test_empty_directory(self):
        """Reporting on a directory without archives is a usage error."""
        self.out.mkdir()
        err = self.assertExitCode(2, "report", self.out)
        self.assertIn("no archives found", str(err))

    def test_curves_and_summary(self):
        """report writes mean/std curves, regret curves and summary.json."""
        self.run_small("--runs", 2)
        self.esp("report", self.out)
        perf = read_csv(self.out / "esp_true_performance.csv")
        regret = read_csv(self.out / "esp_regret.csv")
        self.assertEqual(list(perf[0]), ["episodes", "mean", "std", "n_runs"])
        self.assertEqual(
            list(regret[0]),
            ["episodes", "moving_regret_mean", "moving_regret_std",
             "cumulative_regret_mean", "cumulative_regret_std", "n_runs"],
        )
        summary = json.loads((self.out / "summary.json").read_text())
        self.assertEqual(summary["domain"], "function")
        runs = summary["methods"]["esp"]["runs"]
        self.assertEqual([r["seed"] for r in runs], [0, 1])
        self.assertIn("episodes_to_target", runs[0])

    def test_report_is_reproducible(self):
        """Reporting twice gives identical files."""
        self.run_small("--runs", 2)
        report_a, report_b = self.tmp / "a", self.tmp / "b"
        self.esp("report", self.out, "--out", report_a)
        self.esp("report", self.out, "--out", report_b)
        for name in ("esp_true_performance.csv", "esp_regret.csv", "summary.json"):
            self.assertEqual((report_a / name).read_bytes(), (report_b / name).read_bytes())

    def test_both_methods_in_one_report(self):
        """ESP and direct evolution archives are summarised side by side."""
        self.run_small("--runs", 1)
        self.run_small("--runs", 1, "--method", "de")
        self.esp("report", self.out)
        summary = json.loads((self.out / "summary.json").read_text())
        self.assertEqual(sorted(summary["methods"]), ["de", "esp"])

    def test_mixed_domains(self):
        """A directory mixing domains cannot be reported."""
        self.run_small("--runs", 1)
        cartpole = {
            "domain": "cartpole", "prescriptor": {"hidden_sizes": [4]}, "max_generations": 1,
            "de_episodes_per_candidate": 1, "evaluation_episodes": 2, "physics": {"max_steps": 10},
        }
        self.run_small("--runs", 1, "--method", "de", config=cartpole)
        self.assertExitCode(2, "report", self.out)

    def test_register(self):
        """--register indexes every archive exactly once."""
        self.run_small("--runs", 2)
        self.esp("report", self.out, "--register")
        self.assertEqual(ExperimentRun.objects.count(), 2)
        self.esp("report", self.out, "--register")
        self.assertEqual(ExperimentRun.objects.count(), 2)
        row = ExperimentRun.objects.get(seed=1)
        self.assertEqual(row.episodes_consumed, 12)
        self.assertEqual(row.config["domain"], "function")

    def test_tampered_archive(self):
        """An archive that fails its manifest check is rejected."""
        self.run_small("--runs", 1)
        (self.out / "esp-function-seed0000" / "series.csv").write_text("episodes\n")
        err = self.assertExitCode(2, "report", self.out)
        self.assertIn("manifest hash", str(err))


class EvalReplayCommandTests(EspCommandTestBase):

    def setUp(self):
        super().setUp()
        self.run_small("--runs", 1)
        self.archive = self.out / "esp-function-seed0000"

    def test_eval(self):
        """eval prints the archived policy's performance and regret as JSON."""
        result = json.loads(self.esp("eval", self.archive, "--episodes", 25))
        self.assertEqual(result["episodes"], 25)
        self.assertLessEqual(result["true_performance"], 0.0)
        self.assertAlmostEqual(result["regret"], -result["true_performance"])

    def test_eval_is_seeded(self):
        """eval with the same seed prints the same numbers."""
        a = self.esp("eval", self.archive, "--seed", 3)
        b = self.esp("eval", self.archive, "--seed", 3)
        self.assertEqual(a, b)

    def test_replay_writes_versioned_trace(self):
        """replay writes a trace CSV starting with the schema line."""
        trace = self.tmp / "golden" / "trace.csv"
        self.esp("replay", self.archive, "--out", trace)
        lines = trace.read_text().splitlines()
        self.assertEqual(lines[0], "#schema=1")
        self.assertEqual(lines[1], "step,obs_0,action,reward,done")
        self.assertEqual(len(lines), 3)

    def test_missing_archive(self):
        """Evaluating a missing archive is a usage error."""
        self.assertExitCode(2, "eval", self.tmp / "missing")
