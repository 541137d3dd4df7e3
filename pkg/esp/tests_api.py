import shutil
import tempfile
from pathlib import Path

from django.urls import reverse
from rest_framework.test import APITestCase

from .models import ExperimentRun
from .serializers import resolve_config
from .services import execute_runs, register_runs


class RunIndexAPITests(APITestCase):
    """
    Read-only run index:
    - /api/runs/ list, filters and detail
    - /api/runs/curve/ aggregation over registered archives
    """

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = Path(tempfile.mkdtemp())
        resolved = resolve_config({
            "domain": "function",
            "evolution": {"population_size": 10},
            "prescriptor": {"hidden_sizes": [4]},
            "predictor": {"hidden_sizes": [8], "epochs": 20, "batch_size": 32},
            "generations_per_predictor": 2,
            "initial_random_episodes": 5,
            "max_episodes": 12,
            "evaluation_episodes": 20,
            "run_count": 2,
            "output_dir": str(cls.tmp),
        })
        execute_runs(resolved)

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp, ignore_errors=True)
        super().tearDownClass()

    def setUp(self):
        register_runs(self.tmp)
        ExperimentRun.objects.create(method="de", domain="cartpole", seed=3, archive_path="/nowhere/de-cartpole-seed0003")
        self.list_url = reverse("run-list")
        self.curve_url = reverse("run-curve")

    def test_list_is_paginated(self):
        """The run list is paginated and ordered by domain, method and seed."""
        res = self.client.get(self.list_url)
        self.assertEqual(res.status_code, 200, res.data)
        self.assertEqual(res.data["count"], 3)
        # ordered by domain, method, seed
        self.assertEqual(
            [(r["domain"], r["method"], r["seed"]) for r in res.data["results"]],
            [("cartpole", "de", 3), ("function", "esp", 0), ("function", "esp", 1)],
        )

    def test_filters(self):
        """domain and method narrow the run list."""
        res = self.client.get(self.list_url, {"domain": "function", "method": "esp"})
        self.assertEqual(res.data["count"], 2)
        res = self.client.get(self.list_url, {"method": "de"})
        self.assertEqual(res.data["count"], 1)

    def test_detail(self):
        """A run's detail view includes its stored config and results."""
        run = ExperimentRun.objects.get(domain="function", seed=1)
        res = self.client.get(reverse("run-detail", args=[run.pk]))
        self.assertEqual(res.status_code, 200)
        self.assertEqual(res.data["episodes_consumed"], 12)
        self.assertEqual(res.data["config"]["seed"], 1)
        self.assertIsNotNone(res.data["final_true_performance"])

    def test_read_only(self):
        """The index refuses writes."""
        res = self.client.post(self.list_url, {"method": "esp"}, format="json")
        self.assertEqual(res.status_code, 405)

    def test_curve(self):
        """The curve endpoint averages true performance over registered runs."""
        res = self.client.get(self.curve_url, {"domain": "function", "method": "esp"})
        self.assertEqual(res.status_code, 200, res.data)
        self.assertEqual(res.data["metric"], "true_performance")
        rows = res.data["rows"]
        self.assertEqual(rows[0]["episodes"], 10)
        self.assertTrue(all(r["n_runs"] == 2 for r in rows))
        self.assertTrue(all(r["mean"] <= 0.0 for r in rows))

    def test_regret_curve(self):
        """Regret curves are never negative."""
        res = self.client.get(self.curve_url, {"domain": "function", "method": "esp", "metric": "regret_cumulative"})
        self.assertEqual(res.status_code, 200, res.data)
        self.assertTrue(all(r["mean"] >= 0.0 for r in res.data["rows"]))

    def test_curve_without_runs(self):
        """A curve for a domain with no runs is a 404."""
        res = self.client.get(self.curve_url, {"domain": "flappy", "method": "esp"})
        self.assertEqual(res.status_code, 404)

    def test_curve_with_bad_query(self):
        """Unknown domains or metrics are a 400."""
        res = self.client.get(self.curve_url, {"domain": "pong", "method": "esp"})
        self.assertEqual(res.status_code, 400)
        self.assertIn("domain", res.data)
        res = self.client.get(self.curve_url, {"domain": "function", "method": "esp", "metric": "sharpe"})
        self.assertEqual(res.status_code, 400)

    def test_curve_with_missing_archive(self):
        """A registered run whose archive is gone is reported as a bad request."""
        res = self.client.get(self.curve_url, {"domain": "cartpole", "method": "de"})
        self.assertEqual(res.status_code, 400)
        self.assertIn("manifest", res.data["detail"])
