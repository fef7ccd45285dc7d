import io
import json
import tempfile
from pathlib import Path

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import TestCase

from coaglab.schema import schema
from kinetics import artifacts
from kinetics.config import parse_config
from kinetics.models import CheckResult, ExperimentRun

TINY = """
[params]
dim = 3
big_z = 2.0
n_particles = 40
tau_factor = 0.05
horizon = 0.01
seed = 11
m_max = 8

[initial]
domain = "torus"
side = 1.0

[cell]
shells = 60
alphas = [1.0, 10.0]

[simulate]
replicas = {replicas}
sample_every = 2

[pde]
dt = 0.001

[validate]
checks = ["propensity", "mass_conservation", "macro_conservation", "beta_bounds", "capacity", "micro_macro"]
require_hypothesis = {require}

[run]
out = "{out}"
workers = 2
{extra}"""


class PipelineCommandTests(TestCase):
    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.root = Path(tmp.name)
        self.out = self.root / "out"

    def write_config(self, replicas=5, name="tiny.toml", require="false", extra=""):
        path = self.root / name
        path.write_text(TINY.format(replicas=replicas, out=self.out.as_posix(), require=require, extra=extra), encoding="utf-8")
        return path

    def run_command(self, name, path, **options):
        call_command(name, config=str(path), stdout=io.StringIO(), **options)

    def test_pipeline_writes_artifacts_and_ledger(self):
        path = self.write_config()
        for name in ("cell_problem", "pde", "simulate", "validate"):
            self.run_command(name, path)
        self.assertEqual(artifacts.listing(self.out), [
            "beta_table.csv", "counts.csv", "events.jsonl", "f_curve.csv", "functionals.csv",
            "ledger.json", "macro_counts.csv", "macro_functionals.csv", "report.json", "snapshots.jsonl", "stats.json",
            "stosszahl.csv",
        ])
        self.assertFalse(artifacts.is_incomplete(self.out))
        _, report = artifacts.read_json(self.out / "report.json")
        self.assertTrue(report["passed"])
        names = {check["name"] for check in report["checks"]}
        self.assertEqual(names, {"propensity", "mass_conservation", "macro_conservation",
                                 "beta_bounds", "capacity", "micro_macro_n1_t0.005"})
        self.assertEqual(ExperimentRun.objects.count(), 4)
        latest = ExperimentRun.objects.first()
        self.assertEqual(latest.pipeline, "validate")
        self.assertEqual(latest.status, ExperimentRun.Status.PASSED)
        self.assertEqual(CheckResult.objects.filter(run=latest).count(), 6)

    def test_beta_table_covers_every_pair(self):
        path = self.write_config()
        self.run_command("cell_problem", path)
        table = artifacts.read_csv(self.out / "beta_table.csv")
        self.assertEqual(len(table), 8 * 9 // 2)
        self.assertEqual(table.provenance.physics_hash, parse_config(path, environ={}).physics_hash)

    def test_simulation_is_reproducible(self):
        path = self.write_config(replicas=3)
        self.run_command("simulate", path)
        events = (self.out / "events.jsonl").read_bytes()
        counts = (self.out / "counts.csv").read_bytes()
        self.run_command("simulate", path)
        self.assertEqual((self.out / "events.jsonl").read_bytes(), events)
        self.assertEqual((self.out / "counts.csv").read_bytes(), counts)
        # replica streams do not depend on how replicas are chunked across workers
        self.run_command("simulate", path, workers=1)
        body = (self.out / "counts.csv").read_bytes().split(b"\n")[1:]
        self.assertEqual(body, counts.split(b"\n")[1:])

    def test_checks_without_replicas_are_skipped(self):
        path = self.write_config(replicas=0)
        self.run_command("simulate", path)
        self.run_command("validate", path)
        _, report = artifacts.read_json(self.out / "report.json")
        skipped = {row["name"] for row in report["skipped"]}
        self.assertIn("propensity", skipped)
        self.assertIn("beta_bounds", skipped)
        self.assertTrue(report["passed"])

    def test_echo_config_prints_the_canonical_form(self):
        path = self.write_config()
        stdout = io.StringIO()
        call_command("simulate", config=str(path), echo_config=True, seed=5, stdout=stdout)
        echoed = json.loads(stdout.getvalue())
        self.assertEqual(echoed["params"]["seed"], 5)
        self.assertAlmostEqual(echoed["params"]["epsilon"], 0.05)
        self.assertFalse(self.out.exists())

    def test_launch_run_mutation_executes_the_pipeline(self):
        path = self.write_config()
        result = schema.execute(
            'mutation { launchRun(input: {configPath: "%s", pipeline: "pde", workers: 1}) '
            '{ message run { pipeline } } }' % path.as_posix()
        )
        self.assertIsNone(result.errors)
        self.assertEqual(result.data["launchRun"]["message"], "Run queued.")
        run = ExperimentRun.objects.get()
        self.assertEqual(run.pipeline, "pde")
        self.assertEqual(run.workers, 1)
        self.assertEqual(run.status, ExperimentRun.Status.PASSED)
        self.assertTrue((self.out / "ledger.json").exists())

    def test_launch_run_rejects_unknown_pipelines(self):
        path = self.write_config()
        result = schema.execute(
            'mutation { launchRun(input: {configPath: "%s", pipeline: "bogus"}) { message } }' % path.as_posix()
        )
        self.assertIn("Unknown pipeline", result.errors[0].message)
        self.assertFalse(ExperimentRun.objects.exists())

    def test_invalid_config_is_a_command_error(self):
        path = self.root / "broken.toml"
        path.write_text("[params]\nn_particles = 0\n", encoding="utf-8")
        with self.assertRaises(CommandError) as caught:
            self.run_command("simulate", path)
        self.assertIn("params.n_particles", str(caught.exception))

    def test_required_hypothesis_stops_the_run(self):
        growing = '[diffusion]\nkind = "power"\nc = 0.5\nexponent = 1.0\n'
        path = self.write_config(require="true", extra=growing)
        with self.assertRaises(CommandError) as caught:
            self.run_command("pde", path)
        self.assertIn("hypothesis fails at (n1, n2, n3)", str(caught.exception))
        self.assertEqual(ExperimentRun.objects.get().status, ExperimentRun.Status.ERROR)
        self.assertTrue(artifacts.is_incomplete(self.out))

    def test_failing_hypothesis_only_warns_by_default(self):
        growing = '[diffusion]\nkind = "power"\nc = 0.5\nexponent = 1.0\n'
        path = self.write_config(extra=growing)
        with self.assertLogs("kinetics.runner", "WARNING") as logs:
            self.run_command("pde", path)
        self.assertTrue(any("hypothesis fails" in line for line in logs.output))
        self.assertTrue((self.out / "macro_counts.csv").exists())


class GraphQLTests(TestCase):
    def test_runs_are_listed_and_filtered(self):
        ExperimentRun.objects.create(pipeline="simulate", config_hash="abc123", seed=1)
        ExperimentRun.objects.create(pipeline="pde", config_hash="def456", seed=2)
        result = schema.execute('{ allRuns(pipeline: "pde") { edges { node { pipeline configHash } } } }')
        self.assertIsNone(result.errors)
        edges = result.data["allRuns"]["edges"]
        self.assertEqual(len(edges), 1)
        self.assertEqual(edges[0]["node"]["configHash"], "def456")

    def test_hypothesis_query(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "h.toml"
            path.write_text("[params]\nm_max = 10\n", encoding="utf-8")
            result = schema.execute(
                '{ hypothesis(configPath: "%s") { holds worstTriple worstRatio constantAlphaEquivalent } }'
                % path.as_posix()
            )
        self.assertIsNone(result.errors)
        report = result.data["hypothesis"]
        self.assertTrue(report["holds"])
        self.assertEqual(report["worstTriple"], [1, 9, 1])
        self.assertAlmostEqual(report["worstRatio"], 0.9)
        self.assertTrue(report["constantAlphaEquivalent"])

    def test_bad_config_path_is_reported(self):
        result = schema.execute('{ hypothesis(configPath: "/nonexistent/run.toml") { holds } }')
        self.assertIn("Invalid config", result.errors[0].message)
