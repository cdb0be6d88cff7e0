import json
import tempfile
import unittest
import uuid
from datetime import datetime
from pathlib import Path
from unittest.mock import Mock

import numpy as np
from click.testing import CliRunner

from core.budget import ModelGraph, graph_macs
from core.cli_app import EXIT_BUDGET_FAIL, EXIT_ERROR, EXIT_OK, CLIApp, RunConfig, load_view_set
from core.harness import Harness
from core.harness_interface import EvaluateResult, FitOptions, MacsResult, SampleResult
from core.image_io import save_png
from core.metrics import MetricReport
from core.trace_id_handler import TraceIdHandler
from core.views import Image, view_presets
from shared.errors import InvalidViewSpec, UnmatchedIds
from shared.logger import Logger, TraceIdProvider
from shared.models import LogEntry, LogSeverity
from shared.run_journal_mock import RunJournalMock
from shared.settings import HarnessSettings

_HEADER = "image_id,path,mos,split,exclusive,categories\n"


def _graph_document(name, macs):
    return json.dumps({"name": name, "input": [8, 8, 3], "layers": [{"kind": "opaque", "macs": macs}]})


class TestCLISurface(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.root = Path(self._tmp.name)
        self.harness_mock = Mock(spec=Harness)
        self.logger_mock = Mock(spec=Logger)
        self.cli = CLIApp(self.harness_mock, self.logger_mock, HarnessSettings(seed=7, workers=3), "1.2.3")
        self.runner = CliRunner()
        self.manifest = self.root / "manifest.csv"
        self.manifest.write_text(_HEADER)
        self.predictions = self.root / "pred.csv"
        self.predictions.write_text("image_id,score\n")

    def tearDown(self):
        self._tmp.cleanup()

    def invoke(self, *args):
        return self.runner.invoke(self.cli.App, [str(a) for a in args])

    def logged(self, severity):
        return [c.args for c in self.logger_mock.log.call_args_list if c.args[0] == severity]

    def test_version(self):
        result = self.invoke("--version")
        self.assertEqual(result.exit_code, 0)
        self.assertIn("1.2.3", result.output)

    def test_evaluate_json(self):
        report = MetricReport(mae=0.0, rmse=0.0, plcc=1.0, srcc=1.0, krcc=1.0, n=3)
        self.harness_mock.evaluate.return_value = EvaluateResult(
            message="Evaluated 3 predictions (test)", log_entry_id=1, outputs=["out/metrics.json"], report=report
        )

        result = self.invoke(
            "evaluate", "--manifest", self.manifest, "--predictions", self.predictions,
            "--split", "test", "--out", self.root / "out", "--format", "json",
        )

        self.assertEqual(result.exit_code, EXIT_OK)
        self.assertEqual(json.loads(result.output)["report"]["krcc"], 1.0)
        self.harness_mock.evaluate.assert_called_once_with(
            self.manifest, self.predictions, self.root / "out", "test", False
        )
        (severity, message, run_info), = self.logged(LogSeverity.INFO)
        self.assertEqual(message, "evaluate finished with exit code 0")
        self.assertEqual(run_info.command, "evaluate")
        self.assertEqual(run_info.outputs, ["out/metrics.json"])
        self.assertEqual(run_info.arguments["split"], "test")

    def test_evaluate_csv(self):
        report = MetricReport(mae=0.5, rmse=0.25, plcc=1.0, srcc=1.0, krcc=1.0, n=3)
        self.harness_mock.evaluate.return_value = EvaluateResult(message="ok", log_entry_id=1, report=report)

        result = self.invoke(
            "evaluate", "--manifest", self.manifest, "--predictions", self.predictions, "--format", "csv"
        )

        self.assertEqual(result.output, "mae,rmse,plcc,srcc,krcc,n\n0.5,0.25,1.0,1.0,1.0,3\n")

    def test_harness_error_exits_with_one(self):
        self.harness_mock.evaluate.side_effect = UnmatchedIds(missing=["t6"])

        result = self.invoke("evaluate", "--manifest", self.manifest, "--predictions", self.predictions)

        self.assertEqual(result.exit_code, EXIT_ERROR)
        self.assertIn("error:", result.output)
        self.assertIn("t6", result.output)
        (_, message, run_info), = self.logged(LogSeverity.ERROR)
        self.assertTrue(message.startswith("evaluate failed"))
        self.assertEqual(run_info.exit_code, EXIT_ERROR)

    def test_unexpected_error_reports_trace_id(self):
        self.harness_mock.evaluate.side_effect = RuntimeError("boom")

        result = self.invoke("evaluate", "--manifest", self.manifest, "--predictions", self.predictions)

        self.assertEqual(result.exit_code, EXIT_ERROR)
        self.assertIn("internal error, trace_id [", result.output)
        self.assertNotIn("boom", result.output)
        (_, message, _), = self.logged(LogSeverity.ERROR)
        self.assertIn("RuntimeError('boom')", message)

    def test_macs_budget_failure_exits_with_two(self):
        graph_path = self.root / "graph.json"
        graph_path.write_text(_graph_document("vit", 359_740_000_000))
        budget = graph_macs(ModelGraph.model_validate_json(graph_path.read_text()))
        self.harness_mock.macs.return_value = MacsResult(message="over", log_entry_id=1, budget=budget)

        result = self.invoke("macs", "--graph", graph_path, "--budget", "50", "--strict")

        self.assertEqual(result.exit_code, EXIT_BUDGET_FAIL)
        self.assertIn("FAIL", result.output)
        graph, _, budget_gmacs, strict = self.harness_mock.macs.call_args.args
        self.assertEqual(graph.name, "vit")
        self.assertEqual((budget_gmacs, strict), (50.0, True))
        (severity, message, _), = self.logged(LogSeverity.WARNING)
        self.assertEqual(message, "macs finished with exit code 2")

    def test_invalid_graph_document(self):
        graph_path = self.root / "graph.json"
        graph_path.write_text('{"name": "x", "input": [8, 8, 3], "layers": [{"kind": "lstm"}]}')
        result = self.invoke("macs", "--graph", graph_path)
        self.assertEqual(result.exit_code, EXIT_ERROR)
        self.harness_mock.macs.assert_not_called()

    def test_sample_failures_exit_with_one(self):
        self.harness_mock.sample.return_value = SampleResult(
            message="Wrote 1 views for 1 images, 1 images failed",
            log_entry_id=1,
            written=1,
            failures={"broken": "cannot decode"},
        )

        result = self.invoke("sample", "--images", self.root, "--views", "baseline")

        self.assertEqual(result.exit_code, EXIT_ERROR)
        self.assertIn("broken: cannot decode", result.output)
        image_dir, view_set, _, seed, workers = self.harness_mock.sample.call_args.args
        self.assertEqual(view_set, view_presets()["baseline"])
        self.assertIsNone(seed)
        self.assertEqual(workers, 3)

    def test_unknown_view_set(self):
        result = self.invoke("sample", "--images", self.root, "--views", "no_such_preset")
        self.assertEqual(result.exit_code, EXIT_ERROR)
        self.assertIn("neither a preset", result.output)

    def test_fit_options(self):
        self.harness_mock.fit.side_effect = UnmatchedIds(missing=["x"])

        self.invoke(
            "fit", "--manifest", self.manifest, "--views", "three_branch", "--model", "ridge",
            "--alpha", "0.1", "--alpha", "10", "--pseudo-split", "validation", "--pseudo-weight", "0.5",
        )

        manifest, _, view_set, options, features, split, seed, workers = self.harness_mock.fit.call_args.args
        self.assertEqual(view_set.name, "three_branch")
        self.assertEqual(
            options,
            FitOptions(
                model_type="ridge", alpha_grid=[0.1, 10.0], pseudo_split="validation", pseudo_weight=0.5
            ),
        )
        self.assertIsNone(features)
        self.assertEqual((split, seed, workers), ("train", 7, 3))

    def test_predict_seed(self):
        model = self.root / "model.json"
        model.write_text("{}")
        self.harness_mock.predict.side_effect = UnmatchedIds(missing=["x"])

        self.invoke("predict", "--model", model, "--images", self.root)
        self.invoke("predict", "--model", model, "--images", self.root, "--samples", "4")
        self.invoke("predict", "--model", model, "--images", self.root, "--seed", "9")

        seeds = [c.args[5] for c in self.harness_mock.predict.call_args_list]
        self.assertEqual(seeds, [None, 7, 9])

    def test_history(self):
        entry = LogEntry(
            timestamp=datetime(2024, 5, 1, 12, 0, 0),
            entry_id=3,
            severity=LogSeverity.INFO,
            trace_id=uuid.uuid4(),
            message="rank finished with exit code 0",
        )
        self.harness_mock.history.return_value = [entry]

        result = self.invoke("history", "--severity", "INFO", "--runs-only", "--page-size", "5")

        self.assertEqual(result.exit_code, EXIT_OK)
        self.assertIn("rank finished with exit code 0", result.output)
        filters, paging = self.harness_mock.history.call_args.args
        self.assertTrue(filters.runs_only)
        self.assertEqual(filters.severity, [LogSeverity.INFO])
        self.assertEqual((paging.page, paging.page_size), (1, 5))

    def test_run_config_seed_range(self):
        self.assertEqual(RunConfig(command="fit", seed=2**64 - 1).fmt, "text")
        with self.assertRaises(ValueError):
            RunConfig(command="fit", seed=2**64)

    def test_load_view_set_from_file(self):
        path = self.root / "views.json"
        path.write_text('{"name": "mine", "views": [{"kind": "resize", "w": 4, "h": 4}]}')
        self.assertEqual(load_view_set(str(path)).name, "mine")
        with self.assertRaises(InvalidViewSpec):
            load_view_set(str(self.root / "missing.json"))


class TestCLIEndToEnd(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.root = Path(self._tmp.name)
        self.journal = RunJournalMock()
        logger = Logger(TraceIdProvider(TraceIdHandler.get_current_trace_id), self.journal)
        self.cli = CLIApp(Harness(logger), logger, HarnessSettings(seed=0, workers=2), "0.1.0")
        self.runner = CliRunner()

        lines = []
        for k in range(12):
            rng = np.random.default_rng(k)
            level = 50 + 15 * k
            pixels = np.clip(level + rng.normal(0.0, 10.0, (24, 32, 3)), 0, 255).astype(np.uint8)
            save_png(Image(pixels=pixels), self.root / f"img{k:02d}.png")
            split = "train" if k < 9 else "test"
            lines.append(f"img{k:02d},img{k:02d}.png,{level / 255!r},{split},{'true' if k == 11 else 'false'},\n")
        self.manifest = self.root / "manifest.csv"
        self.manifest.write_text(_HEADER + "".join(lines))
        self.views = self.root / "views.json"
        self.views.write_text('{"name": "small", "views": [{"kind": "resize", "w": 16, "h": 16}]}')

    def tearDown(self):
        self._tmp.cleanup()

    def invoke(self, *args):
        return self.runner.invoke(self.cli.App, [str(a) for a in args])

    def test_macs_gate(self):
        for name, macs, code in (("mobile", 46_730_000_000, 0), ("vit", 359_740_000_000, 2), ("base", 4_200_000_000, 0)):
            with self.subTest(name=name):
                graph = self.root / f"{name}.json"
                graph.write_text(_graph_document(name, macs))
                result = self.invoke("macs", "--graph", graph, "--out", self.root / name)
                self.assertEqual(result.exit_code, code)
                self.assertTrue((self.root / name / "budget.json").is_file())

        exact = self.root / "exact.json"
        exact.write_text(_graph_document("exact", 50_000_000_000))
        self.assertEqual(self.invoke("macs", "--graph", exact, "--out", self.root / "e").exit_code, 0)
        self.assertEqual(self.invoke("macs", "--graph", exact, "--strict", "--out", self.root / "e").exit_code, 2)

    def test_fit_then_predict_then_evaluate(self):
        fit = self.invoke(
            "fit", "--manifest", self.manifest, "--views", self.views, "--model", "ridge", "--out", self.root / "model"
        )
        self.assertEqual(fit.exit_code, 0, fit.output)

        predict = self.invoke(
            "predict", "--model", self.root / "model" / "model.json", "--images", self.root,
            "--out", self.root / "pred", "--format", "csv",
        )
        self.assertEqual(predict.exit_code, 0, predict.output)
        rows = predict.output.splitlines()
        self.assertEqual(rows[0], "image_id,score")
        self.assertEqual(len(rows), 13)

        test_predictions = self.root / "test_pred.csv"
        test_predictions.write_text(
            "\n".join([rows[0]] + [r for r in rows[1:] if int(r[3:5]) >= 9]) + "\n"
        )
        evaluate = self.invoke(
            "evaluate", "--manifest", self.manifest, "--predictions", test_predictions,
            "--split", "test", "--out", self.root / "eval", "--format", "json",
        )
        self.assertEqual(evaluate.exit_code, 0, evaluate.output)
        self.assertEqual(json.loads(evaluate.output)["report"]["n"], 3)

        exclusive = self.invoke(
            "evaluate", "--manifest", self.manifest, "--predictions", test_predictions,
            "--split", "test", "--exclusive-only", "--out", self.root / "eval", "--format", "json",
        )
        self.assertEqual(exclusive.exit_code, EXIT_ERROR)

    def test_evaluate_missing_prediction(self):
        predictions = self.root / "pred.csv"
        predictions.write_text("image_id,score\nimg09,0.5\nimg10,0.6\n")
        result = self.invoke("evaluate", "--manifest", self.manifest, "--predictions", predictions, "--split", "test")
        self.assertEqual(result.exit_code, EXIT_ERROR)
        self.assertIn("img11", result.output)

    def test_sample_reruns_are_byte_identical(self):
        for run in ("a", "b"):
            result = self.invoke(
                "sample", "--images", self.root, "--views", "grid_mini_patch", "--seed", "42", "--out", self.root / run
            )
            self.assertEqual(result.exit_code, EXIT_ERROR)

        views = self.root / "grid.json"
        views.write_text('{"name": "grid", "views": [{"kind": "grid_sample", "grid_n": 2, "fragment_n": 8}]}')
        for run in ("c", "d"):
            result = self.invoke("sample", "--images", self.root, "--views", views, "--seed", "42", "--out", self.root / run)
            self.assertEqual(result.exit_code, EXIT_OK, result.output)
        for k in range(12):
            name = f"img{k:02d}__0.png"
            self.assertEqual((self.root / "c" / name).read_bytes(), (self.root / "d" / name).read_bytes())

    def test_rank_metrics_table(self):
        table = self.root / "metrics.csv"
        table.write_text(
            "team,mae,rmse,plcc,srcc,krcc,baseline\n"
            "SJTU,0.0418,0.0615,0.7985,0.8463,0.6573,no\n"
            "GS-PIQA,0.0430,0.0607,0.7925,0.8297,0.6399,no\n"
            "CIPLAB,0.0445,0.0638,0.7995,0.8354,0.6419,no\n"
            "EQCNet,0.0438,0.0621,0.7682,0.7954,0.6055,no\n"
            "Challenge Baseline,0.0502,0.0733,0.6881,0.7462,0.5537,yes\n"
        )
        result = self.invoke("rank", "--submissions", table, "--out", self.root / "rank", "--format", "json")

        self.assertEqual(result.exit_code, EXIT_OK, result.output)
        rows = json.loads(result.output)["leaderboard"]["rows"]
        self.assertEqual([r["team"] for r in rows], ["SJTU", "GS-PIQA", "CIPLAB", "EQCNet"])

    def test_runs_are_journaled(self):
        self.invoke("stats", "--manifest", self.manifest, "--out", self.root / "stats")
        self.invoke("evaluate", "--manifest", self.root / "manifest.csv", "--predictions", self.manifest)

        result = self.invoke("history", "--runs-only", "--format", "csv")

        lines = result.output.splitlines()
        self.assertEqual(lines[0], "entry_id,timestamp,severity,trace_id,message")
        self.assertIn("evaluate failed", lines[1])
        self.assertIn("stats finished with exit code 0", lines[2])
        runs = [e for e in self.journal.logs if e.run_info is not None]
        self.assertEqual([e.run_info.command for e in runs], ["stats", "evaluate", "history"])
        self.assertEqual(len({e.trace_id for e in runs}), 3)


if __name__ == "__main__":
    unittest.main()
