import csv
import io
from pathlib import Path
from typing import Callable, Dict, Iterable, Literal, Optional, Sequence

import click
from pydantic import BaseModel, Field

from core import report as render
from core.budget import DEFAULT_BUDGET_GMACS, ModelGraph
from core.dataset import Split
from core.harness_interface import FitOptions, HistoryResult, IHarness, RunResult
from core.ranking import LEADERBOARD_COLUMNS
from core.trace_id_handler import TraceIdHandler
from core.views import ViewSet, view_presets
from shared.errors import HarnessError, InvalidViewSpec
from shared.logger import Logger
from shared.models import LogSeverity, LogsFilter, Paging, RunInfo
from shared.settings import MAX_SEED, HarnessSettings

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_BUDGET_FAIL = 2

_FORMATS = click.Choice(["text", "json", "csv"])
_SPLITS = click.Choice([s.value for s in Split])
_SEED = click.IntRange(0, MAX_SEED)
_EXISTING = click.Path(exists=True, path_type=Path)
_METRICS = ("mae", "rmse", "plcc", "srcc", "krcc")


class RunConfig(BaseModel):
    """Resolved settings of one invocation: flags first, then the environment."""

    command: str
    seed: int = Field(..., ge=0, le=MAX_SEED)
    out_dir: Optional[Path] = None
    fmt: Literal["text", "json", "csv"] = "text"
    arguments: Dict[str, str] = {}


class _Rendering(BaseModel):
    text: Callable[[RunResult], str]
    csv_header: Sequence[str]
    csv_rows: Callable[[RunResult], Iterable[Sequence[object]]]


def _csv_text(header: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def load_view_set(value: str) -> ViewSet:
    """A preset name or the path of a ViewSet JSON document."""
    presets = view_presets()
    if value in presets:
        return presets[value]
    path = Path(value)
    if not path.is_file():
        raise InvalidViewSpec(f"{value!r} is neither a preset ({', '.join(presets)}) nor a file")
    return ViewSet.model_validate_json(path.read_text(encoding="utf-8"))


def _common_options(fn):
    fn = click.option("--out", "out_dir", type=click.Path(path_type=Path), default=Path("out"),
                      show_default=True, help="Directory for written artifacts")(fn)
    fn = click.option("--format", "fmt", type=_FORMATS, default="text", show_default=True,
                      help="Rendering printed on stdout")(fn)
    return fn


class CLIApp:
    def __init__(self, harness: IHarness, logger: Logger, settings: HarnessSettings, version: str):
        self._harness = harness
        self._logger = logger
        self._settings = settings

        @click.group(help="Benchmark harness for no-reference quality assessment of UHD images.")
        @click.version_option(version, prog_name="uhdiqa")
        def app():
            pass

        self.App = app
        self._setup_commands()

    def _workers(self, workers: Optional[int]) -> int:
        return workers if workers is not None else self._settings.workers

    def _seed(self, seed: Optional[int]) -> int:
        return seed if seed is not None else self._settings.seed

    def _run(
        self,
        command: str,
        fmt: str,
        action: Callable[[], RunResult],
        rendering: _Rendering,
        exit_code_of: Callable[[RunResult], int] = lambda _: EXIT_OK,
    ) -> None:
        ctx = click.get_current_context()
        config = RunConfig(
            command=command,
            seed=self._seed(ctx.params.get("seed")),
            out_dir=ctx.params.get("out_dir"),
            fmt=fmt,
            arguments={k: str(v) for k, v in ctx.params.items() if v not in (None, (), [])},
        )

        with TraceIdHandler.run_scope() as trace_id:
            try:
                result = action()
            except (HarnessError, ValueError, OSError) as e:
                self._logger.log(
                    LogSeverity.ERROR,
                    f"{command} failed: {e}",
                    RunInfo(command=command, arguments=config.arguments, exit_code=EXIT_ERROR),
                )
                click.echo(f"error: {e}", err=True)
                ctx.exit(EXIT_ERROR)
            except Exception as e:
                self._logger.log(
                    LogSeverity.ERROR,
                    f"Unhandled exception in {command}: {e!r}",
                    RunInfo(command=command, arguments=config.arguments, exit_code=EXIT_ERROR),
                )
                click.echo(f"internal error, trace_id [{trace_id}]", err=True)
                ctx.exit(EXIT_ERROR)

            exit_code = exit_code_of(result)
            self._logger.log(
                LogSeverity.INFO if exit_code == EXIT_OK else LogSeverity.WARNING,
                f"{command} finished with exit code {exit_code}",
                RunInfo(command=command, arguments=config.arguments, exit_code=exit_code, outputs=result.outputs),
            )

        if config.fmt == "json":
            click.echo(result.model_dump_json(indent=2))
        elif config.fmt == "csv":
            click.echo(_csv_text(rendering.csv_header, rendering.csv_rows(result)), nl=False)
        else:
            click.echo(rendering.text(result))
        ctx.exit(exit_code)

    def _setup_commands(self):
        @self.App.command(help="Score a predictions CSV against manifest MOS.")
        @click.option("--manifest", type=_EXISTING, required=True)
        @click.option("--predictions", type=_EXISTING, required=True)
        @click.option("--split", type=_SPLITS, default=None)
        @click.option("--exclusive-only", is_flag=True, help="Restrict to the exclusive subset of --split")
        @_common_options
        def evaluate(manifest, predictions, split, exclusive_only, out_dir, fmt):
            self._run(
                "evaluate",
                fmt,
                lambda: self._harness.evaluate(manifest, predictions, out_dir, split, exclusive_only),
                _Rendering(
                    text=lambda r: render.render_metrics(r.report, r.message),
                    csv_header=(*_METRICS, "n"),
                    csv_rows=lambda r: [[repr(getattr(r.report, m)) for m in _METRICS] + [r.report.n]],
                ),
            )

        @self.App.command(help="Rank submissions by the mean of their five metric ranks.")
        @click.option("--manifest", type=_EXISTING, default=None)
        @click.option("--submissions", type=_EXISTING, required=True,
                      help="Directory of <team>.csv prediction files, or a per-team metrics CSV")
        @click.option("--split", type=_SPLITS, default=None)
        @click.option("--baseline", "baseline_teams", multiple=True, help="Team shown but not ranked")
        @click.option("--include-baseline", is_flag=True)
        @click.option("--workers", type=click.IntRange(min=1), default=None)
        @_common_options
        def rank(manifest, submissions, split, baseline_teams, include_baseline, workers, out_dir, fmt):
            self._run(
                "rank",
                fmt,
                lambda: self._harness.rank(
                    manifest,
                    submissions,
                    out_dir,
                    split,
                    baseline_teams,
                    include_baseline,
                    self._workers(workers),
                ),
                _Rendering(
                    text=lambda r: render.render_leaderboard(r.leaderboard),
                    csv_header=LEADERBOARD_COLUMNS,
                    csv_rows=lambda r: [
                        [row.team, *(repr(row.ranks[m]) for m in _METRICS), repr(row.score)]
                        for row in r.leaderboard.rows
                    ],
                ),
            )

        @self.App.command(help="Scatter points, quadratic fit and MOS density artifacts.")
        @click.option("--manifest", type=_EXISTING, required=True)
        @click.option("--predictions", type=_EXISTING, required=True)
        @click.option("--split", type=_SPLITS, default=None)
        @click.option("--exclusive-only", is_flag=True)
        @click.option("--bins", type=click.IntRange(min=2), default=20, show_default=True)
        @click.option("--method", type=click.Choice(["histogram", "kde"]), default="histogram", show_default=True)
        @click.option("--svg", is_flag=True, help="Also write SVG plots")
        @_common_options
        def report(manifest, predictions, split, exclusive_only, bins, method, svg, out_dir, fmt):
            self._run(
                "report",
                fmt,
                lambda: self._harness.report(
                    manifest, predictions, out_dir, split, exclusive_only, bins, method, svg
                ),
                _Rendering(
                    text=lambda r: r.message,
                    csv_header=("a0", "a1", "a2"),
                    csv_rows=lambda r: [[repr(c) for c in r.coefficients]],
                ),
            )

        @self.App.command(help="Materialize a ViewSet over every image of a directory.")
        @click.option("--images", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
        @click.option("--views", required=True, help="Preset name or ViewSet JSON file")
        @click.option("--seed", type=_SEED, default=None,
                      help="Reseed stochastic views per image; the ViewSet's own seeds are used when omitted")
        @click.option("--workers", type=click.IntRange(min=1), default=None)
        @_common_options
        def sample(images, views, seed, workers, out_dir, fmt):
            self._run(
                "sample",
                fmt,
                lambda: self._harness.sample(images, load_view_set(views), out_dir, seed, self._workers(workers)),
                _Rendering(
                    text=lambda r: "\n".join(
                        [r.message] + [f"{image_id}: {error}" for image_id, error in r.failures.items()]
                    ),
                    csv_header=("path",),
                    csv_rows=lambda r: [[path] for path in r.outputs],
                ),
                exit_code_of=lambda r: EXIT_ERROR if r.failures else EXIT_OK,
            )

        @self.App.command(help="Count MACs of a layer graph and gate it against the budget.")
        @click.option("--graph", type=_EXISTING, required=True)
        @click.option("--budget", "budget_gmacs", type=click.FloatRange(min=0), default=DEFAULT_BUDGET_GMACS,
                      show_default=True, help="Budget in GMACs")
        @click.option("--strict", is_flag=True, help="Require total < budget instead of <=")
        @_common_options
        def macs(graph, budget_gmacs, strict, out_dir, fmt):
            self._run(
                "macs",
                fmt,
                lambda: self._harness.macs(
                    ModelGraph.model_validate_json(graph.read_text(encoding="utf-8")),
                    out_dir,
                    budget_gmacs,
                    strict,
                ),
                _Rendering(
                    text=lambda r: render.render_budget(r.budget),
                    csv_header=("index", "kind", "macs", "params"),
                    csv_rows=lambda r: [[c.index, c.kind, c.macs, c.params] for c in r.budget.layers],
                ),
                exit_code_of=lambda r: EXIT_OK if r.budget.passed else EXIT_BUDGET_FAIL,
            )

        @self.App.command(help="Fit a ridge or ensemble predictor on manifest rows.")
        @click.option("--manifest", type=_EXISTING, required=True)
        @click.option("--views", required=True, help="Preset name or ViewSet JSON file")
        @click.option("--features", type=_EXISTING, default=None, help="Precomputed feature table CSV")
        @click.option("--split", type=_SPLITS, default=Split.TRAIN.value, show_default=True)
        @click.option("--model", "model_type", type=click.Choice(["ridge", "ensemble"]), default="ensemble",
                      show_default=True)
        @click.option("--group-by", type=click.Choice(["family", "view"]), default="family", show_default=True)
        @click.option("--alpha", "alphas", type=click.FloatRange(min=0, min_open=True), multiple=True,
                      help="Alpha grid; 13 log-spaced values over 1e-6..1e6 when omitted")
        @click.option("--split-fraction", type=click.FloatRange(0, 1, min_open=True, max_open=True),
                      default=0.8, show_default=True)
        @click.option("--folds", type=click.IntRange(min=2), default=None)
        @click.option("--weight", "member_weights", type=click.FloatRange(min=0), multiple=True)
        @click.option("--pseudo-split", type=_SPLITS, default=None, help="Split to pseudo-label with the fitted model")
        @click.option("--pseudo-weight", type=click.FloatRange(min=0), default=1.0, show_default=True)
        @click.option("--strict-pseudo", is_flag=True, help="Fail when the pseudo split is empty")
        @click.option("--seed", type=_SEED, default=None)
        @click.option("--workers", type=click.IntRange(min=1), default=None)
        @_common_options
        def fit(
            manifest,
            views,
            features,
            split,
            model_type,
            group_by,
            alphas,
            split_fraction,
            folds,
            member_weights,
            pseudo_split,
            pseudo_weight,
            strict_pseudo,
            seed,
            workers,
            out_dir,
            fmt,
        ):
            options = FitOptions(
                model_type=model_type,
                group_by=group_by,
                alpha_grid=list(alphas) or None,
                split_fraction=split_fraction,
                folds=folds,
                member_weights=list(member_weights) or None,
                pseudo_split=pseudo_split,
                pseudo_weight=pseudo_weight,
                strict_pseudo=strict_pseudo,
            )
            self._run(
                "fit",
                fmt,
                lambda: self._harness.fit(
                    manifest,
                    out_dir,
                    load_view_set(views),
                    options,
                    features,
                    split,
                    self._seed(seed),
                    self._workers(workers),
                ),
                _Rendering(
                    text=lambda r: r.message,
                    csv_header=("model_type", "rows", "pseudo_rows", "alphas"),
                    csv_rows=lambda r: [[r.model_type, r.rows, r.pseudo_rows, ";".join(repr(a) for a in r.alphas)]],
                ),
            )

        @self.App.command(help="Predict quality scores with a fitted model.")
        @click.option("--model", "model_path", type=_EXISTING, required=True)
        @click.option("--images", type=click.Path(exists=True, file_okay=False, path_type=Path), default=None)
        @click.option("--features", type=_EXISTING, default=None)
        @click.option("--samples", type=click.IntRange(min=1), default=1, show_default=True,
                      help="Reseedings of stochastic views averaged per image")
        @click.option("--seed", type=_SEED, default=None,
                      help="Reseed stochastic views; one sample without a seed uses the model's stored seeds")
        @click.option("--workers", type=click.IntRange(min=1), default=None)
        @_common_options
        def predict(model_path, images, features, samples, seed, workers, out_dir, fmt):
            self._run(
                "predict",
                fmt,
                lambda: self._harness.predict(
                    model_path,
                    out_dir,
                    images,
                    features,
                    samples,
                    self._seed(seed) if seed is not None or samples > 1 else None,
                    self._workers(workers),
                ),
                _Rendering(
                    text=lambda r: r.message,
                    csv_header=("image_id", "score"),
                    csv_rows=lambda r: [[i, repr(s)] for i, s in zip(r.ids, r.scores)],
                ),
            )

        @self.App.command(help="Split counts, MOS densities and exclusive-subset audit.")
        @click.option("--manifest", type=_EXISTING, required=True)
        @click.option("--bins", type=click.IntRange(min=2), default=20, show_default=True)
        @click.option("--method", type=click.Choice(["histogram", "kde"]), default="histogram", show_default=True)
        @click.option("--subset", "subsets", multiple=True,
                      help="overall, exclusive or a split name; overall plus exclusive when omitted")
        @click.option("--mos-range", type=(float, float), default=None)
        @click.option("--svg", is_flag=True)
        @_common_options
        def stats(manifest, bins, method, subsets, mos_range, svg, out_dir, fmt):
            self._run(
                "stats",
                fmt,
                lambda: self._harness.stats(
                    manifest, out_dir, bins, method, list(subsets) or None, mos_range, svg
                ),
                _Rendering(
                    text=lambda r: "\n".join(
                        [r.message] + [f"{image_id}: {problem}" for image_id, problem in r.audit]
                    ),
                    csv_header=("split", "count", "exclusive"),
                    csv_rows=lambda r: [
                        [split.value, count, r.stats.exclusive_counts[split]]
                        for split, count in r.stats.counts.items()
                    ],
                ),
            )

        @self.App.command(help="List run journal entries, newest first.")
        @click.option("--trace-id", type=click.UUID, default=None)
        @click.option("--severity", "severities", type=click.Choice(LogSeverity.as_list()), multiple=True)
        @click.option("--runs-only", is_flag=True, help="Only command summaries")
        @click.option("--page", type=click.IntRange(min=1), default=1, show_default=True)
        @click.option("--page-size", type=click.IntRange(min=1), default=20, show_default=True)
        @click.option("--format", "fmt", type=_FORMATS, default="text", show_default=True)
        def history(trace_id, severities, runs_only, page, page_size, fmt):
            filters = LogsFilter(
                trace_id=trace_id,
                runs_only=runs_only,
                severity=list(severities) or LogSeverity.as_list(),
            )
            paging = Paging(page=page, page_size=page_size)

            def action() -> HistoryResult:
                entries = self._harness.history(filters, paging)
                return HistoryResult(message=f"{len(entries)} journal entries", log_entry_id=0, entries=entries)

            self._run(
                "history",
                fmt,
                action,
                _Rendering(
                    text=lambda r: render.render_history(r.entries),
                    csv_header=("entry_id", "timestamp", "severity", "trace_id", "message"),
                    csv_rows=lambda r: [
                        [e.entry_id, e.timestamp.isoformat(), e.severity.value, e.trace_id, e.message]
                        for e in r.entries
                    ],
                ),
            )
