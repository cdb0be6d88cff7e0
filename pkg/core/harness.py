from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

from core import metrics, report as render
from core.budget import ModelGraph, graph_macs
from core.dataset import ManifestEntry, Split, audit_exclusive, load_manifest, split_stats, write_stats_csv
from core.features import FeatureTable, extract_features, load_feature_table, write_feature_table
from core.harness_interface import (
    EvaluateResult,
    FitOptions,
    FitResult,
    IHarness,
    MacsResult,
    PredictResult,
    RankResult,
    ReportResult,
    SampleResult,
    StatsResult,
)
from core.image_io import iter_image_files, load_image, save_png
from core.predictor import (
    SavedModel,
    alpha_search,
    build_ensemble,
    load_model,
    multi_sample_predict,
    pseudo_label_finetune,
    save_model,
)
from core.ranking import Submission, challenge_score, load_submissions_csv, write_leaderboard_csv
from core.seeding import derive_seed
from core.views import ViewSet, materialize_view_set, reseed
from shared.errors import HarnessError, UnmatchedIds
from shared.logger import Logger
from shared.models import LogEntry, LogsFilter, Paging

T = TypeVar("T")
R = TypeVar("R")


def _ordered_map(fn: Callable[[T], R], items: Sequence[T], workers: int) -> List[R]:
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


class Harness(IHarness):
    def __init__(self, logger: Logger):
        self._logger = logger

    def evaluate(
        self,
        manifest: Path,
        predictions: Path,
        out_dir: Path,
        split: Optional[str] = None,
        exclusive_only: bool = False,
    ) -> EvaluateResult:
        entries = load_manifest(manifest)
        ps = metrics.join_predictions(entries, metrics.load_predictions(predictions), split, exclusive_only)
        report = metrics.evaluate(ps)

        out_dir.mkdir(parents=True, exist_ok=True)
        report_path = out_dir / "metrics.json"
        render.write_json(report, report_path)

        scope = f"{split or 'all'}{' exclusive' if exclusive_only else ''}"
        message = f"Evaluated {report.n} predictions ({scope})"
        return EvaluateResult(
            message=message,
            log_entry_id=self._logger.info(message),
            outputs=[str(report_path)],
            report=report,
        )

    def rank(
        self,
        manifest: Optional[Path],
        submissions: Path,
        out_dir: Path,
        split: Optional[str] = None,
        baseline_teams: Sequence[str] = (),
        include_baseline: bool = False,
        workers: int = 1,
    ) -> RankResult:
        baseline_keys = {team.casefold() for team in baseline_teams}
        if submissions.is_dir():
            if manifest is None:
                raise ValueError("ranking prediction files needs a manifest")
            entries = load_manifest(manifest)
            files = sorted(submissions.glob("*.csv"))

            def score_file(path: Path) -> metrics.MetricReport:
                ps = metrics.join_predictions(entries, metrics.load_predictions(path), split)
                return metrics.evaluate(ps)

            reports = _ordered_map(score_file, files, workers)
            subs = [
                Submission(team=path.stem, report=rep, baseline=path.stem.casefold() in baseline_keys)
                for path, rep in zip(files, reports)
            ]
        else:
            subs = [
                s.model_copy(update={"baseline": s.baseline or s.team.casefold() in baseline_keys})
                for s in load_submissions_csv(submissions)
            ]

        board = challenge_score(subs, include_baseline=include_baseline)
        if board.has_ties:
            tied = ", ".join(row.team for row in board.rows if row.tied)
            self._logger.warning(f"Main score ties, shown in team-name order: {tied}")

        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, text_path, json_path = (
            out_dir / "leaderboard.csv",
            out_dir / "leaderboard.txt",
            out_dir / "leaderboard.json",
        )
        write_leaderboard_csv(board, csv_path)
        text_path.write_text(render.render_leaderboard(board), encoding="utf-8")
        render.write_json(board, json_path)

        message = f"Ranked {len(board.rows)} submissions, winner {board.rows[0].team}"
        return RankResult(
            message=message,
            log_entry_id=self._logger.info(message),
            outputs=[str(csv_path), str(text_path), str(json_path)],
            leaderboard=board,
        )

    def report(
        self,
        manifest: Path,
        predictions: Path,
        out_dir: Path,
        split: Optional[str] = None,
        exclusive_only: bool = False,
        bins: int = 20,
        method: str = "histogram",
        svg: bool = False,
    ) -> ReportResult:
        entries = load_manifest(manifest)
        ps = metrics.join_predictions(entries, metrics.load_predictions(predictions), split, exclusive_only)
        report = metrics.evaluate(ps)
        coeffs = metrics.poly2_fit(ps)
        curve = metrics.poly2_curve(coeffs, float(ps.q.min()), float(ps.q.max()))
        density = split_stats(entries, bins, method=method)

        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "metrics": out_dir / "metrics.json",
            "points": out_dir / "points.csv",
            "poly2": out_dir / "poly2.json",
            "curve": out_dir / "curve.csv",
            "density": out_dir / "density.csv",
        }
        render.write_json(report, paths["metrics"])
        render.write_points_csv(ps, paths["points"])
        render.write_json({"a0": coeffs[0], "a1": coeffs[1], "a2": coeffs[2]}, paths["poly2"])
        render.write_curve_csv(curve, paths["curve"])
        write_stats_csv(density, paths["density"])
        if svg:
            paths["scatter_svg"] = out_dir / "scatter.svg"
            paths["density_svg"] = out_dir / "density.svg"
            paths["scatter_svg"].write_text(render.scatter_svg(ps, curve), encoding="utf-8")
            paths["density_svg"].write_text(render.density_svg(density), encoding="utf-8")

        message = f"Report over {report.n} predictions, quadratic fit {coeffs[0]:.4g} + {coeffs[1]:.4g}q + {coeffs[2]:.4g}q^2"
        return ReportResult(
            message=message,
            log_entry_id=self._logger.info(message),
            outputs=[str(p) for p in paths.values()],
            report=report,
            coefficients=coeffs,
        )

    def sample(
        self,
        image_dir: Path,
        view_set: ViewSet,
        out_dir: Path,
        seed: Optional[int] = None,
        workers: int = 1,
    ) -> SampleResult:
        out_dir.mkdir(parents=True, exist_ok=True)

        def sample_one(item: Tuple[str, Path]) -> Tuple[str, List[str], Optional[str]]:
            image_id, path = item
            views = view_set if seed is None else reseed(view_set, derive_seed(seed, "sample", image_id))
            try:
                outputs = materialize_view_set(load_image(path), views)
            except HarnessError as e:
                return image_id, [], str(e)
            written = []
            for index, out in enumerate(outputs):
                target = out_dir / f"{image_id}__{index}.png"
                save_png(out, target)
                written.append(str(target))
            return image_id, written, None

        results = _ordered_map(sample_one, list(iter_image_files(image_dir)), workers)
        failures: Dict[str, str] = {}
        outputs: List[str] = []
        for image_id, written, error in results:
            outputs.extend(written)
            if error is not None:
                failures[image_id] = error
                self._logger.warning(f"{image_id}: {error}")

        message = f"Wrote {len(outputs)} views for {len(results) - len(failures)} images"
        if failures:
            message += f", {len(failures)} images failed"
        return SampleResult(
            message=message,
            log_entry_id=self._logger.info(message),
            outputs=outputs,
            written=len(outputs),
            failures=failures,
        )

    def macs(self, graph: ModelGraph, out_dir: Path, budget_gmacs: float, strict: bool = False) -> MacsResult:
        budget = graph_macs(graph, budget_gmacs, strict)

        out_dir.mkdir(parents=True, exist_ok=True)
        json_path, text_path = out_dir / "budget.json", out_dir / "budget.txt"
        render.write_json(budget, json_path)
        text_path.write_text(render.render_budget(budget), encoding="utf-8")

        verdict = "within" if budget.passed else "over"
        message = f"{graph.name}: {budget.total_gmacs:.4f} GMACs, {verdict} the {budget_gmacs:g} G budget"
        log = self._logger.info if budget.passed else self._logger.warning
        return MacsResult(
            message=message,
            log_entry_id=log(message),
            outputs=[str(json_path), str(text_path)],
            budget=budget,
        )

    def _feature_table(
        self,
        entries: Sequence[ManifestEntry],
        view_set: ViewSet,
        features: Optional[Path],
        workers: int,
    ) -> FeatureTable:
        ids = [e.image_id for e in entries]
        if features is None:
            vectors = _ordered_map(lambda e: extract_features(load_image(e.path), view_set), entries, workers)
            return FeatureTable.from_vectors(ids, vectors)

        table = load_feature_table(features)
        index = {image_id: i for i, image_id in enumerate(table.ids)}
        missing = [i for i in ids if i not in index]
        if missing:
            raise UnmatchedIds(missing=missing)
        return FeatureTable(ids=tuple(ids), names=table.names, rows=tuple(table.rows[index[i]] for i in ids))

    def fit(
        self,
        manifest: Path,
        out_dir: Path,
        view_set: ViewSet,
        options: FitOptions,
        features: Optional[Path] = None,
        split: str = "train",
        seed: int = 0,
        workers: int = 1,
    ) -> FitResult:
        entries = load_manifest(manifest)
        labeled = [e for e in entries if e.split == Split(split)]
        table = self._feature_table(labeled, view_set, features, workers)
        X, y, names = table.matrix, np.array([e.mos for e in labeled]), list(table.names)
        fit_seed = derive_seed(seed, "fit")

        if options.model_type == "ridge":
            model, _ = alpha_search(
                X, y, options.alpha_grid, options.split_fraction, fit_seed, names, options.folds
            )
            members = [model]
        else:
            model = build_ensemble(
                X,
                y,
                names,
                group_by=options.group_by,
                alpha_grid=options.alpha_grid,
                split_fraction=options.split_fraction,
                seed=fit_seed,
                weights=options.member_weights,
                folds=options.folds,
            )
            members = list(model.members)

        pseudo_rows = 0
        if options.pseudo_split:
            unlabeled = [e for e in entries if e.split == Split(options.pseudo_split)]
            pseudo_rows = len(unlabeled)
            if not unlabeled and not options.strict_pseudo:
                self._logger.warning(
                    f"No {options.pseudo_split} rows to pseudo-label, refitting on labeled rows only"
                )
            X_u = np.zeros((0, len(names)))
            if unlabeled:
                X_u = self._feature_table(unlabeled, view_set, features, workers).matrix
            if options.model_type == "ridge":
                student = members[0]
            else:
                student, _ = alpha_search(
                    X, y, options.alpha_grid, options.split_fraction, fit_seed, names, options.folds
                )
            model = pseudo_label_finetune(
                student,
                X,
                y,
                X_u,
                teacher=model,
                names=names,
                pseudo_weight=options.pseudo_weight,
                strict=options.strict_pseudo,
            )
            members = [model]

        dropped = sorted({n for m in members for n in m.dropped_features})
        if dropped:
            self._logger.warning(f"Dropped constant features: {', '.join(dropped)}")
        if any(m.degenerate for m in members):
            self._logger.warning("Training targets are constant, model predicts their value")

        out_dir.mkdir(parents=True, exist_ok=True)
        model_path = out_dir / "model.json"
        save_model(SavedModel.wrap(model, view_set), model_path)
        outputs = [str(model_path)]
        if features is None:
            table_path = out_dir / "features.csv"
            write_feature_table(table, table_path)
            outputs.append(str(table_path))

        message = f"Fitted {model.type} model on {len(labeled)} {split} rows"
        if pseudo_rows:
            message += f" plus {pseudo_rows} pseudo-labeled rows"
        return FitResult(
            message=message,
            log_entry_id=self._logger.info(message),
            outputs=outputs,
            model_type=model.type,
            alphas=[m.alpha for m in members],
            rows=len(labeled),
            dropped_features=dropped,
            pseudo_rows=pseudo_rows,
        )

    def predict(
        self,
        model: Path,
        out_dir: Path,
        images: Optional[Path] = None,
        features: Optional[Path] = None,
        samples: int = 1,
        seed: Optional[int] = None,
        workers: int = 1,
    ) -> PredictResult:
        """
        Score a feature table, or every image of a directory. A single sample
        without a seed uses the ViewSet seeds stored at fit time.
        """
        if (images is None) == (features is None):
            raise ValueError("predict needs exactly one of an image directory or a feature table")
        saved = load_model(model)

        if features is not None:
            table = load_feature_table(features)
            ids = list(table.ids)
            scores = [float(s) for s in saved.model.predict_matrix(table.matrix, list(table.names))]
        else:
            items = list(iter_image_files(images))
            ids = [image_id for image_id, _ in items]

            def score_one(item: Tuple[str, Path]) -> float:
                image_id, path = item
                img = load_image(path)
                if seed is None and samples == 1:
                    return saved.model.predict(extract_features(img, saved.view_set))
                return multi_sample_predict(
                    saved.model, img, saved.view_set, samples, derive_seed(seed or 0, "predict", image_id)
                )

            scores = _ordered_map(score_one, items, workers)

        out_dir.mkdir(parents=True, exist_ok=True)
        predictions_path = out_dir / "predictions.csv"
        metrics.write_predictions(predictions_path, ids, scores)

        message = f"Predicted {len(ids)} images"
        return PredictResult(
            message=message,
            log_entry_id=self._logger.info(message),
            outputs=[str(predictions_path)],
            ids=ids,
            scores=scores,
        )

    def stats(
        self,
        manifest: Path,
        out_dir: Path,
        bins: int = 20,
        method: str = "histogram",
        subsets: Optional[Sequence[str]] = None,
        mos_range: Optional[Tuple[float, float]] = None,
        svg: bool = False,
    ) -> StatsResult:
        entries = load_manifest(manifest)
        stats = split_stats(entries, bins, subsets=subsets, method=method, mos_range=mos_range)
        audit = audit_exclusive(entries)
        for image_id, problem in audit:
            self._logger.warning(f"{image_id}: {problem}")

        out_dir.mkdir(parents=True, exist_ok=True)
        json_path, density_path = out_dir / "stats.json", out_dir / "density.csv"
        render.write_json(stats, json_path)
        write_stats_csv(stats, density_path)
        outputs = [str(json_path), str(density_path)]
        if svg:
            svg_path = out_dir / "density.svg"
            svg_path.write_text(render.density_svg(stats), encoding="utf-8")
            outputs.append(str(svg_path))

        counts = ", ".join(f"{split.value}={count}" for split, count in stats.counts.items())
        message = f"Manifest of {len(entries)} images: {counts}"
        return StatsResult(
            message=message,
            log_entry_id=self._logger.info(message),
            outputs=outputs,
            stats=stats,
            audit=audit,
        )

    def history(self, filters: LogsFilter, paging: Paging) -> List[LogEntry]:
        return self._logger.get_logs(filters, paging)
