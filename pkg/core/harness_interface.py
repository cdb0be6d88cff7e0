from pathlib import Path
from typing import Dict, List, Literal, Optional, Protocol, Sequence, Tuple

from pydantic import BaseModel

from core.budget import BudgetReport, ModelGraph
from core.dataset import SplitStats
from core.metrics import MetricReport
from core.ranking import Leaderboard
from core.views import ViewSet
from shared.models import LogEntry, LogsFilter, Paging


class RunResult(BaseModel):
    message: str
    log_entry_id: int
    outputs: List[str] = []


class EvaluateResult(RunResult):
    report: MetricReport


class RankResult(RunResult):
    leaderboard: Leaderboard


class ReportResult(RunResult):
    report: MetricReport
    coefficients: Tuple[float, float, float]


class SampleResult(RunResult):
    written: int
    failures: Dict[str, str] = {}


class MacsResult(RunResult):
    budget: BudgetReport


class FitResult(RunResult):
    model_type: str
    alphas: List[float]
    rows: int
    dropped_features: List[str] = []
    pseudo_rows: int = 0


class PredictResult(RunResult):
    ids: List[str]
    scores: List[float]


class StatsResult(RunResult):
    stats: SplitStats
    audit: List[Tuple[str, str]] = []


class HistoryResult(RunResult):
    entries: List[LogEntry]


class FitOptions(BaseModel):
    model_type: Literal["ridge", "ensemble"] = "ensemble"
    group_by: Literal["family", "view"] = "family"
    alpha_grid: Optional[List[float]] = None
    split_fraction: float = 0.8
    folds: Optional[int] = None
    member_weights: Optional[List[float]] = None
    pseudo_split: Optional[str] = None
    pseudo_weight: float = 1.0
    strict_pseudo: bool = False


class IHarness(Protocol):
    def evaluate(
        self,
        manifest: Path,
        predictions: Path,
        out_dir: Path,
        split: Optional[str] = None,
        exclusive_only: bool = False,
    ) -> EvaluateResult:
        ...

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
        ...

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
        ...

    def sample(
        self,
        image_dir: Path,
        view_set: ViewSet,
        out_dir: Path,
        seed: Optional[int] = None,
        workers: int = 1,
    ) -> SampleResult:
        ...

    def macs(self, graph: ModelGraph, out_dir: Path, budget_gmacs: float, strict: bool = False) -> MacsResult:
        ...

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
        ...

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
        ...

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
        ...

    def history(self, filters: LogsFilter, paging: Paging) -> List[LogEntry]:
        ...
