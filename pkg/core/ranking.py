"""
Winner selection: per-metric ranks over N submissions and the main score
S_i, the mean of a team's five ranks. Lowest S wins.
"""

import csv
from shared.compat import StrEnum
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
from pydantic import BaseModel, Field
from scipy import stats

from core.metrics import MetricReport
from shared.errors import DuplicateTeam, TooFewSubmissions


class Direction(StrEnum):
    LOWER_BETTER = "lower_better"
    HIGHER_BETTER = "higher_better"


METRIC_DIRECTIONS: Dict[str, Direction] = {
    "mae": Direction.LOWER_BETTER,
    "rmse": Direction.LOWER_BETTER,
    "plcc": Direction.HIGHER_BETTER,
    "srcc": Direction.HIGHER_BETTER,
    "krcc": Direction.HIGHER_BETTER,
}


class Submission(BaseModel):
    team: str = Field(..., min_length=1)
    report: MetricReport
    baseline: bool = False


class LeaderboardRow(BaseModel):
    position: int = Field(..., ge=1)
    team: str
    ranks: Dict[str, float]
    score: float
    tied: bool = False
    report: MetricReport


class Leaderboard(BaseModel):
    rows: List[LeaderboardRow]
    excluded: List[str] = []

    @property
    def teams(self) -> List[str]:
        return [row.team for row in self.rows]

    @property
    def has_ties(self) -> bool:
        return any(row.tied for row in self.rows)


def rank_metric(values: Sequence[float], direction: Direction | str) -> List[float]:
    """Rank 1 is best; exact ties share the average of the ranks they span."""
    array = np.asarray(values, dtype=np.float64)
    if array.size < 1:
        raise ValueError("nothing to rank")
    if not np.all(np.isfinite(array)):
        raise ValueError("metric values must be finite")
    if Direction(direction) == Direction.HIGHER_BETTER:
        array = -array
    return [float(r) for r in stats.rankdata(array, method="average")]


def challenge_score(
    submissions: Sequence[Submission], include_baseline: bool = False
) -> Leaderboard:
    seen = set()
    for submission in submissions:
        key = submission.team.casefold()
        if key in seen:
            raise DuplicateTeam(f"team {submission.team!r} submitted more than once")
        seen.add(key)

    ranked = [s for s in submissions if include_baseline or not s.baseline]
    excluded = [s.team for s in submissions if s.baseline and not include_baseline]
    if len(ranked) < 2:
        raise TooFewSubmissions(f"ranking needs at least 2 submissions, got {len(ranked)}")

    per_metric = {
        metric: rank_metric([getattr(s.report, metric) for s in ranked], direction)
        for metric, direction in METRIC_DIRECTIONS.items()
    }
    scored = []
    for index, submission in enumerate(ranked):
        ranks = {metric: per_metric[metric][index] for metric in METRIC_DIRECTIONS}
        scored.append((sum(ranks.values()) / len(ranks), submission, ranks))

    # ties in S are displayed in team-name order and flagged
    scored.sort(key=lambda item: (item[0], item[1].team))
    score_counts: Dict[float, int] = {}
    for score, _, _ in scored:
        score_counts[score] = score_counts.get(score, 0) + 1

    rows = [
        LeaderboardRow(
            position=position,
            team=submission.team,
            ranks=ranks,
            score=score,
            tied=score_counts[score] > 1,
            report=submission.report,
        )
        for position, (score, submission, ranks) in enumerate(scored, start=1)
    ]
    return Leaderboard(rows=rows, excluded=excluded)


LEADERBOARD_COLUMNS = (
    "team",
    "rank_mae",
    "rank_rmse",
    "rank_plcc",
    "rank_srcc",
    "rank_krcc",
    "score",
)


def write_leaderboard_csv(board: Leaderboard, path: Path | str) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(LEADERBOARD_COLUMNS)
        for row in board.rows:
            writer.writerow(
                [row.team]
                + [repr(row.ranks[m]) for m in ("mae", "rmse", "plcc", "srcc", "krcc")]
                + [repr(row.score)]
            )


def load_submissions_csv(path: Path | str) -> List[Submission]:
    """
    Read precomputed per-team metrics: ``team,mae,rmse,plcc,srcc,krcc`` plus
    optional ``n`` and ``baseline`` columns.
    """
    required = {"team", *METRIC_DIRECTIONS}
    submissions = []
    with Path(path).open(newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected columns {', '.join(sorted(required))}")
        for row in reader:
            report = MetricReport(
                **{metric: float(row[metric]) for metric in METRIC_DIRECTIONS},
                n=int(row.get("n") or 1),
            )
            baseline = (row.get("baseline") or "").strip().lower() in ("true", "1", "yes")
            submissions.append(Submission(team=row["team"].strip(), report=report, baseline=baseline))
    return submissions
