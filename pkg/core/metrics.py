"""
The five challenge metrics (MAE, RMSE, PLCC, SRCC, KRCC) and the
second-order polynomial trend fit drawn over prediction scatter plots.

KRCC is Kendall's tau-b. SRCC is the Pearson correlation of fractional
(average-for-ties) ranks. PLCC is raw, with no monotonic remapping.
"""

import csv
import math
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import stats

from core.dataset import ManifestEntry, Split, filter_exclusive
from shared.errors import LengthMismatch, SingularDesign, UnmatchedIds, ZeroVariance

# Chunk size for the O(n^2) Kendall pair sweep.
_PAIR_BLOCK = 2048


class PredictionSet(BaseModel):
    model_config = ConfigDict(frozen=True)

    ids: Tuple[str, ...]
    predicted: Tuple[float, ...]
    ground_truth: Tuple[float, ...]

    @model_validator(mode="after")
    def _check(self) -> "PredictionSet":
        n = len(self.ids)
        if n < 1:
            raise ValueError("a prediction set needs at least one row")
        if len(self.predicted) != n or len(self.ground_truth) != n:
            raise LengthMismatch(
                f"ids/predicted/ground_truth lengths differ: "
                f"{n}/{len(self.predicted)}/{len(self.ground_truth)}"
            )
        if len(set(self.ids)) != n:
            raise ValueError("prediction ids must be unique")
        if not all(math.isfinite(v) for v in self.predicted + self.ground_truth):
            raise ValueError("prediction values must be finite")
        return self

    @classmethod
    def from_arrays(cls, p: Sequence[float], q: Sequence[float], ids=None) -> "PredictionSet":
        ids = ids if ids is not None else [str(i) for i in range(len(p))]
        return cls(
            ids=tuple(ids),
            predicted=tuple(float(v) for v in p),
            ground_truth=tuple(float(v) for v in q),
        )

    @property
    def p(self) -> np.ndarray:
        return np.asarray(self.predicted, dtype=np.float64)

    @property
    def q(self) -> np.ndarray:
        return np.asarray(self.ground_truth, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.ids)


class MetricReport(BaseModel):
    mae: float = Field(..., ge=0.0)
    rmse: float = Field(..., ge=0.0)
    plcc: float = Field(..., ge=-1.0, le=1.0)
    srcc: float = Field(..., ge=-1.0, le=1.0)
    krcc: float = Field(..., ge=-1.0, le=1.0)
    n: int = Field(..., ge=1)


def _require(ps: PredictionSet, minimum: int, metric: str) -> None:
    if len(ps) < minimum:
        raise ValueError(f"{metric} needs at least {minimum} rows, got {len(ps)}")


def mae(ps: PredictionSet) -> float:
    return float(np.mean(np.abs(ps.p - ps.q)))


def rmse(ps: PredictionSet) -> float:
    return float(np.sqrt(np.mean((ps.p - ps.q) ** 2)))


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    a = x - x.mean()
    b = y - y.mean()
    saa = float(a @ a)
    sbb = float(b @ b)
    if saa == 0.0 or sbb == 0.0:
        raise ZeroVariance("correlation is undefined for a constant vector")
    r = float(a @ b) / math.sqrt(saa * sbb)
    return min(1.0, max(-1.0, r))


def plcc(ps: PredictionSet) -> float:
    _require(ps, 2, "PLCC")
    return pearson(ps.p, ps.q)


def srcc(ps: PredictionSet) -> float:
    _require(ps, 2, "SRCC")
    return pearson(
        stats.rankdata(ps.p, method="average"), stats.rankdata(ps.q, method="average")
    )


def _tie_pairs(values: np.ndarray) -> int:
    _, counts = np.unique(values, return_counts=True)
    counts = counts.astype(np.int64)
    return int(np.sum(counts * (counts - 1) // 2))


def concordance(x: np.ndarray, y: np.ndarray) -> int:
    """C - D over all pairs, as an exact integer."""
    n = x.size
    total = 0
    for start in range(0, n, _PAIR_BLOCK):
        stop = min(n, start + _PAIR_BLOCK)
        dx = np.sign(x[start:stop, None] - x[None, :]).astype(np.int8)
        dy = np.sign(y[start:stop, None] - y[None, :]).astype(np.int8)
        total += int(np.sum(dx * dy, dtype=np.int64))
    # every unordered pair was counted twice
    return total // 2


def krcc(ps: PredictionSet) -> float:
    _require(ps, 2, "KRCC")
    p, q = ps.p, ps.q
    n = p.size
    t0 = n * (n - 1) // 2
    t1 = _tie_pairs(p)
    t2 = _tie_pairs(q)
    if t0 == t1 or t0 == t2:
        raise ZeroVariance("KRCC is undefined when one vector is fully tied")
    tau = concordance(p, q) / math.sqrt((t0 - t1) * (t0 - t2))
    return min(1.0, max(-1.0, tau))


def evaluate(ps: PredictionSet) -> MetricReport:
    return MetricReport(
        mae=mae(ps),
        rmse=rmse(ps),
        plcc=plcc(ps),
        srcc=srcc(ps),
        krcc=krcc(ps),
        n=len(ps),
    )


def poly2_fit(ps: PredictionSet) -> Tuple[float, float, float]:
    """Least-squares (a0, a1, a2) for p ~ a0 + a1*q + a2*q^2."""
    q, p = ps.q, ps.p
    if np.unique(q).size < 3:
        raise SingularDesign("a quadratic fit needs at least 3 distinct ground-truth values")
    design = np.vander(q, 3, increasing=True)
    coeffs, _, rank, _ = np.linalg.lstsq(design, p, rcond=None)
    if rank < 3:
        raise SingularDesign("quadratic design matrix is rank deficient")
    a0, a1, a2 = (float(c) for c in coeffs)
    return a0, a1, a2


def poly2_curve(
    coeffs: Tuple[float, float, float], q_min: float, q_max: float, samples: int = 101
) -> List[Tuple[float, float]]:
    a0, a1, a2 = coeffs
    xs = np.linspace(q_min, q_max, samples)
    return [(float(x), float(a0 + a1 * x + a2 * x * x)) for x in xs]


def load_predictions(path: Path | str) -> Dict[str, float]:
    """Read an ``image_id,score`` CSV."""
    scores: Dict[str, float] = {}
    with Path(path).open(newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"image_id", "score"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected header image_id,score")
        for row_number, row in enumerate(reader, start=1):
            image_id = row["image_id"].strip()
            if image_id in scores:
                raise ValueError(f"{path}: duplicate image_id {image_id} on row {row_number}")
            score = float(row["score"])
            if not math.isfinite(score):
                raise ValueError(f"{path}: non-finite score on row {row_number}")
            scores[image_id] = score
    return scores


def write_predictions(path: Path | str, ids: Iterable[str], scores: Iterable[float]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["image_id", "score"])
        for image_id, score in zip(ids, scores):
            writer.writerow([image_id, repr(float(score))])


def join_predictions(
    entries: Sequence[ManifestEntry],
    predictions: Dict[str, float],
    split: Optional[Split | str] = None,
    exclusive_only: bool = False,
) -> PredictionSet:
    """
    Pair predictions with manifest MOS. With a split, every entry of the
    evaluated slice needs a prediction and every prediction must belong to the
    split; offenders are listed in UnmatchedIds.
    """
    if split is None:
        universe = list(entries)
        target = [e for e in universe if e.image_id in predictions]
        if exclusive_only:
            target = [e for e in target if e.exclusive]
        missing: List[str] = []
    else:
        universe = [e for e in entries if e.split == Split(split)]
        target = filter_exclusive(entries, split) if exclusive_only else universe
        missing = [e.image_id for e in target if e.image_id not in predictions]

    known = {e.image_id for e in universe}
    unknown = [i for i in predictions if i not in known]
    if missing or unknown:
        raise UnmatchedIds(missing=missing, unknown=unknown)

    target = sorted(target, key=lambda e: e.image_id)
    return PredictionSet(
        ids=tuple(e.image_id for e in target),
        predicted=tuple(predictions[e.image_id] for e in target),
        ground_truth=tuple(e.mos for e in target),
    )
