"""
Corpus manifest ingestion, split statistics and MOS density curves.

Manifest CSV header: ``image_id,path,mos,split,exclusive,categories`` with
``;``-separated categories.
"""

import csv
from shared.compat import StrEnum
import math
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from scipy import stats

from shared.errors import (
    DuplicateImageId,
    EmptySubset,
    ExclusiveInTrain,
    InvalidSplit,
    ManifestError,
    MissingColumn,
    NonFiniteMos,
)

MANIFEST_COLUMNS = ("image_id", "path", "mos", "split", "exclusive", "categories")

# categories held out of training and used to build the exclusive subset
EXCLUSIVE_CATEGORIES = frozenset(
    {"sea", "ocean", "sand", "landscape", "mountain", "mountains", "scenery", "city", "urban"}
)

_TRUE = {"true", "1", "yes", "y"}
_FALSE = {"false", "0", "no", "n", ""}


class Split(StrEnum):
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"


class ManifestEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    image_id: str = Field(..., min_length=1)
    path: Path
    mos: float
    split: Split
    exclusive: bool = False
    categories: Tuple[str, ...] = ()

    @model_validator(mode="after")
    def _check(self) -> "ManifestEntry":
        if not math.isfinite(self.mos):
            raise NonFiniteMos(f"{self.image_id}: mos must be finite, got {self.mos}")
        if self.exclusive and self.split == Split.TRAIN:
            raise ExclusiveInTrain(f"{self.image_id}: exclusive rows cannot be in train")
        return self


class DensityBin(BaseModel):
    bin_center: float
    density: float = Field(..., ge=0.0)


class SplitStats(BaseModel):
    counts: Dict[Split, int]
    exclusive_counts: Dict[Split, int]
    bin_width: float
    method: str
    densities: Dict[str, List[DensityBin]]

    def area(self, subset: str) -> float:
        return sum(b.density for b in self.densities[subset]) * self.bin_width


def _parse_bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in _TRUE:
        return True
    if value in _FALSE:
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_row(row: Dict[str, str], base_dir: Path) -> ManifestEntry:
    path = Path(row["path"].strip())
    return ManifestEntry(
        image_id=row["image_id"].strip(),
        path=path if path.is_absolute() else base_dir / path,
        mos=float(row["mos"]),
        split=row["split"].strip().lower(),
        exclusive=_parse_bool(row["exclusive"]),
        categories=tuple(c.strip() for c in row["categories"].split(";") if c.strip()),
    )


def load_manifest(path: Path | str) -> List[ManifestEntry]:
    """
    Parse and validate a manifest CSV. Relative image paths resolve against the
    manifest's directory. All problems are collected; the raised error is typed
    after the first one and lists every issue with its 1-based data row.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise MissingColumn(f"{path}: missing columns {', '.join(missing)}", row=0)
        rows = list(reader)

    entries: List[ManifestEntry] = []
    seen: Dict[str, int] = {}
    failures: List[Tuple[int, ManifestError]] = []
    for row_number, row in enumerate(rows, start=1):
        try:
            entry = _parse_row(row, path.parent)
        except ManifestError as e:
            failures.append((row_number, e))
            continue
        except (ValidationError, ValueError, TypeError, AttributeError) as e:
            failures.append((row_number, ManifestError(str(e).splitlines()[0])))
            continue
        if entry.image_id in seen:
            failures.append(
                (
                    row_number,
                    DuplicateImageId(
                        f"{entry.image_id} already defined on row {seen[entry.image_id]}"
                    ),
                )
            )
            continue
        seen[entry.image_id] = row_number
        entries.append(entry)

    if failures:
        issues = [f"row {n}: {e}" for n, e in failures]
        first_row, first = failures[0]
        raise type(first)(
            f"{path}: {len(failures)} invalid row(s); " + "; ".join(issues),
            row=first_row,
            issues=issues,
        )
    return entries


def category_exclusive(entry: ManifestEntry) -> bool:
    return any(c.lower() in EXCLUSIVE_CATEGORIES for c in entry.categories)


def audit_exclusive(entries: Iterable[ManifestEntry]) -> List[Tuple[str, str]]:
    """Rows whose exclusive flag and categories disagree; never fatal."""
    problems = []
    for entry in entries:
        by_category = category_exclusive(entry)
        if entry.split == Split.TRAIN:
            if by_category:
                problems.append((entry.image_id, "train row has an exclusive category"))
        elif entry.exclusive and not by_category:
            problems.append((entry.image_id, "flagged exclusive without an exclusive category"))
        elif by_category and not entry.exclusive:
            problems.append((entry.image_id, "exclusive category but not flagged"))
    return problems


def filter_exclusive(entries: Iterable[ManifestEntry], split: Split | str) -> List[ManifestEntry]:
    split = Split(split)
    if split == Split.TRAIN:
        raise InvalidSplit("the exclusive subset exists only in validation and test")
    return [e for e in entries if e.split == split and e.exclusive]


def _subset(entries: Sequence[ManifestEntry], name: str) -> List[ManifestEntry]:
    if name == "overall":
        return list(entries)
    if name == "exclusive":
        return [e for e in entries if e.exclusive]
    try:
        split = Split(name)
    except ValueError:
        raise InvalidSplit(f"unknown subset {name!r}") from None
    return [e for e in entries if e.split == split]


def _kde_density(mos: np.ndarray, centers: np.ndarray, bin_width: float) -> Optional[np.ndarray]:
    if mos.size < 2 or np.ptp(mos) == 0.0:
        return None
    try:
        kde = stats.gaussian_kde(mos, bw_method="silverman")
    except np.linalg.LinAlgError:
        return None
    values = kde(centers)
    total = values.sum() * bin_width
    return values / total if total > 0 else None


def split_stats(
    entries: Sequence[ManifestEntry],
    bins: int,
    subsets: Optional[Sequence[str]] = None,
    method: str = "histogram",
    mos_range: Optional[Tuple[float, float]] = None,
) -> SplitStats:
    """
    Split counts plus a unit-area MOS density per subset.

    Subsets are ``overall``, ``exclusive`` or a split name; ``None`` means
    overall plus exclusive when any exclusive row exists. All subsets share
    the same bin edges.
    """
    if not entries:
        raise EmptySubset("no manifest entries")
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    if method not in ("histogram", "kde"):
        raise ValueError(f"unknown density method {method!r}")
    if subsets is None:
        subsets = ["overall"] + (["exclusive"] if any(e.exclusive for e in entries) else [])

    all_mos = np.array([e.mos for e in entries], dtype=np.float64)
    lo, hi = mos_range if mos_range else (float(all_mos.min()), float(all_mos.max()))
    edges = np.histogram_bin_edges(all_mos, bins=bins, range=(lo, hi))
    centers = (edges[:-1] + edges[1:]) / 2.0
    bin_width = float(edges[1] - edges[0])

    densities: Dict[str, List[DensityBin]] = {}
    for name in subsets:
        members = _subset(entries, name)
        if not members:
            raise EmptySubset(f"subset {name!r} has no entries")
        mos = np.array([e.mos for e in members], dtype=np.float64)
        density = _kde_density(mos, centers, bin_width) if method == "kde" else None
        if density is None:
            counts, _ = np.histogram(mos, bins=edges)
            if counts.sum() == 0:
                raise EmptySubset(f"subset {name!r} has no entries inside the MOS range")
            density = counts / (counts.sum() * bin_width)
        densities[name] = [
            DensityBin(bin_center=float(c), density=float(d))
            for c, d in zip(centers, density)
        ]

    return SplitStats(
        counts={s: sum(1 for e in entries if e.split == s) for s in Split},
        exclusive_counts={
            s: sum(1 for e in entries if e.split == s and e.exclusive) for s in Split
        },
        bin_width=bin_width,
        method=method,
        densities=densities,
    )


def write_stats_csv(stats_: SplitStats, path: Path | str) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["subset", "bin_center", "density"])
        for subset, bins in stats_.densities.items():
            for b in bins:
                writer.writerow([subset, repr(b.bin_center), repr(b.density)])
