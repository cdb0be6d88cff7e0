"""
Handcrafted quality features computed per view of a ViewSet.

Each view contributes the same eight features, named ``v{index}.{kind}.{feature}``
so a model can pick columns by name regardless of table order.
"""

import csv
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy import ndimage, stats

from core.views import Image, ViewSet, materialize_view_set
from shared.errors import MissingFeature

FEATURE_GROUPS: Dict[str, Tuple[str, ...]] = {
    "tone": ("luma_mean", "luma_std", "rms_contrast", "entropy"),
    "detail": ("sharpness", "gradient"),
    "color": ("colorfulness",),
    "noise": ("noise",),
}
FEATURES_PER_VIEW = tuple(name for group in FEATURE_GROUPS.values() for name in group)
ENTROPY_BINS = 64

_LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
# 3x3 high-pass whose response to unit white noise has standard deviation 6
_NOISE_KERNEL = np.array([[1, -2, 1], [-2, 4, -2], [1, -2, 1]], dtype=np.float64)
_NOISE_KERNEL_NORM = 6.0
_MAD_TO_SIGMA = 0.6745


class FeatureVector(BaseModel):
    model_config = ConfigDict(frozen=True)

    names: Tuple[str, ...]
    values: Tuple[float, ...]

    @model_validator(mode="after")
    def _check(self) -> "FeatureVector":
        if len(self.names) != len(self.values):
            raise ValueError(f"{len(self.names)} names for {len(self.values)} values")
        if len(set(self.names)) != len(self.names):
            raise ValueError("feature names must be unique")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature values must be finite")
        return self

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(self.names, self.values))

    def select(self, names: Sequence[str]) -> np.ndarray:
        lookup = self.as_dict()
        missing = [n for n in names if n not in lookup]
        if missing:
            raise MissingFeature(f"features not present: {', '.join(missing)}")
        return np.array([lookup[n] for n in names], dtype=np.float64)


def feature_group(name: str) -> str:
    """``v0.resize.sharpness`` -> ``detail``."""
    feature = name.rsplit(".", 1)[-1]
    for group, members in FEATURE_GROUPS.items():
        if feature in members:
            return group
    raise MissingFeature(f"unknown feature {name!r}")


def feature_view(name: str) -> int:
    """``v2.grid_sample.noise`` -> 2."""
    prefix = name.split(".", 1)[0]
    if not prefix.startswith("v") or not prefix[1:].isdigit():
        raise MissingFeature(f"feature {name!r} carries no view index")
    return int(prefix[1:])


def feature_names(view_set: ViewSet) -> List[str]:
    return [
        f"v{index}.{view.kind}.{feature}"
        for index, view in enumerate(view_set.views)
        for feature in FEATURES_PER_VIEW
    ]


def luma(img: Image) -> np.ndarray:
    return img.pixels.astype(np.float64) @ _LUMA_WEIGHTS / 255.0


def colorfulness(img: Image) -> float:
    rgb = img.pixels.astype(np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    rg = np.abs(r - g)
    yb = np.abs(0.5 * (r + g) - b)
    std_root = np.hypot(rg.std(), yb.std())
    mean_root = np.hypot(rg.mean(), yb.mean())
    return float(std_root + 0.3 * mean_root)


def luma_entropy(y: np.ndarray, bins: int = ENTROPY_BINS) -> float:
    counts, _ = np.histogram(y, bins=bins, range=(0.0, 1.0))
    return float(stats.entropy(counts, base=2))


def rms_contrast(y: np.ndarray) -> float:
    """Standard deviation of luma stretched to [0, 1]; zero for a flat image."""
    low, high = float(y.min()), float(y.max())
    if high <= low:
        return 0.0
    return float(((y - low) / (high - low)).std())


def sharpness(y: np.ndarray) -> float:
    return float(ndimage.laplace(y).var())


def gradient_magnitude(y: np.ndarray) -> float:
    return float(np.hypot(ndimage.sobel(y, axis=0), ndimage.sobel(y, axis=1)).mean())


def noise_sigma(y: np.ndarray) -> float:
    residual = ndimage.convolve(y, _NOISE_KERNEL, mode="reflect") / _NOISE_KERNEL_NORM
    mad = np.median(np.abs(residual - np.median(residual)))
    return float(mad / _MAD_TO_SIGMA)


def view_features(img: Image) -> Dict[str, float]:
    y = luma(img)
    mean = float(y.mean())
    std = float(y.std())
    return {
        "luma_mean": mean,
        "luma_std": std,
        "rms_contrast": rms_contrast(y),
        "entropy": luma_entropy(y),
        "sharpness": sharpness(y),
        "gradient": gradient_magnitude(y),
        "colorfulness": colorfulness(img),
        "noise": noise_sigma(y),
    }


def extract_features(img: Image, view_set: ViewSet) -> FeatureVector:
    names: List[str] = []
    values: List[float] = []
    for index, (view, out) in enumerate(zip(view_set.views, materialize_view_set(img, view_set))):
        per_view = view_features(out)
        for feature in FEATURES_PER_VIEW:
            names.append(f"v{index}.{view.kind}.{feature}")
            values.append(per_view[feature])
    return FeatureVector(names=tuple(names), values=tuple(values))


def extract_many(images: Sequence[Image], view_set: ViewSet, workers: int = 1) -> List[FeatureVector]:
    """Per-image extraction on a thread pool; results keep input order."""
    if workers <= 1 or len(images) <= 1:
        return [extract_features(img, view_set) for img in images]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda img: extract_features(img, view_set), images))


class FeatureTable(BaseModel):
    """Rows of features keyed by image id; ``matrix`` columns follow ``names``."""

    model_config = ConfigDict(frozen=True)

    ids: Tuple[str, ...]
    names: Tuple[str, ...]
    rows: Tuple[Tuple[float, ...], ...]

    @model_validator(mode="after")
    def _check(self) -> "FeatureTable":
        if len(self.ids) != len(self.rows):
            raise ValueError(f"{len(self.ids)} ids for {len(self.rows)} rows")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("image ids must be unique")
        for row in self.rows:
            if len(row) != len(self.names):
                raise ValueError(f"row has {len(row)} values, expected {len(self.names)}")
        return self

    @classmethod
    def from_vectors(cls, ids: Sequence[str], vectors: Sequence[FeatureVector]) -> "FeatureTable":
        if not vectors:
            return cls(ids=tuple(ids), names=(), rows=())
        names = vectors[0].names
        rows = tuple(tuple(float(v) for v in vec.select(names)) for vec in vectors)
        return cls(ids=tuple(ids), names=names, rows=rows)

    @property
    def matrix(self) -> np.ndarray:
        return np.array(self.rows, dtype=np.float64).reshape(len(self.rows), len(self.names))

    def vector(self, index: int) -> FeatureVector:
        return FeatureVector(names=self.names, values=self.rows[index])


def write_feature_table(table: FeatureTable, path: Path | str) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["image_id", *table.names])
        for image_id, row in zip(table.ids, table.rows):
            writer.writerow([image_id, *(repr(float(v)) for v in row)])


def load_feature_table(path: Path | str) -> FeatureTable:
    with Path(path).open(newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[0] != "image_id":
            raise MissingFeature(f"{path}: first column must be image_id")
        ids, rows = [], []
        for line in reader:
            if not line:
                continue
            ids.append(line[0])
            rows.append(tuple(float(v) for v in line[1:]))
    return FeatureTable(ids=tuple(ids), names=tuple(header[1:]), rows=tuple(rows))
