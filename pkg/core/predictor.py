"""
Desk-scale quality prediction: closed-form ridge heads over handcrafted
features, weighted ensembles of heads over feature subsets, multi-sample
averaging for stochastic views and pseudo-label refits.

Fitting is single-threaded and deterministic. Fitted models are frozen
pydantic models and serialize to JSON as they are.
"""

import hashlib
import itertools
import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Annotated, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from core.features import (
    FEATURE_GROUPS,
    FeatureVector,
    extract_features,
    feature_group,
    feature_view,
)
from core.quality_model_interface import IQualityModel
from core.seeding import derive_seed
from core.views import Image, ViewSet, reseed
from shared.errors import (
    DegenerateTargets,
    EmptyUnlabeled,
    MissingFeature,
    ModelIntegrityError,
    TooFewRows,
)

DEFAULT_SPLIT_FRACTION = 0.8
# relative spread below which a column counts as constant
_CONSTANT_TOL = 1e-12


def default_alpha_grid() -> List[float]:
    return [float(a) for a in np.logspace(-6, 6, 13)]


def select_columns(X: np.ndarray, names: Sequence[str], wanted: Sequence[str]) -> np.ndarray:
    index = {name: i for i, name in enumerate(names)}
    missing = [n for n in wanted if n not in index]
    if missing:
        raise MissingFeature(f"features not present: {', '.join(missing)}")
    return np.asarray(X, dtype=np.float64)[:, [index[n] for n in wanted]]


class RidgeModel(BaseModel):
    model_config = ConfigDict(frozen=True)

    type: Literal["ridge"] = "ridge"
    feature_names: List[str]
    weights: List[float]
    bias: float
    alpha: float = Field(..., gt=0)
    feature_means: List[float]
    feature_stds: List[float]
    dropped_features: List[str] = []
    degenerate: bool = False

    @model_validator(mode="after")
    def _check(self) -> "RidgeModel":
        n = len(self.feature_names)
        if not (len(self.weights) == len(self.feature_means) == len(self.feature_stds) == n):
            raise ValueError("weights, means and stds must match feature_names in length")
        if any(s <= 0 for s in self.feature_stds):
            raise ValueError("feature stds must be positive")
        return self

    def required_features(self) -> List[str]:
        return list(self.feature_names)

    def _score(self, X: np.ndarray) -> np.ndarray:
        if not self.feature_names:
            return np.full(X.shape[0], self.bias)
        Z = (X - np.array(self.feature_means)) / np.array(self.feature_stds)
        return self.bias + Z @ np.array(self.weights)

    def predict(self, x: FeatureVector) -> float:
        return float(self._score(x.select(self.feature_names)[None, :])[0])

    def predict_matrix(self, X: np.ndarray, names: List[str]) -> np.ndarray:
        return self._score(select_columns(X, names, self.feature_names))


class EnsembleModel(BaseModel):
    """Weighted sum of ridge heads; ``member_weights`` are normalized to sum to 1."""

    model_config = ConfigDict(frozen=True)

    type: Literal["ensemble"] = "ensemble"
    members: List[RidgeModel] = Field(..., min_length=1)
    member_weights: List[float] = []

    @model_validator(mode="before")
    @classmethod
    def _normalize_weights(cls, data):
        if not isinstance(data, dict):
            return data
        members = data.get("members") or []
        weights = data.get("member_weights") or [1.0] * len(members)
        if len(weights) != len(members):
            raise ValueError(f"{len(weights)} weights for {len(members)} members")
        if any(w < 0 for w in weights):
            raise ValueError("member weights must be nonnegative")
        total = float(sum(weights))
        if members and total <= 0:
            raise ValueError("member weights must not all be zero")
        return {**data, "member_weights": [float(w) / total for w in weights] if members else []}

    def required_features(self) -> List[str]:
        seen = dict.fromkeys(n for m in self.members for n in m.feature_names)
        return list(seen)

    def predict(self, x: FeatureVector) -> float:
        return float(sum(w * m.predict(x) for m, w in zip(self.members, self.member_weights)))

    def predict_matrix(self, X: np.ndarray, names: List[str]) -> np.ndarray:
        out = np.zeros(np.asarray(X).shape[0])
        for member, weight in zip(self.members, self.member_weights):
            out += weight * member.predict_matrix(X, names)
        return out


QualityModel = Annotated[Union[RidgeModel, EnsembleModel], Field(discriminator="type")]


def _as_xy(X, y) -> Tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ValueError(f"X must be (n, d) and y (n,), got {X.shape} and {y.shape}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("X and y must be finite")
    return X, y


def ridge_fit(
    X,
    y,
    alpha: float,
    names: Optional[Sequence[str]] = None,
    sample_weight=None,
    allow_constant: bool = True,
) -> RidgeModel:
    """
    Minimize sum_i w_i (y_i - b - z_i.beta)^2 + alpha |beta|^2 over the
    standardized features z, leaving the intercept b unpenalized.

    Constant columns are dropped and listed in ``dropped_features``. Rows with
    zero weight are ignored. Constant targets give a bias-only model flagged
    ``degenerate`` unless ``allow_constant`` is False.
    """
    X, y = _as_xy(X, y)
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    names = list(names) if names is not None else [f"x{i}" for i in range(X.shape[1])]
    if len(names) != X.shape[1]:
        raise ValueError(f"{len(names)} names for {X.shape[1]} columns")

    w = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    if w.shape != y.shape or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("sample_weight must be finite, nonnegative and one per row")
    keep_rows = w > 0
    X, y, w = X[keep_rows], y[keep_rows], w[keep_rows]
    if len(y) < 2:
        raise TooFewRows(f"ridge needs at least 2 weighted rows, got {len(y)}")

    means = np.average(X, axis=0, weights=w) if X.shape[1] else np.zeros(0)
    stds = np.sqrt(np.average((X - means) ** 2, axis=0, weights=w)) if X.shape[1] else np.zeros(0)
    kept = stds > _CONSTANT_TOL * np.maximum(1.0, np.abs(means))
    dropped = [n for n, k in zip(names, kept) if not k]
    kept_names = [n for n, k in zip(names, kept) if k]

    degenerate = bool(np.ptp(y) == 0)
    if degenerate and not allow_constant:
        raise DegenerateTargets("targets are constant")

    Z = (X[:, kept] - means[kept]) / stds[kept]
    A = np.column_stack([np.ones(len(y)), Z])
    penalty = alpha * np.eye(A.shape[1])
    penalty[0, 0] = 0.0
    Aw = A * w[:, None]
    beta = np.linalg.solve(A.T @ Aw + penalty, Aw.T @ y)
    if degenerate:
        beta = np.concatenate([[float(y[0])], np.zeros(Z.shape[1])])

    return RidgeModel(
        feature_names=kept_names,
        weights=[float(b) for b in beta[1:]],
        bias=float(beta[0]),
        alpha=float(alpha),
        feature_means=[float(m) for m in means[kept]],
        feature_stds=[float(s) for s in stds[kept]],
        dropped_features=dropped,
        degenerate=degenerate,
    )


def _rmse(model: RidgeModel, X: np.ndarray, y: np.ndarray, names: Sequence[str]) -> float:
    return float(np.sqrt(np.mean((model.predict_matrix(X, list(names)) - y) ** 2)))


def _holdout_split(n: int, split_fraction: float, seed: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    n_train = int(round(n * split_fraction))
    if n_train < 2 or n - n_train < 1:
        raise TooFewRows(f"{n} rows cannot give a {split_fraction:g} holdout split")
    order = np.random.default_rng(derive_seed(seed, "alpha_search")).permutation(n)
    return [(np.sort(order[:n_train]), np.sort(order[n_train:]))]


def _kfold_split(n: int, folds: int, seed: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    if folds < 2 or n < folds or n - (n + folds - 1) // folds < 2:
        raise TooFewRows(f"{n} rows cannot give {folds} folds")
    order = np.random.default_rng(derive_seed(seed, "alpha_search", "folds")).permutation(n)
    parts = np.array_split(order, folds)
    return [
        (np.sort(np.concatenate(parts[:k] + parts[k + 1 :])), np.sort(parts[k]))
        for k in range(folds)
    ]


def alpha_search(
    X,
    y,
    grid: Optional[Sequence[float]] = None,
    split_fraction: float = DEFAULT_SPLIT_FRACTION,
    seed: int = 0,
    names: Optional[Sequence[str]] = None,
    folds: Optional[int] = None,
) -> Tuple[RidgeModel, float]:
    """
    Pick the alpha with the lowest validation RMSE (first one on ties) and
    refit on every row. Validation is a seeded holdout, or k-fold when
    ``folds`` is given.
    """
    X, y = _as_xy(X, y)
    grid = default_alpha_grid() if grid is None else [float(a) for a in grid]
    if not grid:
        raise ValueError("alpha grid must not be empty")
    if not 0 < split_fraction < 1:
        raise ValueError(f"split_fraction must be in (0, 1), got {split_fraction}")
    names = list(names) if names is not None else [f"x{i}" for i in range(X.shape[1])]

    splits = _kfold_split(len(y), folds, seed) if folds else _holdout_split(len(y), split_fraction, seed)
    best_alpha, best_rmse = grid[0], np.inf
    for alpha in grid:
        scores = []
        for train, val in splits:
            model = ridge_fit(X[train], y[train], alpha, names=names)
            scores.append(_rmse(model, X[val], y[val], names))
        score = float(np.mean(scores))
        if score < best_rmse:
            best_alpha, best_rmse = alpha, score
    return ridge_fit(X, y, best_alpha, names=names), best_alpha


def ensemble_predict(model: EnsembleModel, x: FeatureVector) -> float:
    return model.predict(x)


def _member_subsets(names: Sequence[str], group_by: str) -> List[List[str]]:
    if group_by == "family":
        subsets = [list(names)]
        for group in FEATURE_GROUPS:
            subsets.append([n for n in names if feature_group(n) != group])
    elif group_by == "view":
        views = sorted({feature_view(n) for n in names})
        subsets = [
            [n for n in names if feature_view(n) in combo]
            for size in range(1, len(views) + 1)
            for combo in itertools.combinations(views, size)
        ]
    else:
        raise ValueError(f"group_by must be 'family' or 'view', got {group_by!r}")
    return [s for s in subsets if s]


def build_ensemble(
    X,
    y,
    names: Sequence[str],
    group_by: Literal["family", "view"] = "family",
    alpha_grid: Optional[Sequence[float]] = None,
    split_fraction: float = DEFAULT_SPLIT_FRACTION,
    seed: int = 0,
    weights: Optional[Sequence[float]] = None,
    folds: Optional[int] = None,
) -> EnsembleModel:
    """
    ``family``: one head over every feature plus one per left-out feature group.
    ``view``: one head per non-empty combination of views.
    """
    X, y = _as_xy(X, y)
    names = list(names)
    members = []
    for subset in _member_subsets(names, group_by):
        model, _ = alpha_search(
            select_columns(X, names, subset),
            y,
            grid=alpha_grid,
            split_fraction=split_fraction,
            seed=seed,
            names=subset,
            folds=folds,
        )
        members.append(model)
    return EnsembleModel(members=members, member_weights=list(weights) if weights else [])


def sample_view_sets(view_set: ViewSet, samples: int, seed: int) -> List[ViewSet]:
    if samples < 1:
        raise ValueError(f"samples must be >= 1, got {samples}")
    if not view_set.is_stochastic:
        return [view_set]
    return [reseed(view_set, derive_seed(seed, "sample", k)) for k in range(samples)]


def multi_sample_predict(
    model: IQualityModel,
    img: Image,
    view_set: ViewSet,
    samples: int = 10,
    seed: int = 0,
    workers: int = 1,
) -> float:
    """Mean prediction over ``samples`` reseedings of the stochastic views."""
    view_sets = sample_view_sets(view_set, samples, seed)

    def predict_one(vs: ViewSet) -> float:
        return model.predict(extract_features(img, vs))

    if workers <= 1 or len(view_sets) == 1:
        scores = [predict_one(vs) for vs in view_sets]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(predict_one, view_sets))
    return float(np.mean(scores))


def pseudo_label_finetune(
    model: RidgeModel,
    labeled_X,
    labeled_y,
    unlabeled_X,
    teacher: IQualityModel,
    names: Sequence[str],
    alpha: Optional[float] = None,
    pseudo_weight: float = 1.0,
    strict: bool = False,
) -> RidgeModel:
    """
    Refit ``model``'s feature space on labeled rows plus unlabeled rows
    scored by ``teacher``. Pseudo rows carry ``pseudo_weight``.
    """
    if pseudo_weight < 0:
        raise ValueError(f"pseudo_weight must be nonnegative, got {pseudo_weight}")
    names = list(names)
    student_names = model.feature_names + model.dropped_features
    alpha = model.alpha if alpha is None else alpha
    X_l = select_columns(labeled_X, names, student_names)
    y_l = np.asarray(labeled_y, dtype=np.float64)
    X_u = np.asarray(unlabeled_X, dtype=np.float64).reshape(-1, len(names))

    if X_u.shape[0] == 0:
        if strict:
            raise EmptyUnlabeled("no unlabeled rows to pseudo-label")
        return ridge_fit(X_l, y_l, alpha, names=student_names)

    pseudo_y = teacher.predict_matrix(X_u, names)
    X_all = np.vstack([X_l, select_columns(X_u, names, student_names)])
    y_all = np.concatenate([y_l, pseudo_y])
    weights = np.concatenate([np.ones(len(y_l)), np.full(len(pseudo_y), float(pseudo_weight))])
    return ridge_fit(X_all, y_all, alpha, names=student_names, sample_weight=weights)


def view_set_hash(view_set: ViewSet) -> str:
    canonical = json.dumps(view_set.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class SavedModel(BaseModel):
    model: QualityModel
    view_set: ViewSet
    config_hash: str

    @classmethod
    def wrap(cls, model: Union[RidgeModel, EnsembleModel], view_set: ViewSet) -> "SavedModel":
        return cls(model=model, view_set=view_set, config_hash=view_set_hash(view_set))


def save_model(saved: SavedModel, path: Path | str) -> None:
    Path(path).write_text(saved.model_dump_json(indent=2), encoding="utf-8")


def load_model(path: Path | str) -> SavedModel:
    saved = SavedModel.model_validate_json(Path(path).read_text(encoding="utf-8"))
    if view_set_hash(saved.view_set) != saved.config_hash:
        raise ModelIntegrityError(f"{path}: view set does not match its recorded hash")
    return saved
