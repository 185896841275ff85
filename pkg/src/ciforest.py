"""Random forests of conditional inference trees.

Each tree is grown on a without-replacement subsample drawn from its own
Philox substream (seed, tree index), so a forest is bit-identical no matter
how many workers grow it. Forest probabilities are the mean of the leaf
fractions reached in every tree.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field, field_validator
from sklearn.metrics import roc_auc_score

from src.citree import ConditionalTree, TreeParams, grow_from_arrays, predict_tree_matrix, variables_used
from src.data_model import Dataset, FeatureSchema
from src.errors import BadValue, IoFailure, LengthMismatch, SingleClassEval, TooFewRows
from src.rng import derive_seed, substream

logger = logging.getLogger(__name__)

ACCURACY_CUTOFF = 0.5


class Metric(str, Enum):
    ACCURACY = "accuracy@0.5"
    AUC = "AUC"


class ForestParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_trees: int = 500
    subsample_fraction: float = 2.0 / 3.0
    tree_params: TreeParams = Field(default_factory=TreeParams)
    seed: int = 0

    @field_validator("n_trees")
    @classmethod
    def _n_trees(cls, value: int) -> int:
        if value < 1:
            raise ValueError("n_trees must be >= 1")
        return value

    @field_validator("subsample_fraction")
    @classmethod
    def _fraction(cls, value: float) -> float:
        if not 0.0 < value <= 1.0:
            raise ValueError("subsample_fraction must lie in (0, 1]")
        return value

    @field_validator("seed")
    @classmethod
    def _seed(cls, value: int) -> int:
        if not 0 <= value < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        return value


@dataclass(frozen=True)
class ForestModel:
    trees: Tuple[ConditionalTree, ...]
    in_bag: Tuple[np.ndarray, ...]
    params: ForestParams
    schema: FeatureSchema
    n_train: int

    def out_of_bag(self, tree_index: int) -> np.ndarray:
        return np.setdiff1d(np.arange(self.n_train), self.in_bag[tree_index])

    def variables_used(self) -> set:
        used = set()
        for tree in self.trees:
            used |= variables_used(tree)
        return used


def in_bag_size(n: int, fraction: float) -> int:
    # the epsilon keeps floor(2/3 * 300) at 200 despite 2/3 being inexact
    return max(1, int(math.floor(fraction * n + 1e-9)))


def _fit_one(X: np.ndarray, y: np.ndarray, params: ForestParams, index: int,
             names: Tuple[str, ...]) -> Tuple[ConditionalTree, np.ndarray]:
    rng = substream(params.seed, index)
    n = len(y)
    rows = np.sort(rng.choice(n, size=in_bag_size(n, params.subsample_fraction), replace=False))
    tree = grow_from_arrays(X[rows], y[rows], params.tree_params, rng, names)
    return tree, rows


def fit_forest(data: Dataset, params: ForestParams, workers: int = 1) -> ForestModel:
    """Grow ``params.n_trees`` trees, each on its own 2/3-style subsample"""
    n = len(data)
    if n < params.tree_params.min_split:
        raise TooFewRows(f"{n} rows is below min_split = {params.tree_params.min_split}")
    if params.tree_params.mtry > data.schema.count:
        raise BadValue(f"mtry = {params.tree_params.mtry} exceeds {data.schema.count} predictors")

    fitted = Parallel(n_jobs=workers)(
        delayed(_fit_one)(data.X, data.y, params, i, data.schema.names) for i in range(params.n_trees)
    )
    trees = tuple(t for t, _ in fitted)
    in_bag = tuple(rows for _, rows in fitted)
    for rows in in_bag:
        rows.setflags(write=False)
    logger.info(f"Fitted forest: {params.n_trees} trees on {n} rows (seed {params.seed})")
    return ForestModel(trees=trees, in_bag=in_bag, params=params, schema=data.schema, n_train=n)


def predict_forest_matrix(model: ForestModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.schema.count:
        raise LengthMismatch(f"expected rows of {model.schema.count} features, got {X.shape}")
    per_tree = np.stack([predict_tree_matrix(tree, X) for tree in model.trees])
    # summing sorted values makes the mean independent of tree order
    return np.sort(per_tree, axis=0).sum(axis=0) / len(model.trees)


def predict_forest(model: ForestModel, x) -> float:
    """Mean leaf fraction over all trees for one feature vector"""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.schema.count,):
        raise LengthMismatch(f"expected {model.schema.count} features, got {x.shape}")
    return float(predict_forest_matrix(model, x[None, :])[0])


def score(metric: Metric, y: np.ndarray, prob: np.ndarray) -> float:
    if Metric(metric) is Metric.AUC:
        return float(roc_auc_score(y, prob))
    return float(np.mean((prob > ACCURACY_CUTOFF) == (y == 1)))


def _permuted_metric(model: ForestModel, X: np.ndarray, y: np.ndarray, column: int,
                     metric: Metric, n_repeats: int, seed: int) -> float:
    rng = substream(seed, column)
    scores = []
    for _ in range(n_repeats):
        shuffled = X.copy()
        shuffled[:, column] = rng.permutation(X[:, column])
        scores.append(score(metric, y, predict_forest_matrix(model, shuffled)))
    return math.fsum(scores) / n_repeats


def permutation_importance(model: ForestModel, eval_data: Dataset, metric: Union[Metric, str] = Metric.ACCURACY,
                           n_repeats: int = 5, rng: Optional[np.random.Generator] = None,
                           workers: int = 1) -> np.ndarray:
    """Drop in ``metric`` when each column of ``eval_data`` is shuffled"""
    metric = Metric(metric)
    if len(eval_data) == 0 or eval_data.n_positive in (0, len(eval_data)):
        raise SingleClassEval("importance needs an evaluation set containing both classes")
    if n_repeats < 1:
        raise BadValue("n_repeats must be >= 1")
    rng = rng if rng is not None else substream(model.params.seed)
    seed = derive_seed(rng)

    X, y = eval_data.X, eval_data.y
    baseline = score(metric, y, predict_forest_matrix(model, X))
    used = sorted(model.variables_used())
    permuted = Parallel(n_jobs=workers)(
        delayed(_permuted_metric)(model, X, y, j, metric, n_repeats, seed) for j in used
    )
    # columns no tree splits on cannot change a prediction
    importance = np.zeros(model.schema.count, dtype=np.float64)
    for j, value in zip(used, permuted):
        importance[j] = baseline - value
    return importance


@dataclass(frozen=True)
class ImportanceEntry:
    name: str
    median_importance: float
    per_model: Tuple[float, ...]


@dataclass(frozen=True)
class ImportanceReport:
    entries: Tuple[ImportanceEntry, ...]
    metric: Metric

    @property
    def medians(self) -> np.ndarray:
        return np.array([e.median_importance for e in self.entries])

    def ranking(self) -> List[str]:
        """Variable names by decreasing median importance (schema order on ties)"""
        order = np.lexsort((np.arange(len(self.entries)), -self.medians))
        return [self.entries[i].name for i in order]

    def to_frame(self) -> pd.DataFrame:
        n_models = len(self.entries[0].per_model) if self.entries else 0
        frame = pd.DataFrame({
            "variable": [e.name for e in self.entries],
            "median": [e.median_importance for e in self.entries],
        })
        for m in range(n_models):
            frame[f"model_{m:03d}"] = [e.per_model[m] for e in self.entries]
        return frame


def median_importance(models: Sequence[ForestModel], evals: Sequence[Dataset],
                      metric: Union[Metric, str] = Metric.ACCURACY, rng: Optional[np.random.Generator] = None,
                      n_repeats: int = 5, workers: int = 1) -> ImportanceReport:
    """Per-variable median of permutation importance across a model collection"""
    if not models:
        raise BadValue("median_importance needs at least one model")
    if len(models) != len(evals):
        raise LengthMismatch(f"{len(models)} models but {len(evals)} evaluation sets")
    metric = Metric(metric)
    seed = derive_seed(rng if rng is not None else substream(0))
    per_model = np.stack([
        permutation_importance(model, ev, metric, n_repeats, substream(seed, m), workers)
        for m, (model, ev) in enumerate(zip(models, evals))
    ])
    medians = np.median(per_model, axis=0)
    schema = models[0].schema
    entries = tuple(
        ImportanceEntry(name=name, median_importance=float(medians[j]), per_model=tuple(per_model[:, j].tolist()))
        for j, name in enumerate(schema.names)
    )
    logger.info(f"Importance over {len(models)} models; top variables: "
                f"{', '.join(ImportanceReport(entries, metric).ranking()[:3])}")
    return ImportanceReport(entries=entries, metric=metric)


def write_importance_report(report: ImportanceReport, path: Union[str, Path]) -> None:
    frame = report.to_frame()
    for column in frame.columns[1:]:
        frame[column] = [repr(float(v)) for v in frame[column]]
    try:
        frame.to_csv(path, index=False, lineterminator="\n")
    except OSError as e:
        raise IoFailure(f"cannot write importance report {path}: {e}") from e
