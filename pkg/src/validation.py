"""Training and evaluation protocol.

Models always train on class-balanced data: every UL row plus an equal number
of no-UL rows drawn from a negative pool, stratified by meteorological season
to follow the positives' seasonal mix. Cross-validation leaves out one UL
event day at a time; pool rows from the held-out day never enter training.
"""

import logging
import math
from collections import Counter
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from sklearn.metrics import roc_auc_score
from sklearn.model_selection import LeaveOneGroupOut

from src.ciforest import ForestModel, ForestParams, fit_forest, predict_forest_matrix
from src.data_model import SEASONS, Dataset, season_of
from src.errors import BadValue, InvariantViolation, IoFailure, PoolTooSmall, SingleClassEval, TooFewDays
from src.riskmap import EnsembleModel, predict_ensemble_matrix
from src.rng import derive_seed, substream

logger = logging.getLogger(__name__)

__all__ = [
    "CvFold", "FoldResult", "DiagnosticSummary", "balanced_sample", "balanced_draws", "loocv_by_day",
    "diagnostic_summary", "cv_auc", "sample_no_ul_hours", "hold_out_no_ul_hours", "fit_ensemble", "driver_medians",
    "write_cv_results", "write_summary", "season_of",
]

PathLike = Union[str, Path]


@dataclass(frozen=True)
class CvFold:
    held_out_day: date
    train: Dataset
    test: Dataset


@dataclass(frozen=True)
class FoldResult:
    fold: CvFold
    probabilities: np.ndarray
    model_seed: int
    model: Optional[ForestModel] = None


def _quartiles(values: np.ndarray) -> Tuple[float, float, float]:
    if values.size == 0:
        return (math.nan, math.nan, math.nan)
    q = np.quantile(values, [0.25, 0.5, 0.75])
    return float(q[0]), float(q[1]), float(q[2])


@dataclass(frozen=True)
class DiagnosticSummary:
    """Diagnosed probabilities at observed UL (tp) and sampled no-UL (fp) situations"""

    tp_probs: np.ndarray
    fp_probs: np.ndarray

    def __post_init__(self):
        for name in ("tp_probs", "fp_probs"):
            values = np.asarray(getattr(self, name), dtype=np.float64)
            if np.any((values < 0.0) | (values > 1.0)):
                raise InvariantViolation(f"{name} must lie in [0, 1]")
            values.setflags(write=False)
            object.__setattr__(self, name, values)

    @property
    def tp_quartiles(self) -> Tuple[float, float, float]:
        return _quartiles(self.tp_probs)

    @property
    def fp_quartiles(self) -> Tuple[float, float, float]:
        return _quartiles(self.fp_probs)

    @property
    def tp_median(self) -> float:
        return self.tp_quartiles[1]

    @property
    def fp_median(self) -> float:
        return self.fp_quartiles[1]

    def auc(self) -> float:
        """Area under the ROC curve separating tp from fp probabilities"""
        if self.tp_probs.size == 0 or self.fp_probs.size == 0:
            raise SingleClassEval("AUC needs both tp and fp probabilities")
        labels = np.concatenate([np.ones(self.tp_probs.size), np.zeros(self.fp_probs.size)])
        return float(roc_auc_score(labels, np.concatenate([self.tp_probs, self.fp_probs])))


def _season_quotas(targets: Dict[str, int], available: Dict[str, int]) -> Dict[str, int]:
    quotas = {s: min(targets.get(s, 0), available.get(s, 0)) for s in SEASONS}
    shortfall = sum(targets.values()) - sum(quotas.values())
    if shortfall:
        logger.warning(f"Negative pool short by {shortfall} rows in some seasons; redistributing")
        for s in SEASONS:
            extra = min(shortfall, available.get(s, 0) - quotas[s])
            quotas[s] += extra
            shortfall -= extra
    return quotas


def balanced_sample(positives: Dataset, negative_pool: Dataset, rng: np.random.Generator) -> Dataset:
    """All positives plus an equal, season-stratified draw from the pool, shuffled"""
    k = len(positives)
    if len(negative_pool) < k:
        raise PoolTooSmall(f"negative pool holds {len(negative_pool)} rows, need {k}",
                           pool=len(negative_pool), positives=k)
    if positives.n_positive != k:
        raise BadValue("balanced_sample expects UL rows only on the positive side")
    if negative_pool.n_positive:
        raise BadValue("negative pool contains UL rows")

    pool_seasons = negative_pool.seasons()
    quotas = _season_quotas(Counter(positives.seasons().tolist()), Counter(pool_seasons.tolist()))
    drawn = []
    for s in SEASONS:
        if quotas[s]:
            candidates = np.flatnonzero(pool_seasons == s)
            drawn.append(rng.choice(candidates, size=quotas[s], replace=False))
    chosen = np.sort(np.concatenate(drawn)) if drawn else np.array([], dtype=np.intp)

    combined = Dataset.concat([positives, negative_pool.subset(chosen)])
    return combined.subset(rng.permutation(len(combined)))


def _member_seed(base: int, index: int) -> int:
    return derive_seed(substream(base, index, 1))


def balanced_draws(positives: Dataset, negative_pool: Dataset, n_models: int, seed: int) -> List[Dataset]:
    """The balanced training set of every ensemble member"""
    return [balanced_sample(positives, negative_pool, substream(seed, m)) for m in range(n_models)]


def _fit_member(positives: Dataset, negative_pool: Dataset, params: ForestParams, base: int,
                index: int) -> ForestModel:
    sample = balanced_sample(positives, negative_pool, substream(base, index))
    member_params = params.model_copy(update={"seed": _member_seed(base, index)})
    return fit_forest(sample, member_params)


def fit_ensemble(positives: Dataset, negative_pool: Dataset, params: ForestParams, n_models: int = 100,
                 rng: Optional[np.random.Generator] = None, workers: int = 1) -> EnsembleModel:
    """``n_models`` forests, each trained on its own balanced negative draw"""
    if n_models < 1:
        raise BadValue("n_models must be >= 1")
    positives = positives.positives()
    base = derive_seed(rng if rng is not None else substream(params.seed))
    models = Parallel(n_jobs=workers)(
        delayed(_fit_member)(positives, negative_pool, params, base, m) for m in range(n_models)
    )
    logger.info(f"Fitted ensemble of {n_models} forests on {len(positives)} UL rows")
    return EnsembleModel(models=tuple(models))


def ensemble_seed(params: ForestParams, rng: Optional[np.random.Generator] = None) -> int:
    """Base seed fit_ensemble derives; balanced_draws with it reproduces the members' training sets"""
    return derive_seed(rng if rng is not None else substream(params.seed))


def _run_fold(index: int, held_out: date, positives: Dataset, train_rows: np.ndarray, data: Dataset,
              negative_pool: Dataset, params: ForestParams, base: int, keep_model: bool) -> FoldResult:
    fold_rng = substream(base, index)
    pool_train = negative_pool.subset(np.flatnonzero(~negative_pool.day_mask({held_out})))
    train = balanced_sample(positives.subset(train_rows), pool_train, fold_rng)
    test = data.subset(np.flatnonzero(data.day_mask({held_out})))

    model_seed = derive_seed(fold_rng)
    model = fit_forest(train, params.model_copy(update={"seed": model_seed}))
    probabilities = predict_forest_matrix(model, test.X)
    probabilities.setflags(write=False)
    logger.debug(f"fold {index} ({held_out}): {len(train)} train rows, {len(test)} test rows")
    return FoldResult(fold=CvFold(held_out_day=held_out, train=train, test=test),
                      probabilities=probabilities, model_seed=model_seed,
                      model=model if keep_model else None)


def loocv_by_day(data: Dataset, negative_pool: Dataset, params: ForestParams,
                 rng: Optional[np.random.Generator] = None, workers: int = 1,
                 keep_models: bool = False) -> List[FoldResult]:
    """Leave-one-event-day-out cross-validation: one fold and one fitted model per UL day"""
    positives = data.positives()
    groups = positives.days().astype(np.int64)
    n_days = len(np.unique(groups))
    if n_days < 2:
        raise TooFewDays(f"cross-validation needs >= 2 UL event days, got {n_days}", days=n_days)

    base = derive_seed(rng if rng is not None else substream(params.seed))
    splits = list(LeaveOneGroupOut().split(positives.X, positives.y, groups))
    results = Parallel(n_jobs=workers)(
        delayed(_run_fold)(i, positives.days()[test_rows[0]].item(), positives, train_rows, data,
                           negative_pool, params, base, keep_models)
        for i, (train_rows, test_rows) in enumerate(splits)
    )
    logger.info(f"Cross-validation finished: {len(results)} folds over {n_days} event days")
    return results


def cv_auc(results: Sequence[FoldResult]) -> float:
    """Pooled AUC over every held-out row of every fold"""
    y = np.concatenate([r.fold.test.y for r in results])
    p = np.concatenate([r.probabilities for r in results])
    if y.size == 0 or y.min() == y.max():
        raise SingleClassEval("held-out rows contain a single class")
    return float(roc_auc_score(y, p))


def diagnostic_summary(results: Sequence[FoldResult], no_ul_sample: Optional[Dataset] = None,
                       ensemble: Optional[EnsembleModel] = None) -> DiagnosticSummary:
    """tp from held-out UL rows; fp from the ensemble on sampled no-UL rows.

    Without an ensemble or sample, fp falls back to the held-out no-UL rows of the folds.
    """
    if not results:
        raise BadValue("diagnostic_summary needs at least one fold")
    tp = np.concatenate([r.probabilities[r.fold.test.y == 1] for r in results])
    if ensemble is not None and no_ul_sample is not None and len(no_ul_sample):
        fp = predict_ensemble_matrix(ensemble, no_ul_sample.X)
    else:
        fp = np.concatenate([r.probabilities[r.fold.test.y == 0] for r in results])
    return DiagnosticSummary(tp_probs=tp, fp_probs=fp)


def _season_year(timestamps: np.ndarray) -> np.ndarray:
    months = timestamps.astype("datetime64[M]").astype(np.int64)
    years = months // 12 + 1970
    # December opens the following year's winter
    return years + (months % 12 == 11)


def sample_no_ul_hours(pool: Dataset, per_season_per_year: int = 4, rng: Optional[np.random.Generator] = None,
                       exclude_days=()) -> Dataset:
    """Whole-hour no-UL rows from ``per_season_per_year`` distinct days per season and year"""
    if per_season_per_year < 1:
        raise BadValue("per_season_per_year must be >= 1")
    rng = rng if rng is not None else substream(0)
    blocked = set(exclude_days) | set(pool.event_days())
    minutes = pool.timestamps.astype(np.int64) % 60
    eligible = np.flatnonzero((pool.y == 0) & (minutes == 0) & ~pool.day_mask(blocked))
    if eligible.size == 0:
        raise PoolTooSmall("no whole-hour no-UL rows on no-UL days in the pool")

    frame = pd.DataFrame({
        "row": eligible,
        "season": pool.seasons()[eligible],
        "season_year": _season_year(pool.timestamps[eligible]),
        "day": pool.days()[eligible].astype(np.int64),
    })
    chosen = []
    for (_, _), group in frame.groupby(["season_year", "season"], sort=True):
        days = np.unique(group["day"].to_numpy())
        picked = np.sort(rng.choice(days, size=min(per_season_per_year, days.size), replace=False))
        for day in picked:
            rows = group["row"].to_numpy()[group["day"].to_numpy() == day]
            chosen.append(int(rng.choice(rows)))
    logger.info(f"Sampled {len(chosen)} no-UL hours for false-positive diagnostics")
    return pool.subset(np.sort(np.array(chosen, dtype=np.intp)))


def hold_out_no_ul_hours(pool: Dataset, per_season_per_year: int = 4, rng: Optional[np.random.Generator] = None,
                         exclude_days=()) -> Tuple[Dataset, Dataset]:
    """Sample no-UL hours for false-positive diagnostics and drop their days from the pool.

    Returns ``(sample, training_pool)``. Ensembles fitted on ``training_pool``
    never see a row from a sampled day, so their fp probabilities are out of sample.
    """
    sample = sample_no_ul_hours(pool, per_season_per_year, rng, exclude_days)
    held_days = [d.item() for d in np.unique(sample.days())]
    training_pool = pool.subset(np.flatnonzero(~pool.day_mask(held_days)))
    logger.info(f"Held out {len(held_days)} no-UL days; {len(training_pool)} of {len(pool)} pool rows remain")
    return sample, training_pool


def driver_medians(dataset: Dataset, variables: Sequence[str]) -> Dict[str, float]:
    """Median value of each named variable over the UL rows"""
    positives = dataset.positives()
    if len(positives) == 0:
        raise BadValue("no UL rows to summarize")
    return {name: float(np.median(positives.X[:, dataset.schema.index(name)])) for name in variables}


def _fmt_minute(values: np.ndarray) -> List[str]:
    return [s + "Z" for s in np.datetime_as_string(values, unit="m")]


def write_cv_results(results: Sequence[FoldResult], path: PathLike) -> None:
    frames = []
    for r in sorted(results, key=lambda r: r.fold.held_out_day):
        test = r.fold.test
        frames.append(pd.DataFrame({
            "fold_day": r.fold.held_out_day.isoformat(),
            "row_timestamp": _fmt_minute(test.timestamps),
            "label": np.where(test.y == 1, "UL", "noUL"),
            "diagnosed_probability": [repr(float(p)) for p in r.probabilities],
        }, columns=["fold_day", "row_timestamp", "label", "diagnosed_probability"]))
    try:
        pd.concat(frames, ignore_index=True).to_csv(path, index=False, lineterminator="\n")
    except OSError as e:
        raise IoFailure(f"cannot write cross-validation results {path}: {e}") from e


def write_summary(summary: DiagnosticSummary, path: PathLike) -> None:
    rows = []
    for group, values, (q1, q2, q3) in (("tp", summary.tp_probs, summary.tp_quartiles),
                                        ("fp", summary.fp_probs, summary.fp_quartiles)):
        rows.append({"group": group, "n": int(values.size), "q25": repr(q1), "median": repr(q2), "q75": repr(q3)})
    try:
        pd.DataFrame(rows, columns=["group", "n", "q25", "median", "q75"]).to_csv(
            path, index=False, lineterminator="\n")
    except OSError as e:
        raise IoFailure(f"cannot write summary {path}: {e}") from e
