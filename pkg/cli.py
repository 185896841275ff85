#!/usr/bin/env python3
"""Upward-lightning risk pipeline.

Subcommands: ingest, synth, train, cv, importance, match, diagnose-grid, riskmap.
Settings come from defaults < --config file < ULRISK_* environment < flags.
"""
import argparse
import json
import logging
import os
import sys
from datetime import datetime
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from src.ciforest import median_importance, write_importance_report
from src.config import RunConfig, build_run_config, config
from src.data_model import (Dataset, event_days, load_feature_table, load_schema, merge_event_days,
                            save_feature_table)
from src.errors import BadValue, ConfigInvalid, IoFailure, PoolTooSmall, UlriskError
from src.geospatial import (GridSpec, flash_hours_per_cell, load_grid_fields, load_strikes, load_turbines,
                            match_strikes_to_turbines, turbines_per_cell, write_cell_counts, write_matches)
from src.handlers import RunRecorder
from src.model_store import NO_UL_HOLDOUT_FILE, load_ensemble, save_ensemble
from src.riskmap import (canonical_cold_season_hours, compare_with_observed, diagnose_hours, exceedance_counts,
                         export_riskmap, load_hours, mask_no_turbine_cells, summarize, write_raster)
from src.rng import derive_seed, substream
from src.synth import SynthConfig, write_synth_bundle
from src.validation import (balanced_draws, cv_auc, diagnostic_summary, driver_medians, fit_ensemble,
                            hold_out_no_ul_hours, loocv_by_day, sample_no_ul_hours, write_cv_results,
                            write_summary)

logger = logging.getLogger("ulrisk.cli")

COLD_SEASON = "cold-season"
# substream keys for CLI-level draws
_NO_UL_SAMPLE, _IMPORTANCE_EVAL, _IMPORTANCE_PERMUTE = 11, 13, 17


def setup_logging(level: str) -> Path:
    """Timestamped log file under the log dir plus stderr at the requested level"""
    log_dir = config.log_dir
    os.makedirs(log_dir, exist_ok=True)
    log_file = log_dir / f"ulrisk_{datetime.now().strftime('%Y%m%d_%H%M%S')}.log"

    logging.basicConfig(
        filename=log_file,
        level=logging.DEBUG if config.debug else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S',
        force=True,
    )
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(getattr(logging, level.upper(), logging.INFO))
    console.setFormatter(logging.Formatter('%(levelname)s - %(message)s'))
    logging.getLogger().addHandler(console)
    return log_file


def resolve_hours(value: Optional[str]) -> np.ndarray:
    """``cold-season``, a file with one hour per line, or a comma-separated hour list"""
    if not value:
        raise ConfigInvalid("--hours is required", field="hours")
    if value == COLD_SEASON:
        return canonical_cold_season_hours()
    if Path(value).exists():
        return load_hours(value)
    tokens = [t.strip() for t in value.split(",") if t.strip()]
    stamps = pd.to_datetime(pd.Series(tokens), utc=True, format="ISO8601", errors="coerce")
    if stamps.isna().any():
        raise ConfigInvalid(f"--hours is neither {COLD_SEASON!r}, a file, nor a list of ISO hours: {value}")
    return np.unique(stamps.dt.tz_convert(None).to_numpy(dtype="datetime64[ns]").astype("datetime64[h]"))


def _schema(cfg: RunConfig):
    return load_schema(cfg.schema_path)


def _output_dir(cfg: RunConfig) -> Path:
    try:
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoFailure(f"cannot create output directory {cfg.output_dir}: {e}") from e
    return cfg.output_dir


def _threshold_label(threshold: float) -> str:
    return f"{threshold:g}"


def run_ingest(cfg: RunConfig, recorder: RunRecorder) -> None:
    cfg.check_paths(["data"] + (["merge"] if cfg.merge else []))
    schema = _schema(cfg)
    dataset = load_feature_table(cfg.data, schema)
    days = event_days(dataset)
    if cfg.merge:
        other = load_feature_table(cfg.merge, schema)
        other_days = event_days(other)
        merged = merge_event_days(days, other_days)
        logger.info(f"Merged event days: {len(days)} + {len(other_days)} -> {len(merged)} "
                    f"({len(days & other_days)} shared)")
        dataset, days = Dataset.concat([dataset, other]), merged

    out = _output_dir(cfg)
    save_feature_table(dataset, recorder.artifact("features", out / "features.csv"))
    recorder.artifact("event_days", out / "event_days.txt").write_text(
        "".join(f"{d.isoformat()}\n" for d in sorted(days)), encoding="utf-8")
    print(f"{len(dataset)} rows, {dataset.n_positive} UL, {len(days)} event days")


def run_synth(cfg: RunConfig, recorder: RunRecorder) -> None:
    try:
        start = np.datetime64(cfg.start_hour.rstrip("Z"), "h")
    except ValueError as e:
        raise ConfigInvalid(f"invalid --start-hour {cfg.start_hour!r}", field="start_hour") from e
    hours = start + np.arange(cfg.n_hours).astype("timedelta64[h]")
    synth_config = SynthConfig(n_event_days=cfg.n_event_days, seed=cfg.seed, spatial_pattern=cfg.pattern)
    paths = write_synth_bundle(synth_config, _output_dir(cfg), GridSpec(), hours, cfg.grid_format)
    for kind, path in paths.items():
        recorder.artifact(kind, path)
    print(f"synthetic bundle written to {cfg.output_dir}")


def _select_subtype(cfg: RunConfig, data: Dataset) -> Dataset:
    subtype = cfg.ul_subtype()
    if subtype is None:
        return data
    selected = data.with_ul_subtype(subtype)
    if selected.n_positive == 0:
        raise BadValue(f"no UL rows of subtype {subtype} in the feature table", field="subtype")
    logger.info(f"Keeping {selected.n_positive} of {data.n_positive} UL rows (subtype {subtype})")
    return selected


def _training_inputs(cfg: RunConfig):
    cfg.check_paths(["data", "pool"])
    schema = _schema(cfg)
    data = _select_subtype(cfg, load_feature_table(cfg.data, schema))
    return data, load_feature_table(cfg.pool, schema)


def run_train(cfg: RunConfig, recorder: RunRecorder) -> None:
    data, pool = _training_inputs(cfg)
    try:
        no_ul, pool = hold_out_no_ul_hours(pool, cfg.no_ul_per_season, substream(cfg.seed, _NO_UL_SAMPLE),
                                           exclude_days=event_days(data))
    except PoolTooSmall as e:
        logger.warning(f"No no-UL hours held out for false-positive diagnostics: {e}")
        no_ul = None
    ensemble = fit_ensemble(data.positives(), pool, cfg.forest_params(), cfg.n_models, workers=cfg.workers)
    model_dir = save_ensemble(ensemble, recorder.artifact("model", _output_dir(cfg) / "model"))
    if no_ul is not None:
        save_feature_table(no_ul, recorder.artifact("no_ul_holdout", model_dir / NO_UL_HOLDOUT_FILE))
    print(f"trained {len(ensemble)} models on {data.n_positive} UL rows")


def _false_positive_inputs(cfg: RunConfig, data: Dataset):
    """No-UL hours the ensemble never trained on: its held-out file, or a draw from --no-ul-pool"""
    cfg.check_paths(["model"])
    ensemble = load_ensemble(cfg.model)
    if cfg.no_ul_pool:
        cfg.check_paths(["no_ul_pool"])
        source = load_feature_table(cfg.no_ul_pool, ensemble.schema)
        no_ul = sample_no_ul_hours(source, cfg.no_ul_per_season, substream(cfg.seed, _NO_UL_SAMPLE),
                                   exclude_days=event_days(data))
    else:
        held_out = Path(cfg.model) / NO_UL_HOLDOUT_FILE
        if not held_out.exists():
            raise ConfigInvalid(f"--no-ul-pool is required: {cfg.model} holds no {NO_UL_HOLDOUT_FILE}",
                                field="no_ul_pool")
        no_ul = load_feature_table(held_out, ensemble.schema)
    return no_ul, ensemble


def run_cv(cfg: RunConfig, recorder: RunRecorder) -> None:
    data, pool = _training_inputs(cfg)
    results = loocv_by_day(data, pool, cfg.forest_params(), workers=cfg.workers)
    out = _output_dir(cfg)
    write_cv_results(results, recorder.artifact("cv_results", out / "cv_results.csv"))

    if cfg.model:
        summary = diagnostic_summary(results, *_false_positive_inputs(cfg, data))
    else:
        summary = diagnostic_summary(results)
    write_summary(summary, recorder.artifact("cv_summary", out / "cv_summary.csv"))

    line = f"{len(results)} folds; median tp {summary.tp_median:.3f}, median fp {summary.fp_median:.3f}"
    if len(np.unique(np.concatenate([r.fold.test.y for r in results]))) == 2:
        line += f"; pooled AUC {cv_auc(results):.3f}"
    print(line)


def run_importance(cfg: RunConfig, recorder: RunRecorder) -> None:
    cfg.check_paths(["model"])
    ensemble = load_ensemble(cfg.model)
    schema = ensemble.schema
    data = None
    if cfg.eval_data:
        cfg.check_paths(["eval_data"])
        evals = [_select_subtype(cfg, load_feature_table(cfg.eval_data, schema))] * len(ensemble)
    else:
        data, pool = _training_inputs(cfg)
        evals = balanced_draws(data.positives(), pool, len(ensemble),
                               derive_seed(substream(cfg.seed, _IMPORTANCE_EVAL)))
    report = median_importance(list(ensemble.models), evals, cfg.metric,
                               rng=substream(cfg.seed, _IMPORTANCE_PERMUTE),
                               n_repeats=cfg.n_repeats, workers=cfg.workers)
    out = _output_dir(cfg)
    write_importance_report(report, recorder.artifact("importance", out / "importance.csv"))

    top = report.ranking()[:3]
    if data is not None:
        medians = driver_medians(data, top)
        pd.DataFrame({"variable": list(medians), "ul_median": [repr(v) for v in medians.values()]}).to_csv(
            recorder.artifact("driver_medians", out / "driver_medians.csv"), index=False, lineterminator="\n")
    print(f"top variables: {', '.join(top)}")


def _grid_spec(cfg: RunConfig) -> GridSpec:
    if cfg.grids:
        return next(iter(load_grid_fields(cfg.grids).values())).spec
    return GridSpec()


def run_match(cfg: RunConfig, recorder: RunRecorder) -> None:
    cfg.check_paths(["turbines", "strikes"])
    turbines = load_turbines(cfg.turbines)
    strikes = load_strikes(cfg.strikes)
    matches = match_strikes_to_turbines(strikes, turbines, cfg.radius, cfg.great_circle,
                                        cfg.radius_m if cfg.great_circle else None)
    spec = _grid_spec(cfg)
    out = _output_dir(cfg)
    write_matches(matches, recorder.artifact("matches", out / "matches.csv"))
    write_cell_counts(flash_hours_per_cell(matches, spec), spec,
                      recorder.artifact("flash_hours", out / "flash_hours.csv"), "flash_hours")
    write_cell_counts(turbines_per_cell(turbines, spec), spec,
                      recorder.artifact("turbines_per_cell", out / "turbines_per_cell.csv"), "turbines")
    print(f"{len(matches)} strike/turbine matches from {len(strikes)} strikes")


def _rasters(cfg: RunConfig):
    cfg.check_paths(["model", "grids"])
    ensemble = load_ensemble(cfg.model)
    fields = load_grid_fields(cfg.grids)
    return diagnose_hours(ensemble, fields, resolve_hours(cfg.hours), cfg.representative, cfg.workers)


def run_diagnose_grid(cfg: RunConfig, recorder: RunRecorder) -> None:
    rasters = _rasters(cfg)
    raster_dir = recorder.artifact("rasters", _output_dir(cfg) / "rasters")
    raster_dir.mkdir(exist_ok=True)
    for raster in rasters:
        stamp = str(np.datetime_as_string(raster.time, unit="h")).replace("-", "")
        write_raster(raster, raster_dir / f"prob_{stamp}.csv")
    print(f"diagnosed {len(rasters)} hours")


def run_riskmap(cfg: RunConfig, recorder: RunRecorder) -> None:
    rasters = _rasters(cfg)
    turbines = None
    if cfg.turbines:
        cfg.check_paths(["turbines"])
        turbines = load_turbines(cfg.turbines)
    flash = None
    if cfg.strikes and turbines is not None:
        cfg.check_paths(["strikes"])
        matches = match_strikes_to_turbines(load_strikes(cfg.strikes), turbines, cfg.radius)
        flash = flash_hours_per_cell(matches, rasters[0].spec)

    out = _output_dir(cfg)
    extension = "geojson" if cfg.format == "geojson" else "csv"
    for threshold in cfg.thresholds:
        label = _threshold_label(threshold)
        risk_map = exceedance_counts(rasters, threshold)
        if turbines is not None:
            risk_map = mask_no_turbine_cells(risk_map, turbines)
        export_riskmap(risk_map, cfg.format, recorder.artifact("riskmap", out / f"riskmap_{label}.{extension}"))
        text = summarize(risk_map)
        if flash is not None:
            text += f"spearman_vs_flash_hours: {compare_with_observed(risk_map, flash)!r}\n"
        recorder.artifact("summary", out / f"summary_{label}.txt").write_text(text, encoding="utf-8")
        print(text, end="")


COMMANDS: Dict[str, Callable[[RunConfig, RunRecorder], None]] = {
    "ingest": run_ingest,
    "synth": run_synth,
    "train": run_train,
    "cv": run_cv,
    "importance": run_importance,
    "match": run_match,
    "diagnose-grid": run_diagnose_grid,
    "riskmap": run_riskmap,
}


class CliArgumentParser(argparse.ArgumentParser):
    """Usage errors also print the machine-readable error line before exiting 2"""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        _emit_error(ConfigInvalid(f"{self.prog}: {message}").to_record())
        self.exit(2)


def _add_forest_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-trees", type=int, help="trees per forest (default 500)")
    p.add_argument("--subsample", type=float, help="in-bag fraction per tree (default 2/3)")
    p.add_argument("--mtry", type=int, help="candidate variables per split (default 6)")
    p.add_argument("--alpha", type=float, help="split significance level (default 0.05)")
    p.add_argument("--min-split", type=int, help="minimum node size to attempt a split (default 20)")
    p.add_argument("--min-bucket", type=int, help="minimum rows per child (default 7)")
    p.add_argument("--max-permutation-n", type=int, help="largest n for exact permutation p-values (default 8)")


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", "--features", dest="data", help="labelled feature CSV")
    p.add_argument("--pool", help="no-UL feature CSV used as the negative pool")
    p.add_argument("--subtype", help="UL rows to use: all or LLS (LLS-detectable only; default all)")


def _add_grid_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", help="ensemble directory written by train")
    p.add_argument("--grids", help="directory of gridded fields")
    p.add_argument("--hours", help=f"'{COLD_SEASON}', an hour-list file, or comma-separated ISO hours")
    p.add_argument("--representative", help="cell point to diagnose: center or lower_left")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value (or flat YAML) config file")
    common.add_argument("--output-dir", help="directory receiving every artifact (default output)")
    common.add_argument("--schema", dest="schema_path", help="feature schema CSV (default embedded v1)")
    common.add_argument("--seed", type=int, help="run seed (default 0)")
    common.add_argument("--workers", type=int, help="parallel workers (default 1)")
    common.add_argument("--log-level", default=None, help="stderr log level (default LOG_LEVEL or INFO)")

    parser = CliArgumentParser(prog="ulrisk", description="Upward-lightning risk pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="validate and canonicalize a feature table")
    p.add_argument("--data", "--features", dest="data", help="labelled feature CSV")
    p.add_argument("--merge", help="second feature CSV to merge (event days are unioned)")

    p = sub.add_parser("synth", parents=[common], help="write a synthetic ground-truth bundle")
    p.add_argument("--n-event-days", type=int, help="UL event days in the tower dataset (default 20)")
    p.add_argument("--pattern", help="uniform, west-gradient or frontal-band")
    p.add_argument("--n-hours", type=int, help="hours of gridded fields (default 24)")
    p.add_argument("--start-hour", help="first gridded hour, e.g. 2019-03-04T00")
    p.add_argument("--grid-format", help="csv or binary")

    p = sub.add_parser("train", parents=[common], help="fit an ensemble of forests")
    _add_training_flags(p)
    _add_forest_flags(p)
    p.add_argument("--n-models", type=int, help="ensemble members (default 100)")
    p.add_argument("--no-ul-per-season", type=int, help="no-UL days held out per season and year (default 4)")

    p = sub.add_parser("cv", parents=[common], help="leave-one-event-day-out cross-validation")
    _add_training_flags(p)
    _add_forest_flags(p)
    p.add_argument("--model", help="ensemble for false-positive diagnostics on sampled no-UL hours")
    p.add_argument("--no-ul-pool", help="no-UL feature CSV disjoint from the ensemble's training pool "
                                        "(default: the no-UL hours train held out)")
    p.add_argument("--no-ul-per-season", type=int, help="no-UL days sampled per season and year (default 4)")

    p = sub.add_parser("importance", parents=[common], help="median permutation importance of an ensemble")
    _add_training_flags(p)
    p.add_argument("--model", help="ensemble directory written by train")
    p.add_argument("--eval-data", help="evaluation feature CSV (default: balanced draws from --data/--pool)")
    p.add_argument("--metric", help="accuracy@0.5 or AUC")
    p.add_argument("--n-repeats", type=int, help="shuffles per variable (default 5)")

    p = sub.add_parser("match", parents=[common], help="match strikes to turbines")
    p.add_argument("--turbines", help="turbine CSV (id,lat,lon)")
    p.add_argument("--strikes", help="strike CSV (timestamp,lat,lon)")
    p.add_argument("--radius", type=float, help="match radius in degrees (default 0.003)")
    p.add_argument("--great-circle", action="store_true", default=None, help="use haversine distance")
    p.add_argument("--radius-m", type=float, help="great-circle radius in metres (default 300)")
    p.add_argument("--grids", help="gridded fields defining the cell grid (default canonical domain)")

    p = sub.add_parser("diagnose-grid", parents=[common], help="hourly median probability rasters")
    _add_grid_flags(p)

    p = sub.add_parser("riskmap", parents=[common], help="threshold exceedance risk maps")
    _add_grid_flags(p)
    p.add_argument("--thresholds", help="comma-separated thresholds in (0, 1) (default 0.5)")
    p.add_argument("--turbines", help="turbine CSV; cells without turbines are flagged")
    p.add_argument("--strikes", help="strike CSV for the rank comparison with observed flash hours")
    p.add_argument("--radius", type=float, help="match radius in degrees (default 0.003)")
    p.add_argument("--format", help="csv or geojson")
    return parser


def _emit_error(record: Dict) -> None:
    print(f"error: {json.dumps(record, sort_keys=True)}", file=sys.stderr)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    flags = vars(args)
    command = flags.pop("command")
    config_file = flags.pop("config")
    log_level = flags.pop("log_level") or config.log_level
    setup_logging(log_level)

    try:
        cfg = build_run_config(Path(config_file) if config_file else None, flags)
        logger.info(f"Starting {command} with settings {cfg.settings_json()}")
        with RunRecorder(config.database_url(_output_dir(cfg)), command, cfg.seed,
                         cfg.model_dump(mode="json")) as recorder:
            COMMANDS[command](cfg, recorder)
        return 0
    except UlriskError as e:
        logger.error(f"{command} failed: {e}")
        _emit_error(e.to_record())
        return e.exit_code
    except Exception as e:
        logger.error(f"{command} failed with an internal error: {e}", exc_info=True)
        _emit_error({"error": "InternalError", "code": 4, "message": str(e)})
        return 4


if __name__ == "__main__":
    sys.exit(main())
