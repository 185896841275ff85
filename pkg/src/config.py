import os
import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import yaml
from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from src.errors import ConfigInvalid


class Config:
    # Application settings
    APP_NAME = "ulrisk"
    ENV_PREFIX = "ULRISK_"

    def __init__(self):
        # Load environment variables
        load_dotenv()

        # Initialize paths
        self.project_root = Path(__file__).parent.parent
        self.resources_dir = Path(__file__).parent / "resources"

    @property
    def debug(self) -> bool:
        """Get debug mode status"""
        return os.getenv('DEBUG', 'false').lower() == 'true'

    @property
    def log_level(self) -> str:
        """Get logging level"""
        return os.getenv('LOG_LEVEL', 'INFO')

    @property
    def log_dir(self) -> Path:
        """Directory receiving the timestamped run logs"""
        return Path(os.getenv(f'{self.ENV_PREFIX}LOG_DIR', 'logs'))

    @property
    def default_workers(self) -> int:
        return int(os.getenv(f'{self.ENV_PREFIX}WORKERS', '1'))

    def database_url(self, output_dir: Path) -> str:
        """Run registry URL; DATABASE_URL wins over the per-output-dir SQLite file"""
        return os.getenv('DATABASE_URL') or f"sqlite:///{Path(output_dir) / 'runs.db'}"

    def env_overrides(self) -> Dict[str, str]:
        """Collect ULRISK_<KEY> variables as run-config overrides"""
        overrides = {}
        for name in RunConfig.model_fields:
            value = os.getenv(f"{self.ENV_PREFIX}{name.upper()}")
            if value is not None:
                overrides[name] = value
        return overrides


_CHOICES = {
    "metric": ("accuracy@0.5", "AUC"),
    "format": ("csv", "geojson"),
    "grid_format": ("csv", "binary"),
    "representative": ("center", "lower_left"),
    "pattern": ("uniform", "west-gradient", "frontal-band"),
    "subtype": ("all", "LLS"),
}


class RunConfig(BaseModel):
    """Everything one CLI invocation needs; flags mirror these field names."""

    model_config = ConfigDict(extra="forbid")

    # inputs
    schema_path: Optional[Path] = None
    data: Optional[Path] = None
    merge: Optional[Path] = None
    pool: Optional[Path] = None
    no_ul_pool: Optional[Path] = None
    eval_data: Optional[Path] = None
    turbines: Optional[Path] = None
    strikes: Optional[Path] = None
    grids: Optional[Path] = None
    hours: Optional[str] = None
    model: Optional[Path] = None
    output_dir: Path = Path("output")

    # forest / tree parameters
    n_trees: int = 500
    subsample: float = 2.0 / 3.0
    mtry: int = 6
    alpha: float = 0.05
    min_split: int = 20
    min_bucket: int = 7
    max_permutation_n: int = 8

    # protocol
    n_models: int = 100
    n_repeats: int = 5
    metric: str = "accuracy@0.5"
    no_ul_per_season: int = 4
    # UL rows used for training and evaluation: every subtype, or LLS-detectable only
    subtype: str = "all"
    thresholds: List[float] = Field(default_factory=lambda: [0.5])
    representative: str = "center"
    format: str = "csv"
    grid_format: str = "csv"

    # geospatial
    radius: float = 0.003
    great_circle: bool = False
    radius_m: float = 300.0

    # synthetic generator
    n_event_days: int = 20
    pattern: str = "west-gradient"
    n_hours: int = 24
    start_hour: str = "2019-03-04T00"

    seed: int = 0
    workers: int = 1

    @field_validator("thresholds", mode="before")
    @classmethod
    def _split_thresholds(cls, value: Any) -> Any:
        if isinstance(value, str):
            return [v for v in (p.strip() for p in value.split(",")) if v]
        if isinstance(value, (int, float)):
            return [value]
        return value

    @field_validator("thresholds")
    @classmethod
    def _check_thresholds(cls, value: List[float]) -> List[float]:
        if not value:
            raise ValueError("at least one threshold is required")
        for t in value:
            if not 0.0 < t < 1.0:
                raise ValueError(f"threshold {t} outside (0, 1)")
        return value

    @field_validator("workers", "n_models", "n_trees", "n_repeats")
    @classmethod
    def _positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be >= 1")
        return value

    @field_validator("radius", "radius_m")
    @classmethod
    def _positive_radius(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("radius must be > 0")
        return value

    @field_validator("metric", "format", "grid_format", "representative", "pattern", "subtype")
    @classmethod
    def _choice(cls, value: str, info) -> str:
        allowed = _CHOICES[info.field_name]
        if value not in allowed:
            raise ValueError(f"{info.field_name} must be one of {', '.join(allowed)}")
        return value

    @field_validator("seed")
    @classmethod
    def _seed_range(cls, value: int) -> int:
        if not 0 <= value < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        return value

    def tree_params(self):
        from src.citree import TreeParams

        return _build(TreeParams, alpha=self.alpha, min_split=self.min_split,
                      min_bucket=self.min_bucket, mtry=self.mtry,
                      max_permutation_n=self.max_permutation_n)

    def forest_params(self):
        from src.ciforest import ForestParams

        return _build(ForestParams, n_trees=self.n_trees, subsample_fraction=self.subsample,
                      tree_params=self.tree_params(), seed=self.seed)

    def ul_subtype(self) -> Optional[str]:
        return None if self.subtype == "all" else self.subtype

    def check_paths(self, names: Iterable[str]) -> None:
        """Fail with ConfigInvalid unless every named input path is set and exists"""
        for name in names:
            value = getattr(self, name)
            if value is None:
                raise ConfigInvalid(f"--{name.replace('_', '-')} is required", field=name)
            if not Path(value).exists():
                raise ConfigInvalid(f"{name} path does not exist: {value}", field=name)

    def settings_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True)


def _build(model_cls, **kwargs):
    try:
        return model_cls(**kwargs)
    except ValidationError as e:
        raise ConfigInvalid(f"invalid {model_cls.__name__}: {e.errors(include_url=False)}") from e


def normalize_key(key: str) -> str:
    return key.strip().lstrip("-").replace("-", "_").lower()


def load_config_file(path: Path) -> Dict[str, Any]:
    """Load a flat key-value config file (dotenv syntax, or a flat YAML mapping)"""
    path = Path(path)
    if not path.exists():
        raise ConfigInvalid(f"config file not found: {path}")
    if path.suffix.lower() in (".yaml", ".yml"):
        with open(path) as f:
            data = yaml.safe_load(f) or {}
        if not isinstance(data, dict) or any(isinstance(v, (dict, list)) and k != "thresholds"
                                             for k, v in data.items()):
            raise ConfigInvalid(f"config file must hold a flat mapping: {path}")
    else:
        data = dotenv_values(path)
    return {normalize_key(k): v for k, v in data.items() if v is not None}


def build_run_config(config_file: Optional[Path] = None,
                     flags: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Merge defaults < config file < ULRISK_* environment < command-line flags"""
    merged: Dict[str, Any] = {}
    if config_file is not None:
        merged.update(load_config_file(config_file))
    merged.update(config.env_overrides())
    merged.update({normalize_key(k): v for k, v in (flags or {}).items() if v is not None})

    unknown = sorted(set(merged) - set(RunConfig.model_fields))
    if unknown:
        raise ConfigInvalid(f"unknown config keys: {', '.join(unknown)}")
    try:
        return RunConfig(**merged)
    except ValidationError as e:
        raise ConfigInvalid(f"invalid configuration: {e.errors(include_url=False)}") from e


# Create global config instance
config = Config()
