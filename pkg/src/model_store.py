import json
import logging
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np

from src.ciforest import ForestModel, ForestParams
from src.citree import tree_from_dict, tree_to_dict
from src.data_model import load_schema
from src.errors import BadValue, IoFailure
from src.riskmap import EnsembleModel
from src.rng import ALGORITHM

logger = logging.getLogger(__name__)

BUNDLE_FORMAT = 1
# no-UL hours withheld from every member's training pool, written next to the ensemble index
NO_UL_HOLDOUT_FILE = "no_ul_holdout.csv"

PathLike = Union[str, Path]


def _dumps(doc: Any) -> str:
    # sorted keys and fixed separators keep bundles byte-stable
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def save_forest(model: ForestModel, directory: PathLike) -> Path:
    """Write a model bundle: params.json, schema.csv and one tree per line in trees.jsonl"""
    directory = Path(directory)
    params_doc: Dict[str, Any] = {
        "format": BUNDLE_FORMAT,
        "params": model.params.model_dump(mode="json"),
        "n_train": model.n_train,
        "rng": ALGORITHM,
        "schema_version": model.schema.version,
    }
    try:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "params.json").write_text(_dumps(params_doc) + "\n", encoding="utf-8")
        model.schema.to_csv(directory / "schema.csv")
        with open(directory / "trees.jsonl", "w", encoding="utf-8", newline="\n") as f:
            for i, (tree, rows) in enumerate(zip(model.trees, model.in_bag)):
                f.write(_dumps({"index": i, "in_bag": rows.tolist(), "tree": tree_to_dict(tree)}) + "\n")
    except OSError as e:
        raise IoFailure(f"cannot write model bundle {directory}: {e}") from e
    return directory


def load_forest(directory: PathLike) -> ForestModel:
    directory = Path(directory)
    try:
        params_doc = json.loads((directory / "params.json").read_text(encoding="utf-8"))
        schema = load_schema(directory / "schema.csv")
        trees, in_bag = [], []
        with open(directory / "trees.jsonl", encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    doc = json.loads(line)
                    trees.append(tree_from_dict(doc["tree"]))
                    rows = np.array(doc["in_bag"], dtype=np.intp)
                    rows.setflags(write=False)
                    in_bag.append(rows)
    except FileNotFoundError as e:
        raise IoFailure(f"incomplete model bundle {directory}: {e}") from e
    except (json.JSONDecodeError, KeyError) as e:
        raise BadValue(f"corrupt model bundle {directory}: {e}") from e

    params = ForestParams(**params_doc["params"])
    if len(trees) != params.n_trees:
        raise BadValue(f"bundle {directory} holds {len(trees)} trees, params say {params.n_trees}")
    return ForestModel(trees=tuple(trees), in_bag=tuple(in_bag), params=params,
                       schema=schema, n_train=int(params_doc["n_train"]))


def save_ensemble(ensemble: EnsembleModel, directory: PathLike) -> Path:
    """One bundle per member under model_NNN/ plus an ensemble.json index"""
    directory = Path(directory)
    members = []
    for i, model in enumerate(ensemble.models):
        name = f"model_{i:03d}"
        save_forest(model, directory / name)
        members.append(name)
    try:
        (directory / "ensemble.json").write_text(
            _dumps({"format": BUNDLE_FORMAT, "members": members}) + "\n", encoding="utf-8")
    except OSError as e:
        raise IoFailure(f"cannot write ensemble index in {directory}: {e}") from e
    logger.info(f"Saved ensemble of {len(members)} models to {directory}")
    return directory


def load_ensemble(directory: PathLike) -> EnsembleModel:
    """Load an ensemble directory; a single forest bundle loads as a one-member ensemble"""
    directory = Path(directory)
    index = directory / "ensemble.json"
    if not index.exists():
        return EnsembleModel(models=(load_forest(directory),))
    try:
        members = json.loads(index.read_text(encoding="utf-8"))["members"]
    except (json.JSONDecodeError, KeyError) as e:
        raise BadValue(f"corrupt ensemble index {index}: {e}") from e
    return EnsembleModel(models=tuple(load_forest(directory / m) for m in members))
