"""Run configuration: TOML file sections, defaults and object builders.

A config file may contain any of these sections (all optional)::

    seed = 42                     # default for every seed below

    [cohort]                      # CohortSpec fields; [cohort.coefficients] table
    [features]                    # age_mode, exclude, max_seq_len
    [train]                       # TrainConfig fields
    [baseline]                    # extended, ridge
    [split]                       # seed, n_repeats, train_fraction
    [evaluate]                    # models, figures, n_jobs
    [explain]                     # n_repeats, seed, n_samples, exact, background_size, instances, features
    [ablation]                    # variants (list of names)
    [charlson.weights]            # replaces the packaged Charlson weight table

Command-line flags override file values.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, fields
from pathlib import Path

from .cohort import CharlsonWeightTable, FeatureConfig, load_config_file
from .errors import ValidationError
from .evaluation import SplitPlan
from .lstm import TrainConfig
from .synthetic import CohortSpec

SECTIONS = ("cohort", "features", "train", "baseline", "split", "evaluate", "explain", "ablation", "charlson")

DEFAULTS = {
    "seed": 0,
    "cohort": {},
    "features": {"age_mode": "raw", "exclude": [], "max_seq_len": 10},
    "train": {},
    "baseline": {"extended": False, "ridge": 1e-6},
    "split": {"n_repeats": 20, "train_fraction": 0.7},
    "evaluate": {"models": ["lace-lr", "lstm"], "figures": True, "n_jobs": 1},
    "explain": {
        "n_repeats": 10,
        "n_samples": 1000,
        "exact": False,
        "background_size": 100,
        "instances": 5,
        "features": [],
    },
    "ablation": {"variants": []},
    "charlson": {},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load(path=None, overrides: dict | None = None) -> dict:
    """Defaults <- config file <- overrides, with unknown sections rejected."""
    doc = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"config file not found: {path}")
        try:
            doc = load_config_file(path)
        except Exception as exc:  # tomli raises its own decode error type
            raise ValidationError(f"{path}: cannot parse config ({exc})") from None
    unknown = sorted(set(doc) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ValidationError(f"unknown config sections {unknown}; expected {list(SECTIONS)}")
    cfg = _merge(DEFAULTS, doc)
    if overrides:
        cfg = _merge(cfg, overrides)
    return resolve_seeds(cfg)


def resolve_seeds(cfg: dict) -> dict:
    seed = int(cfg.get("seed", 0))
    cfg["seed"] = seed
    cfg["cohort"].setdefault("seed", seed)
    cfg["train"].setdefault("seed", seed)
    cfg["split"].setdefault("seed", seed)
    cfg["explain"].setdefault("seed", seed)
    return cfg


def _only(section: dict, cls, name: str) -> dict:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(section) - known)
    if unknown:
        raise ValidationError(f"unknown keys in [{name}]: {unknown}; valid: {sorted(known)}")
    return section


def cohort_spec(cfg: dict) -> CohortSpec:
    return CohortSpec.from_dict(_only(cfg["cohort"], CohortSpec, "cohort"))


def feature_config(cfg: dict) -> FeatureConfig:
    f = _only(cfg["features"], FeatureConfig, "features")
    return FeatureConfig(age_mode=f.get("age_mode", "raw"), exclude=tuple(f.get("exclude", ())), max_seq_len=int(f.get("max_seq_len", 10)))


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**_only(cfg["train"], TrainConfig, "train"))


def split_plan(cfg: dict) -> SplitPlan:
    return SplitPlan(**_only(cfg["split"], SplitPlan, "split"))


def charlson_weights(cfg: dict) -> CharlsonWeightTable:
    weights = cfg.get("charlson", {}).get("weights")
    return CharlsonWeightTable(weights) if weights else CharlsonWeightTable.default()


def canonical(cfg: dict) -> dict:
    """Fully expanded config (dataclass defaults filled in) for manifests."""
    out = copy.deepcopy(cfg)
    out["cohort"] = cohort_spec(cfg).to_dict()
    out["features"] = {**asdict(feature_config(cfg)), "exclude": list(feature_config(cfg).exclude)}
    out["train"] = asdict(train_config(cfg))
    out["split"] = asdict(split_plan(cfg))
    out["charlson"] = {"weights": dict(sorted(charlson_weights(cfg).items()))}
    return out


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()
