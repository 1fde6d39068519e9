"""Feature-adjustment experiments: the age/surgery ablation matrix."""
from __future__ import annotations

import csv
import dataclasses
import io
import json

from .cohort import SCHEMA_VERSION, AdmissionTable, FeatureConfig
from .errors import ValidationError
from .evaluation import EvaluationReport, SplitPlan, run_repeated_evaluation
from .lstm import TrainConfig
from .models import LstmTrainer

# name -> (age_mode, extra excluded features)
ABLATION_VARIANTS = {
    "full": ("raw", ()),
    "drop_age": ("raw", ("age",)),
    "drop_surgery": ("raw", ("surgery",)),
    "drop_age_surgery": ("raw", ("age", "surgery")),
    "age_buckets": ("bucketed", ()),
    "age_buckets_drop_surgery": ("bucketed", ("surgery",)),
}


def variant_feature_config(base: FeatureConfig, variant: str) -> FeatureConfig:
    if variant not in ABLATION_VARIANTS:
        raise ValidationError(f"unknown ablation variant {variant!r}; valid: {list(ABLATION_VARIANTS)}")
    age_mode, drop = ABLATION_VARIANTS[variant]
    exclude = tuple(dict.fromkeys(base.exclude + drop))
    return dataclasses.replace(base, age_mode=age_mode, exclude=exclude)


def run_ablation(
    table: AdmissionTable,
    base_features: FeatureConfig = FeatureConfig(),
    train_config: TrainConfig = TrainConfig(),
    plan: SplitPlan = SplitPlan(),
    variants=None,
    n_jobs: int = 1,
) -> list[tuple[str, EvaluationReport]]:
    """LSTM repeated evaluation for every variant, all on the same splits."""
    names = list(variants) if variants else list(ABLATION_VARIANTS)
    out = []
    for name in names:
        trainer = LstmTrainer(variant_feature_config(base_features, name), train_config, name=f"lstm[{name}]")
        out.append((name, run_repeated_evaluation(table, trainer, plan, n_jobs=n_jobs)))
    return out


def ablation_rows(results) -> list[dict]:
    rows = []
    for name, report in results:
        agg = report.aggregates
        features = ABLATION_VARIANTS[name]
        rows.append(
            {
                "variant": name,
                "age_mode": features[0],
                "excluded": "+".join(features[1]),
                "n_repeats": len(report.repeats),
                **{f"{m}_{k}": agg[m][k] for m in agg for k in ("mean", "ci_low", "ci_high")},
            }
        )
    return rows


def ablation_csv(results) -> str:
    rows = ablation_rows(results)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def ablation_json(results) -> str:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "variants": {name: report.to_dict() for name, report in results},
        "table": ablation_rows(results),
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
