"""AUC-ROC, top-decile precision/recall and the repeated-split protocol.

Splits are by patient. Each repeat draws its own seed from a
``SeedSequence`` spawned off the plan seed, so a repeat's result depends
only on (plan seed, repeat index) and repeats may run in any order.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .cohort import SCHEMA_VERSION, AdmissionTable
from .errors import TrainingError, ValidationError

METRICS = ("auc", "precision_top_decile", "recall_top_decile")
Z_95 = 1.96


def average_ranks(x) -> np.ndarray:
    """1-based ranks with ties sharing their mean rank."""
    _, inverse, counts = np.unique(np.asarray(x), return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    return ((ends - counts + 1 + ends) / 2.0)[inverse.ravel()]


def auc_roc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count 1/2)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValidationError(f"scores {s.shape} and labels {y.shape} must be matching 1-D arrays")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError(f"AUC needs both classes; got {n_pos} positives and {n_neg} negatives")
    if np.isnan(s).any():
        raise ValidationError("scores contain NaN")
    r = average_ranks(s)
    u = r[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def top_decile_metrics(scores, labels, ids=None) -> tuple[float, float]:
    """(precision, recall) among the ceil(n/10) highest scores.

    Ties at the cut are broken by ascending instance id (string order);
    ``ids`` defaults to the row position.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n = len(s)
    if n < 10:
        raise ValidationError(f"top-decile metrics need at least 10 instances, got {n}")
    if y.all() or not y.any():
        raise ValidationError("top-decile metrics need both classes")
    ids = np.arange(n).astype(str) if ids is None else np.asarray(ids).astype(str)
    if len(ids) != n:
        raise ValidationError("ids must match scores")
    k = math.ceil(n / 10)
    order = np.lexsort((ids, -s))
    tp = int(y[order[:k]].sum())
    return tp / k, tp / int(y.sum())


# ---------------------------------------------------------------------------
# Repeated evaluation


@dataclass(frozen=True)
class SplitPlan:
    seed: int = 0
    n_repeats: int = 20
    train_fraction: float = 0.70

    def __post_init__(self):
        if self.n_repeats < 1:
            raise ValidationError("n_repeats must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValidationError("train_fraction must lie in (0, 1)")

    def repeat_seeds(self) -> list[int]:
        children = np.random.SeedSequence(self.seed).spawn(self.n_repeats)
        return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]

    def split(self, table: AdmissionTable, repeat: int) -> tuple[np.ndarray, np.ndarray]:
        """Row indices (train, test) of ``repeat``; whole patients on each side."""
        rng = np.random.default_rng(self.repeat_seeds()[repeat])
        patients = table.unique_patients
        perm = rng.permutation(len(patients))
        n_train = int(round(self.train_fraction * len(patients)))
        n_train = min(max(n_train, 1), len(patients) - 1)
        train_patients = patients[perm[:n_train]]
        is_train = np.isin(table.patient_ids, train_patients)
        return np.flatnonzero(is_train), np.flatnonzero(~is_train)


class Trainer(Protocol):
    """Fits on a training table and returns a scorer for other tables."""

    name: str

    def __call__(self, train: AdmissionTable, seed: int) -> Callable[[AdmissionTable], np.ndarray]: ...


def summarize(values: Sequence[float]) -> dict:
    """Mean and normal-approximation 95% CI across repeats (CI is None for one repeat)."""
    v = np.asarray(values, dtype=np.float64)
    mean = float(v.mean())
    if len(v) < 2:
        return {"mean": mean, "ci_low": None, "ci_high": None, "half_width": None}
    half = Z_95 * float(v.std(ddof=1)) / math.sqrt(len(v))
    return {"mean": mean, "ci_low": mean - half, "ci_high": mean + half, "half_width": half}


@dataclass
class EvaluationReport:
    model: str
    plan: SplitPlan
    repeats: list = field(default_factory=list)  # dicts: repeat, seed, n_train, n_test, metrics

    @property
    def aggregates(self) -> dict:
        return {m: summarize([r[m] for r in self.repeats]) for m in METRICS}

    def values(self, metric: str = "auc") -> list[float]:
        return [r[metric] for r in self.repeats]

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "model": self.model,
            "plan": asdict(self.plan),
            "repeats": self.repeats,
            "aggregates": self.aggregates,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "repeat", "seed", "n_train", "n_test", *METRICS])
        for r in self.repeats:
            w.writerow([self.model, r["repeat"], r["seed"], r["n_train"], r["n_test"], *(repr(r[m]) for m in METRICS)])
        return buf.getvalue()


def evaluate_repeat(table: AdmissionTable, trainer, plan: SplitPlan, repeat: int) -> dict:
    seed = plan.repeat_seeds()[repeat]
    try:
        train_idx, test_idx = plan.split(table, repeat)
        train, test = table.take(train_idx), table.take(test_idx)
        scorer = trainer(train, seed)
        scores = np.asarray(scorer(test), dtype=np.float64)
        y = test.labels
        auc = auc_roc(scores, y)
        precision, recall = top_decile_metrics(scores, y, test.admission_ids)
    except Exception as exc:
        raise TrainingError(f"repeat {repeat} (seed {seed}) failed: {exc}") from exc
    return {
        "repeat": repeat,
        "seed": seed,
        "n_train": int(len(train_idx)),
        "n_test": int(len(test_idx)),
        "auc": auc,
        "precision_top_decile": precision,
        "recall_top_decile": recall,
    }


def run_repeated_evaluation(table: AdmissionTable, trainer, plan: SplitPlan = SplitPlan(), n_jobs: int = 1) -> EvaluationReport:
    """Train and score ``trainer`` on every split of ``plan``."""
    per_class = [len(np.unique(table.patient_ids[table.labels == c])) for c in (False, True)]
    if min(per_class) < 2:
        raise ValidationError("repeated evaluation needs at least 2 patients with each label")
    repeats = range(plan.n_repeats)
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            rows = list(pool.map(evaluate_repeat, *zip(*[(table, trainer, plan, r) for r in repeats])))
    else:
        rows = [evaluate_repeat(table, trainer, plan, r) for r in repeats]
    rows.sort(key=lambda r: r["repeat"])
    return EvaluationReport(getattr(trainer, "name", type(trainer).__name__), plan, rows)


def comparison_csv(reports: Sequence[EvaluationReport], metric: str = "auc") -> str:
    """One row per split, one column per model."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["repeat", *(f"{metric}_{r.model}" for r in reports)])
    for k in range(len(reports[0].repeats)):
        w.writerow([k, *(repr(r.repeats[k][metric]) for r in reports)])
    return buf.getvalue()
