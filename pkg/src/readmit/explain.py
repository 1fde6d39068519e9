"""Permutation importance and Shapley-value attributions.

Both work on any scoring function ``predict(X, mask) -> scores`` where ``X``
is either a 2-D design matrix (``mask`` ignored, may be None) or a 3-D
padded sequence tensor. A *feature* is a group of columns (e.g. the four
season indicators); intervening on a feature of a sequence replaces that
feature at every time step at once.
"""
from __future__ import annotations

import itertools
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .cohort import SCHEMA_VERSION
from .errors import ValidationError
from .evaluation import auc_roc

Predict = Callable[[np.ndarray, np.ndarray | None], np.ndarray]
EXACT_MAX_FEATURES = 12


def _resolve_groups(n_columns: int, groups: Mapping[str, Sequence[int]] | None) -> dict[str, list[int]]:
    if groups is None:
        return {f"x{j}": [j] for j in range(n_columns)}
    out = {str(k): [int(c) for c in v] for k, v in groups.items()}
    for name, cols in out.items():
        if not cols or min(cols) < 0 or max(cols) >= n_columns:
            raise ValidationError(f"feature {name!r} refers to columns {cols} outside 0..{n_columns - 1}")
    return out


# ---------------------------------------------------------------------------
# Permutation importance


@dataclass
class PermutationResult:
    feature: str
    baseline_auc: float
    permuted_auc_mean: float
    permuted_auc_std: float
    importance: float
    n_repeats: int
    permuted_aucs: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def permutation_importance(
    predict: Predict,
    X,
    mask,
    y,
    feature: str,
    groups: Mapping[str, Sequence[int]] | None = None,
    n_repeats: int = 10,
    seed: int = 0,
    baseline_auc: float | None = None,
) -> PermutationResult:
    """AUC drop when ``feature`` is shuffled across instances.

    For sequences one permutation of the instances is applied to the
    feature's columns at every time step, so the feature keeps its
    within-sequence history but is detached from the rest of the sequence
    and from the label.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    g = _resolve_groups(X.shape[-1], groups)
    if feature not in g:
        raise ValidationError(f"unknown feature {feature!r}; valid names: {sorted(g)}")
    if np.unique(y).size < 2:
        raise ValidationError("permutation importance needs both classes in the test set")
    if n_repeats < 1:
        raise ValidationError("n_repeats must be >= 1")
    cols = g[feature]
    base = auc_roc(predict(X, mask), y) if baseline_auc is None else baseline_auc
    values = X[..., cols]
    if mask is not None and X.ndim == 3:
        values = values[np.asarray(mask, dtype=bool)]
    if np.all(values == values.reshape(-1, len(cols))[0]):
        warnings.warn(f"feature {feature!r} is constant on the test set; importance set to 0", RuntimeWarning, stacklevel=2)
        return PermutationResult(feature, base, base, 0.0, 0.0, n_repeats, [base] * n_repeats)
    rng = np.random.default_rng(seed)
    aucs = []
    for _ in range(n_repeats):
        perm = rng.permutation(len(X))
        Xp = X.copy()
        Xp[..., cols] = X[perm][..., cols]
        aucs.append(auc_roc(predict(Xp, mask), y))
    aucs = np.asarray(aucs)
    return PermutationResult(feature, float(base), float(aucs.mean()), float(aucs.std()), float(base - aucs.mean()), n_repeats, aucs.tolist())


def permutation_importances(predict: Predict, X, mask, y, groups=None, features=None, n_repeats=10, seed=0) -> list[PermutationResult]:
    """Importance for every feature, each with its own derived seed; sorted by importance."""
    X = np.asarray(X, dtype=np.float64)
    g = _resolve_groups(X.shape[-1], groups)
    names = list(g) if features is None else list(features)
    base = auc_roc(predict(X, mask), y)
    seeds = np.random.SeedSequence(seed).spawn(len(names))
    rows = [
        permutation_importance(predict, X, mask, y, name, g, n_repeats, int(s.generate_state(1)[0]), baseline_auc=base)
        for name, s in zip(names, seeds)
    ]
    return sorted(rows, key=lambda r: (-r.importance, r.feature))


def ranking_csv(results: Sequence[PermutationResult]) -> str:
    lines = ["rank,feature,importance,std,baseline_auc,permuted_auc_mean"]
    for k, r in enumerate(results, 1):
        lines.append(f"{k},{r.feature},{r.importance!r},{r.permuted_auc_std!r},{r.baseline_auc!r},{r.permuted_auc_mean!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Shapley values


@dataclass
class ShapExplanation:
    instance_id: str
    base_value: float
    attributions: dict
    model_output: float
    n_samples: int | None
    seed: int | None
    exact: bool
    residual: float
    standard_errors: dict | None = None
    residual_se: float | None = None
    feature_values: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _hybrid(instance, background, mask, cols_on):
    """Background rows with the columns in ``cols_on`` taken from ``instance``."""
    out = background.copy()
    if cols_on:
        out[..., cols_on] = instance[..., cols_on]
    return out


def _model_on(predict, X, mask):
    if X.ndim == 3:
        m = np.broadcast_to(mask, X.shape[:2]) if mask is not None else None
        return np.asarray(predict(X, None if m is None else np.ascontiguousarray(m)), dtype=np.float64)
    return np.asarray(predict(X, None), dtype=np.float64)


def shap_values(
    predict: Predict,
    instance,
    background,
    mask=None,
    groups: Mapping[str, Sequence[int]] | None = None,
    n_samples: int = 1000,
    seed: int = 0,
    exact: bool = False,
    instance_id: str = "0",
) -> ShapExplanation:
    """Shapley attributions of ``predict`` at ``instance`` against ``background``.

    The value of a coalition S is the mean model output over background rows
    with the features in S replaced by the instance's values; the base value
    is the mean output over the background. ``exact=True`` enumerates all
    coalitions (at most 12 features); otherwise ``n_samples`` (ordering,
    background row) pairs are drawn and each feature's marginal contribution
    is averaged. Orderings come in antithetic pairs (an ordering and its
    reverse), and background rows are used in equal shares. For sequences the
    instance's ``mask`` is used for every hybrid row.
    """
    instance = np.asarray(instance, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    if background.ndim != instance.ndim + 1 or background.shape[1:] != instance.shape or len(background) == 0:
        raise ValidationError(f"background {background.shape} must be a non-empty stack of instance-shaped rows {instance.shape}")
    if not exact and n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    g = _resolve_groups(instance.shape[-1], groups)
    names = list(g)
    d = len(names)
    fx = float(_model_on(predict, instance[None], mask)[0])
    f_bg = _model_on(predict, background, mask)
    base = float(f_bg.mean())

    if exact:
        if d > EXACT_MAX_FEATURES:
            raise ValidationError(f"exact mode supports at most {EXACT_MAX_FEATURES} features, got {d}")
        value = {}
        for r in range(d + 1):
            for subset in itertools.combinations(range(d), r):
                cols = [c for k in subset for c in g[names[k]]]
                value[subset] = base if r == 0 else float(_model_on(predict, _hybrid(instance, background, mask, cols), mask).mean())
        phi = np.zeros(d)
        for k in range(d):
            others = [j for j in range(d) if j != k]
            for r in range(d):
                w = math.factorial(r) * math.factorial(d - r - 1) / math.factorial(d)
                for subset in itertools.combinations(others, r):
                    with_k = tuple(sorted(subset + (k,)))
                    phi[k] += w * (value[with_k] - value[subset])
        residual = abs(base + phi.sum() - fx)
        return ShapExplanation(instance_id, base, dict(zip(names, phi.tolist())), fx, None, None, True, residual)

    # antithetic orderings (each paired with its reverse) and background rows used in equal shares
    rng = np.random.default_rng(seed)
    n_pairs = n_samples // 2
    half = n_samples - n_pairs
    first = np.argsort(rng.random((half, d)), axis=1)
    orders = np.vstack([first, first[:n_pairs, ::-1]])
    first_rows = rng.permutation(np.resize(np.arange(len(background)), half))
    rows = np.concatenate([first_rows, first_rows[:n_pairs]])
    # walk each ordering from the background row to the instance, one feature at a time
    walk = np.repeat(background[rows][:, None], d + 1, axis=1)
    for s in range(n_samples):
        current = background[rows[s]].copy()
        for step, k in enumerate(orders[s], 1):
            cols = g[names[k]]
            current[..., cols] = instance[..., cols]
            walk[s, step] = current
    flat = walk.reshape((n_samples * (d + 1),) + instance.shape)
    out = _model_on(predict, flat, mask).reshape(n_samples, d + 1)
    contrib = np.zeros((n_samples, d))
    diffs = np.diff(out, axis=1)
    contrib[np.arange(n_samples)[:, None], orders] = diffs
    phi = contrib.mean(axis=0)
    units = contrib[:half].copy()
    units[:n_pairs] = (contrib[:n_pairs] + contrib[half:]) / 2
    se = units.std(axis=0, ddof=1) / math.sqrt(half) if half > 1 else np.full(d, np.nan)
    # sum(phi) = f(x) - mean of sampled background outputs, so the residual is that mean's sampling
    # error; the iid standard error below is conservative under the equal-share row sampling
    start = out[:, 0]
    residual = abs(base + phi.sum() - fx)
    residual_se = float(start.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else float("nan")
    return ShapExplanation(
        instance_id, base, dict(zip(names, phi.tolist())), fx, n_samples, seed, False, residual,
        dict(zip(names, se.tolist())), residual_se,
    )


# ---------------------------------------------------------------------------
# Force-plot export


def export_force_plot_data(explanations: Sequence[ShapExplanation]) -> dict:
    """Plot-ready document; each explanation's features sorted by |attribution| descending."""
    items = []
    for e in explanations:
        values = e.feature_values or {}
        feats = [
            {"name": name, "value": values.get(name), "attribution": phi}
            for name, phi in sorted(e.attributions.items(), key=lambda kv: (-abs(kv[1]), kv[0]))
        ]
        items.append(
            {
                "instance_id": e.instance_id,
                "base_value": e.base_value,
                "model_output": e.model_output,
                "exact": e.exact,
                "n_samples": e.n_samples,
                "seed": e.seed,
                "residual": e.residual,
                "residual_se": e.residual_se,
                "features": feats,
            }
        )
    return {"schema_version": SCHEMA_VERSION, "kind": "force_plot", "explanations": items}


def dumps_force_plot(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
