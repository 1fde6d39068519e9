"""LACE index scoring and the logistic-regression baseline.

``lace_subscores`` follows the published table row for row, including the
7-13 day length-of-stay band scoring 6 points (much of the LACE literature
uses 5 for that band).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .cohort import AdmissionTable, LACE_COLUMNS, SCHEMA_VERSION
from .errors import ConvergenceError, SeparationError, ValidationError

_P_LO = np.nextafter(0.0, 1.0)
_P_HI = np.nextafter(1.0, 0.0)


@dataclass(frozen=True)
class LaceComponents:
    los_days: int
    acute: bool
    cci: int
    ed_visits: int

    def __post_init__(self):
        if self.los_days < 0 or self.cci < 0 or self.ed_visits < 0:
            raise ValidationError(f"LACE components must be non-negative: {self}")


def _los_points(days: int) -> int:
    if days < 1:
        return 0
    if days <= 3:
        return days
    if days <= 6:
        return 4
    if days <= 13:
        return 6
    return 7


def lace_subscores(components: LaceComponents) -> tuple[int, int, int, int, int]:
    """(L, A, C, E, total) points."""
    l_pts = _los_points(components.los_days)
    a_pts = 3 if components.acute else 0
    c_pts = components.cci if components.cci <= 3 else 5
    e_pts = min(components.ed_visits, 4)
    return l_pts, a_pts, c_pts, e_pts, l_pts + a_pts + c_pts + e_pts


# ---------------------------------------------------------------------------
# Logistic regression


@dataclass(frozen=True)
class LogisticModel:
    intercept: float
    coefficients: np.ndarray
    feature_names: tuple[str, ...]
    iterations: int = 0
    deviance: float = float("nan")
    ridge: float = 0.0
    converged: bool = True
    trace: tuple[float, ...] = field(default=(), repr=False)

    def linear_predictor(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != len(self.coefficients):
            raise ValidationError(f"expected {len(self.coefficients)} features, got {X.shape[-1]}")
        return self.intercept + X @ self.coefficients

    @property
    def odds_ratios(self) -> dict[str, float]:
        return {n: float(np.exp(b)) for n, b in zip(self.feature_names, self.coefficients)}

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "model_type": "lace-lr",
            "feature_names": list(self.feature_names),
            "intercept": float(self.intercept),
            "coefficients": [float(b) for b in self.coefficients],
            "training": {
                "iterations": self.iterations,
                "deviance": self.deviance,
                "ridge": self.ridge,
                "converged": self.converged,
            },
        }

    @classmethod
    def from_dict(cls, d) -> "LogisticModel":
        if d.get("model_type") != "lace-lr":
            raise ValidationError(f"not a logistic model document (model_type={d.get('model_type')!r})")
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValidationError(f"unsupported schema_version {d.get('schema_version')}")
        t = d["training"]
        return cls(
            intercept=d["intercept"],
            coefficients=np.asarray(d["coefficients"], dtype=np.float64),
            feature_names=tuple(d["feature_names"]),
            iterations=t["iterations"],
            deviance=t["deviance"],
            ridge=t["ridge"],
            converged=t["converged"],
        )


def predict_proba(model: LogisticModel, x) -> np.ndarray | float:
    """sigmoid(intercept + beta . x), kept strictly inside (0, 1)."""
    p = np.clip(expit(model.linear_predictor(x)), _P_LO, _P_HI)
    return float(p) if np.ndim(p) == 0 else p


def _deviance(y, eta) -> float:
    # -2 log-likelihood, computed from the linear predictor for stability
    return float(2.0 * np.sum(np.logaddexp(0.0, eta) - y * eta))


def penalized_score(X, y, intercept: float, coefficients, ridge: float) -> np.ndarray:
    """Gradient of the ridge-penalized log-likelihood (intercept unpenalized)."""
    X = np.asarray(X, dtype=np.float64)
    beta = np.concatenate([[intercept], coefficients])
    Xa = np.column_stack([np.ones(len(X)), X])
    r = np.asarray(y, dtype=np.float64) - expit(Xa @ beta)
    g = Xa.T @ r
    g[1:] -= ridge * beta[1:]
    return g


def fit_logistic(
    X,
    y,
    feature_names: Sequence[str] | None = None,
    ridge: float = 1e-6,
    tol: float = 1e-8,
    max_iter: int = 100,
    separation_threshold: float = 1e3,
) -> LogisticModel:
    """Ridge-penalized logistic regression by iteratively reweighted least squares.

    Stops when max |delta beta| < ``tol``. Raises :class:`SeparationError`
    when the classes are separable (coefficients diverge or every training
    row is classified with a wide margin) and :class:`ConvergenceError` when
    ``max_iter`` is exhausted.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValidationError(f"X must be 2-D with one row per label; got {X.shape} and {y.shape}")
    if len(y) == 0:
        raise ValidationError("cannot fit on an empty dataset")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValidationError("labels must be 0/1")
    if y.min() == y.max():
        raise ValidationError(f"degenerate labels: every label is {int(y[0])}; refusing to fit")
    names = tuple(feature_names) if feature_names is not None else tuple(f"x{j}" for j in range(X.shape[1]))
    if len(names) != X.shape[1]:
        raise ValidationError("feature_names length does not match X")

    n, d = X.shape
    Xa = np.column_stack([np.ones(n), X])
    penalty = np.full(d + 1, ridge)
    penalty[0] = 0.0
    rate = y.mean()
    beta = np.zeros(d + 1)
    beta[0] = np.log(rate / (1 - rate))
    eta = Xa @ beta
    objective = _deviance(y, eta) / 2 + 0.5 * np.sum(penalty * beta**2)
    trace = []
    for it in range(1, max_iter + 1):
        p = expit(eta)
        w = p * (1 - p)
        grad = Xa.T @ (y - p) - penalty * beta
        hess = (Xa * w[:, None]).T @ Xa + np.diag(penalty)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        # step halving keeps the penalized objective non-increasing
        for _ in range(30):
            cand = beta + step
            eta_c = Xa @ cand
            obj_c = _deviance(y, eta_c) / 2 + 0.5 * np.sum(penalty * cand**2)
            if obj_c <= objective + 1e-12 * max(1.0, abs(objective)):
                break
            step = step / 2
        beta, eta, objective = cand, eta_c, obj_c
        delta = float(np.max(np.abs(step)))
        trace.append(delta)
        if np.max(np.abs(beta)) > separation_threshold:
            raise SeparationError(
                f"coefficients diverging (max |beta| = {np.max(np.abs(beta)):.3g} at iteration {it}); "
                "classes appear separable",
                trace,
            )
        if delta < tol:
            break
    else:
        raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations (last max |delta beta| = {trace[-1]:.3g})", trace)

    margin = (2 * y - 1) * eta
    if margin.min() > 0 and np.abs(eta).max() > 10:
        raise SeparationError("perfect separation: every training row is classified with a wide margin", trace)

    return LogisticModel(
        intercept=float(beta[0]),
        coefficients=beta[1:].copy(),
        feature_names=names,
        iterations=it,
        deviance=_deviance(y, eta),
        ridge=ridge,
        converged=True,
        trace=tuple(trace),
    )


# ---------------------------------------------------------------------------
# Point scores


def round_half_away(x):
    """Round to nearest integer, halves away from zero (2.5 -> 3, -2.5 -> -3)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class PointScoreTable:
    feature_names: tuple[str, ...]
    points: tuple[int, ...]
    reference: float

    def score(self, X) -> np.ndarray:
        """Total points: sum over features of points times the feature value."""
        return np.asarray(X, dtype=np.float64) @ np.asarray(self.points, dtype=np.float64)

    def to_dict(self) -> dict:
        return {"reference": self.reference, "points": dict(zip(self.feature_names, self.points))}


def to_point_score(model: LogisticModel) -> PointScoreTable:
    """Integer points: each coefficient divided by the smallest nonzero |coefficient|, rounded."""
    beta = np.asarray(model.coefficients, dtype=np.float64)
    nonzero = np.abs(beta[beta != 0])
    if nonzero.size == 0:
        raise ValidationError("cannot build a point score: every coefficient is zero")
    ref = float(nonzero.min())
    pts = round_half_away(beta / ref).astype(int)
    return PointScoreTable(tuple(model.feature_names), tuple(int(p) for p in pts), ref)


# ---------------------------------------------------------------------------
# Baseline feature matrices

ONE_HOT_REFERENCE = {"season": "season_fall", "age": "age_65_74"}


def baseline_columns(extended: bool = False, registry_columns: Sequence[str] = ()) -> tuple[str, ...]:
    """LACE components, or (extended) every registry column minus one-hot reference levels."""
    if not extended:
        return LACE_COLUMNS
    drop = set(ONE_HOT_REFERENCE.values())
    return tuple(c for c in registry_columns if c not in drop)


def baseline_matrix(table: AdmissionTable, columns: Sequence[str] = LACE_COLUMNS, fill=None) -> np.ndarray:
    """Raw index-admission features; NaNs replaced by ``fill`` (column -> value)."""
    X = np.column_stack([table.column(c) for c in columns]) if len(columns) else np.zeros((len(table), 0))
    if fill is not None:
        X = np.where(np.isnan(X), np.array([fill[c] for c in columns]), X)
    return X


def model_to_json(model: LogisticModel, registry_hash: str | None = None, extra: dict | None = None) -> str:
    doc = model.to_dict()
    doc["registry_hash"] = registry_hash
    doc["point_scores"] = to_point_score(model).to_dict() if np.any(model.coefficients != 0) else None
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
