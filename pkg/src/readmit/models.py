"""Fitted-model wrappers and the trainers used by the evaluation harness.

A trainer is called as ``trainer(train_table, seed)`` and returns a scoring
function for other tables. Everything fitted (normalization statistics,
imputation medians) comes from the training table only.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .cohort import AdmissionTable, FeatureConfig, FeatureRegistry, SequenceSet, sequence_set
from .lace import LogisticModel, baseline_columns, baseline_matrix, fit_logistic, predict_proba
from .lstm import LstmNetwork, TrainConfig, TrainingLog, predict, train
from .synthetic import CohortSpec, true_probabilities


@dataclass
class LaceModel:
    model: LogisticModel
    columns: tuple[str, ...]
    fill: dict

    def design(self, table: AdmissionTable) -> np.ndarray:
        return baseline_matrix(table, self.columns, self.fill)

    def score(self, table: AdmissionTable) -> np.ndarray:
        return predict_proba(self.model, self.design(table))


@dataclass(frozen=True)
class LaceTrainer:
    """Logistic regression on the index admission's LACE components.

    ``extended=True`` uses every registry column of ``feature_config``
    (one-hot groups lose their reference level).
    """

    extended: bool = False
    feature_config: FeatureConfig = FeatureConfig()
    ridge: float = 1e-6
    name: str = "lace-lr"

    def fit(self, train: AdmissionTable) -> LaceModel:
        cols = baseline_columns(self.extended, self.feature_config.columns())
        raw = baseline_matrix(train, cols)
        fill = {c: (float(np.nanmedian(raw[:, j])) if np.isfinite(raw[:, j]).any() else 0.0) for j, c in enumerate(cols)}
        X = baseline_matrix(train, cols, fill)
        return LaceModel(fit_logistic(X, train.labels, cols, ridge=self.ridge), cols, fill)

    def __call__(self, train: AdmissionTable, seed: int = 0):
        return self.fit(train).score


@dataclass
class LstmModel:
    network: LstmNetwork
    registry: FeatureRegistry
    max_seq_len: int
    log: TrainingLog | None = None

    def sequences(self, table: AdmissionTable) -> SequenceSet:
        return sequence_set(table, self.registry, self.max_seq_len)

    def score(self, table: AdmissionTable) -> np.ndarray:
        s = self.sequences(table)
        return predict(self.network, s.X, s.mask)

    def predict_sequences(self, X, mask) -> np.ndarray:
        return predict(self.network, X, mask)


@dataclass(frozen=True)
class LstmTrainer:
    feature_config: FeatureConfig = FeatureConfig()
    train_config: TrainConfig = TrainConfig()
    name: str = "lstm"

    def fit(self, train_table: AdmissionTable, seed: int | None = None) -> LstmModel:
        cfg = self.train_config if seed is None else dataclasses.replace(self.train_config, seed=seed)
        registry = FeatureRegistry.from_config(self.feature_config).fit(train_table)
        data = sequence_set(train_table, registry, self.feature_config.max_seq_len)
        network, log = train(data, cfg)
        return LstmModel(network, registry, self.feature_config.max_seq_len, log)

    def __call__(self, train_table: AdmissionTable, seed: int = 0):
        return self.fit(train_table, seed).score


@dataclass(frozen=True)
class PlantedOracle:
    """Scores with the generating process's true probabilities (Bayes-optimal ranking)."""

    spec: CohortSpec
    name: str = "planted-oracle"

    def __call__(self, train: AdmissionTable, seed: int = 0):
        return lambda table: true_probabilities(table, self.spec)


@dataclass(frozen=True)
class ConstantTrainer:
    """Uninformative scores: a constant plus optional seeded jitter."""

    value: float = 0.5
    jitter: float = 0.0
    name: str = "constant"

    def __call__(self, train: AdmissionTable, seed: int = 0):
        def score(table):
            rng = np.random.default_rng(seed)
            return self.value + self.jitter * rng.standard_normal(len(table))

        return score
