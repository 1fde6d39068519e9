"""Synthetic Medicare-style cohorts with a planted readmission process.

Each admission's 30-day readmission probability is

    sigmoid(base_rate + sum_f coef_f * feature_f + temporal_gain * T + noise)

where the features are the raw admission-level columns of
:mod:`readmit.cohort` and ``T`` flags an escalation in admission frequency:
``admissions_6mo`` at this admission exceeds its value at the previous one.
``T`` depends on admission order, so a sequence model can pick it up while a
logistic model on the index admission's LACE components cannot.

Readmission is realized through the gap to the next admission: with the
planted probability the gap is uniform on 1..30 days, otherwise the patient
either leaves the cohort or returns after more than 30 days.

Default sampling distributions (all overridable):

* admissions per patient: geometric continuation after every admission that
  is not a readmission, mean ``admissions_mean``
* length of stay: ``round(lognormal(los_log_mean, los_log_sd))``
* medications / consultations: Poisson
* comorbidities: a chronic set drawn once per patient, plus categories
  coded at a single admission only (rarer for heavier weights)
"""
from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field, fields
from typing import Mapping

import numpy as np
from scipy.special import expit, logit

from .cohort import (
    AGE_BUCKETS,
    RAW_COLUMNS,
    AdmissionRecord,
    AdmissionTable,
    CharlsonWeightTable,
    PatientHistory,
    admission_feature_row,
)
from .errors import ValidationError

PLANTED_FEATURES = tuple(c for c in RAW_COLUMNS if c not in {name for name, _, _ in AGE_BUCKETS})

DEFAULT_COEFFICIENTS = {
    "los_days": 0.06,
    "acute_admission": 0.4,
    "cci_score": 0.25,
    "ed_visits_6mo": 0.2,
    "admissions_6mo": 0.1,
    "num_medications": -0.04,
    "num_consultations": -0.12,
    "sex": 0.2,
}

_EPOCH_START = dt.date(2001, 1, 1).toordinal()
_EPOCH_END = dt.date(2011, 12, 31).toordinal()


@dataclass(frozen=True)
class CohortSpec:
    n_patients: int = 1000
    seed: int = 42
    admissions_mean: float = 2.0
    base_rate: float = float(logit(0.04))
    coefficients: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_COEFFICIENTS))
    temporal_gain: float = 1.5
    noise_scale: float = 0.0
    max_admissions: int = 300

    female_prob: float = 0.55
    age_min: int = 65
    age_max: int = 95
    ed_prob: float = 0.55
    acute_prob_ed: float = 0.9
    acute_prob_elective: float = 0.3
    surgery_prob: float = 0.3
    los_log_mean: float = 1.2
    los_log_sd: float = 0.6
    medications_mean: float = 8.0
    consultations_mean: float = 2.0
    missing_rate: float = 0.0
    chronic_prob: float = 0.08
    acute_diagnosis_prob: float = 0.03
    return_gap_mean: float = 150.0

    def __post_init__(self):
        object.__setattr__(self, "coefficients", {str(k): float(v) for k, v in dict(self.coefficients).items()})
        if self.n_patients < 1:
            raise ValidationError(f"n_patients must be >= 1, got {self.n_patients}")
        if not self.admissions_mean >= 1:
            raise ValidationError(f"admissions_mean must be >= 1, got {self.admissions_mean}")
        if self.max_admissions < 1:
            raise ValidationError("max_admissions must be >= 1")
        unknown = sorted(set(self.coefficients) - set(PLANTED_FEATURES))
        if unknown:
            raise ValidationError(f"unknown planted features {unknown}; valid: {list(PLANTED_FEATURES)}")
        for name in ("female_prob", "ed_prob", "acute_prob_ed", "acute_prob_elective", "surgery_prob",
                     "missing_rate", "chronic_prob", "acute_diagnosis_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1]")
        if self.noise_scale < 0 or self.return_gap_mean <= 0:
            raise ValidationError("noise_scale must be >= 0 and return_gap_mean > 0")
        if not 65 <= self.age_min <= self.age_max:
            raise ValidationError("ages must satisfy 65 <= age_min <= age_max")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["coefficients"] = dict(sorted(self.coefficients.items()))
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "CohortSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValidationError(f"unknown cohort spec keys {unknown}")
        return cls(**d)


def planted_logit(features: Mapping[str, float], temporal_flag: float, spec: CohortSpec, noise: float = 0.0) -> float:
    z = spec.base_rate + spec.temporal_gain * temporal_flag + noise
    for name, coef in spec.coefficients.items():
        z += coef * features[name]
    return z


def planted_probability(features: Mapping[str, float], temporal_flag: float, spec: CohortSpec, noise: float = 0.0) -> float:
    """Probability of a 30-day readmission under the planted process."""
    return float(expit(planted_logit(features, temporal_flag, spec, noise)))


def temporal_flags(admissions_6mo: np.ndarray, position: np.ndarray) -> np.ndarray:
    """T per row of a patient-contiguous table: 1 where admissions_6mo rose."""
    prev = np.concatenate([[0.0], admissions_6mo[:-1]])
    return ((position > 0) & (admissions_6mo > prev)).astype(np.float64)


def true_probabilities(table: AdmissionTable, spec: CohortSpec) -> np.ndarray:
    """Noise-free planted probability for every admission of ``table``.

    Missing medication/consultation counts contribute 0.
    """
    z = np.full(len(table), spec.base_rate)
    for name, coef in spec.coefficients.items():
        z += coef * np.nan_to_num(table.column(name))
    z += spec.temporal_gain * temporal_flags(table.column("admissions_6mo"), table.position)
    return expit(z)


def _patient_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, index]))


def generate_patient(spec: CohortSpec, index: int, weights: Mapping[str, int] | None = None) -> PatientHistory:
    """Patient ``index`` of the cohort; depends only on (spec, index)."""
    weights = CharlsonWeightTable.default() if weights is None else weights
    rng = _patient_rng(spec.seed, index)
    categories = sorted(weights)
    pid = f"P{index:07d}"
    sex = "female" if rng.random() < spec.female_prob else "male"
    age = int(rng.integers(spec.age_min, spec.age_max + 1))
    chronic = {c for c in categories if rng.random() < spec.chronic_prob / weights[c]}
    continue_prob = 1.0 - 1.0 / spec.admissions_mean

    admissions: list[AdmissionRecord] = []
    admit = dt.date.fromordinal(int(rng.integers(_EPOCH_START, _EPOCH_END + 1)))
    prev_adm6 = None
    col = {name: j for j, name in enumerate(RAW_COLUMNS)}
    while True:
        coded = set(chronic)
        for c in categories:
            if rng.random() < spec.acute_diagnosis_prob / weights[c]:
                coded.add(c)
        via_ed = bool(rng.random() < spec.ed_prob)
        acute = bool(rng.random() < (spec.acute_prob_ed if via_ed else spec.acute_prob_elective))
        los = int(round(rng.lognormal(spec.los_log_mean, spec.los_log_sd)))
        meds = int(rng.poisson(spec.medications_mean))
        consults = int(rng.poisson(spec.consultations_mean))
        if rng.random() < spec.missing_rate:
            meds = None
        if rng.random() < spec.missing_rate:
            consults = None
        adm = AdmissionRecord(
            admission_id=f"{pid}-A{len(admissions):03d}",
            patient_id=pid,
            admit_date=admit,
            discharge_date=admit + dt.timedelta(days=los),
            acute_admission=acute,
            via_emergency_dept=via_ed,
            surgery=bool(rng.random() < spec.surgery_prob),
            num_medications=meds,
            num_consultations=consults,
            comorbidity_categories=frozenset(coded),
        )
        admissions.append(adm)
        # features of this admission given its history (same code path as the cohort table)
        row = admission_feature_row(admissions, len(admissions) - 1, sex, age, weights)
        feats = {name: (0.0 if np.isnan(row[col[name]]) else row[col[name]]) for name in PLANTED_FEATURES}
        adm6 = feats["admissions_6mo"]
        flag = 1.0 if prev_adm6 is not None and adm6 > prev_adm6 else 0.0
        prev_adm6 = adm6
        noise = rng.normal(0.0, spec.noise_scale) if spec.noise_scale > 0 else 0.0
        p = planted_probability(feats, flag, spec, noise)
        readmit = rng.random() < p
        cont = rng.random() < continue_prob
        if len(admissions) >= spec.max_admissions:
            break
        if readmit:
            gap = int(rng.integers(1, 31))
        elif cont:
            gap = 31 + int(rng.geometric(1.0 / spec.return_gap_mean)) - 1
        else:
            break
        admit = adm.discharge_date + dt.timedelta(days=gap)
    return PatientHistory(pid, age, sex, tuple(admissions))


def generate_cohort(spec: CohortSpec, weights: Mapping[str, int] | None = None) -> list[PatientHistory]:
    weights = CharlsonWeightTable.default() if weights is None else weights
    return [generate_patient(spec, i, weights) for i in range(spec.n_patients)]
