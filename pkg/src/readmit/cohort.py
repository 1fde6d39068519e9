"""Patient/admission records, derived clinical features and 30-day labels.

The unit of input is a :class:`PatientHistory` (one JSON object per line in
a cohort file). Every admission of a patient is also an *index admission*:
it gets a label (was the patient readmitted within 30 days of discharge?)
and a feature row computed from the history available at its admit date.
"""
from __future__ import annotations

import datetime as dt
import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ValidationError

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
READMISSION_WINDOW_DAYS = 30
LOOKBACK_DAYS = 180
SEASONS = ("winter", "spring", "summer", "fall")
ALLOWED_CHARLSON_WEIGHTS = frozenset({1, 2, 3, 6})
AGE_BUCKETS = (("age_65_74", 65, 75), ("age_75_84", 75, 85), ("age_85_plus", 85, math.inf))


def season_of(day: dt.date) -> str:
    """Meteorological season: Dec-Feb winter, Mar-May spring, and so on."""
    return SEASONS[(day.month % 12) // 3]


@dataclass(frozen=True)
class AdmissionRecord:
    admission_id: str
    patient_id: str
    admit_date: dt.date
    discharge_date: dt.date
    acute_admission: bool
    via_emergency_dept: bool
    surgery: bool
    num_medications: int | None
    num_consultations: int | None
    comorbidity_categories: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.discharge_date < self.admit_date:
            raise ValidationError(
                f"admission {self.admission_id}: discharge_date {self.discharge_date} "
                f"precedes admit_date {self.admit_date}"
            )
        for name in ("num_medications", "num_consultations"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ValidationError(f"admission {self.admission_id}: {name} is negative ({value})")
        object.__setattr__(self, "comorbidity_categories", frozenset(self.comorbidity_categories))

    @property
    def season(self) -> str:
        return season_of(self.admit_date)

    @property
    def los_days(self) -> int:
        return compute_los(self.admit_date, self.discharge_date, self.admission_id)

    def to_dict(self) -> dict:
        return {
            "admission_id": self.admission_id,
            "patient_id": self.patient_id,
            "admit_date": self.admit_date.isoformat(),
            "discharge_date": self.discharge_date.isoformat(),
            "acute_admission": self.acute_admission,
            "via_emergency_dept": self.via_emergency_dept,
            "surgery": self.surgery,
            "num_medications": self.num_medications,
            "num_consultations": self.num_consultations,
            "comorbidity_categories": sorted(self.comorbidity_categories),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "AdmissionRecord":
        try:
            return cls(
                admission_id=str(d["admission_id"]),
                patient_id=str(d["patient_id"]),
                admit_date=dt.date.fromisoformat(d["admit_date"]),
                discharge_date=dt.date.fromisoformat(d["discharge_date"]),
                acute_admission=bool(d["acute_admission"]),
                via_emergency_dept=bool(d["via_emergency_dept"]),
                surgery=bool(d["surgery"]),
                num_medications=d.get("num_medications"),
                num_consultations=d.get("num_consultations"),
                comorbidity_categories=frozenset(d.get("comorbidity_categories", ())),
            )
        except KeyError as exc:
            raise ValidationError(f"admission record missing field {exc.args[0]!r}") from None


@dataclass(frozen=True)
class PatientHistory:
    patient_id: str
    age_at_index: int
    sex: str
    admissions: tuple[AdmissionRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "admissions", tuple(self.admissions))
        if self.sex not in ("female", "male"):
            raise ValidationError(f"patient {self.patient_id}: sex must be 'female' or 'male', got {self.sex!r}")
        if self.age_at_index < 65:
            raise ValidationError(f"patient {self.patient_id}: age_at_index {self.age_at_index} < 65")
        for prev, nxt in zip(self.admissions, self.admissions[1:]):
            if nxt.admit_date <= prev.admit_date:
                raise ValidationError(
                    f"patient {self.patient_id}: admissions not strictly ordered "
                    f"({prev.admission_id} then {nxt.admission_id})"
                )
            if nxt.admit_date < prev.discharge_date:
                raise ValidationError(
                    f"patient {self.patient_id}: admission {nxt.admission_id} overlaps {prev.admission_id}"
                )
        for adm in self.admissions:
            if adm.patient_id != self.patient_id:
                raise ValidationError(f"admission {adm.admission_id} belongs to {adm.patient_id}, not {self.patient_id}")

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "patient_id": self.patient_id,
            "age_at_index": self.age_at_index,
            "sex": self.sex,
            "admissions": [a.to_dict() for a in self.admissions],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PatientHistory":
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValidationError(f"unsupported patient schema_version {version}")
        try:
            return cls(
                patient_id=str(d["patient_id"]),
                age_at_index=int(d["age_at_index"]),
                sex=d["sex"],
                admissions=tuple(AdmissionRecord.from_dict(a) for a in d["admissions"]),
            )
        except KeyError as exc:
            raise ValidationError(f"patient record missing field {exc.args[0]!r}") from None


def dumps_history(history: PatientHistory) -> str:
    return json.dumps(history.to_dict(), sort_keys=True, separators=(",", ":"))


def write_jsonl(histories: Iterable[PatientHistory], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for h in histories:
            fh.write(dumps_history(h))
            fh.write("\n")


def read_jsonl(path) -> list[PatientHistory]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(PatientHistory.from_dict(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# Charlson weights


class CharlsonWeightTable(dict):
    """Mapping of Charlson category identifier to integer weight."""

    def __init__(self, weights: Mapping[str, int]):
        bad = {k: v for k, v in weights.items() if v not in ALLOWED_CHARLSON_WEIGHTS}
        if bad:
            raise ValidationError(f"Charlson weights must be in {{1, 2, 3, 6}}; offending entries: {bad}")
        super().__init__({str(k): int(v) for k, v in weights.items()})

    @classmethod
    def from_toml(cls, path) -> "CharlsonWeightTable":
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
        return cls(doc.get("weights", doc))

    @classmethod
    def default(cls) -> "CharlsonWeightTable":
        text = resources.files("readmit.data").joinpath("charlson_weights.toml").read_text()
        return cls(tomllib.loads(text)["weights"])


def compute_los(admit_date: dt.date, discharge_date: dt.date, admission_id: str | None = None) -> int:
    """Whole days between admit and discharge; a same-day discharge is 0."""
    days = (discharge_date - admit_date).days
    if days < 0:
        raise ValidationError(f"admission {admission_id}: negative length of stay ({days} days)")
    return days


def compute_cci(categories: Iterable[str], weights: Mapping[str, int]) -> int:
    """Charlson score: sum of weights over the distinct categories."""
    distinct = set(categories)
    unknown = sorted(distinct - weights.keys())
    if unknown:
        raise ValidationError(f"unknown Charlson categories: {unknown}")
    return sum(weights[c] for c in distinct)


def count_window_events(
    history: PatientHistory,
    index_date: dt.date,
    window_days: int = LOOKBACK_DAYS,
    predicate: Callable[[AdmissionRecord], bool] | None = None,
) -> int:
    """Prior admissions with admit_date in ``[index_date - window_days, index_date)``.

    ``predicate`` filters which admissions count (``None`` counts all).
    """
    if not any(a.admit_date == index_date for a in history.admissions):
        raise ValidationError(f"patient {history.patient_id}: no admission on index date {index_date}")
    start = index_date - dt.timedelta(days=window_days)
    return sum(
        1
        for a in history.admissions
        if start <= a.admit_date < index_date and (predicate is None or predicate(a))
    )


def is_readmission_gap(days: int) -> bool:
    return 0 < days <= READMISSION_WINDOW_DAYS


def label_readmissions(history: PatientHistory) -> list[tuple[str, bool]]:
    """(admission_id, readmitted) for every admission; the last is always False."""
    adms = history.admissions
    labels = []
    for k, adm in enumerate(adms):
        if k + 1 < len(adms):
            gap = (adms[k + 1].admit_date - adm.discharge_date).days
            labels.append((adm.admission_id, is_readmission_gap(gap)))
        else:
            labels.append((adm.admission_id, False))
    return labels


# ---------------------------------------------------------------------------
# Admission-level feature table

TEMPORAL_COLUMNS = (
    "los_days",
    "acute_admission",
    "cci_score",
    "ed_visits_6mo",
    "admissions_6mo",
    "surgery",
    "num_medications",
    "num_consultations",
    "season_winter",
    "season_spring",
    "season_summer",
    "season_fall",
)
STATIC_COLUMNS = ("sex", "age") + tuple(name for name, _, _ in AGE_BUCKETS)
RAW_COLUMNS = TEMPORAL_COLUMNS + STATIC_COLUMNS
COLUMN_GROUP = {
    **{c: c for c in RAW_COLUMNS},
    **{f"season_{s}": "season" for s in SEASONS},
    **{name: "age" for name, _, _ in AGE_BUCKETS},
}
LACE_COLUMNS = ("los_days", "acute_admission", "cci_score", "ed_visits_6mo")
_COL = {name: j for j, name in enumerate(RAW_COLUMNS)}


def admission_feature_row(
    admissions: Sequence[AdmissionRecord], k: int, sex: str, age: int, weights: Mapping[str, int]
) -> np.ndarray:
    """Raw ``RAW_COLUMNS`` row for admission ``k`` given the admissions before it.

    ``sex`` is 1 for female. Missing medication/consultation counts are NaN.
    """
    a = admissions[k]
    r = np.zeros(len(RAW_COLUMNS))
    r[_COL["los_days"]] = compute_los(a.admit_date, a.discharge_date, a.admission_id)
    r[_COL["acute_admission"]] = float(a.acute_admission)
    r[_COL["cci_score"]] = compute_cci(a.comorbidity_categories, weights)
    start = a.admit_date - dt.timedelta(days=LOOKBACK_DAYS)
    prior = [p for p in admissions[:k] if p.admit_date >= start]
    r[_COL["ed_visits_6mo"]] = sum(p.via_emergency_dept for p in prior)
    r[_COL["admissions_6mo"]] = len(prior)
    r[_COL["surgery"]] = float(a.surgery)
    r[_COL["num_medications"]] = np.nan if a.num_medications is None else a.num_medications
    r[_COL["num_consultations"]] = np.nan if a.num_consultations is None else a.num_consultations
    r[_COL[f"season_{a.season}"]] = 1.0
    r[_COL["sex"]] = 1.0 if sex == "female" else 0.0
    r[_COL["age"]] = age
    for name, lo, hi in AGE_BUCKETS:
        r[_COL[name]] = float(lo <= age < hi)
    return r


def admission_rows(history: PatientHistory, weights: Mapping[str, int]) -> np.ndarray:
    """Raw feature rows (one per admission) in ``RAW_COLUMNS`` order."""
    adms = history.admissions
    if not adms:
        return np.zeros((0, len(RAW_COLUMNS)))
    return np.vstack([admission_feature_row(adms, k, history.sex, history.age_at_index, weights) for k in range(len(adms))])


@dataclass
class AdmissionTable:
    """All admissions of a cohort as contiguous per-patient row blocks.

    ``raw`` holds ``RAW_COLUMNS``; ``position`` is the admission's index within
    its patient's history, so row ``i - k`` is the k-th previous admission of
    the same patient whenever ``k <= position[i]``.
    """

    raw: np.ndarray
    labels: np.ndarray
    patient_ids: np.ndarray
    admission_ids: np.ndarray
    admit_ordinal: np.ndarray
    position: np.ndarray

    columns: tuple[str, ...] = RAW_COLUMNS

    def __len__(self):
        return len(self.labels)

    def column(self, name: str) -> np.ndarray:
        return self.raw[:, self.columns.index(name)]

    @property
    def unique_patients(self) -> np.ndarray:
        return self.patient_ids[self.position == 0]

    def subset_patients(self, patient_ids) -> "AdmissionTable":
        keep = np.isin(self.patient_ids, np.asarray(list(patient_ids), dtype=object))
        return self.take(np.flatnonzero(keep))

    def take(self, rows: np.ndarray) -> "AdmissionTable":
        """Select rows; caller keeps patient blocks whole and ordered."""
        return AdmissionTable(
            raw=self.raw[rows],
            labels=self.labels[rows],
            patient_ids=self.patient_ids[rows],
            admission_ids=self.admission_ids[rows],
            admit_ordinal=self.admit_ordinal[rows],
            position=self.position[rows],
        )


def admission_table(histories: Sequence[PatientHistory], weights: Mapping[str, int] | None = None) -> AdmissionTable:
    weights = CharlsonWeightTable.default() if weights is None else weights
    blocks, labels, pids, aids, ords, pos = [], [], [], [], [], []
    for h in histories:
        if not h.admissions:
            continue
        blocks.append(admission_rows(h, weights))
        labels.extend(lab for _, lab in label_readmissions(h))
        for k, a in enumerate(h.admissions):
            pids.append(h.patient_id)
            aids.append(a.admission_id)
            ords.append(a.admit_date.toordinal())
            pos.append(k)
    raw = np.vstack(blocks) if blocks else np.zeros((0, len(RAW_COLUMNS)))
    return AdmissionTable(
        raw=raw,
        labels=np.asarray(labels, dtype=bool),
        patient_ids=np.asarray(pids, dtype=object),
        admission_ids=np.asarray(aids, dtype=object),
        admit_ordinal=np.asarray(ords, dtype=np.int64),
        position=np.asarray(pos, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# Feature registry and sequences


@dataclass(frozen=True)
class FeatureConfig:
    """Which features enter the model.

    ``exclude`` takes column names or group names (``season``, ``age``).
    """

    age_mode: str = "raw"
    exclude: tuple[str, ...] = ()
    max_seq_len: int = 10

    def __post_init__(self):
        if self.age_mode not in ("raw", "bucketed"):
            raise ValidationError(f"age_mode must be 'raw' or 'bucketed', got {self.age_mode!r}")
        if self.max_seq_len < 1:
            raise ValidationError("max_seq_len must be >= 1")
        object.__setattr__(self, "exclude", tuple(self.exclude))
        valid = set(RAW_COLUMNS) | set(COLUMN_GROUP.values())
        unknown = sorted(set(self.exclude) - valid)
        if unknown:
            raise ValidationError(f"unknown feature names {unknown}; valid names: {sorted(valid)}")

    def columns(self) -> tuple[str, ...]:
        cols = list(TEMPORAL_COLUMNS) + ["sex"]
        if self.age_mode == "raw":
            cols.append("age")
        else:
            cols.extend(name for name, _, _ in AGE_BUCKETS)
        return tuple(c for c in cols if c not in self.exclude and COLUMN_GROUP[c] not in self.exclude)


@dataclass(frozen=True)
class FeatureDescriptor:
    name: str
    kind: str  # "temporal" or "static"
    group: str
    mean: float = 0.0
    std: float = 1.0
    fill: float = 0.0  # imputation value (training median)


@dataclass(frozen=True)
class FeatureRegistry:
    features: tuple[FeatureDescriptor, ...]
    fitted: bool = False
    version: int = SCHEMA_VERSION

    @classmethod
    def from_config(cls, config: FeatureConfig) -> "FeatureRegistry":
        return cls(
            tuple(
                FeatureDescriptor(name=c, kind="temporal" if c in TEMPORAL_COLUMNS else "static", group=COLUMN_GROUP[c])
                for c in config.columns()
            )
        )

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.features)

    @property
    def groups(self) -> tuple[str, ...]:
        """Distinct feature groups in registry order."""
        return tuple(dict.fromkeys(f.group for f in self.features))

    def group_columns(self, group: str) -> list[int]:
        cols = [j for j, f in enumerate(self.features) if f.group == group or f.name == group]
        if not cols:
            raise ValidationError(f"unknown feature {group!r}; valid names: {list(self.groups)}")
        return cols

    def __len__(self):
        return len(self.features)

    def fit(self, table: AdmissionTable) -> "FeatureRegistry":
        """Imputation medians and z-score statistics from ``table`` (the training split)."""
        if len(table) == 0:
            raise ValidationError("cannot fit feature registry on an empty table")
        out = []
        for f in self.features:
            x = table.column(f.name)
            fill = float(np.nanmedian(x)) if np.isfinite(x).any() else 0.0
            x = np.where(np.isnan(x), fill, x)
            out.append(FeatureDescriptor(f.name, f.kind, f.group, float(x.mean()), float(x.std()), fill))
        return FeatureRegistry(tuple(out), fitted=True, version=self.version)

    def transform(self, table: AdmissionTable) -> np.ndarray:
        """Impute and z-score the registry columns; constant columns become 0."""
        if not self.fitted:
            raise ValidationError("feature registry is not fitted")
        idx = [table.columns.index(n) for n in self.names]
        x = table.raw[:, idx].copy()
        fill = np.array([f.fill for f in self.features])
        mean = np.array([f.mean for f in self.features])
        std = np.array([f.std for f in self.features])
        x = np.where(np.isnan(x), fill, x)
        const = std == 0
        if const.any():
            warnings.warn(
                f"constant features emitted as 0: {[n for n, c in zip(self.names, const) if c]}",
                RuntimeWarning,
                stacklevel=2,
            )
        return np.where(const, 0.0, (x - mean) / np.where(const, 1.0, std))

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "fitted": self.fitted,
            "features": [vars(f).copy() for f in self.features],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureRegistry":
        return cls(tuple(FeatureDescriptor(**f) for f in d["features"]), fitted=d["fitted"], version=d["version"])

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class SequenceSet:
    """Left-padded sequence tensors, one per index admission.

    ``X`` has shape (N, T, D); ``mask[n, t]`` is True on real admissions.
    """

    X: np.ndarray
    mask: np.ndarray
    y: np.ndarray
    patient_ids: np.ndarray
    admission_ids: np.ndarray
    feature_names: tuple[str, ...] = ()

    def __len__(self):
        return len(self.y)

    def take(self, rows) -> "SequenceSet":
        return SequenceSet(
            self.X[rows], self.mask[rows], self.y[rows], self.patient_ids[rows], self.admission_ids[rows], self.feature_names
        )

    def save_npz(self, path) -> None:
        """Debug dump: arrays X, mask, y, patient_ids, admission_ids, feature_names, schema_version."""
        np.savez(
            path,
            X=self.X,
            mask=self.mask,
            y=self.y,
            patient_ids=self.patient_ids.astype(str),
            admission_ids=self.admission_ids.astype(str),
            feature_names=np.asarray(self.feature_names, dtype=str),
            schema_version=np.int64(SCHEMA_VERSION),
        )

    @classmethod
    def load_npz(cls, path) -> "SequenceSet":
        with np.load(path) as z:
            if int(z["schema_version"]) != SCHEMA_VERSION:
                raise ValidationError(f"{path}: unsupported schema_version {int(z['schema_version'])}")
            return cls(
                z["X"], z["mask"], z["y"], z["patient_ids"].astype(object), z["admission_ids"].astype(object),
                tuple(z["feature_names"].tolist()),
            )


@dataclass(frozen=True)
class LabeledSequence:
    patient_id: str
    index_admission_id: str
    matrix: np.ndarray
    mask: np.ndarray
    label: bool


def sequence_set(table: AdmissionTable, registry: FeatureRegistry, max_seq_len: int = 10) -> SequenceSet:
    """Gather each admission's most recent ``max_seq_len`` rows (itself included)."""
    feats = registry.transform(table)
    offsets = np.arange(max_seq_len) - (max_seq_len - 1)
    idx = np.arange(len(table))[:, None] + offsets[None, :]
    mask = offsets[None, :] + table.position[:, None] >= 0
    X = np.where(mask[..., None], feats[np.where(mask, idx, 0)], 0.0) if len(table) else np.zeros((0, max_seq_len, len(registry)))
    return SequenceSet(X, mask, table.labels.astype(np.float64), table.patient_ids, table.admission_ids, registry.names)


def build_sequences(
    histories: Sequence[PatientHistory],
    registry: FeatureRegistry,
    config: FeatureConfig = FeatureConfig(),
    weights: Mapping[str, int] | None = None,
) -> list[LabeledSequence]:
    """One :class:`LabeledSequence` per index admission, normalized with ``registry``."""
    table = admission_table(histories, weights)
    seqs = sequence_set(table, registry, config.max_seq_len)
    return [
        LabeledSequence(str(seqs.patient_ids[n]), str(seqs.admission_ids[n]), seqs.X[n], seqs.mask[n], bool(seqs.y[n]))
        for n in range(len(seqs))
    ]


def load_config_file(path) -> dict:
    path = Path(path)
    with open(path, "rb") as fh:
        return tomllib.load(fh)
