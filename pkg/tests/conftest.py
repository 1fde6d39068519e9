import datetime as dt

import numpy as np
import pytest

from readmit.cohort import AdmissionRecord, PatientHistory, admission_table
from readmit.synthetic import CohortSpec, generate_cohort


def make_admission(pid, k, admit, los=2, ed=False, acute=True, surgery=False, meds=5, consults=1, cats=()):
    admit = dt.date.fromisoformat(admit) if isinstance(admit, str) else admit
    return AdmissionRecord(
        admission_id=f"{pid}-{k}",
        patient_id=pid,
        admit_date=admit,
        discharge_date=admit + dt.timedelta(days=los),
        acute_admission=acute,
        via_emergency_dept=ed,
        surgery=surgery,
        num_medications=meds,
        num_consultations=consults,
        comorbidity_categories=frozenset(cats),
    )


def make_history(pid, admits, age=70, sex="female", **kw):
    return PatientHistory(pid, age, sex, tuple(make_admission(pid, k, a, **kw) for k, a in enumerate(admits)))


@pytest.fixture(scope="session")
def small_spec():
    return CohortSpec(n_patients=400, seed=3, temporal_gain=2.0)


@pytest.fixture(scope="session")
def small_table(small_spec):
    return admission_table(generate_cohort(small_spec))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} ({detail})"
        _ACCEPTANCE.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
