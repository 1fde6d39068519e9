import datetime as dt
import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from readmit.cohort import (
    AGE_BUCKETS,
    RAW_COLUMNS,
    AdmissionRecord,
    CharlsonWeightTable,
    FeatureConfig,
    FeatureRegistry,
    PatientHistory,
    SequenceSet,
    admission_table,
    build_sequences,
    compute_cci,
    compute_los,
    count_window_events,
    label_readmissions,
    read_jsonl,
    season_of,
    sequence_set,
    write_jsonl,
)
from readmit.errors import ValidationError

from conftest import make_admission, make_history

W = CharlsonWeightTable.default()


# --- length of stay -------------------------------------------------------


@pytest.mark.parametrize(
    "admit, discharge, expected",
    [("2010-01-01", "2010-01-01", 0), ("2010-01-01", "2010-01-06", 5)],
)
def test_los_examples(admit, discharge, expected):
    assert compute_los(dt.date.fromisoformat(admit), dt.date.fromisoformat(discharge)) == expected


def test_los_across_month_boundary_matches_calendar_oracle():
    # independent oracle: seconds between midnights via datetime, not date arithmetic
    a = dt.datetime(2010, 2, 27)
    d = dt.datetime(2010, 3, 2)
    oracle = int((d - a).total_seconds() // 86400)
    assert oracle == 3
    assert compute_los(a.date(), d.date()) == oracle


def test_negative_los_names_admission():
    with pytest.raises(ValidationError, match="ADM-7"):
        compute_los(dt.date(2010, 1, 5), dt.date(2010, 1, 1), "ADM-7")
    with pytest.raises(ValidationError, match="X1"):
        AdmissionRecord("X1", "P", dt.date(2010, 1, 5), dt.date(2010, 1, 1), True, False, False, 1, 1)


def test_negative_counts_rejected():
    with pytest.raises(ValidationError, match="num_medications"):
        make_admission("P", 0, "2010-01-01", meds=-1)


# --- Charlson --------------------------------------------------------------


def test_cci_examples():
    assert compute_cci(set(), W) == 0
    assert compute_cci({"myocardial_infarction", "diabetes_uncomplicated"}, W) == 2
    assert compute_cci(["metastatic_tumor", "mild_liver_disease", "mild_liver_disease"], W) == 7


def test_cci_unknown_category_listed():
    with pytest.raises(ValidationError, match="not_a_disease"):
        compute_cci({"not_a_disease", "aids"}, W)


def test_weight_table_only_classic_weights():
    assert set(W.values()) <= {1, 2, 3, 6}
    assert len(W) == 19
    with pytest.raises(ValidationError):
        CharlsonWeightTable({"x": 4})


def test_weight_table_from_toml(tmp_path):
    p = tmp_path / "w.toml"
    p.write_text("[weights]\nfoo = 2\nbar = 6\n")
    assert CharlsonWeightTable.from_toml(p) == {"foo": 2, "bar": 6}


@given(st.sets(st.sampled_from(sorted(W))), st.sampled_from(sorted(W)))
def test_cci_monotone(cats, extra):
    assert compute_cci(cats | {extra}, W) >= compute_cci(cats, W)


# --- window counts -----------------------------------------------------------


def test_window_no_prior_admissions():
    h = make_history("P", ["2010-06-01"])
    assert count_window_events(h, dt.date(2010, 6, 1)) == 0


def test_window_counts_ed_only():
    index = dt.date(2010, 6, 1)
    adms = [
        make_admission("P", 0, index - dt.timedelta(days=100), los=1, ed=True),
        make_admission("P", 1, index - dt.timedelta(days=50), los=1, ed=False),
        make_admission("P", 2, index - dt.timedelta(days=30), los=1, ed=True),
        make_admission("P", 3, index, los=1, ed=True),
    ]
    h = PatientHistory("P", 70, "male", tuple(adms))
    assert count_window_events(h, index, predicate=lambda a: a.via_emergency_dept) == 2
    assert count_window_events(h, index) == 3


def _brute_force_window(history, index, days, pred):
    # oracle: compare ordinal day numbers directly
    lo, hi = index.toordinal() - days, index.toordinal()
    return sum(1 for a in history.admissions if lo <= a.admit_date.toordinal() < hi and pred(a))


@pytest.mark.parametrize("offset, counted", [(180, True), (181, False), (179, True)])
def test_window_boundary_closed_left(offset, counted):
    index = dt.date(2010, 6, 1)
    h = PatientHistory(
        "P", 70, "male",
        (make_admission("P", 0, index - dt.timedelta(days=offset), los=1, ed=True), make_admission("P", 1, index, los=1)),
    )
    ed = lambda a: a.via_emergency_dept  # noqa: E731
    got = count_window_events(h, index, predicate=ed)
    assert got == _brute_force_window(h, index, 180, ed) == int(counted)


def test_window_unknown_index_date():
    h = make_history("P", ["2010-06-01"])
    with pytest.raises(ValidationError):
        count_window_events(h, dt.date(2010, 6, 2))


# --- labels --------------------------------------------------------------------


def test_single_admission_label_false():
    assert label_readmissions(make_history("P", ["2010-01-01"])) == [("P-0", False)]


def test_label_within_window():
    a = make_admission("P", 0, "2010-02-27", los=2)  # discharge 2010-03-01
    b = make_admission("P", 1, "2010-03-20")
    assert label_readmissions(PatientHistory("P", 70, "male", (a, b)))[0] == ("P-0", True)


def test_label_31_days_is_not_readmission():
    a = make_admission("P", 0, "2010-02-27", los=2)
    b = make_admission("P", 1, "2010-04-01")
    gap = dt.date(2010, 4, 1).toordinal() - dt.date(2010, 3, 1).toordinal()
    assert gap == 31
    assert label_readmissions(PatientHistory("P", 70, "male", (a, b)))[0][1] is False


def test_label_same_day_readmission_is_not_counted():
    # gap 0 falls outside the half-open (0, 30] window
    a = make_admission("P", 0, "2010-03-01", los=2)
    b = make_admission("P", 1, "2010-03-03")
    assert label_readmissions(PatientHistory("P", 70, "male", (a, b)))[0][1] is False


def test_labels_idempotent_and_justified(small_spec):
    from readmit.synthetic import generate_cohort

    for h in generate_cohort(small_spec)[:100]:
        first = label_readmissions(h)
        assert label_readmissions(h) == first
        for k, (aid, lab) in enumerate(first):
            nxt = h.admissions[k + 1:]
            brute = any(0 < (a.admit_date - h.admissions[k].discharge_date).days <= 30 for a in nxt)
            assert lab == brute


# --- records ---------------------------------------------------------------------


def test_history_invariants():
    with pytest.raises(ValidationError, match="65"):
        make_history("P", ["2010-01-01"], age=64)
    with pytest.raises(ValidationError, match="sex"):
        make_history("P", ["2010-01-01"], sex="other")
    with pytest.raises(ValidationError, match="strictly ordered"):
        make_history("P", ["2010-01-05", "2010-01-01"])
    with pytest.raises(ValidationError, match="overlaps"):
        make_history("P", ["2010-01-01", "2010-01-02"], los=5)


def test_season_meteorological():
    assert [season_of(dt.date(2010, m, 1)) for m in (12, 1, 2, 3, 6, 9, 11)] == [
        "winter", "winter", "winter", "spring", "summer", "fall", "fall",
    ]


def test_jsonl_round_trip(tmp_path, small_spec):
    from readmit.synthetic import generate_cohort

    hs = generate_cohort(small_spec)[:30]
    p = tmp_path / "c.jsonl"
    write_jsonl(hs, p)
    assert read_jsonl(p) == hs
    first = json.loads(p.read_text().splitlines()[0])
    assert first["schema_version"] == 1


def test_jsonl_error_reports_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    good = json.dumps(make_history("P", ["2010-01-01"]).to_dict())
    p.write_text(good + "\n{not json\n")
    with pytest.raises(ValidationError, match=":2:"):
        read_jsonl(p)


# --- features and sequences --------------------------------------------------------


def test_feature_row_values():
    h = PatientHistory(
        "P", 80, "female",
        (
            make_admission("P", 0, "2010-01-10", los=3, ed=True, cats={"aids"}),
            make_admission("P", 1, "2010-03-01", los=9, ed=False, acute=False, surgery=True, meds=None, cats={"dementia", "aids"}),
        ),
    )
    t = admission_table([h])
    row = dict(zip(RAW_COLUMNS, t.raw[1]))
    assert row["los_days"] == 9 and row["acute_admission"] == 0 and row["surgery"] == 1
    assert row["cci_score"] == 7 and row["ed_visits_6mo"] == 1 and row["admissions_6mo"] == 1
    assert np.isnan(row["num_medications"]) and row["season_spring"] == 1
    assert row["sex"] == 1 and row["age"] == 80 and row["age_75_84"] == 1
    assert t.labels.tolist() == [False, False]


def test_age_buckets_partition():
    for age in range(65, 110):
        hits = [lo <= age < hi for _, lo, hi in AGE_BUCKETS]
        assert sum(hits) == 1


def test_feature_config_columns():
    assert "age" in FeatureConfig().columns()
    bucketed = FeatureConfig(age_mode="bucketed").columns()
    assert "age" not in bucketed and "age_85_plus" in bucketed
    assert not {"age_65_74", "age_75_84", "age_85_plus"} & set(FeatureConfig(age_mode="bucketed", exclude=("age",)).columns())
    assert "season_winter" not in FeatureConfig(exclude=("season",)).columns()
    with pytest.raises(ValidationError, match="valid names"):
        FeatureConfig(exclude=("bogus",))


def test_normalized_training_features_standardized(small_table):
    reg = FeatureRegistry.from_config(FeatureConfig()).fit(small_table)
    Z = reg.transform(small_table)
    std = np.array([f.std for f in reg.features])
    live = std > 0
    np.testing.assert_array_less(np.abs(Z[:, live].mean(axis=0)), 1e-9)
    np.testing.assert_allclose(Z[:, live].std(axis=0), 1.0, atol=1e-9)


def test_feature_at_mean_normalizes_to_zero(small_table):
    reg = FeatureRegistry.from_config(FeatureConfig()).fit(small_table)
    t = small_table.take(np.arange(1))
    j = RAW_COLUMNS.index("los_days")
    t.raw[0, j] = reg.features[reg.names.index("los_days")].mean
    assert reg.transform(t)[0, reg.names.index("los_days")] == 0.0


def test_constant_feature_warns_and_is_zero():
    hs = [make_history(f"P{i}", ["2010-01-01", "2010-03-01"], surgery=False) for i in range(3)]
    t = admission_table(hs)
    reg = FeatureRegistry.from_config(FeatureConfig()).fit(t)
    with pytest.warns(RuntimeWarning, match="surgery"):
        Z = reg.transform(t)
    assert np.all(Z[:, reg.names.index("surgery")] == 0)


def test_median_imputation_from_training(small_table):
    t = small_table.take(np.arange(20))
    t.raw[3, RAW_COLUMNS.index("num_medications")] = np.nan
    reg = FeatureRegistry.from_config(FeatureConfig()).fit(t)
    meds = t.column("num_medications")
    assert reg.features[reg.names.index("num_medications")].fill == np.nanmedian(meds)


def test_single_admission_sequence_is_padded(small_table):
    h = make_history("P", ["2010-01-01"])
    reg = FeatureRegistry.from_config(FeatureConfig()).fit(small_table)
    (s,) = build_sequences([h], reg)
    assert s.mask.tolist() == [False] * 9 + [True]
    assert np.all(s.matrix[:9] == 0)


def test_truncation_keeps_latest_ten(small_table):
    start = dt.date(2005, 1, 1)
    dates = [start + dt.timedelta(days=100 * k) for k in range(12)]
    h = make_history("P", dates)
    t = admission_table([h])
    reg = FeatureRegistry.from_config(FeatureConfig()).fit(small_table)
    seqs = build_sequences([h], reg)
    last = seqs[-1]
    assert last.mask.all()
    s = sequence_set(t, reg, 10)
    rows = np.arange(len(t))[-10:]
    np.testing.assert_array_equal(s.X[-1], reg.transform(t)[rows])
    retained = [dates[r] for r in rows]
    assert retained == sorted(dates)[-10:]
    assert last.index_admission_id == "P-11"


def test_sequence_contains_only_past_admissions(small_table):
    reg = FeatureRegistry.from_config(FeatureConfig()).fit(small_table)
    s = sequence_set(small_table, reg, 10)
    feats = reg.transform(small_table)
    for n in range(0, len(small_table), 37):
        length = int(s.mask[n].sum())
        assert length == min(10, small_table.position[n] + 1)
        np.testing.assert_array_equal(s.X[n, -length:], feats[n - length + 1:n + 1])


def test_registry_round_trip_and_hash(small_table):
    reg = FeatureRegistry.from_config(FeatureConfig(age_mode="bucketed")).fit(small_table)
    back = FeatureRegistry.from_dict(json.loads(json.dumps(reg.to_dict())))
    assert back == reg and back.hash() == reg.hash()
    assert reg.groups.count("age") == 1 and len(reg.group_columns("season")) == 4


def test_sequence_npz_dump(tmp_path, small_table):
    reg = FeatureRegistry.from_config(FeatureConfig()).fit(small_table)
    s = sequence_set(small_table, reg, 5)
    s.save_npz(tmp_path / "dump.npz")
    back = SequenceSet.load_npz(tmp_path / "dump.npz")
    np.testing.assert_array_equal(back.X, s.X)
    np.testing.assert_array_equal(back.mask, s.mask)
    assert back.feature_names == s.feature_names
    assert back.admission_ids.tolist() == s.admission_ids.tolist()
