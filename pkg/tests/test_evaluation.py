import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from readmit.errors import TrainingError, ValidationError
from readmit.evaluation import (
    EvaluationReport,
    SplitPlan,
    auc_roc,
    average_ranks,
    comparison_csv,
    run_repeated_evaluation,
    summarize,
    top_decile_metrics,
)
from readmit.models import ConstantTrainer, LaceTrainer, PlantedOracle

from oracles import brute_auc, brute_top_decile


def test_auc_examples():
    assert auc_roc([0.9, 0.1], [1, 0]) == 1.0
    assert auc_roc([0.3] * 6, [1, 0, 1, 0, 1, 0]) == 0.5
    with pytest.raises(ValidationError, match="both classes"):
        auc_roc([0.1, 0.2], [1, 1])


def test_auc_equals_pair_counting(rng):
    for _ in range(200):
        n = int(rng.integers(2, 201))
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        s = rng.integers(0, 5, n) / 4.0 if rng.random() < 0.5 else rng.random(n)
        assert auc_roc(s, y) == brute_auc(s.tolist(), y.tolist())


def test_average_ranks():
    np.testing.assert_array_equal(average_ranks([10, 20, 20, 5]), [2, 3.5, 3.5, 1])


@given(st.lists(st.integers(-500, 500), min_size=4, max_size=60), st.randoms(use_true_random=False))
@settings(max_examples=60)
def test_auc_invariant_under_increasing_transforms(scores, r):
    # a 0.01 grid keeps exp and the affine map strictly increasing in floating point
    s = np.array(scores) / 100.0
    y = np.array([r.random() < 0.5 for _ in s])
    y[0], y[1] = True, False
    base = auc_roc(s, y)
    assert auc_roc(np.exp(s), y) == base
    assert auc_roc(3.0 * s + 7.0, y) == base
    assert base + auc_roc(s, ~y) == 1.0


def test_top_decile_example():
    scores = np.arange(100, 0, -1, dtype=float)
    y = np.zeros(100, bool)
    y[[0, 3, 5, 9, 20, 30, 40, 50, 60, 70]] = True
    assert top_decile_metrics(scores, y) == (0.4, 0.4)


def test_top_decile_full_recall():
    scores = np.linspace(1, 0, 50)
    y = np.zeros(50, bool)
    y[:3] = True
    assert top_decile_metrics(scores, y)[1] == 1.0


def test_top_decile_matches_sort_and_count(rng):
    for _ in range(20):
        n = 1000
        s = rng.integers(0, 30, n).astype(float)  # heavy ties at the cut
        y = rng.random(n) < 0.2
        ids = np.array([f"A{rng.integers(1e6):07d}-{k}" for k in range(n)])
        assert top_decile_metrics(s, y, ids) == brute_top_decile(s.tolist(), y.tolist(), ids.tolist())


def test_top_decile_rounds_k_up():
    s = np.arange(11, dtype=float)
    y = np.zeros(11, bool)
    y[-2:] = True
    assert top_decile_metrics(s, y) == (1.0, 1.0)  # k = 2


def test_top_decile_requires_ten():
    with pytest.raises(ValidationError):
        top_decile_metrics([0.1] * 9, [1, 0] * 4 + [1])


def test_summarize_ci():
    v = [0.6, 0.7, 0.8, 0.65]
    s = summarize(v)
    half = 1.96 * np.std(v, ddof=1) / 2
    assert s["half_width"] == pytest.approx(half, rel=1e-15)
    assert s["ci_low"] <= s["mean"] <= s["ci_high"]
    assert summarize([0.7]) == {"mean": 0.7, "ci_low": None, "ci_high": None, "half_width": None}


def test_repeat_seeds_independent_and_stable():
    plan = SplitPlan(seed=4, n_repeats=5)
    seeds = plan.repeat_seeds()
    assert len(set(seeds)) == 5 and seeds == SplitPlan(seed=4, n_repeats=5).repeat_seeds()
    assert SplitPlan(seed=4, n_repeats=8).repeat_seeds()[:5] == seeds


def test_splits_never_share_patients(small_table):
    plan = SplitPlan(seed=2, n_repeats=20)
    n_pat = len(small_table.unique_patients)
    for r in range(plan.n_repeats):
        tr, te = plan.split(small_table, r)
        a, b = set(small_table.patient_ids[tr]), set(small_table.patient_ids[te])
        assert not a & b
        assert len(a) == round(0.7 * n_pat) and len(a) + len(b) == n_pat
        assert len(tr) + len(te) == len(small_table)


def test_constant_trainer_with_jitter_is_uninformative(small_table):
    rep = run_repeated_evaluation(small_table, ConstantTrainer(0.5, jitter=1e-3), SplitPlan(seed=0, n_repeats=20))
    agg = rep.aggregates["auc"]
    assert agg["ci_low"] <= 0.5 <= agg["ci_high"]
    assert abs(agg["mean"] - 0.5) < 0.05


def test_constant_trainer_without_jitter_gives_half(small_table):
    rep = run_repeated_evaluation(small_table, ConstantTrainer(0.5), SplitPlan(seed=0, n_repeats=2))
    assert rep.values("auc") == [0.5, 0.5]


def test_oracle_is_an_upper_reference(small_spec, small_table):
    plan = SplitPlan(seed=1, n_repeats=10)
    oracle = run_repeated_evaluation(small_table, PlantedOracle(small_spec), plan)
    lace = run_repeated_evaluation(small_table, LaceTrainer(), plan)
    assert oracle.aggregates["auc"]["mean"] > lace.aggregates["auc"]["mean"]
    # the oracle's per-split AUC is the Bayes-optimal ranking scored on each test side
    from readmit.synthetic import true_probabilities

    for r in range(plan.n_repeats):
        _, te = plan.split(small_table, r)
        test = small_table.take(te)
        assert oracle.repeats[r]["auc"] == auc_roc(true_probabilities(test, small_spec), test.labels)


def test_report_deterministic_and_serializable(small_table):
    plan = SplitPlan(seed=9, n_repeats=3)
    a = run_repeated_evaluation(small_table, LaceTrainer(), plan)
    b = run_repeated_evaluation(small_table, LaceTrainer(), plan)
    assert a.to_json() == b.to_json() and a.to_csv() == b.to_csv()
    doc = json.loads(a.to_json())
    assert doc["plan"] == {"seed": 9, "n_repeats": 3, "train_fraction": 0.7}
    for r in doc["repeats"]:
        assert all(0 <= r[m] <= 1 for m in ("auc", "precision_top_decile", "recall_top_decile"))
    header, *rows = a.to_csv().splitlines()
    assert header.startswith("model,repeat,seed") and len(rows) == 3


def test_single_repeat_has_null_ci(small_table):
    rep = run_repeated_evaluation(small_table, LaceTrainer(), SplitPlan(n_repeats=1))
    assert json.loads(rep.to_json())["aggregates"]["auc"]["ci_low"] is None


def test_ci_shrinks_with_more_repeats(small_table):
    narrow = run_repeated_evaluation(small_table, LaceTrainer(), SplitPlan(seed=5, n_repeats=80))
    wide = run_repeated_evaluation(small_table, LaceTrainer(), SplitPlan(seed=5, n_repeats=20))
    assert narrow.aggregates["auc"]["half_width"] < wide.aggregates["auc"]["half_width"]


class Exploding:
    name = "boom"

    def __call__(self, train, seed):
        raise RuntimeError("no")


def test_trainer_failure_reports_repeat_and_seed(small_table):
    plan = SplitPlan(seed=0, n_repeats=2)
    with pytest.raises(TrainingError, match=f"repeat 0 \\(seed {plan.repeat_seeds()[0]}\\)"):
        run_repeated_evaluation(small_table, Exploding(), plan)


def test_comparison_csv_one_column_per_model(small_table):
    plan = SplitPlan(seed=0, n_repeats=3)
    reps = [run_repeated_evaluation(small_table, t, plan) for t in (LaceTrainer(), ConstantTrainer(jitter=0.1))]
    lines = comparison_csv(reps).splitlines()
    assert lines[0] == "repeat,auc_lace-lr,auc_constant"
    assert len(lines) == 4 and all(len(line.split(",")) == 3 for line in lines)


def test_parallel_equals_serial(small_table):
    plan = SplitPlan(seed=3, n_repeats=3)
    serial = run_repeated_evaluation(small_table, LaceTrainer(), plan)
    parallel = run_repeated_evaluation(small_table, LaceTrainer(), plan, n_jobs=2)
    assert serial.to_json() == parallel.to_json()
