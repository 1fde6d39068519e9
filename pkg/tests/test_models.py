import numpy as np
import pytest

from readmit import config as cfgmod
from readmit.cohort import FeatureConfig
from readmit.errors import ValidationError
from readmit.evaluation import SplitPlan
from readmit.experiments import ABLATION_VARIANTS, ablation_csv, ablation_rows, run_ablation, variant_feature_config
from readmit.lace import baseline_columns
from readmit.lstm import TrainConfig
from readmit.models import LaceTrainer, LstmTrainer

TINY = TrainConfig(max_epochs=2, patience=1, hidden1=4, hidden2=4, batch_size=64, seed=0)


def test_lace_trainer_uses_four_components(small_table):
    m = LaceTrainer().fit(small_table)
    assert m.columns == ("los_days", "acute_admission", "cci_score", "ed_visits_6mo")
    s = m.score(small_table)
    assert s.shape == (len(small_table),) and np.all((s > 0) & (s < 1))


def test_extended_baseline_drops_reference_levels(small_table):
    cols = baseline_columns(True, FeatureConfig(age_mode="bucketed").columns())
    assert "season_fall" not in cols and "age_65_74" not in cols and "season_winter" in cols
    m = LaceTrainer(extended=True, feature_config=FeatureConfig(age_mode="bucketed")).fit(small_table)
    assert len(m.model.coefficients) == len(cols)


def test_lstm_trainer_fits_registry_on_train_only(small_table):
    half = small_table.subset_patients(small_table.unique_patients[:200])
    model = LstmTrainer(FeatureConfig(exclude=("age",)), TINY).fit(half, seed=1)
    assert "age" not in model.registry.names
    los = [f for f in model.registry.features if f.name == "los_days"][0]
    assert los.mean == pytest.approx(half.column("los_days").mean())
    assert model.score(small_table).shape == (len(small_table),)


def test_variant_configs():
    assert set(ABLATION_VARIANTS) == {
        "full", "drop_age", "drop_surgery", "drop_age_surgery", "age_buckets", "age_buckets_drop_surgery",
    }
    cols = variant_feature_config(FeatureConfig(), "age_buckets_drop_surgery").columns()
    assert "surgery" not in cols and "age" not in cols and "age_85_plus" in cols
    assert "age" not in variant_feature_config(FeatureConfig(), "drop_age").columns()
    with pytest.raises(ValidationError):
        variant_feature_config(FeatureConfig(), "drop_everything")


def test_ablation_table(small_table, tmp_path):
    plan = SplitPlan(seed=0, n_repeats=2)
    res = run_ablation(small_table, FeatureConfig(), TINY, plan, ["full", "drop_surgery"])
    rows = ablation_rows(res)
    assert [r["variant"] for r in rows] == ["full", "drop_surgery"]
    assert all(r["auc_ci_low"] <= r["auc_mean"] <= r["auc_ci_high"] for r in rows)
    assert ablation_csv(res) == ablation_csv(run_ablation(small_table, FeatureConfig(), TINY, plan, ["full", "drop_surgery"]))

    from readmit.plots import ablation_chart

    ablation_chart(rows, tmp_path / "a.png")
    assert (tmp_path / "a.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_config_layering(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text('seed = 5\n[train]\nmax_epochs = 7\n[features]\nexclude = ["surgery"]\n')
    cfg = cfgmod.load(p, {"train": {"hidden1": 8}})
    assert cfgmod.train_config(cfg) == TrainConfig(max_epochs=7, hidden1=8, seed=5)
    assert cfgmod.feature_config(cfg).exclude == ("surgery",)
    assert cfgmod.split_plan(cfg).seed == 5 and cfgmod.cohort_spec(cfg).seed == 5
    canon = cfgmod.canonical(cfg)
    assert cfgmod.canonical(canon) == canon
    assert cfgmod.config_hash(canon) == cfgmod.config_hash(cfgmod.canonical(cfgmod.load(p, {"train": {"hidden1": 8}})))


def test_config_errors(tmp_path):
    with pytest.raises(ValidationError, match="not found"):
        cfgmod.load(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[trian]\nx = 1\n")
    with pytest.raises(ValidationError, match="unknown config sections"):
        cfgmod.load(bad)
    bad.write_text("[train]\nepochs = 1\n")
    with pytest.raises(ValidationError, match="unknown keys"):
        cfgmod.train_config(cfgmod.load(bad))
