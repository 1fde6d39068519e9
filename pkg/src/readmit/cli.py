"""``readmit`` command-line entry point.

Every subcommand resolves its configuration as defaults <- ``--config`` TOML
<- flags, runs, and writes a manifest next to its outputs (``<file>.manifest.json``
for single-file outputs, ``manifest.json`` inside output directories). The
manifest holds the fully resolved config, its hash, and sha256 digests of
inputs and outputs; ``readmit rerun <manifest>`` replays it.

Exit codes: 0 success, 2 configuration or input error, 3 runtime failure
(training, convergence or anything unexpected).
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, config as cfgmod
from .cohort import SCHEMA_VERSION, FeatureConfig, admission_table, read_jsonl, sequence_set, write_jsonl
from .errors import ReadmitError, ValidationError
from .evaluation import comparison_csv, run_repeated_evaluation
from .experiments import ABLATION_VARIANTS, ablation_csv, ablation_json, ablation_rows, run_ablation
from .explain import (
    dumps_force_plot,
    export_force_plot_data,
    permutation_importances,
    ranking_csv,
    shap_values,
)
from .lace import LogisticModel, model_to_json, predict_proba
from .lstm import load_checkpoint, predict, save_checkpoint
from .models import LaceModel, LaceTrainer, LstmTrainer
from .synthetic import generate_cohort

log = logging.getLogger("readmit")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
OUTPUT_ENV = "READMIT_OUTPUT_DIR"
MODEL_CHOICES = ("lace-lr", "lace-lr-extended", "lstm")


# ---------------------------------------------------------------------------
# helpers


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "."))


def _write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def _seeds(cfg: dict) -> dict:
    return {k: cfg[k]["seed"] for k in ("cohort", "train", "split", "explain")} | {"global": cfg["seed"]}


def write_manifest(path: Path, command: str, args: dict, cfg: dict, inputs, outputs) -> Path:
    doc = {
        "tool": "readmit",
        "version": __version__,
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "args": args,
        "config": cfg,
        "config_hash": cfgmod.config_hash(cfg),
        "seeds": _seeds(cfg),
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
    }
    return _write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_table(cfg: dict, cohort_path):
    weights = cfgmod.charlson_weights(cfg)
    if cohort_path is None:
        histories = generate_cohort(cfgmod.cohort_spec(cfg), weights)
    else:
        if not Path(cohort_path).is_file():
            raise ValidationError(f"cohort file not found: {cohort_path}")
        histories = read_jsonl(cohort_path)
    table = admission_table(histories, weights)
    if len(table) == 0:
        raise ValidationError("cohort contains no admissions")
    return table


def _inputs(args: dict) -> list:
    return [args[k] for k in ("cohort", "model") if args.get(k)]


# ---------------------------------------------------------------------------
# model artifacts


@dataclasses.dataclass
class LoadedModel:
    """A trained artifact reduced to what the explainers need."""

    kind: str
    predict: object  # predict(X, mask) -> scores
    groups: dict  # feature name -> column indices
    design: object  # table -> (X, mask)

    def feature_values(self, X_row, mask_row) -> dict:
        x = X_row[mask_row][-1] if X_row.ndim == 2 else X_row
        return {name: [float(x[c]) for c in cols] if len(cols) > 1 else float(x[cols[0]]) for name, cols in self.groups.items()}


def load_model(path) -> LoadedModel:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"model file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    kind = doc.get("model_type")
    if kind == "lstm":
        network, registry, doc = load_checkpoint(path)
        max_len = int(doc["max_seq_len"])
        groups = {g: registry.group_columns(g) for g in registry.groups}

        def design(table):
            s = sequence_set(table, registry, max_len)
            return s.X, s.mask

        return LoadedModel("lstm", lambda X, mask: predict(network, X, mask), groups, design)
    if kind == "lace-lr":
        model = LogisticModel.from_dict(doc)
        wrapped = LaceModel(model, tuple(doc["columns"]), doc["fill"])
        groups = {c: [j] for j, c in enumerate(wrapped.columns)}
        return LoadedModel("lace-lr", lambda X, mask: predict_proba(model, X), groups, lambda t: (wrapped.design(t), None))
    raise ValidationError(f"{path}: unrecognised model_type {kind!r}")


# ---------------------------------------------------------------------------
# subcommands; each returns the list of files written (manifest last)


def cmd_generate(args: dict, cfg: dict) -> list[Path]:
    spec = cfgmod.cohort_spec(cfg)
    out = Path(args["out"] or output_dir() / "cohort.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(generate_cohort(spec, cfgmod.charlson_weights(cfg)), out)
    log.info("wrote %d patients to %s", spec.n_patients, out)
    return [out, write_manifest(Path(f"{out}.manifest.json"), "generate", args, cfg, [], [out])]


def _lace_trainer(cfg: dict, extended: bool | None = None) -> LaceTrainer:
    b = cfg["baseline"]
    ext = bool(b.get("extended", False)) if extended is None else extended
    return LaceTrainer(extended=ext, feature_config=cfgmod.feature_config(cfg), ridge=float(b.get("ridge", 1e-6)),
                       name="lace-lr-extended" if ext else "lace-lr")


def _lstm_trainer(cfg: dict) -> LstmTrainer:
    return LstmTrainer(cfgmod.feature_config(cfg), cfgmod.train_config(cfg))


def cmd_train_baseline(args: dict, cfg: dict) -> list[Path]:
    table = _load_table(cfg, args["cohort"])
    trainer = _lace_trainer(cfg)
    fitted = trainer.fit(table)
    out = Path(args["out"] or output_dir() / "lace_lr.json")
    extra = {"columns": list(fitted.columns), "fill": fitted.fill, "feature_config": cfg["features"], "extended": trainer.extended}
    columns_hash = hashlib.sha256(json.dumps(list(fitted.columns)).encode()).hexdigest()
    _write_text(out, model_to_json(fitted.model, registry_hash=columns_hash, extra=extra))
    return [out, write_manifest(Path(f"{out}.manifest.json"), "train-baseline", args, cfg, _inputs(args), [out])]


def cmd_train_lstm(args: dict, cfg: dict) -> list[Path]:
    table = _load_table(cfg, args["cohort"])
    trainer = _lstm_trainer(cfg)
    fitted = trainer.fit(table)
    out = Path(args["out"] or output_dir() / "lstm.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    extra = {
        "max_seq_len": fitted.max_seq_len,
        "feature_config": cfg["features"],
        "train_config": cfg["train"],
    }
    save_checkpoint(out, fitted.network, fitted.registry, extra)
    log_path = out.with_name(out.stem + ".log.json")
    _write_text(log_path, json.dumps(fitted.log.to_dict(), indent=2, sort_keys=True) + "\n")
    return [out, log_path, write_manifest(Path(f"{out}.manifest.json"), "train-lstm", args, cfg, _inputs(args), [out, log_path])]


def cmd_train(args: dict, cfg: dict) -> list[Path]:
    if args["model_kind"] == "lstm":
        return cmd_train_lstm(args, cfg)
    return cmd_train_baseline(args, cfg)


def _figures(cfg: dict) -> bool:
    return bool(cfg["evaluate"].get("figures", True))


def cmd_evaluate(args: dict, cfg: dict) -> list[Path]:
    models = list(cfg["evaluate"].get("models") or MODEL_CHOICES[::2])
    unknown = sorted(set(models) - set(MODEL_CHOICES))
    if unknown:
        raise ValidationError(f"unknown models {unknown}; valid: {list(MODEL_CHOICES)}")
    table = _load_table(cfg, args["cohort"])
    plan = cfgmod.split_plan(cfg)
    n_jobs = int(cfg["evaluate"].get("n_jobs", 1))
    trainers = {"lace-lr": lambda: _lace_trainer(cfg, False), "lace-lr-extended": lambda: _lace_trainer(cfg, True), "lstm": lambda: _lstm_trainer(cfg)}
    out_dir = Path(args["out"] or output_dir() / "evaluation")
    reports = []
    written = []
    for name in models:
        log.info("evaluating %s over %d splits", name, plan.n_repeats)
        rep = run_repeated_evaluation(table, trainers[name](), plan, n_jobs=n_jobs)
        reports.append(rep)
        written.append(_write_text(out_dir / f"report_{name}.json", rep.to_json()))
        written.append(_write_text(out_dir / f"report_{name}.csv", rep.to_csv()))
    written.append(_write_text(out_dir / "comparison_auc.csv", comparison_csv(reports, "auc")))
    lines = ["model,metric,mean,ci_low,ci_high"]
    for rep in reports:
        for metric, agg in rep.aggregates.items():
            cells = ["" if agg[k] is None else repr(agg[k]) for k in ("mean", "ci_low", "ci_high")]
            lines.append(",".join([rep.model, metric, *cells]))
    written.append(_write_text(out_dir / "summary.csv", "\n".join(lines) + "\n"))
    if _figures(cfg):
        from .plots import auc_comparison

        for metric in ("auc", "precision_top_decile"):
            path = out_dir / f"{metric}_comparison.png"
            auc_comparison(reports, path, metric)
            written.append(path)
    return written + [write_manifest(out_dir / "manifest.json", "evaluate", args, cfg, _inputs(args), written)]


def cmd_ablation(args: dict, cfg: dict) -> list[Path]:
    variants = list(cfg["ablation"].get("variants") or ABLATION_VARIANTS)
    unknown = sorted(set(variants) - set(ABLATION_VARIANTS))
    if unknown:
        raise ValidationError(f"unknown ablation variants {unknown}; valid: {list(ABLATION_VARIANTS)}")
    table = _load_table(cfg, args["cohort"])
    results = run_ablation(
        table,
        cfgmod.feature_config(cfg),
        cfgmod.train_config(cfg),
        cfgmod.split_plan(cfg),
        variants,
        n_jobs=int(cfg["evaluate"].get("n_jobs", 1)),
    )
    out_dir = Path(args["out"] or output_dir() / "ablation")
    written = [
        _write_text(out_dir / "ablation.csv", ablation_csv(results)),
        _write_text(out_dir / "ablation.json", ablation_json(results)),
    ]
    if _figures(cfg):
        from .plots import ablation_chart

        path = out_dir / "ablation.png"
        ablation_chart(ablation_rows(results), path)
        written.append(path)
    return written + [write_manifest(out_dir / "manifest.json", "ablation", args, cfg, _inputs(args), written)]


def _explain_setup(args: dict, cfg: dict):
    if not args.get("model"):
        raise ValidationError("--model is required")
    model = load_model(args["model"])
    table = _load_table(cfg, args["cohort"])
    X, mask = model.design(table)
    features = list(cfg["explain"].get("features") or [])
    unknown = sorted(set(features) - set(model.groups))
    if unknown:
        raise ValidationError(f"unknown features {unknown}; valid names: {sorted(model.groups)}")
    return model, table, X, mask, features


def cmd_explain_permutation(args: dict, cfg: dict) -> list[Path]:
    model, table, X, mask, features = _explain_setup(args, cfg)
    e = cfg["explain"]
    results = permutation_importances(
        model.predict, X, mask, table.labels, model.groups, features or None, int(e["n_repeats"]), int(e["seed"])
    )
    out = Path(args["out"] or output_dir() / "permutation_importance.csv")
    _write_text(out, ranking_csv(results))
    doc = {"schema_version": SCHEMA_VERSION, "kind": "permutation_importance", "model_type": model.kind,
           "results": [r.to_dict() for r in results]}
    out_json = out.with_suffix(".json") if out.suffix != ".json" else out.with_name(out.stem + ".results.json")
    _write_text(out_json, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return [out, out_json, write_manifest(Path(f"{out}.manifest.json"), "explain-permutation", args, cfg, _inputs(args), [out, out_json])]


def cmd_explain_shap(args: dict, cfg: dict) -> list[Path]:
    model, table, X, mask, features = _explain_setup(args, cfg)
    e = cfg["explain"]
    rng = np.random.default_rng(int(e["seed"]))
    n = len(table)
    instances = e.get("instances", 5)
    if isinstance(instances, int):
        rows = np.sort(rng.choice(n, size=min(instances, n), replace=False))
    else:
        index = {str(a): k for k, a in enumerate(table.admission_ids)}
        missing = [a for a in instances if str(a) not in index]
        if missing:
            raise ValidationError(f"unknown admission ids {missing}")
        rows = np.array([index[str(a)] for a in instances])
    bg_rows = np.sort(rng.choice(n, size=min(int(e["background_size"]), n), replace=False))
    players = features or list(model.groups)
    exact = bool(e.get("exact", False))
    explanations = []
    for k, r in enumerate(rows):
        inst = X[r]
        m = None if mask is None else mask[r]
        # features outside the player set stay at the instance's values
        bg = X[bg_rows].copy()
        fixed = [c for name, cols in model.groups.items() if name not in players for c in cols]
        if fixed:
            bg[..., fixed] = inst[..., fixed]
        ex = shap_values(
            model.predict, inst, bg, m, {p: model.groups[p] for p in players},
            n_samples=int(e["n_samples"]), seed=int(e["seed"]) + k, exact=exact, instance_id=str(table.admission_ids[r]),
        )
        values = model.feature_values(inst, m) if m is not None else model.feature_values(inst, None)
        ex.feature_values = {p: values[p] for p in players}
        explanations.append(ex)
    doc = export_force_plot_data(explanations)
    residuals = [x.residual for x in explanations]
    doc["metadata"] = {
        "model_type": model.kind,
        "mode": "exact" if exact else "monte_carlo",
        "n_samples": None if exact else int(e["n_samples"]),
        "background_size": len(bg_rows),
        "max_efficiency_residual": max(residuals),
        "feature_values_space": "standardized" if model.kind == "lstm" else "raw",
    }
    out = Path(args["out"] or output_dir() / "shap.json")
    _write_text(out, dumps_force_plot(doc))
    return [out, write_manifest(Path(f"{out}.manifest.json"), "explain-shap", args, cfg, _inputs(args), [out])]


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "train-baseline": cmd_train_baseline,
    "train-lstm": cmd_train_lstm,
    "evaluate": cmd_evaluate,
    "ablation": cmd_ablation,
    "explain-permutation": cmd_explain_permutation,
    "explain-shap": cmd_explain_shap,
}


def cmd_rerun(manifest_path, out=None) -> list[Path]:
    path = Path(manifest_path)
    if not path.is_file():
        raise ValidationError(f"manifest not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("tool") != "readmit" or doc.get("command") not in COMMANDS:
        raise ValidationError(f"{path}: not a readmit manifest")
    cfg = doc["config"]
    if cfgmod.config_hash(cfg) != doc["config_hash"]:
        raise ValidationError(f"{path}: config does not match its recorded hash")
    for p, digest in doc["inputs"].items():
        if not Path(p).is_file():
            raise ValidationError(f"input {p} recorded in the manifest is missing")
        if sha256_file(p) != digest:
            raise ValidationError(f"input {p} changed since the manifest was written")
    args = dict(doc["args"])
    if out is not None:
        args["out"] = str(out)
    return COMMANDS[doc["command"]](args, cfg)


# ---------------------------------------------------------------------------
# argument parsing

# flag -> (config section.key, type); only flags that were given override the config
_OVERRIDES = {
    "generate": [
        ("--seed", "seed", int),
        ("--n-patients", "cohort.n_patients", int),
        ("--temporal-gain", "cohort.temporal_gain", float),
    ],
    "features": [
        ("--age-mode", "features.age_mode", str),
        ("--exclude-features", "features.exclude", "list"),
        ("--max-seq-len", "features.max_seq_len", int),
    ],
    "train": [
        ("--max-epochs", "train.max_epochs", int),
        ("--batch-size", "train.batch_size", int),
        ("--patience", "train.patience", int),
        ("--hidden", "train.hidden1+train.hidden2", int),
        ("--lr", "train.lr", float),
        ("--dropout", "train.dropout", float),
    ],
    "baseline": [("--extended", "baseline.extended", "flag"), ("--ridge", "baseline.ridge", float)],
    "split": [("--n-repeats", "split.n_repeats", int), ("--train-fraction", "split.train_fraction", float)],
    "evaluate": [("--models", "evaluate.models", "list"), ("--n-jobs", "evaluate.n_jobs", int), ("--no-figures", "evaluate.figures", "noflag")],
    "ablation": [("--variants", "ablation.variants", "list")],
    "explain": [
        ("--features", "explain.features", "list"),
        ("--n-samples", "explain.n_samples", int),
        ("--exact", "explain.exact", "flag"),
        ("--background-size", "explain.background_size", int),
        ("--instances", "explain.instances", "instances"),
        ("--explain-repeats", "explain.n_repeats", int),
    ],
}


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _instances(text: str):
    return int(text) if text.isdigit() else _csv_list(text)


def _add_overrides(p: argparse.ArgumentParser, groups) -> None:
    for group in groups:
        for flag, key, kind in _OVERRIDES[group]:
            dest = f"cfg:{key}"
            if kind == "flag":
                p.add_argument(flag, dest=dest, action="store_true", default=argparse.SUPPRESS)
            elif kind == "noflag":
                p.add_argument(flag, dest=dest, action="store_false", default=argparse.SUPPRESS)
            elif kind == "list":
                p.add_argument(flag, dest=dest, type=_csv_list, default=argparse.SUPPRESS, metavar="A,B")
            elif kind == "instances":
                p.add_argument(flag, dest=dest, type=_instances, default=argparse.SUPPRESS, metavar="N|ID,ID")
            else:
                p.add_argument(flag, dest=dest, type=kind, default=argparse.SUPPRESS, metavar=flag.lstrip("-").upper().replace("-", "_"))
    if "generate" not in groups:
        p.add_argument("--seed", dest="cfg:seed", type=int, default=argparse.SUPPRESS, metavar="SEED")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="readmit", description="Readmission risk modelling: synthetic cohorts, LACE baseline, LSTM, evaluation and explanations.")
    parser.add_argument("--version", action="version", version=f"readmit {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, groups, cohort=True, model=False, help=None):
        p = sub.add_parser(name, help=help)
        flags = ("--config", "-c", "--spec") if name == "generate" else ("--config", "-c")
        p.add_argument(*flags, dest="config", help="TOML run configuration")
        p.add_argument("--out", "-o", help=f"output path (default under ${OUTPUT_ENV} or the working directory)")
        if cohort:
            p.add_argument("--cohort", "--input", dest="cohort", help="cohort JSONL (default: generate from the [cohort] section)")
        if model:
            p.add_argument("--model", required=True, help="trained model JSON (LACE-LR) or LSTM checkpoint")
        _add_overrides(p, groups)
        return p

    add("generate", ["generate"], cohort=False, help="write a synthetic cohort as JSONL")
    add("train-baseline", ["features", "baseline"], help="fit the LACE logistic-regression baseline")
    add("train-lstm", ["features", "train"], help="train the LSTM classifier")
    t = add("train", ["features", "train", "baseline"], help="train a model chosen with --model")
    t.add_argument("--model", dest="model_kind", choices=("lace-lr", "lstm"), required=True)
    add("evaluate", ["features", "train", "baseline", "split", "evaluate"], help="repeated-split evaluation")
    add("ablation", ["features", "train", "split", "evaluate", "ablation"], help="feature ablation matrix for the LSTM")
    add("explain-permutation", ["explain"], model=True, help="permutation feature importance")
    add("explain-shap", ["explain"], model=True, help="Shapley-value attributions")
    r = sub.add_parser("rerun", help="replay a run from its manifest")
    r.add_argument("manifest")
    r.add_argument("--out", "-o", help="write outputs here instead of the recorded location")
    return parser


def _overrides(ns: dict) -> dict:
    over: dict = {}
    for dest, value in ns.items():
        if not dest.startswith("cfg:"):
            continue
        for key in dest[4:].split("+"):
            section, _, name = key.partition(".")
            if name:
                over.setdefault(section, {})[name] = value
            else:
                over[section] = value
    return over


def main(argv=None) -> int:
    parser = build_parser()
    ns = vars(parser.parse_args(argv))
    logging.basicConfig(level=logging.WARNING - 10 * min(ns.pop("verbose"), 2), format="%(name)s: %(message)s")
    command = ns.pop("command")
    try:
        if command == "rerun":
            written = cmd_rerun(ns["manifest"], ns.get("out"))
        else:
            config_path = ns.pop("config", None)
            cfg = cfgmod.canonical(cfgmod.load(config_path, _overrides(ns)))
            args = {k: v for k, v in ns.items() if not k.startswith("cfg:")}
            args.setdefault("cohort", None)
            written = COMMANDS[command](args, cfg)
    except ValidationError as exc:
        return _fail(EXIT_CONFIG, exc)
    except (FileNotFoundError, IsADirectoryError, json.JSONDecodeError) as exc:
        return _fail(EXIT_CONFIG, exc)
    except ReadmitError as exc:
        return _fail(EXIT_RUNTIME, exc)
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure with its type
        log.debug("unexpected failure", exc_info=True)
        return _fail(EXIT_RUNTIME, exc)
    for path in written:
        print(path)
    return EXIT_OK


def _fail(code: int, exc: BaseException) -> int:
    msg = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(f"readmit: error: {json.dumps(msg)}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
