"""Command-line entry point: ``emltrack <subcommand> [options]``.

Settings come from (highest first) flags, ``EMLTRACK_<KEY>`` environment
variables, a flat ``key = value`` file given by ``--config``, and defaults.
Exit codes: 0 success, 1 validation error, 2 usage error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from . import __version__
from .data_model import PipelineConfig, validate_dataset
from .eval import DEFAULT_SUBSETS, EvalReport, ablation, compare_algorithms, cross_validate, sweep_step_size
from .features import FEATURE_NAMES, write_registry
from .ingest import ParseError, load_dataset_dir, parse_beats_file
from .labeling import cronbach_alpha, eml_items, extract_factor, trial_labels, two_way_anova, with_eml_scores
from .learners import KINDS, feature_importance, design_matrix
from .pipeline import PipelineModel, build_dataset, config_to_dict, stream_predict, train_two_stage
from .synth import SynthConfig, generate

log = logging.getLogger("emltrack")

ENV_PREFIX = "EMLTRACK_"


class UsageError(Exception):
    pass


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).split(",") if v.strip())


# key -> (PipelineConfig field or None for plain settings, parser, help)
SETTINGS: dict[str, tuple[str | None, Callable, str]] = {
    "window": ("window_size_s", float, "window size in seconds (default 30)"),
    "step": ("step_size_s", float, "step size in seconds (default 15)"),
    "folds": ("k_folds", int, "number of cross-validation folds (default 5)"),
    "seed": ("rng_seed", int, "random seed (default 0)"),
    "split_mode": ("split_mode", str, "fold grouping: trial or user (default trial)"),
    "eml_split": ("eml_split", str, "EML mean split: global or per_user (default global)"),
    "baseline_trials": ("baseline_trials", _ints, "comma-separated baseline trial indices (default 101,102)"),
    "strict_artifacts": ("strict_artifacts", _bool, "drop GSR features that fail the artifact screen"),
    "stage1": ("stage1", str, "discomfort model kind (default max_margin)"),
    "stage2": ("stage2", str, "EML model kind (default gbt)"),
    "use_discomfort": ("use_discomfort", _bool, "feed stage-1 probability to stage 2 (default true)"),
    "inner_folds": ("inner_folds", int, "folds for out-of-fold stage-1 probabilities (default 5)"),
    "jobs": ("jobs", int, "worker processes (default 1)"),
    "data": (None, str, "dataset directory (sensors.csv, questionnaire.csv)"),
    "out": (None, str, "output directory or file"),
    "model": (None, str, "model file (JSON)"),
    "report": (None, str, "JSON report path"),
    "users": (None, int, "synthetic users (default 9)"),
    "trials": (None, int, "synthetic excerpt trials per user (default 29)"),
    "duration": (None, float, "synthetic excerpt duration in seconds (default 90)"),
    "volatility": (None, float, "planted EML motion volatility (default 1.0)"),
    "hf_shift": (None, float, "planted EML HRV high-frequency shift (default 0.3)"),
    "discomfort_variance": (None, float, "planted discomfort GYR variance (default 1.0)"),
    "discomfort_rate": (None, float, "share of high-discomfort trials (default 0.1)"),
    "ecg": (None, _bool, "write raw ECG instead of rr.csv beats"),
    "steps": (None, str, "comma-separated step sizes in seconds"),
    "algorithms": (None, str, "comma-separated stage-2 model kinds"),
    "compare": (None, str, "stage-2 kind to bootstrap-compare against"),
    "bootstrap": (None, int, "bootstrap resamples (default 10000)"),
    "beats": (None, str, "beat times file (rr.csv) for streaming HRV"),
    "input": (None, str, "read sensor rows from this file instead of stdin"),
    "registry": (None, str, "also write the feature registry CSV here"),
}

PIPELINE_KEYS = ["window", "step", "folds", "seed", "split_mode", "eml_split", "baseline_trials",
                 "strict_artifacts", "stage1", "stage2", "use_discomfort", "inner_folds", "jobs"]

COMMANDS: dict[str, tuple[str, list[str]]] = {
    "synth": ("generate a synthetic dataset", ["out", "seed", "users", "trials", "duration", "volatility",
                                               "hf_shift", "discomfort_variance", "discomfort_rate", "ecg"]),
    "ingest": ("parse and validate a dataset", ["data", "registry"]),
    "label": ("score questionnaires and label trials", ["data", "out", "eml_split"]),
    "featurize": ("write baseline-normalized window features", ["data", "out"] + PIPELINE_KEYS),
    "train": ("train the two-stage model", ["data", "model"] + PIPELINE_KEYS),
    "eval": ("cross-validate the two-stage model", ["data", "report", "compare", "bootstrap"] + PIPELINE_KEYS),
    "ablate": ("cross-validated F1 per sensor subset", ["data", "report", "algorithms"] + PIPELINE_KEYS),
    "stream": ("predict from sensor rows on stdin", ["model", "beats", "input", "window", "step"]),
    "sweep": ("cross-validate over step sizes", ["data", "report", "steps"] + PIPELINE_KEYS),
}

REQUIRED = {
    "synth": ["out"], "ingest": ["data"], "label": ["data"], "featurize": ["data", "out"],
    "train": ["data", "model"], "eval": ["data"], "ablate": ["data"], "stream": ["model"],
    "sweep": ["data", "steps"],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emltrack",
        description="Engagement-in-motor-learning classification from wearable sensor data.",
    )
    parser.add_argument("--version", action="version", version=f"emltrack {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, (help_text, keys) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text + ".")
        p.add_argument("--config", metavar="PATH", help="flat key = value settings file")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        for key in keys:
            _, _, h = SETTINGS[key]
            if key in REQUIRED[name]:
                h += " (required)"
            p.add_argument("--" + key.replace("_", "-"), dest=key, metavar=key.upper(),
                           default=None, help=h)
    return parser


def read_config_file(path) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        k = k.replace("-", "_")
        if k not in SETTINGS:
            raise ValueError(f"unknown config key: {k}")
        out[k] = v
    return out


def read_env(environ) -> dict[str, str]:
    out = {}
    for name, v in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        k = name[len(ENV_PREFIX):].lower()
        if k not in SETTINGS:
            raise ValueError(f"unknown config key: {k} (from {name})")
        out[k] = v
    return out


def resolve_settings(args: argparse.Namespace, environ=None) -> dict:
    """Merge defaults < config file < environment < flags, parsing each value."""
    environ = os.environ if environ is None else environ
    merged: dict[str, str] = {}
    if args.config:
        merged.update(read_config_file(args.config))
    merged.update(read_env(environ))
    for key in COMMANDS[args.command][1]:
        v = getattr(args, key, None)
        if v is not None:
            merged[key] = v
    out = {}
    for k, v in merged.items():
        parse = SETTINGS[k][1]
        try:
            out[k] = parse(v)
        except ValueError:
            raise ValueError(f"invalid value for {k}: {v!r}") from None
    return out


def pipeline_config(settings: dict) -> PipelineConfig:
    kw = {SETTINGS[k][0]: v for k, v in settings.items() if k in PIPELINE_KEYS}
    cfg = PipelineConfig(**kw)
    for k in ("stage1", "stage2"):
        if getattr(cfg, k) not in KINDS:
            raise ValueError(f"unknown model kind for {k}: {getattr(cfg, k)}")
    return cfg


def _require(command: str, settings: dict) -> None:
    missing = [k for k in REQUIRED[command] if k not in settings]
    if missing:
        raise UsageError(f"{command}: missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load(settings):
    sensors, qnr = load_dataset_dir(settings["data"])
    return sensors, qnr


# -- subcommands -------------------------------------------------------------------------

def cmd_synth(s: dict, out) -> int:
    cfg = SynthConfig(
        n_users=s.get("users", 9), n_trials_per_user=s.get("trials", 29),
        trial_duration_s=s.get("duration", 90.0), eml_motion_volatility=s.get("volatility", 1.0),
        hrv_hf_shift=s.get("hf_shift", 0.3), discomfort_gyr_variance=s.get("discomfort_variance", 1.0),
        discomfort_rate=s.get("discomfort_rate", 0.1), write_ecg=s.get("ecg", False), seed=s.get("seed", 0),
    )
    res = generate(cfg)
    path = res.write(s["out"])
    n_high = sum(g.latent_eml.value == "high" for g in res.ground_truth)
    print(f"wrote {len(res.questionnaire)} trials for {cfg.n_users} users to {path} "
          f"({n_high} high-EML, {sum(g.latent_discomfort.value == 'high' for g in res.ground_truth)} high-discomfort)",
          file=out)
    return 0


def cmd_ingest(s: dict, out) -> int:
    sensors, qnr = _load(s)
    report = validate_dataset(sensors, qnr)
    print(f"{len(sensors.keys())} trials, {len(sensors.users())} users, {len(sensors.streams)} streams, "
          f"{len(qnr)} questionnaire rows", file=out)
    print(report.format(), file=out)
    if "registry" in s:
        write_registry(s["registry"])
        print(f"feature registry ({len(FEATURE_NAMES)} features) written to {s['registry']}", file=out)
    return 0 if report.ok else 1


def cmd_label(s: dict, out) -> int:
    _, qnr = _load(s)
    qnr = [r for r in qnr if r.key.is_excerpt]
    items = eml_items(qnr)
    alpha = cronbach_alpha(items)
    fa = extract_factor(items)
    print(f"Cronbach's alpha = {alpha:.3f} over {len(qnr)} trials", file=out)
    print(fa.variance_table(), file=out)
    print("loadings (calm, inv_nervous, at_ease): " + ", ".join(f"{v:.3f}" for v in fa.loadings[:, 0]), file=out)
    scored = with_eml_scores(qnr)
    labels = trial_labels(qnr, per_user=s.get("eml_split", "global") == "per_user")
    y = np.array([r.eml_score for r in scored])
    tech = np.array([r.tech_diff for r in scored])
    emo = np.array([r.emo_expr for r in scored])
    try:
        tab = two_way_anova(y, np.where(tech > np.median(tech), "high", "low"),
                            np.where(emo > np.median(emo), "high", "low"), "tech_diff", "emo_expr")
        print("\nEML score by technical difficulty x emotional expressiveness (median splits)", file=out)
        print(tab.format(), file=out)
    except ValueError as exc:
        print(f"ANOVA skipped: {exc}", file=out)
    rows = [(r.key.user_id, r.key.trial_index, r.eml_score, labels[r.key][0].value, labels[r.key][1].value)
            for r in scored]
    if "out" in s:
        pd.DataFrame(rows, columns=["user_id", "trial_index", "eml_score", "eml_class", "discomfort_class"]) \
            .to_csv(s["out"], index=False, lineterminator="\n", float_format="%.10g")
        print(f"labels written to {s['out']}", file=out)
    return 0


def cmd_featurize(s: dict, out) -> int:
    cfg = pipeline_config(s)
    sensors, qnr = _load(s)
    ds = build_dataset(sensors, qnr, cfg)
    names = [n for n in FEATURE_NAMES if any(n in w.fv.features for w in ds.windows)]
    x = design_matrix([w.fv for w in ds.windows], names)
    meta = pd.DataFrame({
        "user_id": [w.key.user_id for w in ds.windows],
        "trial_index": [w.key.trial_index for w in ds.windows],
        "window_index": [w.fv.window.window_index for w in ds.windows],
        "start_s": [w.fv.window.start_s for w in ds.windows],
        "end_s": [w.fv.window.end_s for w in ds.windows],
        "eml_class": [w.eml_class.value for w in ds.windows],
        "discomfort_class": [w.discomfort_class.value for w in ds.windows],
        "fold": [w.fold for w in ds.windows],
    })
    df = pd.concat([meta, pd.DataFrame(x, columns=names)], axis=1)
    Path(s["out"]).parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(s["out"], index=False, lineterminator="\n", float_format="%.17g")
    print(f"{len(ds.windows)} windows x {len(names)} features written to {s['out']}", file=out)
    return 0


def cmd_train(s: dict, out) -> int:
    cfg = pipeline_config(s)
    sensors, qnr = _load(s)
    ds = build_dataset(sensors, qnr, cfg)
    model = train_two_stage(ds.windows, cfg, baseline=ds.baseline)
    Path(s["model"]).parent.mkdir(parents=True, exist_ok=True)
    Path(s["model"]).write_bytes(model.to_bytes())
    print(f"trained on {len(ds.windows)} windows from {len(ds.keys())} trials; "
          f"stage 1 {cfg.stage1} ({len(model.discomfort_model.feature_names)} features), "
          f"stage 2 {cfg.stage2} ({len(model.eml_model.feature_names)} features)", file=out)
    if model.eml_model.spec.kind in ("gbt", "decision_tree"):
        print("top stage-2 features:", file=out)
        for name, score in feature_importance(model.eml_model)[:10]:
            print(f"  {name:<36}{score:8.4f}", file=out)
    print(f"model written to {s['model']}", file=out)
    return 0


def cmd_eval(s: dict, out) -> int:
    cfg = pipeline_config(s)
    sensors, qnr = _load(s)
    ds = build_dataset(sensors, qnr, cfg)
    report = cross_validate(ds, cfg)
    if "compare" in s:
        if s["compare"] not in KINDS:
            raise ValueError(f"unknown model kind for compare: {s['compare']}")
        report.significance.append(compare_algorithms(ds, cfg.stage2, s["compare"], cfg,
                                                      B=s.get("bootstrap", 10000)))
    print(report.format(), file=out)
    path = s.get("report") or str(Path(s["data"]) / "eval_report.json")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(report.to_json() + "\n", encoding="utf-8")
    print(f"report written to {path}", file=out)
    return 0


def cmd_ablate(s: dict, out) -> int:
    cfg = pipeline_config(s)
    algos = [a.strip() for a in s.get("algorithms", "gbt").split(",") if a.strip()]
    sensors, qnr = _load(s)
    ds = build_dataset(sensors, qnr, cfg)
    report = EvalReport(config=config_to_dict(cfg))
    report.ablation = ablation(ds, DEFAULT_SUBSETS, algos, cfg)
    print(report.format(), file=out)
    path = s.get("report") or str(Path(s["data"]) / "ablation_report.json")
    Path(path).write_text(report.to_json() + "\n", encoding="utf-8")
    print(f"report written to {path}", file=out)
    return 0


def cmd_sweep(s: dict, out) -> int:
    cfg = pipeline_config(s)
    steps = [float(v) for v in s["steps"].split(",") if v.strip()]
    for st in steps:
        if not 0 < st <= cfg.window_size_s:
            raise ValueError(f"invalid step {st}: must be in (0, {cfg.window_size_s}]")
    sensors, qnr = _load(s)
    report = EvalReport(config=config_to_dict(cfg))
    report.sweep = sweep_step_size(sensors, qnr, steps, cfg)
    print(report.format(), file=out)
    path = s.get("report") or str(Path(s["data"]) / "sweep_report.json")
    Path(path).write_text(report.to_json() + "\n", encoding="utf-8")
    print(f"report written to {path}", file=out)
    return 0


def cmd_stream(s: dict, out, stdin=None) -> int:
    model = PipelineModel.from_bytes(Path(s["model"]).read_bytes())
    cfg = model.config
    if "window" in s or "step" in s:
        cfg = dataclasses.replace(cfg, window_size_s=s.get("window", cfg.window_size_s),
                                  step_size_s=s.get("step", cfg.step_size_s))
    beats = None
    if "beats" in s:
        table = parse_beats_file(s["beats"])
        if len(table) == 1:
            beats = next(iter(table.values()))
        elif table:
            raise ValueError("beats file holds several trials; stream one trial at a time")
    source = open(s["input"], encoding="utf-8") if "input" in s else (stdin or sys.stdin)
    try:
        for ev in stream_predict(model, source, cfg, beats):
            print(ev.to_json(), file=out, flush=True)
    finally:
        if "input" in s:
            source.close()
    return 0


HANDLERS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "label": cmd_label, "featurize": cmd_featurize,
    "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "stream": cmd_stream, "sweep": cmd_sweep,
}


def run(argv: Sequence[str] | None = None, out=None, err=None, environ=None, stdin=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(err)
        print("emltrack: error: a command is required", file=err)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=err)
    try:
        settings = resolve_settings(args, environ)
        if args.command in ("featurize", "train", "eval", "ablate", "sweep"):
            pipeline_config(settings)            # validate before touching data
        _require(args.command, settings)
        if args.command == "stream":
            return cmd_stream(settings, out, stdin)
        return HANDLERS[args.command](settings, out)
    except UsageError as exc:
        print(f"emltrack: error: {exc}", file=err)
        return 2
    except (ValueError, ParseError, KeyError, FileNotFoundError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"emltrack: error: {msg}", file=err)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
