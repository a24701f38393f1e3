"""Trial-grouped cross-validation, metrics, step-size sweeps, bootstrap
significance and sensor-subset ablation."""
from __future__ import annotations

import dataclasses
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data_model import (
    SENSOR_GROUPS,
    DiscomfortClass,
    EmlClass,
    LabeledWindow,
    PipelineConfig,
    QuestionnaireRecord,
    SensorTable,
)
from .learners import KINDS
from .pipeline import Dataset, build_dataset, restrict_groups, train_two_stage
from .windowing import check_no_leakage

log = logging.getLogger(__name__)

REPORT_SCHEMA = "emltrack.eval/1"

DEFAULT_SUBSETS: dict[str, tuple[str, ...]] = {
    "IMU": ("IMU",),
    "GYR": ("GYR",),
    "GSR": ("GSR",),
    "HRV": ("HRV",),
    "IMU+GYR": ("IMU", "GYR"),
    "GSR+HRV": ("GSR", "HRV"),
    "ALL": SENSOR_GROUPS,
}


# -- metrics ------------------------------------------------------------------------------

def confusion_matrix(truth, pred) -> np.ndarray:
    """Rows observed [high, low], columns predicted [high, low]; 1 means high."""
    t = np.asarray(truth).astype(bool)
    p = np.asarray(pred).astype(bool)
    if t.shape != p.shape:
        raise ValueError("truth and predictions differ in length")
    return np.array([[np.sum(t & p), np.sum(t & ~p)], [np.sum(~t & p), np.sum(~t & ~p)]], dtype=np.int64)


def _f1(tp, fp, fn) -> float:
    d = 2 * tp + fp + fn
    return 2 * tp / d if d > 0 else 0.0


def metrics(confusion) -> dict:
    """F1 for `high`, macro F1, accuracy and percent-correct per observed row."""
    c = np.asarray(confusion, dtype=np.int64)
    if c.shape != (2, 2):
        raise ValueError("confusion must be 2x2")
    if np.any(c < 0):
        raise ValueError("confusion counts must be nonnegative")
    total = int(c.sum())
    if total == 0:
        raise ValueError("empty confusion matrix")
    tp, fn, fp, tn = (int(v) for v in c.ravel())
    f1_high = _f1(tp, fp, fn)
    f1_low = _f1(tn, fn, fp)
    rows = c.sum(axis=1)
    cols = c.sum(axis=0)
    return {
        "f1": f1_high,
        "macro_f1": (f1_high + f1_low) / 2,
        "accuracy": (tp + tn) / total,
        "precision": tp / cols[0] if cols[0] else 0.0,
        "recall": tp / rows[0] if rows[0] else 0.0,
        "per_class_correct": {
            "high": tp / rows[0] if rows[0] else 0.0,
            "low": tn / rows[1] if rows[1] else 0.0,
            "overall": (tp + tn) / total,
        },
        "predicted_correct": {
            "high": tp / cols[0] if cols[0] else 0.0,
            "low": tn / cols[1] if cols[1] else 0.0,
        },
    }


def format_confusion(confusion) -> str:
    c = np.asarray(confusion)
    m = metrics(c)
    pc = m["per_class_correct"]
    return "\n".join([
        f"{'observed':<10}{'pred high':>10}{'pred low':>10}{'% correct':>11}",
        f"{'high':<10}{c[0, 0]:>10}{c[0, 1]:>10}{100 * pc['high']:>10.1f}%",
        f"{'low':<10}{c[1, 0]:>10}{c[1, 1]:>10}{100 * pc['low']:>10.1f}%",
        f"{'overall':<10}{'':>20}{100 * pc['overall']:>10.1f}%",
    ])


# -- bootstrap ----------------------------------------------------------------------------

def bootstrap_compare(preds_a, preds_b, truth, B: int = 10000, seed: int = 0, chunk: int = 500) -> float:
    """One-sided test that a beats b: fraction of resamples with F1(a) <= F1(b)."""
    a = np.asarray(preds_a).astype(bool)
    b = np.asarray(preds_b).astype(bool)
    t = np.asarray(truth).astype(bool)
    if not (len(a) == len(b) == len(t)):
        raise ValueError("prediction and truth vectors differ in length")
    if B < 1000:
        raise ValueError("B must be at least 1000")
    n = len(t)
    if n == 0:
        raise ValueError("empty inputs")
    rng = np.random.default_rng(seed)
    worse = 0
    done = 0
    while done < B:
        m = min(chunk, B - done)
        idx = rng.integers(0, n, size=(m, n))
        tt, aa, bb = t[idx], a[idx], b[idx]

        def f1(p):
            tp = np.sum(tt & p, axis=1)
            fp = np.sum(~tt & p, axis=1)
            fn = np.sum(tt & ~p, axis=1)
            d = 2 * tp + fp + fn
            return np.where(d > 0, 2 * tp / np.where(d > 0, d, 1), 0.0)

        worse += int(np.sum(f1(aa) <= f1(bb)))
        done += m
    return worse / B


# -- cross-validation -------------------------------------------------------------------

@dataclass(frozen=True)
class FoldResult:
    fold: int
    n_train: int
    n_test: int
    skipped: bool
    reason: str = ""
    confusion: tuple[tuple[int, int], tuple[int, int]] | None = None
    f1: float | None = None
    macro_f1: float | None = None
    accuracy: float | None = None
    stage1_accuracy: float | None = None


@dataclass
class EvalReport:
    folds: list[FoldResult] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    truth: np.ndarray | None = None
    pred: np.ndarray | None = None
    prob: np.ndarray | None = None
    sweep: list[dict] = field(default_factory=list)
    ablation: dict[str, dict[str, float]] = field(default_factory=dict)
    significance: list[dict] = field(default_factory=list)

    @property
    def evaluated(self) -> list[FoldResult]:
        return [f for f in self.folds if not f.skipped]

    @property
    def skipped(self) -> list[int]:
        return [f.fold for f in self.folds if f.skipped]

    def _agg(self, attr: str) -> tuple[float, float]:
        v = np.array([getattr(f, attr) for f in self.evaluated], dtype=np.float64)
        if len(v) == 0:
            return float("nan"), float("nan")
        return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0

    @property
    def mean_f1(self) -> float:
        return self._agg("f1")[0]

    @property
    def mean_accuracy(self) -> float:
        return self._agg("accuracy")[0]

    @property
    def mean_stage1_accuracy(self) -> float:
        return self._agg("stage1_accuracy")[0]

    def summary(self) -> dict:
        out = {}
        for attr in ("f1", "macro_f1", "accuracy", "stage1_accuracy"):
            m, s = self._agg(attr)
            out[attr] = {"mean": m, "sd": s}
        out["n_folds"] = len(self.folds)
        out["skipped_folds"] = self.skipped
        out["partial"] = bool(self.skipped)
        return out

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "config": self.config,
            "folds": [dataclasses.asdict(f) for f in self.folds],
            "summary": self.summary() if self.folds else {},
            "pooled_confusion": confusion_matrix(self.truth, self.pred).tolist() if self.truth is not None else None,
            "sweep": self.sweep,
            "ablation": self.ablation,
            "significance": self.significance,
        }

    def to_json(self) -> str:
        return json.dumps(_plain(self.to_dict()), indent=2, sort_keys=True, allow_nan=False)

    def format(self) -> str:
        lines = []
        if self.folds:
            lines.append(f"{'fold':>4}  {'n_test':>6}  {'F1':>6}  {'macroF1':>7}  {'ACC':>6}  {'stage1':>6}")
            for f in self.folds:
                if f.skipped:
                    lines.append(f"{f.fold:>4}  {f.n_test:>6}  skipped: {f.reason}")
                else:
                    lines.append(f"{f.fold:>4}  {f.n_test:>6}  {f.f1:6.3f}  {f.macro_f1:7.3f}  "
                                 f"{f.accuracy:6.3f}  {f.stage1_accuracy:6.3f}")
            s = self.summary()
            lines.append("mean  {:>6}  {:6.3f}  {:7.3f}  {:6.3f}  {:6.3f}".format(
                "", s["f1"]["mean"], s["macro_f1"]["mean"], s["accuracy"]["mean"], s["stage1_accuracy"]["mean"]))
            lines.append("sd    {:>6}  {:6.3f}  {:7.3f}  {:6.3f}  {:6.3f}".format(
                "", s["f1"]["sd"], s["macro_f1"]["sd"], s["accuracy"]["sd"], s["stage1_accuracy"]["sd"]))
            if self.skipped:
                lines.append(f"partial result: folds {self.skipped} skipped")
            if self.truth is not None:
                lines.append("")
                lines.append(format_confusion(confusion_matrix(self.truth, self.pred)))
        if self.sweep:
            lines.append("")
            lines.append(f"{'step_s':>7}  {'windows':>7}  {'F1':>6}  {'ACC':>6}")
            for r in self.sweep:
                lines.append(f"{r['step_s']:7.2f}  {r['n_windows']:>7}  {r['f1']:6.3f}  {r['accuracy']:6.3f}")
        if self.ablation:
            lines.append("")
            subsets = list(next(iter(self.ablation.values())))
            lines.append(f"{'algorithm':<20}" + "".join(f"{s:>9}" for s in subsets))
            for algo, row in self.ablation.items():
                lines.append(f"{algo:<20}" + "".join(f"{row[s]:9.3f}" for s in subsets))
        for s in self.significance:
            lines.append(f"bootstrap {s['a']} > {s['b']}: p = {s['p_value']:.4f}")
        return "\n".join(lines)


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not np.isfinite(x):
        return None
    return x


def _run_fold(args) -> tuple[FoldResult, np.ndarray | None, np.ndarray | None]:
    windows, fold, config = args
    train = [w for w in windows if w.fold != fold]
    test = [w for w in windows if w.fold == fold]
    check_no_leakage({w.key for w in train}, {w.key for w in test})
    eml = {w.eml_class for w in train}
    disc = {w.discomfort_class for w in train}
    reason = ""
    if not test:
        reason = "empty test fold"
    elif len(eml) < 2:
        reason = "training data lacks an EML class"
    elif len(disc) < 2:
        reason = "training data lacks a discomfort class"
    if reason:
        log.warning("fold %d skipped: %s", fold, reason)
        return FoldResult(fold, len(train), len(test), True, reason), None, None
    model = train_two_stage(train, config)
    p_disc, p_eml = model.predict_matrix([w.fv for w in test])
    truth = np.array([w.eml_class == EmlClass.high for w in test])
    pred = p_eml >= 0.5
    c = confusion_matrix(truth, pred)
    m = metrics(c)
    d_truth = np.array([w.discomfort_class == DiscomfortClass.high for w in test])
    s1 = float(np.mean((p_disc >= 0.5) == d_truth))
    res = FoldResult(fold, len(train), len(test), False, "", tuple(map(tuple, c.tolist())),
                     m["f1"], m["macro_f1"], m["accuracy"], s1)
    return res, pred, p_eml


def cross_validate(dataset: Dataset | Sequence[LabeledWindow], config: PipelineConfig | None = None) -> EvalReport:
    """Each fold is the test set once; stage 1 and stage 2 are retrained per fold."""
    if isinstance(dataset, Dataset):
        windows = dataset.windows
        config = config or dataset.config
    else:
        windows = list(dataset)
        config = config or PipelineConfig()
    folds = sorted({w.fold for w in windows})
    if len(folds) < 2:
        raise ValueError("need at least two folds")
    jobs = [(windows, f, config) for f in folds]
    if config.jobs > 1:
        with ProcessPoolExecutor(config.jobs) as pool:
            results = list(pool.map(_run_fold, jobs))
    else:
        results = [_run_fold(j) for j in jobs]
    from .pipeline import config_to_dict

    report = EvalReport(config=config_to_dict(config))
    truth = np.array([w.eml_class == EmlClass.high for w in windows])
    pred = np.zeros(len(windows), dtype=bool)
    prob = np.full(len(windows), np.nan)
    fold_of = np.array([w.fold for w in windows])
    covered = np.zeros(len(windows), dtype=bool)
    for res, p, pr in results:
        report.folds.append(res)
        if res.skipped:
            continue
        sel = fold_of == res.fold
        pred[sel], prob[sel] = p, pr
        covered |= sel
    report.truth, report.pred, report.prob = truth[covered], pred[covered], prob[covered]
    return report


def sweep_step_size(sensors: SensorTable, qnr: Sequence[QuestionnaireRecord], steps: Sequence[float],
                    config: PipelineConfig = PipelineConfig()) -> list[dict]:
    """Re-window, re-featurize, re-label and re-evaluate for every step size."""
    steps = list(steps)
    for s in steps:
        if not 0 < s <= config.window_size_s:
            raise ValueError(f"invalid step {s}: must be in (0, {config.window_size_s}]")
    rows = []
    for s in steps:
        cfg = dataclasses.replace(config, step_size_s=float(s))
        ds = build_dataset(sensors, qnr, cfg)
        rep = cross_validate(ds, cfg)
        rows.append({"step_s": float(s), "n_windows": len(ds.windows), "f1": rep.mean_f1,
                     "accuracy": rep.mean_accuracy, "skipped_folds": rep.skipped})
    return rows


def ablation(dataset: Dataset, subsets: Mapping[str, Sequence[str]] | None = None,
             algorithms: Sequence[str] = ("gbt",), config: PipelineConfig | None = None) -> dict[str, dict[str, float]]:
    """Cross-validated F1 per (stage-2 algorithm, sensor subset)."""
    subsets = DEFAULT_SUBSETS if subsets is None else subsets
    config = config or dataset.config
    if not subsets:
        raise ValueError("no sensor subsets given")
    for name, groups in subsets.items():
        bad = set(groups) - set(SENSOR_GROUPS)
        if not groups or bad:
            raise ValueError(f"invalid sensor subset {name}: {sorted(bad) or 'empty'}")
    for a in algorithms:
        if a not in KINDS:
            raise ValueError(f"unknown algorithm {a!r}")
    restricted = {}
    for name, groups in subsets.items():
        ws = restrict_groups(dataset.windows, groups)
        if not any(w.fv.features for w in ws):
            raise ValueError(f"sensor subset {name} yields zero features")
        restricted[name] = ws
    table: dict[str, dict[str, float]] = {}
    for algo in algorithms:
        cfg = dataclasses.replace(config, stage2=algo)
        table[algo] = {name: cross_validate(ws, cfg).mean_f1 for name, ws in restricted.items()}
    return table


def compare_algorithms(dataset: Dataset, a: str, b: str, config: PipelineConfig | None = None,
                       B: int = 10000, seed: int | None = None) -> dict:
    """Bootstrap p-value that stage-2 algorithm `a` beats `b` on pooled CV predictions."""
    config = config or dataset.config
    ra = cross_validate(dataset, dataclasses.replace(config, stage2=a))
    rb = cross_validate(dataset, dataclasses.replace(config, stage2=b))
    if len(ra.truth) != len(rb.truth):
        raise ValueError("the two runs evaluated different windows")
    p = bootstrap_compare(ra.pred, rb.pred, ra.truth, B, config.rng_seed if seed is None else seed)
    return {"a": a, "b": b, "f1_a": ra.mean_f1, "f1_b": rb.mean_f1, "p_value": p}
