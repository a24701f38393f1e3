"""Two-stage model: discomfort classifier whose probability feeds the EML classifier.

Also builds labeled, baseline-normalized window datasets from raw recordings
and replays live sensor rows into windowed predictions.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .data_model import (
    DiscomfortClass,
    EmlClass,
    FeatureVector,
    HrvBands,
    LabeledWindow,
    PipelineConfig,
    QuestionnaireRecord,
    SensorTable,
    SensorType,
    Stream,
    TrialKey,
    Window,
)
from .features import (
    PREDICTED_DISCOMFORT,
    BaselineProfile,
    BeatSource,
    _prefix,
    build_baseline,
    extract_window_features,
    featurize_trial,
    normalize,
    screen_trial,
)
from .ingest import SENSOR_COLUMNS, parse_sensor_line
from .labeling import interpolate_labels, trial_labels
from .learners import ModelSpec, TrainedModel, design_matrix, feature_union, train
from .windowing import FoldAssignment, assign_folds, assign_user_folds

log = logging.getLogger(__name__)

PIPELINE_FORMAT_VERSION = 1


# -- config (de)serialisation ---------------------------------------------------------

def config_to_dict(config: PipelineConfig) -> dict:
    d = dataclasses.asdict(config)
    d["bands"] = {k: list(v) for k, v in d["bands"].items()}
    d["baseline_trials"] = list(config.baseline_trials)
    return d


def config_from_dict(d: Mapping) -> PipelineConfig:
    d = dict(d)
    if "bands" in d and not isinstance(d["bands"], HrvBands):
        d["bands"] = HrvBands(**{k: tuple(v) for k, v in d["bands"].items()})
    if "baseline_trials" in d:
        d["baseline_trials"] = tuple(int(t) for t in d["baseline_trials"])
    return PipelineConfig(**d)


# -- dataset construction -------------------------------------------------------------

@dataclass(frozen=True)
class Dataset:
    windows: list[LabeledWindow]
    baseline: BaselineProfile
    folds: FoldAssignment
    labels: Mapping[TrialKey, tuple[EmlClass, DiscomfortClass]]
    config: PipelineConfig
    artifacts: Mapping[TrialKey, list[str]] = field(default_factory=dict)

    def keys(self) -> list[TrialKey]:
        return sorted({w.key for w in self.windows})


def _featurize_normalized(args):
    sensors, key, config, baseline = args
    drop = set()
    if config.strict_artifacts:
        for name, res in screen_trial(sensors, key).items():
            if res.contaminated:
                drop.add(_prefix(SensorType(name)))
    out = []
    for fv in featurize_trial(sensors, key, config, BeatSource(sensors.subset([key]))):
        fv = normalize(fv, baseline, config.baseline_eps, strict=False)
        if drop:
            keep = {n: v for n, v in fv.features.items() if not any(n.startswith(p + "_") for p in drop)}
            fv = fv.with_features(keep, {n: fv.provenance[n] for n in keep})
        out.append(fv)
    return key, out, sorted(drop)


def build_dataset(sensors: SensorTable, qnr: Sequence[QuestionnaireRecord],
                  config: PipelineConfig = PipelineConfig()) -> Dataset:
    """Label trials, window and featurize them, normalize by baseline, assign folds."""
    present = set(sensors.keys())
    records = [r for r in qnr if r.key.is_excerpt and r.key in present]
    if not records:
        raise ValueError("no labeled excerpt trials with sensor data")
    labels = trial_labels(records, per_user=config.eml_split == "per_user")
    users = sorted({k.user_id for k in labels})
    baseline = build_baseline(sensors, config, users=users)
    keys = sorted(labels)
    jobs = [(sensors.subset([k]), k, config, baseline) for k in keys]
    if config.jobs > 1:
        with ProcessPoolExecutor(config.jobs) as pool:
            results = list(pool.map(_featurize_normalized, jobs))
    else:
        results = [_featurize_normalized(j) for j in jobs]
    vectors, artifacts = [], {}
    for key, fvs, dropped in results:
        vectors.extend(fvs)
        if dropped:
            artifacts[key] = dropped
    if not vectors:
        raise ValueError("no trial is long enough for one window")
    windowed = sorted({fv.window.key for fv in vectors})
    if config.split_mode == "user":
        folds = assign_user_folds(windowed, config.rng_seed)
    else:
        folds = assign_folds(windowed, config.k_folds, config.rng_seed)
    windows = interpolate_labels(labels, vectors, folds.folds)
    return Dataset(windows, baseline, folds, labels, config, artifacts)


def shuffle_labels(dataset: Dataset, seed: int) -> Dataset:
    """Permute EML labels across trials (the permutation null); windows keep their trial's label."""
    keys = dataset.keys()
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(keys))
    eml = {k: dataset.labels[keys[j]][0] for k, j in zip(keys, perm)}
    labels = {k: (eml[k], dataset.labels[k][1]) for k in keys}
    windows = [dataclasses.replace(w, eml_class=eml[w.key]) for w in dataset.windows]
    return dataclasses.replace(dataset, windows=windows, labels=labels)


def restrict_groups(windows: Sequence[LabeledWindow], groups: Iterable[str]) -> list[LabeledWindow]:
    """Keep only features of the given sensor groups."""
    groups = set(groups)
    out = []
    for w in windows:
        fv = w.fv
        keep = {n: v for n, v in fv.features.items() if fv.provenance[n] in groups}
        out.append(dataclasses.replace(w, fv=fv.with_features(keep, {n: fv.provenance[n] for n in keep})))
    return out


# -- two-stage model ---------------------------------------------------------------------

@dataclass(frozen=True)
class PipelineModel:
    discomfort_model: TrainedModel
    eml_model: TrainedModel
    config: PipelineConfig
    baseline: BaselineProfile | None = None

    @property
    def uses_discomfort(self) -> bool:
        return PREDICTED_DISCOMFORT in self.eml_model.feature_names

    def predict_matrix(self, vectors: Sequence[FeatureVector],
                       discomfort_override: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Stage-1 and stage-2 probabilities for normalized vectors."""
        bad = [i for i, fv in enumerate(vectors) if not fv.normalized]
        if bad:
            raise ValueError("feature vector is not baseline-normalized")
        x1 = design_matrix(vectors, self.discomfort_model.feature_names)
        p_disc = self.discomfort_model.predict_proba(x1)
        names2 = self.eml_model.feature_names
        x2 = design_matrix(vectors, names2)
        if self.uses_discomfort:
            j = names2.index(PREDICTED_DISCOMFORT)
            x2[:, j] = p_disc if discomfort_override is None else discomfort_override
        return p_disc, self.eml_model.predict_proba(x2)

    def to_dict(self) -> dict:
        return {
            "format_version": PIPELINE_FORMAT_VERSION,
            "discomfort_model": self.discomfort_model.to_dict(),
            "eml_model": self.eml_model.to_dict(),
            "config": config_to_dict(self.config),
            "baseline": self.baseline.to_dict() if self.baseline is not None else None,
        }

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_bytes(cls, data: bytes) -> "PipelineModel":
        d = json.loads(data)
        if d.get("format_version") != PIPELINE_FORMAT_VERSION:
            raise ValueError(f"unsupported pipeline format version {d.get('format_version')}")
        base = BaselineProfile.from_dict(d["baseline"]) if d["baseline"] is not None else None
        return cls(TrainedModel.from_dict(d["discomfort_model"]), TrainedModel.from_dict(d["eml_model"]),
                   config_from_dict(d["config"]), base)


def _targets(windows: Sequence[LabeledWindow]) -> tuple[np.ndarray, np.ndarray]:
    y1 = np.array([w.discomfort_class == DiscomfortClass.high for w in windows], dtype=np.int64)
    y2 = np.array([w.eml_class == EmlClass.high for w in windows], dtype=np.int64)
    return y1, y2


def out_of_fold_discomfort(spec: ModelSpec, x: np.ndarray, y: np.ndarray, names: list[str],
                           keys: Sequence[TrialKey], n_folds: int, seed: int) -> np.ndarray:
    """Stage-1 probabilities for each row from a model that never saw its trial."""
    uniq = sorted(set(keys))
    inner = assign_folds(uniq, min(n_folds, len(uniq)), seed)
    fold = np.array([inner[k] for k in keys])
    out = np.empty(len(y))
    for f in range(inner.k):
        test = fold == f
        tr = ~test
        if len(np.unique(y[tr])) < 2 or tr.sum() < 10:
            out[test] = y[tr].mean() if tr.any() else 0.5
            continue
        out[test] = train(spec, x[tr], y[tr], seed, names).predict_proba(x[test])
    return out


def train_two_stage(windows: Sequence[LabeledWindow], config: PipelineConfig = PipelineConfig(),
                    seed: int | None = None, baseline: BaselineProfile | None = None) -> PipelineModel:
    seed = config.rng_seed if seed is None else seed
    windows = list(windows)
    y1, y2 = _targets(windows)
    if len(np.unique(y1)) < 2:
        raise ValueError("single-class target: discomfort")
    if len(np.unique(y2)) < 2:
        raise ValueError("single-class target: eml")
    vectors = [w.fv for w in windows]
    names = [n for n in feature_union(vectors) if n != PREDICTED_DISCOMFORT]
    if not names:
        raise ValueError("empty feature set")
    x1 = design_matrix(vectors, names)
    spec1, spec2 = ModelSpec(config.stage1), ModelSpec(config.stage2)
    stage1 = train(spec1, x1, y1, seed, names)
    if config.use_discomfort:
        keys = [w.key for w in windows]
        oof = out_of_fold_discomfort(spec1, x1, y1, names, keys, config.inner_folds, seed)
        stage2 = train(spec2, np.column_stack([x1, oof]), y2, seed, names + [PREDICTED_DISCOMFORT])
    else:
        stage2 = train(spec2, x1, y2, seed, names)
    return PipelineModel(stage1, stage2, config, baseline)


@dataclass(frozen=True)
class Prediction:
    eml: EmlClass
    p_eml: float
    discomfort: DiscomfortClass
    p_disc: float


def _prediction(p_disc: float, p_eml: float) -> Prediction:
    return Prediction(
        EmlClass.high if p_eml >= 0.5 else EmlClass.low, float(p_eml),
        DiscomfortClass.high if p_disc >= 0.5 else DiscomfortClass.normal, float(p_disc),
    )


def predict_window(model: PipelineModel, fv: FeatureVector,
                   discomfort_override: float | None = None) -> Prediction:
    """Stage 1 first, its probability injected into stage 2."""
    p_disc, p_eml = model.predict_matrix([fv], discomfort_override)
    return _prediction(p_disc[0], p_eml[0])


def predict_windows(model: PipelineModel, vectors: Sequence[FeatureVector]) -> list[Prediction]:
    if not vectors:
        return []
    p_disc, p_eml = model.predict_matrix(list(vectors))
    return [_prediction(a, b) for a, b in zip(p_disc, p_eml)]


def batch_predict_trial(model: PipelineModel, sensors: SensorTable, key: TrialKey,
                        config: PipelineConfig | None = None) -> list[tuple[Window, Prediction]]:
    """Window, featurize, normalize and predict a whole recorded trial."""
    config = config or model.config
    if model.baseline is None:
        raise ValueError("model has no baseline profile")
    fvs = featurize_trial(sensors, key, config, BeatSource(sensors.subset([key])))
    out = []
    for fv in fvs:
        nfv = normalize(fv, model.baseline, config.baseline_eps, strict=False)
        out.append((fv.window, predict_window(model, nfv)))
    return out


# -- streaming ------------------------------------------------------------------------------

@dataclass(frozen=True)
class Emission:
    t_s: float
    prediction: Prediction

    def to_json(self) -> str:
        return json.dumps({"t_s": self.t_s, "eml": self.prediction.eml.value, "p_eml": self.prediction.p_eml})


@dataclass(frozen=True)
class GapEvent:
    t_s: float
    gap_s: float

    def to_json(self) -> str:
        return json.dumps({"event": "gap", "t_s": self.t_s, "gap_s": self.gap_s})


class StreamSession:
    """Incremental windowing of one trial's interleaved sensor samples.

    Emissions fall at window, window + step, ... (ms from trial start). An
    emission at t_e fires once a sample with t >= t_e arrives (or at end of
    stream, if t_e is within the trial) and uses only samples with t < t_e.
    Non-ECG buffers keep one window of samples; ECG is kept whole so beat
    detection sees the same prefix as offline processing.
    """

    def __init__(self, model: PipelineModel, config: PipelineConfig | None = None,
                 beats: np.ndarray | None = None):
        if model.baseline is None:
            raise ValueError("model has no baseline profile")
        self.model = model
        self.config = config or model.config
        self.w_ms = int(round(self.config.window_size_s * 1000))
        self.s_ms = int(round(self.config.step_size_s * 1000))
        self.beats = None if beats is None else np.asarray(beats, dtype=np.int64)
        self.key: TrialKey | None = None
        self.buffers: dict[SensorType, list] = {}
        self.dts: dict[SensorType, Counter] = {}
        self.last_t: dict[SensorType, int] = {}
        self.last_seen: int | None = None
        self.anchor = 0
        self.next_emit = self.w_ms
        self.closed = False

    def push(self, key: TrialKey, st: SensorType, t: int, value) -> list:
        if self.closed:
            raise ValueError("session is closed")
        if self.key is None:
            self.key = key
        elif key != self.key:
            raise ValueError(f"stream contains more than one trial ({self.key} and {key})")
        if self.last_seen is not None and t < self.last_seen:
            raise ValueError(f"non-monotone timestamp {t} after {self.last_seen}")
        events: list = []
        if self.last_seen is not None and t - self.last_seen > self.w_ms:
            events.append(GapEvent(t / 1000.0, (t - self.last_seen) / 1000.0))
            for s in self.buffers:
                if s != SensorType.ECG:
                    self.buffers[s] = []
            self.anchor = t
            self.next_emit = t + self.w_ms
        while self.next_emit <= t:
            events.append(self._emit(self.next_emit))
            self.next_emit += self.s_ms
        if st in self.last_t and t > self.last_t[st]:
            self.dts.setdefault(st, Counter())[t - self.last_t[st]] += 1
        self.last_t[st] = t
        self.last_seen = t
        buf = self.buffers.setdefault(st, [])
        buf.append((t, value))
        if st != SensorType.ECG:
            lo = self.next_emit - self.w_ms
            if buf[0][0] < lo:
                self.buffers[st] = [r for r in buf if r[0] >= lo]
        return events

    def close(self) -> list:
        """Emit the windows that end within the trial after the last sample."""
        self.closed = True
        if self.key is None:
            return []
        ends = []
        for st, last in self.last_t.items():
            c = self.dts.get(st)
            dt = float(np.median(np.repeat(list(c), list(c.values())))) if c else 0.0
            ends.append(last + int(round(dt)))
        duration = max(ends)
        events = []
        while self.next_emit <= duration:
            events.append(self._emit(self.next_emit))
            self.next_emit += self.s_ms
        return events

    def _table(self, end_ms: int) -> SensorTable:
        streams = {}
        for st, buf in self.buffers.items():
            rows = [r for r in buf if r[0] < end_ms]
            if not rows:
                continue
            t = np.array([r[0] for r in rows], dtype=np.int64)
            v = np.array([r[1] for r in rows], dtype=np.float64)
            # same tie order as the file reader
            order = np.lexsort((v[:, 2], v[:, 1], v[:, 0], t) if st.is_vector else (v, t))
            streams[(self.key, st)] = Stream(self.key, st, t[order], v[order])
        beats = {self.key: self.beats[self.beats < end_ms]} if self.beats is not None else {}
        return SensorTable(streams, beats)

    def _emit(self, t_e: int) -> Emission:
        start = t_e - self.w_ms
        window = Window(self.key, start / 1000.0, t_e / 1000.0, (start - self.anchor) // self.s_ms)
        table = self._table(t_e)
        fv = extract_window_features(window, table, self.config, BeatSource(table))
        nfv = normalize(fv, self.model.baseline, self.config.baseline_eps, strict=False)
        return Emission(t_e / 1000.0, predict_window(self.model, nfv))


def _records(live) -> Iterator[tuple]:
    header = ",".join(SENSOR_COLUMNS)
    for i, item in enumerate(live, start=1):
        if isinstance(item, str):
            line = item.strip()
            if not line or line == header:
                continue
            yield parse_sensor_line(line, i)
        else:
            yield item


def stream_predict(model: PipelineModel, live: Iterable, config: PipelineConfig | None = None,
                   beats: np.ndarray | None = None) -> Iterator[Emission | GapEvent]:
    """Replay sensors.csv rows (or (key, sensor_type, t_ms, value) tuples) into emissions."""
    session = StreamSession(model, config, beats)
    for key, st, t, v in _records(live):
        yield from session.push(key, st, t, v)
    yield from session.close()
