"""Shared domain types and dataset-level validation.

Everything here is a frozen value object. Numpy arrays held by these types are
marked read-only on construction so instances can be shared freely.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

EXCERPT_TRIALS = range(1, 30)
# Reserved indices for the rest recordings: 101/102 eyes shut (pre/post),
# 103/104 eyes open (pre/post).
BASELINE_TRIALS = (101, 102, 103, 104)
EYES_SHUT_TRIALS = (101, 102)

RATING_FIELDS = (
    "tech_diff",
    "emo_expr",
    "feel_calm",
    "feel_at_ease",
    "feel_nervous",
    "feel_uncomfortable",
)

SENSOR_GROUPS = ("IMU", "GYR", "GSR", "HRV")


class SensorType(str, enum.Enum):
    IMU_wrist = "IMU_wrist"
    IMU_elbow = "IMU_elbow"
    GYR_wrist = "GYR_wrist"
    GYR_elbow = "GYR_elbow"
    GSR_shoulder = "GSR_shoulder"
    GSR_fingertips = "GSR_fingertips"
    GSR_axilla = "GSR_axilla"
    ECG = "ECG"
    RESP = "RESP"

    @property
    def is_vector(self) -> bool:
        return self.value.startswith(("IMU_", "GYR_"))

    @property
    def group(self) -> str | None:
        """Feature group fed by this sensor (ECG feeds HRV, RESP feeds nothing)."""
        prefix = self.value.split("_")[0]
        if prefix in ("IMU", "GYR", "GSR"):
            return prefix
        if self is SensorType.ECG:
            return "HRV"
        return None


class EmlClass(str, enum.Enum):
    high = "high"
    low = "low"


class DiscomfortClass(str, enum.Enum):
    normal = "normal"
    high = "high"


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, order=True)
class TrialKey:
    user_id: str
    trial_index: int

    def __post_init__(self):
        if not isinstance(self.trial_index, (int, np.integer)):
            raise TypeError(f"trial_index must be an integer, got {self.trial_index!r}")
        object.__setattr__(self, "trial_index", int(self.trial_index))
        object.__setattr__(self, "user_id", str(self.user_id))

    @property
    def is_baseline(self) -> bool:
        return self.trial_index in BASELINE_TRIALS

    @property
    def is_excerpt(self) -> bool:
        return self.trial_index in EXCERPT_TRIALS

    def __str__(self) -> str:
        return f"{self.user_id}/{self.trial_index}"


@dataclass(frozen=True)
class SensorRecord:
    """A single sample. Tables store these column-wise; see `Stream`."""

    t: int
    key: TrialKey
    sensor_type: SensorType
    value: float | tuple[float, float, float]


@dataclass(frozen=True, eq=False)
class Stream:
    """All samples of one sensor for one trial, column-wise.

    `t_ms` holds integer milliseconds since session start. `values` is shape
    (n,) for scalar sensors and (n, 3) for IMU/GYR.
    """

    key: TrialKey
    sensor_type: SensorType
    t_ms: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = _frozen(self.t_ms, np.int64)
        v = _frozen(self.values, np.float64)
        if t.ndim != 1:
            raise ValueError("t_ms must be one-dimensional")
        expected = (len(t), 3) if self.sensor_type.is_vector else (len(t),)
        if v.shape != expected:
            raise ValueError(
                f"{self.sensor_type.value} values must have shape {expected}, got {v.shape}"
            )
        object.__setattr__(self, "t_ms", t)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return len(self.t_ms)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Stream):
            return NotImplemented
        return (
            self.key == other.key
            and self.sensor_type == other.sensor_type
            and np.array_equal(self.t_ms, other.t_ms)
            and np.array_equal(self.values, other.values, equal_nan=True)
        )

    @property
    def is_monotone(self) -> bool:
        return bool(np.all(np.diff(self.t_ms) >= 0))

    def sorted(self) -> "Stream":
        if self.is_monotone:
            return self
        order = np.argsort(self.t_ms, kind="stable")
        return Stream(self.key, self.sensor_type, self.t_ms[order], self.values[order])

    def between(self, start_ms: int, end_ms: int) -> "Stream":
        """Samples with start_ms <= t < end_ms (stream must be sorted)."""
        lo, hi = np.searchsorted(self.t_ms, [start_ms, end_ms], side="left")
        return Stream(self.key, self.sensor_type, self.t_ms[lo:hi], self.values[lo:hi])

    def sample_interval_ms(self) -> float:
        if len(self.t_ms) < 2:
            return 0.0
        d = np.diff(self.t_ms)
        d = d[d > 0]
        return float(np.median(d)) if len(d) else 0.0

    def fs_hz(self) -> float:
        dt = self.sample_interval_ms()
        return 1000.0 / dt if dt > 0 else 0.0

    def records(self) -> Iterable[SensorRecord]:
        for t, v in zip(self.t_ms, self.values):
            value = tuple(float(c) for c in v) if self.sensor_type.is_vector else float(v)
            yield SensorRecord(int(t), self.key, self.sensor_type, value)


@dataclass(frozen=True, eq=False)
class SensorTable:
    """Streams keyed by (TrialKey, SensorType), plus optional R-peak times.

    `beats` maps a TrialKey to precomputed beat timestamps in ms (the
    companion rr file). When absent, beats are derived from the ECG stream.
    """

    streams: Mapping[tuple[TrialKey, SensorType], Stream]
    beats: Mapping[TrialKey, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        streams = dict(sorted(self.streams.items(), key=lambda kv: (kv[0][0], kv[0][1].value)))
        beats = {k: _frozen(v, np.int64) for k, v in sorted(self.beats.items())}
        object.__setattr__(self, "streams", streams)
        object.__setattr__(self, "beats", beats)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SensorTable):
            return NotImplemented
        if self.streams.keys() != other.streams.keys() or self.beats.keys() != other.beats.keys():
            return False
        return all(self.streams[k] == other.streams[k] for k in self.streams) and all(
            np.array_equal(self.beats[k], other.beats[k]) for k in self.beats
        )

    def keys(self) -> list[TrialKey]:
        ks = {k for k, _ in self.streams} | set(self.beats)
        return sorted(ks)

    def users(self) -> list[str]:
        return sorted({k.user_id for k in self.keys()})

    def get(self, key: TrialKey, sensor_type: SensorType) -> Stream | None:
        return self.streams.get((key, sensor_type))

    def for_key(self, key: TrialKey) -> dict[SensorType, Stream]:
        return {st: s for (k, st), s in self.streams.items() if k == key}

    def duration_ms(self, key: TrialKey) -> int:
        """Trial length: last sample plus one sampling interval, over all streams."""
        ends = []
        for s in self.for_key(key).values():
            if len(s):
                ends.append(int(s.t_ms.max()) + int(round(s.sample_interval_ms())))
        return max(ends) if ends else 0

    def subset(self, keys: Iterable[TrialKey]) -> "SensorTable":
        keep = set(keys)
        return SensorTable(
            {k: v for k, v in self.streams.items() if k[0] in keep},
            {k: v for k, v in self.beats.items() if k in keep},
        )


@dataclass(frozen=True)
class QuestionnaireRecord:
    key: TrialKey
    tech_diff: int
    emo_expr: int
    feel_calm: int
    feel_at_ease: int
    feel_nervous: int
    feel_uncomfortable: int
    eml_score: float | None = None

    def ratings(self) -> dict[str, int]:
        return {f: getattr(self, f) for f in RATING_FIELDS}

    def out_of_range(self) -> list[str]:
        return [f for f, v in self.ratings().items() if not 1 <= v <= 10]


@dataclass(frozen=True)
class Window:
    key: TrialKey
    start_s: float
    end_s: float
    window_index: int

    @property
    def start_ms(self) -> int:
        return int(round(self.start_s * 1000))

    @property
    def end_ms(self) -> int:
        return int(round(self.end_s * 1000))


@dataclass(frozen=True)
class FeatureVector:
    """Named features for one window.

    Absent features (their stream was missing or the statistic undefined) are
    simply not in `features`; `provenance` covers only present names.
    """

    window: Window
    features: Mapping[str, float]
    provenance: Mapping[str, str]
    normalized: bool = False

    def __post_init__(self):
        if set(self.features) != set(self.provenance):
            raise ValueError("features and provenance must name the same features")
        bad = [g for g in self.provenance.values() if g not in SENSOR_GROUPS + ("STAGE",)]
        if bad:
            raise ValueError(f"unknown sensor group(s): {sorted(set(bad))}")
        if self.normalized:
            nonfinite = [k for k, v in self.features.items() if not np.isfinite(v)]
            if nonfinite:
                raise ValueError(f"non-finite normalized features: {nonfinite[:5]}")

    def names(self) -> list[str]:
        return list(self.features)

    def with_features(self, features: Mapping[str, float], provenance: Mapping[str, str],
                      normalized: bool | None = None) -> "FeatureVector":
        return FeatureVector(
            self.window, dict(features), dict(provenance),
            self.normalized if normalized is None else normalized,
        )


@dataclass(frozen=True)
class LabeledWindow:
    fv: FeatureVector
    eml_class: EmlClass
    discomfort_class: DiscomfortClass
    fold: int

    @property
    def key(self) -> TrialKey:
        return self.fv.window.key


@dataclass(frozen=True)
class HrvBands:
    vlf: tuple[float, float] = (0.0033, 0.04)
    lf: tuple[float, float] = (0.04, 0.15)
    hf: tuple[float, float] = (0.15, 0.4)

    def __post_init__(self):
        edges = [self.vlf, self.lf, self.hf]
        for lo, hi in edges:
            if not 0 <= lo < hi:
                raise ValueError(f"invalid band ({lo}, {hi})")
        if not (self.vlf[1] == self.lf[0] and self.lf[1] == self.hf[0]):
            raise ValueError("HRV bands must be contiguous")


@dataclass(frozen=True)
class PipelineConfig:
    window_size_s: float = 30.0
    step_size_s: float = 15.0
    k_folds: int = 5
    rng_seed: int = 0
    split_mode: str = "trial"           # "trial" or "user" (leave-one-user-out)
    bands: HrvBands = field(default_factory=HrvBands)
    sampen_m: int = 2
    sampen_r: float = 0.2
    sparc_cutoff_hz: float = 20.0
    sparc_amp_thresh: float = 0.05
    gsr_lowpass_hz: float = 1.0
    gsr_min_prominence: float = 0.01
    hrv_freq_min_span_s: float = 60.0
    baseline_trials: tuple[int, ...] = EYES_SHUT_TRIALS
    baseline_eps: float = 1e-8
    strict_artifacts: bool = False
    eml_split: str = "global"           # "global" or "per_user"
    stage1: str = "max_margin"
    stage2: str = "gbt"
    use_discomfort: bool = True
    inner_folds: int = 5
    jobs: int = 1

    def __post_init__(self):
        if self.window_size_s <= 0:
            raise ValueError("window size must be positive")
        if self.step_size_s <= 0:
            raise ValueError("step must be positive")
        if self.step_size_s > self.window_size_s:
            raise ValueError("step exceeds window")
        if self.k_folds < 2:
            raise ValueError("k_folds must be at least 2")
        if self.split_mode not in ("trial", "user"):
            raise ValueError(f"unknown split mode {self.split_mode!r}")
        if self.eml_split not in ("global", "per_user"):
            raise ValueError(f"unknown eml split {self.eml_split!r}")
        if not set(self.baseline_trials) <= set(BASELINE_TRIALS):
            raise ValueError(f"baseline trials must be drawn from {BASELINE_TRIALS}")


# -- validation ---------------------------------------------------------------

@dataclass(frozen=True)
class Issue:
    kind: str
    key: TrialKey | None
    message: str


@dataclass(frozen=True)
class ValidationReport:
    issues: tuple[Issue, ...]
    ok: bool

    def messages(self) -> list[str]:
        return [i.message for i in self.issues]

    def format(self) -> str:
        if not self.issues:
            return "dataset ok: no issues"
        head = "dataset usable" if self.ok else "dataset NOT usable"
        return "\n".join([f"{head}: {len(self.issues)} issue(s)"] + [f"  - {m}" for m in self.messages()])


def validate_dataset(sensors: SensorTable, qnr: Iterable[QuestionnaireRecord]) -> ValidationReport:
    """Report-only consistency check of a parsed dataset."""
    qnr = list(qnr)
    issues: list[Issue] = []
    fatal = False

    labeled = {}
    for rec in qnr:
        if rec.key in labeled:
            issues.append(Issue("duplicate", rec.key, f"duplicate questionnaire row for trial {rec.key.trial_index} of user {rec.key.user_id}"))
        labeled[rec.key] = rec
        for f in rec.out_of_range():
            issues.append(Issue("range", rec.key, f"rating out of range: {f}={getattr(rec, f)} for {rec.key}"))

    for (key, st), s in sensors.streams.items():
        if not s.is_monotone:
            issues.append(Issue("timestamps", key, f"non-monotone timestamps in {st.value} for {key}"))

    sensor_keys = set(sensors.keys())
    for key in sorted(sensor_keys):
        if key.is_excerpt and key not in labeled:
            issues.append(Issue("unlabeled", key, f"unlabeled trial {key.trial_index} (user {key.user_id})"))
            fatal = True
    for key in sorted(labeled):
        streams = sensors.for_key(key)
        if not streams:
            issues.append(Issue("missing_sensors", key, f"trial {key} has no sensor data"))
            fatal = True
        elif not any(st.group == "IMU" and len(s) for st, s in streams.items()):
            issues.append(Issue("missing_imu", key, f"trial {key} has no IMU stream"))
            fatal = True

    fatal = fatal or any(i.kind in ("range", "duplicate", "timestamps") for i in issues)
    return ValidationReport(tuple(issues), ok=not fatal)
