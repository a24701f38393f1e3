"""Per-window feature suite, baseline normalization and GSR artifact screening.

Feature names follow ``<sensor>_<signal>_<stat>`` for motion sensors, e.g.
``gyr_elbow_jerk_mag_variance``; GSR features are ``gsr_<site>_<stat>`` and
HRV features ``hrv_<measure>``. The full, ordered list is `FEATURES`.
"""
from __future__ import annotations

import csv
import functools
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import signal, stats
from scipy.integrate import trapezoid

from .data_model import (
    FeatureVector,
    HrvBands,
    PipelineConfig,
    SensorTable,
    SensorType,
    Stream,
    TrialKey,
    Window,
)
from .ingest import RRSeries, detect_r_peaks_report
from .windowing import partition

log = logging.getLogger(__name__)

STATS = ("iqr", "kurtosis", "mean", "median", "rmssd", "skewness", "variance")
MOTION_SIGNALS = ("x", "y", "z", "mag", "jerk_x", "jerk_y", "jerk_z", "jerk_mag")
MOTION_SENSORS = (
    SensorType.IMU_wrist,
    SensorType.IMU_elbow,
    SensorType.GYR_wrist,
    SensorType.GYR_elbow,
)
GSR_SENSORS = (SensorType.GSR_shoulder, SensorType.GSR_fingertips, SensorType.GSR_axilla)
GSR_MEASURES = ("num_peaks", "amplitude_mean", "variance", "iqr", "kurtosis", "mean", "median", "rmssd", "skewness")
HRV_TIME = ("mean_nni", "median_nni", "sdnn", "rmssd", "nni_20", "pnni_20", "nni_50", "pnni_50", "nni_range")
HRV_FREQ = ("vlf_power", "lf_power", "hf_power", "lf_hf_ratio")
HRV_NONLINEAR = ("sampen", "sd1", "sd2", "sd1_sd2_ratio")

PREDICTED_DISCOMFORT = "predicted_discomfort"


# -- registry -------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureSpec:
    name: str
    sensor_group: str
    units: str


def _prefix(st: SensorType) -> str:
    return st.value.lower()


def _motion_units(st: SensorType, sig: str, stat: str) -> str:
    base = "m/s^2" if st.group == "IMU" else "deg/s"
    if sig.startswith("jerk"):
        base = "m/s^3" if st.group == "IMU" else "deg/s^2"
    if stat in ("kurtosis", "skewness"):
        return "1"
    if stat == "variance":
        return f"({base})^2"
    return base


def _gsr_units(measure: str) -> str:
    return {"num_peaks": "count", "variance": "uS^2", "kurtosis": "1", "skewness": "1"}.get(measure, "uS")


def _hrv_units(measure: str) -> str:
    if measure in ("nni_20", "nni_50"):
        return "count"
    if measure in ("pnni_20", "pnni_50", "lf_hf_ratio", "sampen", "sd1_sd2_ratio"):
        return "1"
    if measure.endswith("_power"):
        return "ms^2"
    return "ms"


def _build_registry() -> tuple[FeatureSpec, ...]:
    out = []
    for st in MOTION_SENSORS:
        for sig in MOTION_SIGNALS:
            for stat in STATS:
                out.append(FeatureSpec(f"{_prefix(st)}_{sig}_{stat}", st.group, _motion_units(st, sig, stat)))
        if st.group == "IMU":
            out.append(FeatureSpec(f"{_prefix(st)}_sparc", "IMU", "1"))
    for st in GSR_SENSORS:
        for m in GSR_MEASURES:
            out.append(FeatureSpec(f"{_prefix(st)}_{m}", "GSR", _gsr_units(m)))
    for m in HRV_TIME + HRV_FREQ + HRV_NONLINEAR:
        out.append(FeatureSpec(f"hrv_{m}", "HRV", _hrv_units(m)))
    return tuple(out)


FEATURES: tuple[FeatureSpec, ...] = _build_registry()
FEATURE_NAMES: tuple[str, ...] = tuple(f.name for f in FEATURES)
FEATURE_GROUP: dict[str, str] = {f.name: f.sensor_group for f in FEATURES}
FEATURE_COUNT = len(FEATURES)


def write_registry(path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature_name", "sensor_group", "units"])
        for f in FEATURES:
            w.writerow([f.name, f.sensor_group, f.units])


def names_in_groups(groups) -> list[str]:
    groups = set(groups)
    return [f.name for f in FEATURES if f.sensor_group in groups]


# -- elementary transforms --------------------------------------------------------

def jerk(values, t) -> np.ndarray:
    """First difference over time: (v[i+1]-v[i]) / (t[i+1]-t[i]), t in seconds."""
    v = np.asarray(values, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if len(v) < 2:
        raise ValueError("jerk needs at least two samples")
    if len(t) != len(v):
        raise ValueError("values and timestamps differ in length")
    dt = np.diff(t)
    if np.any(dt == 0):
        raise ValueError("zero dt")
    if np.any(dt < 0):
        raise ValueError("timestamps must be strictly increasing")
    dv = np.diff(v, axis=0)
    return dv / dt.reshape((-1,) + (1,) * (dv.ndim - 1))


def magnitude(xyz) -> np.ndarray:
    a = np.asarray(xyz, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.shape[0] == 0:
        raise ValueError("magnitude of an empty series")
    return np.sqrt(np.sum(a * a, axis=1))


def _stat_rows(a: np.ndarray) -> dict[str, np.ndarray]:
    """The seven summary statistics for every row of a 2-D array."""
    mean = a.mean(axis=1)
    d = a - mean[:, None]
    m2 = np.mean(d * d, axis=1)
    m3 = np.mean(d ** 3, axis=1)
    m4 = np.mean(d ** 4, axis=1)
    flat = (np.ptp(a, axis=1) == 0) | (m2 == 0)
    safe = np.where(flat, 1.0, m2)
    q25, q75 = np.percentile(a, [25, 75], axis=1)
    diffs = np.diff(a, axis=1)
    return {
        "iqr": q75 - q25,
        "kurtosis": np.where(flat, 0.0, m4 / safe ** 2 - 3.0),
        "mean": mean,
        "median": np.median(a, axis=1),
        "rmssd": np.sqrt(np.mean(diffs * diffs, axis=1)),
        "skewness": np.where(flat, 0.0, m3 / safe ** 1.5),
        "variance": m2,
    }


def stat_features(values) -> dict[str, float]:
    """iqr, excess kurtosis, mean, median, rmssd, skewness and population variance.

    Skewness and kurtosis of a constant series are reported as 0.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if len(v) < 4:
        raise ValueError("stat_features needs at least 4 samples")
    return {k: float(x[0]) for k, x in _stat_rows(v[None, :]).items()}


def sparc(speed, fs_hz: float, cutoff_hz: float = 20.0, amp_thresh: float = 0.05,
          padlevel: int = 4) -> float:
    """Spectral arc length of a speed profile.

    The zero-padded magnitude spectrum is normalised by its DC value and cut
    to the band [0, cutoff_hz]; within that band the arc runs from the first
    to the last bin whose normalised magnitude reaches `amp_thresh`. The
    frequency axis of the arc is scaled to unit length.
    """
    x = np.asarray(speed, dtype=np.float64)
    if len(x) < 16:
        raise ValueError("SPARC needs at least 16 samples")
    if fs_hz <= 2 * cutoff_hz:
        raise ValueError("sampling rate must exceed twice the cutoff")
    nfft = 2 ** (int(math.ceil(math.log2(len(x)))) + padlevel)
    spectrum = np.abs(np.fft.rfft(x, nfft))
    dc = spectrum[0]
    if not np.any(x) or dc <= 1e-12 * spectrum.max():
        raise ValueError("degenerate profile")
    freqs = np.arange(len(spectrum)) * fs_hz / nfft
    band = freqs <= cutoff_hz
    f_sel, m_sel = freqs[band], spectrum[band] / dc
    above = np.flatnonzero(m_sel >= amp_thresh)
    f_sel = f_sel[above[0]:above[-1] + 1]
    m_sel = m_sel[above[0]:above[-1] + 1]
    if len(f_sel) < 2:
        return 0.0
    df = np.diff(f_sel) / (f_sel[-1] - f_sel[0])
    dm = np.diff(m_sel)
    return -float(np.sum(np.sqrt(df * df + dm * dm)))


# -- HRV ---------------------------------------------------------------------------

def _nn(rr) -> np.ndarray:
    if isinstance(rr, RRSeries):
        return rr.nn
    return np.asarray(rr, dtype=np.float64)


def hrv_time(rr) -> dict[str, float]:
    nn = _nn(rr)
    if len(nn) < 4:
        raise ValueError("hrv_time needs at least 4 intervals")
    d = np.abs(np.diff(nn))
    n20, n50 = int(np.sum(d > 20.0)), int(np.sum(d > 50.0))
    return {
        "mean_nni": float(np.mean(nn)),
        "median_nni": float(np.median(nn)),
        "sdnn": float(np.std(nn)),
        "rmssd": float(np.sqrt(np.mean(d * d))),
        "nni_20": float(n20),
        "pnni_20": n20 / len(d),
        "nni_50": float(n50),
        "pnni_50": n50 / len(d),
        "nni_range": float(np.max(nn) - np.min(nn)),
    }


def tachogram(rr: RRSeries, fs_hz: float = 4.0) -> tuple[np.ndarray, np.ndarray]:
    """RR values placed at their closing beat times, linearly resampled to `fs_hz`."""
    t = rr.t_beats[1:][rr.valid] / 1000.0
    v = rr.rr_ms[rr.valid]
    if len(t) < 2:
        raise ValueError("too few intervals for a tachogram")
    grid = t[0] + np.arange(int(np.floor((t[-1] - t[0]) * fs_hz)) + 1) / fs_hz
    return grid, np.interp(grid, t, v)


def rr_psd(rr: RRSeries, fs_hz: float = 4.0, segment_s: float = 64.0):
    """Welch PSD of the resampled tachogram (Hann, 50% overlap, mean removed)."""
    _, x = tachogram(rr, fs_hz)
    nperseg = min(len(x), int(segment_s * fs_hz))
    return signal.welch(x, fs=fs_hz, window="hann", nperseg=nperseg, noverlap=nperseg // 2,
                        detrend="constant", scaling="density")


def band_power(f: np.ndarray, pxx: np.ndarray, lo: float, hi: float) -> float:
    sel = (f >= lo) & (f < hi)
    if sel.sum() < 2:
        return 0.0
    return float(trapezoid(pxx[sel], f[sel]))


def hrv_freq(rr: RRSeries, bands: HrvBands = HrvBands(), min_span_s: float = 60.0) -> dict[str, float]:
    if not isinstance(rr, RRSeries):
        rr = RRSeries.from_intervals(rr)
    if rr.span_s() < min_span_s:
        raise ValueError(f"RR span {rr.span_s():.1f} s is shorter than {min_span_s:g} s")
    f, pxx = rr_psd(rr)
    vlf = band_power(f, pxx, *bands.vlf)
    lf = band_power(f, pxx, *bands.lf)
    hf = band_power(f, pxx, *bands.hf)
    return {
        "vlf_power": vlf,
        "lf_power": lf,
        "hf_power": hf,
        "lf_hf_ratio": lf / hf if hf > 0 else 0.0,
    }


def sample_entropy(x, m: int = 2, r: float = 0.2) -> float:
    """SampEn with absolute tolerance r and Chebyshev distance.

    Both lengths use the same N-m template start points; self-matches are
    excluded. Raises when no template pair matches at either length.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if n <= m + 1:
        raise ValueError("series too short for sample entropy")
    starts = n - m
    templ = np.lib.stride_tricks.sliding_window_view(x, m + 1)[:starts]
    diff = np.abs(templ[:, None, :] - templ[None, :, :])
    dist_m = diff[:, :, :m].max(axis=2)
    dist_m1 = np.maximum(dist_m, diff[:, :, m])
    upper = np.triu(np.ones((starts, starts), bool), k=1)
    b = int(np.sum((dist_m <= r) & upper))
    a = int(np.sum((dist_m1 <= r) & upper))
    if b == 0 or a == 0:
        raise ValueError("entropy undefined")
    return float(-np.log(a / b))


def hrv_nonlinear(rr, m: int = 2, r_factor: float = 0.2) -> dict[str, float]:
    """Sample entropy and Poincare descriptors.

    SD1 uses the mean square of successive differences, so SD1 = RMSSD/sqrt(2)
    exactly; SD2 = sqrt(2*var(rr) - SD1^2).
    """
    nn = _nn(rr)
    if len(nn) < 10:
        raise ValueError("hrv_nonlinear needs at least 10 intervals")
    d = np.diff(nn)
    sd1 = math.sqrt(float(np.mean(d * d)) / 2.0)
    sd2 = math.sqrt(max(0.0, 2.0 * float(np.var(nn)) - sd1 * sd1))
    return {
        "sampen": sample_entropy(nn, m, r_factor * float(np.std(nn))),
        "sd1": sd1,
        "sd2": sd2,
        "sd1_sd2_ratio": sd1 / sd2 if sd2 > 0 else 0.0,
    }


# -- GSR ----------------------------------------------------------------------------

def gsr_features(gsr, fs_hz: float, lowpass_hz: float = 1.0, min_prominence: float = 0.01) -> dict[str, float]:
    x = np.asarray(gsr, dtype=np.float64)
    if len(x) < fs_hz * 5:
        raise ValueError("GSR window shorter than 5 s")
    smooth = x
    if fs_hz > 2 * lowpass_hz:
        sos = signal.butter(2, lowpass_hz, btype="lowpass", fs=fs_hz, output="sos")
        smooth = signal.sosfiltfilt(sos, x)
    _, props = signal.find_peaks(smooth, prominence=min_prominence)
    prom = props["prominences"]
    return {
        "num_peaks": float(len(prom)),
        "amplitude_mean": float(prom.mean()) if len(prom) else 0.0,
        "variance": float(np.var(x)),
    }


@dataclass(frozen=True)
class ArtifactResult:
    pearson_r: float
    p_value: float
    contaminated: bool


def artifact_screen(gsr_t_ms, gsr, imu_t_ms, imu_mag, grid_hz: float = 4.0,
                    alpha: float = 0.05) -> ArtifactResult:
    """Pearson test between a GSR stream and IMU magnitude on a common grid."""
    gt, gv = np.asarray(gsr_t_ms, float) / 1000.0, np.asarray(gsr, float)
    it, iv = np.asarray(imu_t_ms, float) / 1000.0, np.asarray(imu_mag, float)
    lo, hi = max(gt[0], it[0]), min(gt[-1], it[-1])
    if hi <= lo:
        raise ValueError("streams do not overlap")
    grid = lo + np.arange(int(np.floor((hi - lo) * grid_hz)) + 1) / grid_hz
    if len(grid) < 30:
        raise ValueError("fewer than 30 common grid points")
    a, b = np.interp(grid, gt, gv), np.interp(grid, it, iv)
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise ValueError("undefined correlation")
    r, p = stats.pearsonr(a, b)
    return ArtifactResult(float(r), float(p), bool(p < alpha))


def screen_trial(sensors: SensorTable, key: TrialKey) -> dict[str, ArtifactResult]:
    imu = sensors.get(key, SensorType.IMU_wrist) or sensors.get(key, SensorType.IMU_elbow)
    out = {}
    if imu is None or len(imu) < 2:
        return out
    mag = magnitude(imu.values)
    for st in GSR_SENSORS:
        g = sensors.get(key, st)
        if g is None or len(g) < 2:
            continue
        try:
            out[st.value] = artifact_screen(g.t_ms, g.values, imu.t_ms, mag)
        except ValueError as exc:
            log.debug("artifact screen skipped for %s %s: %s", key, st.value, exc)
    return out


# -- window extraction ---------------------------------------------------------------

def _dedup(s: Stream) -> Stream:
    if len(s) < 2:
        return s
    keep = np.concatenate([[True], np.diff(s.t_ms) > 0])
    if keep.all():
        return s
    return Stream(s.key, s.sensor_type, s.t_ms[keep], s.values[keep])


def _motion_features(st: SensorType, s: Stream, config: PipelineConfig) -> dict[str, float]:
    xyz = s.values
    t = s.t_ms / 1000.0
    j = jerk(xyz, t)
    raw = np.vstack([xyz.T, magnitude(xyz)])
    jrk = np.vstack([j.T, magnitude(j)])
    out = {}
    pre = _prefix(st)
    for rows, sigs in ((raw, MOTION_SIGNALS[:4]), (jrk, MOTION_SIGNALS[4:])):
        table = _stat_rows(rows)
        for i, sig in enumerate(sigs):
            for stat in STATS:
                out[f"{pre}_{sig}_{stat}"] = float(table[stat][i])
    if st.group == "IMU":
        fs = s.fs_hz()
        # speed proxy: magnitude of the window-demeaned acceleration
        speed = magnitude(xyz - xyz.mean(axis=0))
        try:
            out[f"{pre}_sparc"] = sparc(speed, fs, config.sparc_cutoff_hz, config.sparc_amp_thresh)
        except ValueError:
            pass
    return out


def _gsr_window_features(st: SensorType, s: Stream, config: PipelineConfig) -> dict[str, float]:
    pre = _prefix(st)
    x = s.values
    out = {}
    base = gsr_features(x, s.fs_hz(), config.gsr_lowpass_hz, config.gsr_min_prominence)
    st_ = stat_features(x)
    for m in GSR_MEASURES:
        out[f"{pre}_{m}"] = base[m] if m in base else st_[m]
    return out


class BeatSource:
    """Beat times for a trial prefix, from the rr companion file or the ECG.

    Results are memoised per (key, end_ms); ECG detection runs on every
    sample of the trial before `end_ms` so a streaming consumer holding the
    same prefix gets identical beats.
    """

    def __init__(self, sensors: SensorTable):
        self.sensors = sensors
        self._cache: dict[tuple[TrialKey, int], RRSeries | None] = {}

    def until(self, key: TrialKey, end_ms: int) -> RRSeries | None:
        ck = (key, end_ms)
        if ck not in self._cache:
            self._cache[ck] = self._compute(key, end_ms)
        return self._cache[ck]

    def _compute(self, key, end_ms):
        if key in self.sensors.beats:
            t = self.sensors.beats[key]
            t = t[t < end_ms]
        else:
            ecg = self.sensors.get(key, SensorType.ECG)
            if ecg is None:
                return None
            ecg = _dedup(ecg.between(np.iinfo(np.int64).min, end_ms))
            fs = ecg.fs_hz()
            try:
                rep = detect_r_peaks_report(ecg.values, fs, key)
            except ValueError:
                return None
            t = ecg.t_ms[rep.beat_index]
        if len(t) < 2:
            return None
        return RRSeries.from_beats(t.astype(np.float64), key)


def _hrv_features(window: Window, beats: BeatSource, config: PipelineConfig) -> dict[str, float]:
    prefix = beats.until(window.key, window.end_ms)
    if prefix is None:
        return {}
    out = {}
    try:
        win = prefix.between(window.start_ms, window.end_ms)
    except ValueError:
        return {}
    if len(win.nn) >= 4:
        out.update({f"hrv_{k}": v for k, v in hrv_time(win).items()})
    if len(win.nn) >= 10:
        try:
            out.update({f"hrv_{k}": v for k, v in hrv_nonlinear(win, config.sampen_m, config.sampen_r).items()})
        except ValueError:
            pass
    # spectral features need >= 60 s of beats; use the causal trial prefix
    # when the window alone is too short
    source = win if win.span_s() >= config.hrv_freq_min_span_s else prefix
    try:
        out.update({f"hrv_{k}": v for k, v in hrv_freq(source, config.bands, config.hrv_freq_min_span_s).items()})
    except ValueError:
        pass
    return out


def extract_window_features(window: Window, sensors: SensorTable, config: PipelineConfig = PipelineConfig(),
                            beats: BeatSource | None = None) -> FeatureVector:
    """All registry features for one window; unavailable features are omitted."""
    beats = beats or BeatSource(sensors)
    key = window.key
    start, end = window.start_ms, window.end_ms
    found: dict[str, float] = {}
    for st in MOTION_SENSORS:
        s = sensors.get(key, st)
        if s is None:
            continue
        s = _dedup(s.between(start, end))
        if len(s) < 5:
            continue
        found.update(_motion_features(st, s, config))
    for st in GSR_SENSORS:
        s = sensors.get(key, st)
        if s is None:
            continue
        s = _dedup(s.between(start, end))
        if len(s) < 4:
            continue
        try:
            found.update(_gsr_window_features(st, s, config))
        except ValueError:
            pass
    found.update(_hrv_features(window, beats, config))
    feats = {n: found[n] for n in FEATURE_NAMES if n in found and np.isfinite(found[n])}
    return FeatureVector(window, feats, {n: FEATURE_GROUP[n] for n in feats})


def featurize_trial(sensors: SensorTable, key: TrialKey, config: PipelineConfig,
                    beats: BeatSource | None = None) -> list[FeatureVector]:
    beats = beats or BeatSource(sensors)
    duration = sensors.duration_ms(key) / 1000.0
    wins = partition(duration, config.window_size_s, config.step_size_s, key)
    return [extract_window_features(w, sensors, config, beats) for w in wins]


# -- baseline normalisation ---------------------------------------------------------

@dataclass(frozen=True)
class BaselineProfile:
    means: Mapping[tuple[str, str], float]
    n_windows: Mapping[str, int] = field(default_factory=dict)

    def users(self) -> list[str]:
        return sorted({u for u, _ in self.means})

    def get(self, user_id: str, feature: str) -> float:
        return self.means[(user_id, feature)]

    def to_dict(self) -> dict:
        out: dict[str, dict[str, float]] = {}
        for (u, f), v in sorted(self.means.items()):
            out.setdefault(u, {})[f] = v
        return {"means": out, "n_windows": dict(sorted(self.n_windows.items()))}

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineProfile":
        means = {(u, f): float(v) for u, fs in d["means"].items() for f, v in fs.items()}
        return cls(means, dict(d.get("n_windows", {})))


def baseline_from_vectors(vectors) -> BaselineProfile:
    sums: dict[tuple[str, str], list[float]] = {}
    counts: dict[str, int] = {}
    for fv in vectors:
        u = fv.window.key.user_id
        counts[u] = counts.get(u, 0) + 1
        for name, v in fv.features.items():
            sums.setdefault((u, name), []).append(v)
    return BaselineProfile({k: float(np.mean(v)) for k, v in sorted(sums.items())}, counts)


def build_baseline(sensors: SensorTable, config: PipelineConfig = PipelineConfig(),
                   beats: BeatSource | None = None, users=None) -> BaselineProfile:
    """Per-user mean of every feature over that user's baseline windows."""
    beats = beats or BeatSource(sensors)
    users = sorted(users) if users is not None else sensors.users()
    trials = set(config.baseline_trials)
    vectors = []
    for u in users:
        keys = [k for k in sensors.keys() if k.user_id == u and k.trial_index in trials]
        got = []
        for key in keys:
            got.extend(featurize_trial(sensors, key, config, beats))
        if not got:
            raise ValueError(f"user {u} has no baseline windows (trials {sorted(trials)})")
        vectors.extend(got)
    return baseline_from_vectors(vectors)


def normalize(fv: FeatureVector, profile: BaselineProfile, eps: float = 1e-8,
              strict: bool = True) -> FeatureVector:
    """Divide every feature by the user's baseline mean of that feature.

    Baseline means smaller than `eps` in magnitude are pushed away from zero
    by `eps` (a warning is logged). With ``strict=False`` features lacking a
    baseline entry are dropped instead of raising.
    """
    u = fv.window.key.user_id
    out, prov = {}, {}
    for name, v in fv.features.items():
        if fv.provenance[name] == "STAGE":
            out[name], prov[name] = v, "STAGE"
            continue
        try:
            mean = profile.get(u, name)
        except KeyError:
            if strict:
                raise KeyError(f"no baseline mean for user {u}, feature {name}") from None
            continue
        if abs(mean) < eps:
            _warn_near_zero(u, name)
            mean = mean + eps if mean >= 0 else mean - eps
        val = v / mean
        if not np.isfinite(val):
            if strict:
                raise ValueError(f"non-finite normalized value for {name}")
            continue
        out[name], prov[name] = val, fv.provenance[name]
    return fv.with_features(out, prov, normalized=True)


@functools.lru_cache(maxsize=None)
def _warn_near_zero(user_id: str, name: str) -> None:
    log.warning("near-zero baseline mean for user %s feature %s; shifting by eps", user_id, name)
