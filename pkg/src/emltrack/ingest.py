"""File parsing and ECG to RR-interval conversion.

File formats (UTF-8, LF line endings, decimal ASCII numbers):

sensors.csv
    ``user_id,trial_index,t_ms,sensor_type,x,y,z,value``. IMU/GYR rows fill
    x,y,z and leave value empty; scalar sensors fill value only.
questionnaire.csv
    ``user_id,trial_index,tech_diff,emo_expr,feel_calm,feel_at_ease,feel_nervous,feel_uncomfortable``
rr.csv
    ``user_id,trial_index,t_ms`` -- one row per detected heartbeat (R peak).
    Optional; when present it replaces R-peak detection on the ECG stream.
"""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import ndimage, signal

from .data_model import (
    RATING_FIELDS,
    QuestionnaireRecord,
    SensorTable,
    SensorType,
    Stream,
    TrialKey,
)

SENSOR_COLUMNS = ["user_id", "trial_index", "t_ms", "sensor_type", "x", "y", "z", "value"]
QUESTIONNAIRE_COLUMNS = ["user_id", "trial_index", *RATING_FIELDS]
BEAT_COLUMNS = ["user_id", "trial_index", "t_ms"]

RR_MIN_MS = 300.0
RR_MAX_MS = 2000.0


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None, path=None):
        self.line = line
        self.path = path
        where = f"{path}:" if path else ""
        where += f"line {line}: " if line is not None else ""
        super().__init__(where + message)


@dataclass(frozen=True, eq=False)
class RRSeries:
    """Inter-beat intervals derived from successive beat times.

    ``valid`` flags intervals inside the physiological range; features use
    only valid intervals (see `nn`).
    """

    key: TrialKey | None
    t_beats: np.ndarray
    rr_ms: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        t = np.asarray(self.t_beats, dtype=np.float64).copy()
        rr = np.asarray(self.rr_ms, dtype=np.float64).copy()
        if len(t) != len(rr) + 1:
            raise ValueError("t_beats must have exactly one more element than rr_ms")
        if np.any(rr <= 0):
            raise ValueError("RR intervals must be positive")
        valid = np.ones(len(rr), bool) if self.valid is None else np.asarray(self.valid, bool).copy()
        for a in (t, rr, valid):
            a.flags.writeable = False
        object.__setattr__(self, "t_beats", t)
        object.__setattr__(self, "rr_ms", rr)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def from_beats(cls, t_beats, key: TrialKey | None = None) -> "RRSeries":
        t = np.asarray(t_beats, dtype=np.float64)
        if len(t) < 1:
            raise ValueError("need at least one beat")
        rr = np.diff(t)
        valid = (rr >= RR_MIN_MS) & (rr <= RR_MAX_MS)
        return cls(key, t, rr, valid)

    @classmethod
    def from_intervals(cls, rr_ms, t0_ms: float = 0.0, key: TrialKey | None = None) -> "RRSeries":
        rr = np.asarray(rr_ms, dtype=np.float64)
        t = t0_ms + np.concatenate([[0.0], np.cumsum(rr)])
        return cls(key, t, rr, np.ones(len(rr), bool))

    @property
    def nn(self) -> np.ndarray:
        return self.rr_ms[self.valid]

    @property
    def n_dropped(self) -> int:
        return int((~self.valid).sum())

    def span_s(self) -> float:
        return float(self.t_beats[-1] - self.t_beats[0]) / 1000.0 if len(self.t_beats) else 0.0

    def between(self, start_ms: float, end_ms: float) -> "RRSeries":
        """Beats with start_ms <= t < end_ms and the intervals between them."""
        lo, hi = np.searchsorted(self.t_beats, [start_ms, end_ms], side="left")
        if hi - lo < 1:
            raise ValueError("no beats in range")
        return RRSeries(self.key, self.t_beats[lo:hi], self.rr_ms[lo:hi - 1], self.valid[lo:hi - 1])


# -- sensors ------------------------------------------------------------------

def _open_text(path):
    return open(path, "r", encoding="utf-8", newline="")


def _check_header(header: list[str], expected: list[str], path) -> None:
    missing = [c for c in expected if c not in header]
    if missing:
        raise ParseError(f"missing column(s): {', '.join(missing)}", line=1, path=path)


def _locate_bad_number(path, columns: list[str]) -> ParseError:
    """Slow path: scan the file for the first non-numeric numeric field."""
    with _open_text(path) as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            for col in columns:
                raw = row.get(col)
                if raw is None:
                    return ParseError("row has too few fields", line=lineno, path=path)
                if raw == "":
                    continue
                try:
                    float(raw)
                except ValueError:
                    return ParseError(f"non-numeric value {raw!r} in column {col}", line=lineno, path=path)
    return ParseError("malformed file", path=path)


def parse_sensor_file(path) -> SensorTable:
    """Read sensors.csv into a SensorTable, grouped by (key, sensor_type), sorted by time."""
    with _open_text(path) as fh:
        header = fh.readline().rstrip("\n").rstrip("\r").split(",")
    _check_header(header, SENSOR_COLUMNS, path)
    numeric = ["trial_index", "t_ms", "x", "y", "z", "value"]
    try:
        df = pd.read_csv(
            path,
            dtype={"user_id": str, "sensor_type": str, **{c: np.float64 for c in numeric}},
            keep_default_na=False,
            na_values={c: [""] for c in numeric},
            float_precision="round_trip",
            encoding="utf-8",
        )
    except (ValueError, pd.errors.ParserError) as exc:
        err = _locate_bad_number(path, numeric)
        raise err from exc
    beats = _companion_beats(path)
    return _table_from_frame(df, path, beats)


def _companion_beats(path):
    rr_path = Path(path).with_name("rr.csv")
    return parse_beats_file(rr_path) if rr_path.exists() else {}


def _table_from_frame(df: pd.DataFrame, path=None, beats=None) -> SensorTable:
    lines = np.arange(len(df)) + 2

    def fail(mask, message):
        idx = int(np.flatnonzero(mask)[0])
        raise ParseError(message(idx), line=int(lines[idx]), path=path)

    for col in ("user_id", "sensor_type"):
        empty = df[col].isna().to_numpy() | (df[col].astype(str) == "").to_numpy()
        if empty.any():
            fail(empty, lambda i, col=col: f"empty {col}")
    for col in ("trial_index", "t_ms"):
        v = df[col].to_numpy()
        bad = ~np.isfinite(v) | (v != np.round(v))
        if bad.any():
            fail(bad, lambda i, col=col: f"{col} must be an integer, got {df[col].iloc[i]!r}")

    known = {s.value for s in SensorType}
    types = df["sensor_type"].astype(str).to_numpy()
    unknown = ~np.isin(types, list(known))
    if unknown.any():
        fail(unknown, lambda i: f"unknown sensor_type {types[i]!r}")

    vec_names = [s.value for s in SensorType if s.is_vector]
    is_vec = np.isin(types, vec_names)
    xyz = df[["x", "y", "z"]].to_numpy()
    val = df["value"].to_numpy()
    bad_vec = is_vec & ~np.all(np.isfinite(xyz), axis=1)
    if bad_vec.any():
        fail(bad_vec, lambda i: f"3-vector sensor requires x,y,z ({types[i]})")
    extra_vec = is_vec & np.isfinite(val)
    if extra_vec.any():
        fail(extra_vec, lambda i: f"3-vector sensor {types[i]} must leave value empty")
    bad_scalar = ~is_vec & ~np.isfinite(val)
    if bad_scalar.any():
        fail(bad_scalar, lambda i: f"scalar sensor {types[i]} requires value")
    extra_scalar = ~is_vec & np.any(np.isfinite(xyz), axis=1)
    if extra_scalar.any():
        fail(extra_scalar, lambda i: f"scalar sensor {types[i]} must leave x,y,z empty")

    df = df.assign(trial_index=df["trial_index"].astype(np.int64), t_ms=df["t_ms"].astype(np.int64))
    streams = {}
    for (uid, tidx, st), g in df.groupby(["user_id", "trial_index", "sensor_type"], sort=True):
        stype = SensorType(st)
        key = TrialKey(str(uid), int(tidx))
        order = np.lexsort(_sort_keys(g, stype))
        t = g["t_ms"].to_numpy()[order]
        v = g[["x", "y", "z"]].to_numpy()[order] if stype.is_vector else g["value"].to_numpy()[order]
        streams[(key, stype)] = Stream(key, stype, t, v)
    return SensorTable(streams, beats or {})


def _sort_keys(g: pd.DataFrame, stype: SensorType):
    # lexsort: last key is primary. Ties on t are broken by value so that any
    # row permutation yields the same table.
    if stype.is_vector:
        return (g["z"].to_numpy(), g["y"].to_numpy(), g["x"].to_numpy(), g["t_ms"].to_numpy())
    return (g["value"].to_numpy(), g["t_ms"].to_numpy())


def sensor_frame(table: SensorTable) -> pd.DataFrame:
    parts = []
    for (key, st), s in table.streams.items():
        n = len(s)
        part = {
            "user_id": np.full(n, key.user_id, dtype=object),
            "trial_index": np.full(n, key.trial_index, dtype=np.int64),
            "t_ms": s.t_ms,
            "sensor_type": np.full(n, st.value, dtype=object),
        }
        if st.is_vector:
            part.update(x=s.values[:, 0], y=s.values[:, 1], z=s.values[:, 2], value=np.full(n, np.nan))
        else:
            nan = np.full(n, np.nan)
            part.update(x=nan, y=nan, z=nan, value=s.values)
        parts.append(pd.DataFrame(part, columns=SENSOR_COLUMNS))
    if not parts:
        return pd.DataFrame(columns=SENSOR_COLUMNS)
    return pd.concat(parts, ignore_index=True)


def write_sensor_file(table: SensorTable, path) -> None:
    """Write sensors.csv (and rr.csv next to it when the table carries beats)."""
    df = sensor_frame(table)
    df.to_csv(path, index=False, na_rep="", lineterminator="\n", encoding="utf-8")
    if table.beats:
        write_beats_file(table.beats, Path(path).with_name("rr.csv"))


def sensor_lines(table: SensorTable, key: TrialKey) -> list[str]:
    """sensors.csv rows for one trial, interleaved in time order (for replay)."""
    df = sensor_frame(table.subset([key]))
    df = df.sort_values(["t_ms", "sensor_type"], kind="stable")
    buf = io.StringIO()
    df.to_csv(buf, index=False, header=False, na_rep="", lineterminator="\n")
    return buf.getvalue().splitlines()


def parse_sensor_line(line: str, lineno: int | None = None):
    """Parse one sensors.csv data row into (key, sensor_type, t_ms, value)."""
    parts = line.rstrip("\n").rstrip("\r").split(",")
    if len(parts) != len(SENSOR_COLUMNS):
        raise ParseError(f"expected {len(SENSOR_COLUMNS)} fields, got {len(parts)}", line=lineno)
    uid, tidx, t_ms, st, x, y, z, value = parts
    try:
        stype = SensorType(st)
    except ValueError:
        raise ParseError(f"unknown sensor_type {st!r}", line=lineno) from None
    try:
        key = TrialKey(uid, int(tidx))
        t = int(t_ms)
        if stype.is_vector:
            if "" in (x, y, z):
                raise ParseError("3-vector sensor requires x,y,z", line=lineno)
            v = (float(x), float(y), float(z))
        else:
            v = float(value)
    except ValueError as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"malformed row: {exc}", line=lineno) from None
    return key, stype, t, v


# -- questionnaire ------------------------------------------------------------

def parse_questionnaire_file(path) -> list[QuestionnaireRecord]:
    with _open_text(path) as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", path=path) from None
        _check_header(header, QUESTIONNAIRE_COLUMNS, path)
        idx = {c: header.index(c) for c in QUESTIONNAIRE_COLUMNS}
        records, seen = [], {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=lineno, path=path)
            try:
                key = TrialKey(row[idx["user_id"]], int(row[idx["trial_index"]]))
                ratings = {f: int(row[idx[f]]) for f in RATING_FIELDS}
            except ValueError as exc:
                raise ParseError(f"malformed row: {exc}", line=lineno, path=path) from None
            rec = QuestionnaireRecord(key, **ratings)
            bad = rec.out_of_range()
            if bad:
                f = bad[0]
                raise ParseError(f"rating out of range: {f}={ratings[f]} (scale 1..10)", line=lineno, path=path)
            if key in seen:
                raise ParseError(f"duplicate TrialKey {key} (first on line {seen[key]})", line=lineno, path=path)
            seen[key] = lineno
            records.append(rec)
    return records


def write_questionnaire_file(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(QUESTIONNAIRE_COLUMNS)
        for r in records:
            w.writerow([r.key.user_id, r.key.trial_index, *[getattr(r, f) for f in RATING_FIELDS]])


# -- beats ----------------------------------------------------------------------

def parse_beats_file(path) -> dict[TrialKey, np.ndarray]:
    df = pd.read_csv(path, dtype={"user_id": str})
    _check_header(list(df.columns), BEAT_COLUMNS, path)
    out = {}
    for (uid, tidx), g in df.groupby(["user_id", "trial_index"], sort=True):
        t = np.sort(g["t_ms"].to_numpy(np.int64))
        if np.any(np.diff(t) <= 0):
            raise ParseError(f"duplicate beat timestamps for {uid}/{tidx}", path=path)
        out[TrialKey(str(uid), int(tidx))] = t
    return out


def write_beats_file(beats, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(BEAT_COLUMNS) + "\n")
        for key in sorted(beats):
            for t in beats[key]:
                fh.write(f"{key.user_id},{key.trial_index},{int(t)}\n")


def load_dataset_dir(path):
    """Parse sensors.csv (+rr.csv) and questionnaire.csv from a directory."""
    path = Path(path)
    sensors = parse_sensor_file(path / "sensors.csv")
    qnr = parse_questionnaire_file(path / "questionnaire.csv")
    return sensors, qnr


# -- R-peak detection -----------------------------------------------------------

@dataclass(frozen=True)
class PeakReport:
    rr: RRSeries
    beat_index: np.ndarray
    dropped_short: int
    flagged_long: int


def _detect(ecg: np.ndarray, fs_hz: float, t0_ms: float, key) -> PeakReport:
    x = np.asarray(ecg, dtype=np.float64)
    if fs_hz < 100:
        raise ValueError("ECG sampling rate must be at least 100 Hz")
    if len(x) < 2 * fs_hz:
        raise ValueError("ECG series shorter than two seconds")
    sos = signal.butter(2, [5.0, 15.0], btype="bandpass", fs=fs_hz, output="sos")
    energy = signal.sosfiltfilt(sos, x - np.median(x)) ** 2
    win = max(1, int(round(2 * fs_hz)))
    threshold = 0.5 * ndimage.maximum_filter1d(energy, size=win, mode="nearest")
    refractory = max(1, int(round(0.25 * fs_hz)))
    peaks, _ = signal.find_peaks(energy, distance=refractory)
    peaks = peaks[energy[peaks] > threshold[peaks]]
    # the zero-phase filter keeps the QRS centred; snap to the raw extremum
    half = max(1, int(round(0.05 * fs_hz)))
    centred = x - np.median(x)
    snapped = []
    for p in peaks:
        lo, hi = max(0, p - half), min(len(x), p + half + 1)
        snapped.append(lo + int(np.argmax(np.abs(centred[lo:hi]))))
    idx = np.unique(np.asarray(snapped, dtype=np.int64))

    # too-short intervals: the later detection is spurious (T wave, noise)
    dropped = 0
    min_gap = RR_MIN_MS * fs_hz / 1000.0
    keep = []
    for i in idx:
        if keep and i - keep[-1] < min_gap:
            dropped += 1
            continue
        keep.append(int(i))
    idx = np.asarray(keep, dtype=np.int64)
    if len(idx) < 3:
        raise ValueError("insufficient beats")
    t_beats = t0_ms + idx * (1000.0 / fs_hz)
    rr = RRSeries.from_beats(t_beats, key)
    return PeakReport(rr, idx, dropped, rr.n_dropped)


def detect_r_peaks(ecg, fs_hz: float, key: TrialKey | None = None, t0_ms: float = 0.0) -> RRSeries:
    """Locate R peaks and return the RR series.

    Band-pass 5-15 Hz (2nd-order sections, zero phase), square, and keep local
    maxima above half the rolling 2 s maximum. Intervals below 300 ms drop the
    later beat; intervals above 2000 ms are kept but flagged invalid.
    Use `detect_r_peaks_report` to see the counts.
    """
    return _detect(ecg, fs_hz, t0_ms, key).rr


def detect_r_peaks_report(ecg, fs_hz: float, key: TrialKey | None = None, t0_ms: float = 0.0) -> PeakReport:
    return _detect(ecg, fs_hz, t0_ms, key)


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
