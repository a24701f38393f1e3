"""Synthetic multi-sensor cohorts with planted engagement and discomfort effects.

Each excerpt trial draws a latent EML state (high/low) and discomfort state
(normal/high). High EML adds band-limited jitter to IMU and GYR and damps the
high-frequency modulation of heart rate. High discomfort adds slow wrist GYR
rotation and otherwise mimics engagement (jitter and damped HRV), while
lowering the chance of high EML. Questionnaire
items come from a one-factor model of the latent state.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import signal

from .data_model import (
    DiscomfortClass,
    EmlClass,
    QuestionnaireRecord,
    SensorTable,
    SensorType,
    Stream,
    TrialKey,
)
from .ingest import ensure_dir, write_questionnaire_file, write_sensor_file

GROUND_TRUTH_COLUMNS = ["user_id", "trial_index", "latent_eml", "latent_discomfort"]

# (category, tempo) per excerpt: 24 technical (12 slow, 12 fast) and 5 repertoire
DESIGN = (
    [("technical", "slow")] * 12 + [("technical", "fast")] * 12
    + [("repertoire", "fast")] + [("repertoire", "average")] * 2 + [("repertoire", "slow")] * 2
)
TECH_MEAN = {("technical", "slow"): 4.5, ("technical", "fast"): 7.0, ("repertoire", "slow"): 4.3,
             ("repertoire", "average"): 5.0, ("repertoire", "fast"): 5.6}
EMO_MEAN = {"technical": 4.0, "repertoire": 7.5}


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 9
    n_trials_per_user: int = 29
    trial_duration_s: float = 90.0
    baseline_durations_s: tuple[float, float, float, float] = (120.0, 60.0, 120.0, 60.0)
    motion_hz: float = 50.0
    gsr_hz: float = 8.0
    resp_hz: float = 4.0
    ecg_hz: float = 250.0
    eml_motion_volatility: float = 1.0
    discomfort_gyr_variance: float = 1.0
    hrv_hf_shift: float = 0.3
    gyr_coupling: float = 1.0
    discomfort_rate: float = 0.1
    discomfort_mimics_engagement: bool = True
    motion_noise: float = 0.05
    gsr_noise: float = 0.005
    loadings: tuple[float, float, float] = (0.97, 0.93, 0.78)   # calm, at ease, inverted nervous
    factor_noise: float = 0.35
    rating_noise: float = 1.5
    write_ecg: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_users < 1 or self.n_trials_per_user < 1:
            raise ValueError("need at least one user and one trial")
        if self.trial_duration_s <= 0 or any(d <= 0 for d in self.baseline_durations_s):
            raise ValueError("trial durations must be positive")
        for name in ("motion_hz", "gsr_hz", "resp_hz", "ecg_hz"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("eml_motion_volatility", "discomfort_gyr_variance", "hrv_hf_shift", "gyr_coupling",
                     "motion_noise", "gsr_noise", "factor_noise", "rating_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0 <= self.discomfort_rate <= 1:
            raise ValueError("discomfort_rate must be in [0, 1]")
        if not all(0 < l < 1 for l in self.loadings):
            raise ValueError("loadings must be in (0, 1)")


@dataclass(frozen=True)
class GroundTruth:
    key: TrialKey
    latent_eml: EmlClass
    latent_discomfort: DiscomfortClass
    factor: float
    category: str
    tempo: str


@dataclass(frozen=True)
class SynthResult:
    sensors: SensorTable
    questionnaire: list[QuestionnaireRecord]
    ground_truth: list[GroundTruth]
    config: SynthConfig = field(default_factory=SynthConfig)

    def write(self, out_dir) -> Path:
        out = ensure_dir(out_dir)
        write_sensor_file(self.sensors, out / "sensors.csv")
        if not self.sensors.beats and (out / "rr.csv").exists():
            (out / "rr.csv").unlink()
        write_questionnaire_file(self.questionnaire, out / "questionnaire.csv")
        gt = pd.DataFrame(
            [(g.key.user_id, g.key.trial_index, g.latent_eml.value, g.latent_discomfort.value)
             for g in self.ground_truth],
            columns=GROUND_TRUTH_COLUMNS,
        )
        gt.to_csv(out / "ground_truth.csv", index=False, lineterminator="\n")
        return out


@dataclass(frozen=True)
class _User:
    uid: str
    motion_scale: float
    gsr_level: float
    hr_base: float
    bias: float


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _band_noise(rng, n: int, fs: float, lo: float, hi: float) -> np.ndarray:
    """Unit-variance band-limited Gaussian noise."""
    hi = min(hi, 0.45 * fs)
    if n < 16 or lo >= hi:
        return np.zeros(n)
    sos = signal.butter(4, [lo, hi], btype="bandpass", fs=fs, output="sos")
    x = signal.sosfilt(sos, rng.standard_normal(n + 200))[200:]
    sd = x.std()
    return x / sd if sd > 0 else x


def _beats(rng, duration_s: float, hr_bpm: float, lf_amp: float, hf_amp: float) -> np.ndarray:
    """Integrate-and-fire beat times (ms) over a modulated heart-rate signal."""
    fs = 100.0
    t = np.arange(0, duration_s + 2, 1 / fs)
    phi1, phi2 = rng.uniform(0, 2 * np.pi, 2)
    hr = hr_bpm * (1 + lf_amp * np.sin(2 * np.pi * 0.1 * t + phi1) + hf_amp * np.sin(2 * np.pi * 0.3 * t + phi2))
    hr = hr * (1 + 0.01 * _band_noise(rng, len(t), fs, 0.01, 0.5))
    phase = np.concatenate([[0.0], np.cumsum(hr[:-1] / 60.0 / fs)]) + rng.uniform(0, 1)
    k = np.arange(np.ceil(phase[0]), np.floor(phase[-1]) + 1)
    tb = np.interp(k, phase, t)
    tb = tb[tb < duration_s]
    return np.round(tb * 1000).astype(np.int64)


def _ecg(rng, beats_ms: np.ndarray, duration_s: float, fs: float) -> tuple[np.ndarray, np.ndarray]:
    t_ms = np.round(np.arange(0, duration_s, 1 / fs) * 1000).astype(np.int64)
    t = t_ms / 1000.0
    x = 0.02 * rng.standard_normal(len(t)) + 0.05 * np.sin(2 * np.pi * 0.2 * t)
    for b in beats_ms / 1000.0:
        lo, hi = np.searchsorted(t, [b - 0.1, b + 0.45])
        tt = t[lo:hi] - b
        x[lo:hi] += np.exp(-0.5 * (tt / 0.01) ** 2) - 0.15 * np.exp(-0.5 * ((tt - 0.03) / 0.01) ** 2) \
            + 0.3 * np.exp(-0.5 * ((tt - 0.25) / 0.04) ** 2)
    return t_ms, x


def _times(duration_s: float, fs: float, rng) -> np.ndarray:
    n = int(np.floor(duration_s * fs))
    return np.round(np.arange(n) / fs * 1000).astype(np.int64)


def _trial_streams(cfg: SynthConfig, user: _User, key: TrialKey, duration_s: float, rng,
                   playing: bool, eml_high: bool, disc_high: bool):
    streams = {}
    fs = cfg.motion_hz
    t_ms = _times(duration_s, fs, rng)
    t = t_ms / 1000.0
    n = len(t)
    s = user.motion_scale
    engaged_look = playing and (eml_high or (disc_high and cfg.discomfort_mimics_engagement))
    bow_f = rng.uniform(0.6, 1.2)
    # excerpt-to-excerpt variation in how large the bowing gestures are
    trial_amp = float(np.exp(0.35 * rng.standard_normal())) if playing else 1.0
    for site_i, (imu, gyr) in enumerate(((SensorType.IMU_wrist, SensorType.GYR_wrist),
                                          (SensorType.IMU_elbow, SensorType.GYR_elbow))):
        amp = (1.0 if site_i == 0 else 0.6) * s * trial_amp
        phase = rng.uniform(0, 2 * np.pi)
        acc = np.zeros((n, 3))
        acc[:, 2] = 9.81
        gyr_v = np.zeros((n, 3))
        if playing:
            bow = np.sin(2 * np.pi * bow_f * t + phase)
            acc[:, 0] += 2.0 * amp * bow
            acc[:, 1] += 0.5 * amp * np.cos(2 * np.pi * bow_f * t + phase)
            gyr_v[:, 2] += 1.5 * amp * np.cos(2 * np.pi * bow_f * t + phase)
            gyr_v[:, 0] += 0.3 * amp * bow
        else:
            for ax in range(3):
                acc[:, ax] += 0.05 * s * _band_noise(rng, n, fs, 0.05, 0.5)
        acc += cfg.motion_noise * s * rng.standard_normal((n, 3))
        gyr_v += cfg.motion_noise * s * rng.standard_normal((n, 3))
        if engaged_look and cfg.eml_motion_volatility > 0:
            j = 0.25 * cfg.eml_motion_volatility * amp
            for ax in range(3):
                acc[:, ax] += j * _band_noise(rng, n, fs, 4.0, 12.0)
                gyr_v[:, ax] += cfg.gyr_coupling * j * _band_noise(rng, n, fs, 4.0, 12.0)
        if playing and disc_high and site_i == 0 and cfg.discomfort_gyr_variance > 0:
            # slow restless wrist rotation; the elbow is unaffected
            for ax in (0, 1):
                gyr_v[:, ax] += cfg.discomfort_gyr_variance * amp * _band_noise(rng, n, fs, 0.15, 0.6)
        streams[imu] = Stream(key, imu, t_ms, np.round(acc, 4))
        streams[gyr] = Stream(key, gyr, t_ms, np.round(gyr_v, 4))

    gt_ms = _times(duration_s, cfg.gsr_hz, rng)
    gt = gt_ms / 1000.0
    for site_i, st in enumerate((SensorType.GSR_shoulder, SensorType.GSR_fingertips, SensorType.GSR_axilla)):
        level = user.gsr_level * (0.6, 1.0, 0.8)[site_i]
        x = level * (1 + 0.03 * np.sin(2 * np.pi * gt / rng.uniform(40, 80) + rng.uniform(0, 6.3)))
        for onset in rng.uniform(0, duration_s, rng.poisson(duration_s / 20)):
            dt = gt - onset
            resp = np.where(dt > 0, np.exp(-dt / 4.0) - np.exp(-dt / 0.75), 0.0)
            x += level * rng.uniform(0.02, 0.08) * resp
        x += cfg.gsr_noise * rng.standard_normal(len(gt))
        streams[st] = Stream(key, st, gt_ms, np.round(x, 4))

    rt_ms = _times(duration_s, cfg.resp_hz, rng)
    rt = rt_ms / 1000.0
    resp = np.sin(2 * np.pi * rng.uniform(0.2, 0.3) * rt + rng.uniform(0, 6.3)) + 0.05 * rng.standard_normal(len(rt))
    streams[SensorType.RESP] = Stream(key, SensorType.RESP, rt_ms, np.round(resp, 4))

    hr = user.hr_base + (10.0 if playing else 0.0)
    hf = 0.05 * np.exp(-cfg.hrv_hf_shift * (1.0 if engaged_look else 0.0))
    beats = _beats(rng, duration_s, hr, 0.04, hf)
    if cfg.write_ecg:
        et, ex = _ecg(rng, beats, duration_s, cfg.ecg_hz)
        streams[SensorType.ECG] = Stream(key, SensorType.ECG, et, np.round(ex, 5))
    return streams, beats


def _rating(rng, mu: float, sd: float, lo: int = 1, hi: int = 10) -> int:
    return int(np.clip(np.round(mu + sd * rng.standard_normal()), lo, hi))


def _items(rng, f: float, loadings) -> tuple[int, int, int]:
    """Calm, at-ease and nervous ratings from one standardized factor value."""
    out = []
    for lam in loadings:
        item = lam * f + np.sqrt(1 - lam ** 2) * rng.standard_normal()
        out.append(int(np.clip(np.round(5.5 + 2.0 * item), 1, 10)))
    calm, ease, inv_nerv = out
    return calm, ease, 11 - inv_nerv


def generate(config: SynthConfig = SynthConfig()) -> SynthResult:
    cfg = config
    root = np.random.default_rng(cfg.seed)
    users = []
    for u in range(cfg.n_users):
        users.append(_User(
            uid=f"U{u + 1:02d}",
            motion_scale=float(root.uniform(0.7, 1.4)),
            gsr_level=float(root.uniform(2.0, 10.0)),
            hr_base=float(root.uniform(62, 82)),
            bias=float(root.normal(0, 0.4)),
        ))
    streams, beats, qnr, truth = {}, {}, [], []
    f_scale = np.sqrt(1 + cfg.factor_noise ** 2)
    for ui, user in enumerate(users):
        urng = np.random.default_rng([cfg.seed, ui])
        order = urng.permutation(len(DESIGN))
        for trial in range(1, cfg.n_trials_per_user + 1):
            key = TrialKey(user.uid, trial)
            rng = np.random.default_rng([cfg.seed, ui, trial])
            cat, tempo = DESIGN[order[(trial - 1) % len(DESIGN)]]
            tech = TECH_MEAN[(cat, tempo)] + cfg.rating_noise * rng.standard_normal()
            emo = EMO_MEAN[cat] + cfg.rating_noise * rng.standard_normal()
            disc_high = bool(rng.random() < cfg.discomfort_rate)
            logit = 0.6 * (tech - 5.5) + 0.5 * (emo - 5.0) + user.bias - (3.0 if disc_high else 0.0)
            eml_high = bool(rng.random() < _sigmoid(logit))
            f = ((1.0 if eml_high else -1.0) + cfg.factor_noise * rng.standard_normal()) / f_scale
            calm, ease, nervous = _items(rng, f, cfg.loadings)
            unc = _rating(rng, 9.5, 0.6, 9, 10) if disc_high else _rating(rng, 3.0, 1.5, 1, 8)
            qnr.append(QuestionnaireRecord(key, int(np.clip(np.round(tech), 1, 10)),
                                           int(np.clip(np.round(emo), 1, 10)), calm, ease, nervous, unc))
            truth.append(GroundTruth(key, EmlClass.high if eml_high else EmlClass.low,
                                     DiscomfortClass.high if disc_high else DiscomfortClass.normal,
                                     float(f), cat, tempo))
            got, b = _trial_streams(cfg, user, key, cfg.trial_duration_s, rng, True, eml_high, disc_high)
            streams.update({(key, st): s for st, s in got.items()})
            beats[key] = b
        for j, trial in enumerate((101, 102, 103, 104)):
            key = TrialKey(user.uid, trial)
            rng = np.random.default_rng([cfg.seed, ui, trial])
            got, b = _trial_streams(cfg, user, key, cfg.baseline_durations_s[j], rng, False, False, False)
            streams.update({(key, st): s for st, s in got.items()})
            beats[key] = b
    table = SensorTable(streams, {} if cfg.write_ecg else beats)
    return SynthResult(table, qnr, truth, cfg)


def with_strength(config: SynthConfig, strength: float) -> SynthConfig:
    """Scale every planted EML effect by `strength` (0 removes all of them)."""
    return dataclasses.replace(
        config,
        eml_motion_volatility=config.eml_motion_volatility * strength,
        hrv_hf_shift=config.hrv_hf_shift * strength,
    )
