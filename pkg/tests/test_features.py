import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import trapezoid

import oracles
from emltrack.data_model import SENSOR_GROUPS, FeatureVector, HrvBands, PipelineConfig, TrialKey, Window
from emltrack.features import (
    FEATURE_COUNT,
    FEATURE_GROUP,
    FEATURE_NAMES,
    FEATURES,
    BaselineProfile,
    artifact_screen,
    baseline_from_vectors,
    band_power,
    build_baseline,
    extract_window_features,
    featurize_trial,
    gsr_features,
    hrv_freq,
    hrv_nonlinear,
    hrv_time,
    jerk,
    magnitude,
    normalize,
    rr_psd,
    sample_entropy,
    sparc,
    stat_features,
)
from emltrack.ingest import RRSeries
from emltrack.synth import SynthConfig, generate

rng_seeds = range(100)


# -- elementary transforms --------------------------------------------------------

def test_jerk_example():
    np.testing.assert_array_equal(jerk([0, 1, 3], [0, 1, 2]), [1, 2])


def test_jerk_constant_and_short():
    np.testing.assert_array_equal(jerk(np.full(5, 3.0), np.arange(5)), np.zeros(4))
    with pytest.raises(ValueError):
        jerk([5], [0])
    with pytest.raises(ValueError, match="zero dt"):
        jerk([1, 2], [1, 1])


def test_magnitude_examples():
    np.testing.assert_array_equal(magnitude([[3, 4, 0], [0, 0, 0]]), [5, 0])
    with pytest.raises(ValueError):
        magnitude(np.zeros((0, 3)))


def test_magnitude_and_jerk_match_oracle():
    for seed in rng_seeds:
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 60))
        xyz = rng.normal(0, 3, (n, 3))
        t = np.cumsum(rng.uniform(0.005, 0.05, n))
        np.testing.assert_allclose(magnitude(xyz), oracles.magnitude(xyz.tolist()), rtol=0, atol=1e-12)
        np.testing.assert_allclose(jerk(xyz, t), oracles.jerk(xyz.tolist(), t.tolist()), rtol=0, atol=1e-9)
        np.testing.assert_allclose(jerk(xyz[:, 0], t), oracles.jerk(xyz[:, 0].tolist(), t.tolist()), rtol=0, atol=1e-9)


def test_stat_features_hand_example():
    f = stat_features([1, 2, 3, 4])
    assert (f["mean"], f["median"], f["variance"], f["rmssd"]) == (2.5, 2.5, 1.25, 1.0)


def test_stat_features_constant():
    f = stat_features([7.0] * 10)
    assert f["variance"] == f["rmssd"] == f["iqr"] == f["skewness"] == f["kurtosis"] == 0


def test_stat_features_gaussian_moments():
    x = np.random.default_rng(0).standard_normal(1000)
    f = stat_features(x)
    assert abs(f["skewness"]) < 0.3 and abs(f["kurtosis"]) < 0.3
    o = oracles.stats(x.tolist())
    for k in o:
        assert abs(f[k] - o[k]) <= 1e-9


def test_stat_features_match_oracle():
    for seed in rng_seeds:
        rng = np.random.default_rng(seed)
        x = rng.normal(rng.uniform(-5, 5), rng.uniform(0.1, 5), int(rng.integers(4, 300)))
        f, o = stat_features(x), oracles.stats(x.tolist())
        for k in o:
            assert abs(f[k] - o[k]) <= 1e-9, (seed, k)


def test_stat_features_short():
    with pytest.raises(ValueError):
        stat_features([1, 2, 3])


@given(st.lists(st.floats(-100, 100), min_size=4, max_size=50), st.floats(0, 10))
def test_scale_covariance(values, c):
    v = np.array(values)
    xyz = np.column_stack([v, v[::-1], v * 0.5])
    t = np.arange(len(v)) * 0.02
    np.testing.assert_allclose(magnitude(c * xyz), c * magnitude(xyz), rtol=1e-12, atol=1e-9)
    np.testing.assert_allclose(jerk(c * v, t), c * jerk(v, t), rtol=1e-12, atol=1e-6)
    assert math.isclose(stat_features(c * v)["variance"], c * c * stat_features(v)["variance"],
                        rel_tol=1e-9, abs_tol=1e-9)


# -- SPARC ---------------------------------------------------------------------------

def bell(n, fs, centre, width):
    t = np.arange(n) / fs
    return np.exp(-0.5 * ((t - centre) / width) ** 2)


def test_sparc_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        fs = float(rng.choice([50.0, 100.0, 200.0]))
        n = int(rng.integers(40, 120))
        dur = n / fs
        x = bell(n, fs, rng.uniform(0.3, 0.7) * dur, rng.uniform(0.05, 0.2) * dur)
        x += 0.3 * bell(n, fs, rng.uniform(0.2, 0.8) * dur, rng.uniform(0.03, 0.1) * dur)
        got = sparc(x, fs, 20.0, 0.05)
        want = oracles.sparc(x.tolist(), fs, 20.0, 0.05, 4)
        assert abs(got - want) < 1e-6


def test_sparc_two_bells_less_smooth():
    fs, n = 100.0, 200
    one = bell(n, fs, 1.0, 0.2)
    two = bell(n, fs, 0.6, 0.12) + bell(n, fs, 1.4, 0.12)
    assert sparc(two, fs) < sparc(one, fs)


def test_sparc_errors():
    with pytest.raises(ValueError):
        sparc(np.zeros(64), 100.0)
    with pytest.raises(ValueError):
        sparc(np.ones(8), 100.0)
    with pytest.raises(ValueError):
        sparc(np.ones(64), 30.0)


# -- HRV -----------------------------------------------------------------------------

def test_hrv_time_example():
    h = hrv_time([800, 850, 870, 1000])
    assert h["nni_50"] == 1 and math.isclose(h["pnni_50"], 1 / 3) and h["nni_range"] == 200
    assert h["nni_20"] == 2


def test_hrv_time_constant():
    h = hrv_time([900.0] * 8)
    assert h["sdnn"] == 0 and h["rmssd"] == 0 and h["nni_20"] == 0


def test_hrv_time_matches_oracle():
    for seed in rng_seeds:
        rng = np.random.default_rng(seed)
        rr = rng.normal(850, 60, 300).round(0 if seed % 2 else 3)
        got, want = hrv_time(rr), oracles.hrv_time(rr.tolist())
        for k in want:
            assert abs(got[k] - want[k]) <= 1e-9, (seed, k)


def test_hrv_time_uses_valid_intervals_only():
    rr = RRSeries.from_beats([0, 800, 1600, 1700, 2500, 3300, 4100])
    assert rr.n_dropped == 1
    assert hrv_time(rr)["mean_nni"] == 800


def test_sample_entropy_matches_oracle():
    for seed in rng_seeds:
        rng = np.random.default_rng(seed)
        x = rng.normal(800, 40, int(rng.integers(30, 200))).round()
        r = 0.2 * float(np.std(x))
        want = oracles.sample_entropy(x.tolist(), 2, r)
        if want is None:
            with pytest.raises(ValueError):
                sample_entropy(x, 2, r)
        else:
            assert abs(sample_entropy(x, 2, r) - want) <= 1e-9


def test_sample_entropy_periodic():
    rr = [800, 900] * 50
    h = hrv_nonlinear(rr)
    assert h["sampen"] == oracles.sample_entropy(rr, 2, 0.2 * float(np.std(rr)))
    assert abs(h["sampen"]) < 1e-12


@given(st.lists(st.floats(300, 2000), min_size=10, max_size=200))
def test_sd1_rmssd_identity(rr):
    rmssd = hrv_time(rr)["rmssd"]
    try:
        nl = hrv_nonlinear(rr)
    except ValueError:
        # entropy undefined; the Poincare identity is still checked by hand
        d = np.diff(rr)
        assert math.isclose(math.sqrt(np.mean(d * d) / 2), rmssd / math.sqrt(2), rel_tol=1e-12, abs_tol=1e-12)
        return
    assert abs(nl["sd1"] - rmssd / math.sqrt(2)) <= 1e-12 * max(1.0, rmssd)


def modulated_rr(freq_hz, span_s=300.0, base=800.0, amp=40.0):
    t, out = 0.0, []
    while t < span_s * 1000:
        v = base + amp * math.sin(2 * math.pi * freq_hz * t / 1000.0)
        out.append(v)
        t += v
    return RRSeries.from_intervals(out)


def in_band_shares(rr):
    h = hrv_freq(rr)
    total = h["vlf_power"] + h["lf_power"] + h["hf_power"]
    return h["vlf_power"] / total, h["lf_power"] / total, h["hf_power"] / total


def test_hf_modulation_lands_in_hf():
    assert in_band_shares(modulated_rr(0.25))[2] >= 0.9


def test_lf_modulation_lands_in_lf():
    shares = in_band_shares(modulated_rr(0.1))
    assert shares[1] >= 0.9 and shares[1] > shares[2]


def test_constant_rr_has_no_power():
    h = hrv_freq(RRSeries.from_intervals([850.0] * 120))
    assert max(h["vlf_power"], h["lf_power"], h["hf_power"]) < 1e-10


def test_hrv_freq_span_precondition():
    with pytest.raises(ValueError):
        hrv_freq(RRSeries.from_intervals([800.0] * 50))


@given(st.integers(0, 10 ** 6))
def test_band_additivity(seed):
    rng = np.random.default_rng(seed)
    rr = RRSeries.from_intervals(rng.normal(800, 50, 150))
    h = hrv_freq(rr)
    f, p = rr_psd(rr)
    b = HrvBands()
    sel = (f >= b.vlf[0]) & (f <= b.hf[1])
    total = trapezoid(p[sel], f[sel])
    assert h["vlf_power"] + h["lf_power"] + h["hf_power"] <= total + 1e-9


def test_band_power_needs_two_bins():
    assert band_power(np.array([0.1]), np.array([5.0]), 0.0, 1.0) == 0.0


# -- GSR -----------------------------------------------------------------------------

def test_gsr_flat():
    assert gsr_features(np.full(80, 3.0), 8.0) == {"num_peaks": 0.0, "amplitude_mean": 0.0, "variance": 0.0}


def test_gsr_two_bumps():
    fs = 8.0
    t = np.arange(int(30 * fs)) / fs
    x = 2.0 + 0.5 * np.exp(-0.5 * ((t - 8) / 1.0) ** 2) + 0.5 * np.exp(-0.5 * ((t - 20) / 1.0) ** 2)
    g = gsr_features(x, fs)
    assert g["num_peaks"] == 2 and abs(g["amplitude_mean"] - 0.5) <= 0.05


def test_gsr_small_noise_has_no_peaks():
    x = 2.0 + 0.002 * np.random.default_rng(0).standard_normal(240)
    assert gsr_features(x, 8.0)["num_peaks"] == 0


def test_artifact_screen_affine_copy():
    t = np.arange(0, 60_000, 20)
    mag = 1 + np.sin(t / 700.0)
    res = artifact_screen(t, 3 * mag + 2, t, mag)
    assert math.isclose(res.pearson_r, 1.0, abs_tol=1e-12) and res.contaminated


def test_artifact_screen_independent():
    rng = np.random.default_rng(4)
    t = np.arange(1000) * 250
    a, b = rng.standard_normal(1000), rng.standard_normal(1000)
    res = artifact_screen(t, a, t, b)
    want = np.corrcoef(a, b)[0, 1]
    assert abs(res.pearson_r - want) < 1e-12 and abs(res.pearson_r) < 0.1 and not res.contaminated


def test_artifact_screen_constant_gsr():
    t = np.arange(1000) * 250
    with pytest.raises(ValueError):
        artifact_screen(t, np.ones(1000), t, np.arange(1000.0))


# -- registry, window extraction and baseline -----------------------------------------

def test_registry_partition():
    assert len(FEATURE_NAMES) == len(set(FEATURE_NAMES)) == FEATURE_COUNT
    for f in FEATURES:
        assert FEATURE_GROUP[f.name] in SENSOR_GROUPS


def test_full_window_has_every_feature():
    one = generate(SynthConfig(n_users=1, n_trials_per_user=1))
    fvs = featurize_trial(one.sensors, TrialKey("U01", 1), PipelineConfig())
    assert max(len(fv.features) for fv in fvs) == FEATURE_COUNT
    for fv in fvs:
        assert set(fv.features) <= set(FEATURE_NAMES)


def test_window_without_gsr(small_synth):
    key = TrialKey("U01", 2)
    s = small_synth.sensors
    no_gsr = type(s)({k: v for k, v in s.streams.items() if v.sensor_type.group != "GSR"}, s.beats)
    w = Window(key, 15.0, 45.0, 1)
    full = extract_window_features(w, s)
    masked = extract_window_features(w, no_gsr)
    assert not any(FEATURE_GROUP[n] == "GSR" for n in masked.features)
    assert {n for n in full.features if FEATURE_GROUP[n] != "GSR"} == set(masked.features)
    assert extract_window_features(w, s) == full


def fv(user, feats, normalized=False):
    return FeatureVector(Window(TrialKey(user, 101), 0, 30, 0), feats, {k: "IMU" for k in feats}, normalized)


def test_baseline_means():
    assert baseline_from_vectors([fv("a", {"f": 4.0})]).get("a", "f") == 4.0
    assert baseline_from_vectors([fv("a", {"f": 2.0}), fv("a", {"f": 6.0})]).get("a", "f") == 4.0


def test_baseline_profile_matches_mean_oracle(small_synth):
    cfg = PipelineConfig()
    prof = build_baseline(small_synth.sensors, cfg)
    user = "U02"
    vectors = [v for t in cfg.baseline_trials for v in featurize_trial(small_synth.sensors, TrialKey(user, t), cfg)]
    for name in ("imu_wrist_x_variance", "gsr_fingertips_mean", "hrv_rmssd"):
        vals = [v.features[name] for v in vectors if name in v.features]
        assert abs(prof.get(user, name) - oracles.mean(vals)) <= 1e-12 * max(1, abs(oracles.mean(vals)))


def test_normalize_examples():
    prof = BaselineProfile({("a", "f"): 5.0, ("a", "z"): 0.0})
    out = normalize(fv("a", {"f": 10.0}), prof)
    assert out.features["f"] == 2.0 and out.normalized
    z = normalize(fv("a", {"z": 3.0}), prof, eps=1e-8)
    assert z.features["z"] == 3.0 / 1e-8


def test_self_normalization_gives_ones():
    base = fv("a", {"f": 3.0, "g": -2.0})
    out = normalize(base, baseline_from_vectors([base]))
    assert out.features == {"f": 1.0, "g": 1.0}


def test_normalize_missing_baseline():
    with pytest.raises(KeyError):
        normalize(fv("b", {"f": 1.0}), BaselineProfile({("a", "f"): 1.0}))
    assert normalize(fv("b", {"f": 1.0}), BaselineProfile({("a", "f"): 1.0}), strict=False).features == {}
