import filecmp

import numpy as np
import pytest

from emltrack.data_model import PipelineConfig, validate_dataset
from emltrack.eval import cross_validate
from emltrack.ingest import load_dataset_dir
from emltrack.labeling import eml_items, extract_factor
from emltrack.pipeline import build_dataset
from emltrack.synth import SynthConfig, generate, with_strength

TINY = SynthConfig(n_users=2, n_trials_per_user=3, trial_duration_s=35.0, baseline_durations_s=(30.0,) * 4, seed=4)
QUICK = dict(trial_duration_s=5.0, baseline_durations_s=(5.0,) * 4, motion_hz=5.0, gsr_hz=2.0, resp_hz=1.0)


def test_rerun_is_byte_identical(tmp_path):
    a = generate(TINY).write(tmp_path / "a")
    b = generate(TINY).write(tmp_path / "b")
    names = ["sensors.csv", "rr.csv", "questionnaire.csv", "ground_truth.csv"]
    match, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    assert match == names and not mismatch and not errors


def test_seed_changes_output():
    a, b = generate(TINY), generate(SynthConfig(**{**TINY.__dict__, "seed": 5}))
    assert [r.feel_calm for r in a.questionnaire] != [r.feel_calm for r in b.questionnaire]


def test_written_files_validate(tmp_path):
    out = generate(TINY).write(tmp_path / "d")
    sensors, qnr = load_dataset_dir(out)
    report = validate_dataset(sensors, qnr)
    assert report.ok and report.issues == ()


def test_ecg_mode_validates(tmp_path):
    cfg = SynthConfig(n_users=1, n_trials_per_user=1, trial_duration_s=30.0, baseline_durations_s=(30.0,) * 4,
                      write_ecg=True, seed=2)
    out = generate(cfg).write(tmp_path / "e")
    assert not (out / "rr.csv").exists()
    sensors, qnr = load_dataset_dir(out)
    assert validate_dataset(sensors, qnr).issues == ()


def test_questionnaire_shape_and_ranges():
    res = generate(TINY)
    assert len(res.questionnaire) == 6 and len(res.ground_truth) == 6
    for r in res.questionnaire:
        assert all(1 <= v <= 10 for v in r.ratings().values())


def test_discomfort_ratings_follow_latent_class():
    res = generate(SynthConfig(n_users=3, n_trials_per_user=29, discomfort_rate=0.3, seed=1, **QUICK))
    truth = {g.key: g.latent_discomfort.value for g in res.ground_truth}
    for r in res.questionnaire:
        assert (r.feel_uncomfortable >= 9) == (truth[r.key] == "high")


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_paf_recovers_loadings(seed):
    res = generate(SynthConfig(n_users=20, n_trials_per_user=29, seed=seed, **QUICK))
    cfg = res.config
    got = extract_factor(eml_items(res.questionnaire), "paf").loadings[:, 0]
    # item columns are calm, inverted nervous, at ease
    want = np.array([cfg.loadings[0], cfg.loadings[2], cfg.loadings[1]])
    np.testing.assert_allclose(got, want, atol=0.05)


def test_invalid_configs():
    with pytest.raises(ValueError, match="at least one user"):
        SynthConfig(n_users=0)
    with pytest.raises(ValueError, match="discomfort_rate"):
        SynthConfig(discomfort_rate=1.5)
    with pytest.raises(ValueError, match="loadings"):
        SynthConfig(loadings=(1.0, 0.5, 0.5))
    with pytest.raises(ValueError, match="must be positive"):
        SynthConfig(motion_hz=0)


def test_with_strength_zero_removes_effects():
    cfg = with_strength(SynthConfig(), 0.0)
    assert cfg.eml_motion_volatility == 0 and cfg.hrv_hf_shift == 0


@pytest.fixture(scope="module")
def strength_f1():
    base = SynthConfig(n_users=4, n_trials_per_user=15, discomfort_rate=0.25, seed=0)
    out = {}
    for s in (0.0, 0.1, 0.3):
        res = generate(with_strength(base, s))
        ds = build_dataset(res.sensors, res.questionnaire, PipelineConfig(jobs=2))
        out[s] = cross_validate(ds).mean_f1
    return out


def test_null_strength_is_chance(strength_f1):
    assert abs(strength_f1[0.0] - 0.5) <= 0.1


def test_recoverability_monotone(strength_f1):
    assert strength_f1[0.0] < strength_f1[0.1] < strength_f1[0.3]
