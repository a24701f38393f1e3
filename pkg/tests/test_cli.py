import io
import json
from pathlib import Path

import pytest

from emltrack.cli import COMMANDS, run
from emltrack.synth import SynthConfig, generate

GOLDEN = Path(__file__).parent / "golden"
SMALL_FLAGS = ["--users", "4", "--trials", "12", "--duration", "60", "--discomfort-rate", "0.25"]


def call(argv, environ=None, stdin=None):
    out, err = io.StringIO(), io.StringIO()
    code = run(argv, out=out, err=err, environ=environ or {}, stdin=stdin)
    return code, out.getvalue(), err.getvalue()


def help_text(argv, capsys, monkeypatch):
    monkeypatch.setenv("COLUMNS", "80")
    capsys.readouterr()
    assert run(argv, environ={}) == 0
    return capsys.readouterr().out


@pytest.mark.parametrize("command", [None] + list(COMMANDS))
def test_golden_help(command, capsys, monkeypatch):
    argv = ["--help"] if command is None else [command, "--help"]
    name = "emltrack" if command is None else command
    assert help_text(argv, capsys, monkeypatch) == (GOLDEN / f"{name}.txt").read_text(encoding="utf-8")


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "d"
    code, out, err = call(["synth", "--seed", "7", "--out", str(d)] + SMALL_FLAGS)
    assert code == 0, err
    return d


def test_synth_then_eval(data_dir):
    code, out, err = call(["eval", "--data", str(data_dir)])
    assert code == 0, err
    report = json.loads((data_dir / "eval_report.json").read_text())
    assert len(report["folds"]) == 5 and "f1" in report["summary"]


def test_synth_matches_library(data_dir, tmp_path):
    cfg = SynthConfig(n_users=4, n_trials_per_user=12, trial_duration_s=60.0, discomfort_rate=0.25, seed=7)
    lib = generate(cfg).write(tmp_path / "lib")
    for name in ("sensors.csv", "questionnaire.csv"):
        assert (lib / name).read_bytes() == (data_dir / name).read_bytes()


def test_ingest_and_label(data_dir, tmp_path):
    code, out, _ = call(["ingest", "--data", str(data_dir), "--registry", str(tmp_path / "reg.csv")])
    assert code == 0 and (tmp_path / "reg.csv").exists()
    code, out, _ = call(["label", "--data", str(data_dir), "--out", str(tmp_path / "labels")])
    assert code == 0


def test_train_and_stream(data_dir, tmp_path):
    from emltrack.ingest import load_dataset_dir, sensor_lines
    from emltrack.data_model import TrialKey

    model = tmp_path / "m.json"
    code, out, err = call(["train", "--data", str(data_dir), "--model", str(model)])
    assert code == 0, err
    sensors, _ = load_dataset_dir(data_dir)
    lines = "".join(line + "\n" for line in sensor_lines(sensors, TrialKey("U01", 1)))
    code, out, err = call(["stream", "--model", str(model)], stdin=io.StringIO(lines))
    assert code == 0, err
    events = [json.loads(l) for l in out.splitlines()]
    assert [e["t_s"] for e in events] == [30.0, 45.0, 60.0]


def test_featurize(data_dir, tmp_path):
    code, _, err = call(["featurize", "--data", str(data_dir), "--out", str(tmp_path / "f")])
    assert code == 0, err


def test_eval_without_data():
    code, _, err = call(["eval"])
    assert code == 2 and "--data" in err


def test_step_exceeds_window(data_dir, tmp_path):
    code, _, err = call(["train", "--data", str(data_dir), "--model", str(tmp_path / "m"),
                         "--step", "40", "--window", "30"])
    assert code == 1 and "step exceeds window" in err


def test_unknown_subcommand():
    assert call(["frobnicate"])[0] == 2


def test_no_subcommand():
    code, _, err = call([])
    assert code == 2 and "command is required" in err


def test_unknown_config_file_key(tmp_path):
    cfg = tmp_path / "c.conf"
    cfg.write_text("window = 30\ncolour = blue\n")
    code, _, err = call(["eval", "--data", "x", "--config", str(cfg)])
    assert code == 1 and "unknown config key: colour" in err


def test_unknown_env_key():
    code, _, err = call(["eval", "--data", "x"], environ={"EMLTRACK_COLOUR": "blue"})
    assert code == 1 and "unknown config key: colour" in err


def test_precedence(tmp_path):
    from emltrack.cli import build_parser, resolve_settings

    cfg = tmp_path / "c.conf"
    cfg.write_text("window = 20\nstep = 5\nseed = 1\n")
    args = build_parser().parse_args(["eval", "--config", str(cfg), "--seed", "3"])
    s = resolve_settings(args, {"EMLTRACK_STEP": "10", "EMLTRACK_SEED": "2"})
    assert s["window"] == 20.0 and s["step"] == 10.0 and s["seed"] == 3


def test_bad_value():
    code, _, err = call(["eval", "--data", "x", "--folds", "many"])
    assert code == 1 and "invalid value for folds" in err


def test_missing_data_dir(tmp_path):
    code, _, err = call(["ingest", "--data", str(tmp_path / "nowhere")])
    assert code == 1
