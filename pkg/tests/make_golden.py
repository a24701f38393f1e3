"""Regenerate tests/golden/*.txt help text (run after changing CLI options)."""
import contextlib
import io
import os
from pathlib import Path

from emltrack.cli import COMMANDS, run

os.environ["COLUMNS"] = "80"
golden = Path(__file__).parent / "golden"
golden.mkdir(exist_ok=True)
for name in ["emltrack"] + list(COMMANDS):
    argv = ["--help"] if name == "emltrack" else [name, "--help"]
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        run(argv, environ={})
    (golden / f"{name}.txt").write_text(buf.getvalue(), encoding="utf-8")
