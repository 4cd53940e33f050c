from __future__ import annotations

import json
import subprocess
import sys
import textwrap

import pytest

from bhlab import cli
from bhlab.config import ConfigError, load_config, parse_config

MINIMAL = """\
schema_version: 1
experiment: homog_elliptic
seed: 7
law:
  dimension: 2
  family: constant
  params: [1.0]
g:
  kind: affine
  slope: [1.0, -0.5]
ladder: [9, 27]
replicas: 1
output: run
"""


def write(tmp_path, text, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(textwrap.dedent(text))
    return p


def test_validate_ok(tmp_path, capsys):
    assert cli.main(["validate", str(write(tmp_path, MINIMAL))]) == cli.EXIT_OK
    assert capsys.readouterr().out.strip() == "ok"


def test_minimal_run_exact(tmp_path):
    path = write(tmp_path, MINIMAL)
    assert cli.main(["run", str(path)]) == cli.EXIT_OK
    run = tmp_path / "run"
    summary = json.loads((run / "homog_elliptic.json").read_text())
    assert summary["passed"] and summary["seed"] == 7
    lines = (run / "homog_elliptic.csv").read_text().splitlines()
    assert lines[0] == "R,replica,env_seed,max_error,iterations,residual,status"
    assert all(float(l.split(",")[3]) <= 1e-11 for l in lines[1:])
    manifest = json.loads((run / cli.MANIFEST).read_text())
    assert manifest["config_digest"] == load_config(path).digest()
    assert {"seed", "workers", "versions", "wall_time_seconds"} <= set(manifest)


def test_rerun_is_byte_identical(tmp_path):
    path = write(tmp_path, MINIMAL)
    assert cli.main(["run", str(path), "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["run", str(path), "--out", str(tmp_path / "b")]) == 0
    for name in ("homog_elliptic.csv", "config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_report(tmp_path, capsys):
    path = write(tmp_path, MINIMAL)
    cli.main(["run", str(path)])
    capsys.readouterr()
    assert cli.main(["report", str(tmp_path / "run")]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "experiment homog_elliptic" in out and "[PASS] decreasing" in out
    assert (tmp_path / "run" / "report.txt").exists()
    assert cli.main(["report", str(tmp_path)]) == cli.EXIT_ERROR


def test_kappa_violation_names_assumption(tmp_path, capsys):
    text = MINIMAL.replace("params: [1.0]", "family: uniform\n  params: [0.5, 2.0]\n  kappa: 0.3").replace(
        "  family: constant\n", "")
    path = write(tmp_path, text)
    assert cli.main(["run", str(path)]) == cli.EXIT_ERROR
    err = capsys.readouterr().err
    assert "ellipticity assumption" in err and f"{path}:5:" in err


def test_missing_seed_named(tmp_path, capsys):
    path = write(tmp_path, MINIMAL.replace("seed: 7\n", ""))
    assert cli.main(["validate", str(path)]) == cli.EXIT_ERROR
    assert "missing required field 'seed'" in capsys.readouterr().err


def test_parabolic_one_sided_law_rejected():
    text = MINIMAL.replace("homog_elliptic", "homog_parabolic").replace("params: [1.0]", "params: [0.1]")
    with pytest.raises(ConfigError, match="two-sided"):
        parse_config(text, "p.yaml")


def test_schema_errors_are_line_precise():
    with pytest.raises(ConfigError) as info:
        parse_config(MINIMAL.replace("ladder: [9, 27]", "ladder: [9, -27]"), "x.yaml")
    assert info.value.line == 11 and "ladder[1]" in str(info.value)
    with pytest.raises(ConfigError) as info:
        parse_config(MINIMAL + "bogus: 1\n", "x.yaml")
    assert "bogus" in str(info.value)
    with pytest.raises(ConfigError, match="invalid YAML"):
        parse_config("a: [1, 2\n", "x.yaml")
    with pytest.raises(ConfigError, match="strictly increasing"):
        parse_config(MINIMAL.replace("[9, 27]", "[27, 9]"))


def test_invariant_checks():
    with pytest.raises(ConfigError, match="unit vector"):
        parse_config(MINIMAL.replace("homog_elliptic", "berry_esseen") + "walks: 10\ndirection: [1.0, 1.0]\n")
    with pytest.raises(ConfigError, match="walks"):
        parse_config(MINIMAL.replace("homog_elliptic", "ergodicity"))
    with pytest.raises(ConfigError, match="census"):
        parse_config(MINIMAL.replace("homog_elliptic", "census"))
    with pytest.raises(ConfigError, match="1..4"):
        parse_config(MINIMAL.replace("homog_elliptic", "mu_decay").replace("[9, 27]", "[1, 5]"))
    with pytest.raises(ConfigError, match="psi"):
        parse_config(MINIMAL + "psi: nonsense\n")


def test_digest_ignores_layout():
    a = parse_config(MINIMAL)
    b = parse_config(MINIMAL.replace("ladder: [9, 27]", "ladder:\n  - 9\n  - 27"))
    assert a.digest() == b.digest()
    assert parse_config(MINIMAL.replace("seed: 7", "seed: 8")).digest() != a.digest()


def test_module_entry_point(tmp_path):
    path = write(tmp_path, MINIMAL)
    proc = subprocess.run([sys.executable, "-m", "bhlab", "validate", str(path)], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip() == "ok"


def test_failed_acceptance_gives_exit_two(tmp_path):
    # a one-rung increase in error cannot be "decreasing"
    text = MINIMAL.replace("kind: affine\n  slope: [1.0, -0.5]", "kind: cosine_boundary\n  frequency: 4").replace(
        "[9, 27]", "[2, 3]").replace("params: [1.0]", "params: [1.0, 3.0]")
    path = write(tmp_path, text)
    code = cli.main(["run", str(path)])
    summary = json.loads((tmp_path / "run" / "homog_elliptic.json").read_text())
    assert code == (cli.EXIT_OK if summary["passed"] else cli.EXIT_FAILED)
