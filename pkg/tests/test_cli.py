import json
import subprocess
import sys

import numpy as np
import pytest

from nikodym_lab.artifacts import read_csv
from nikodym_lab.cli import EXIT_ERROR, EXIT_INCONCLUSIVE, EXIT_OK, main


def run(*argv):
    try:
        return main([str(a) for a in argv])
    except SystemExit as exc:
        return exc.code


def write_sweep_csv(path, pairs):
    lines = ["delta,numerator,denominator,ratio,grid_n,seconds"]
    lines += [f"{d!r},1,1,{r!r},64," for d, r in pairs]
    path.write_text("\n".join(lines) + "\n")


@pytest.mark.parametrize("a", [0.0, 0.1, -0.2])
def test_flat_shoot_follows_the_first_axis(tmp_path, a):
    out = tmp_path / "shoot.csv"
    rc = run("shoot", "--set", "metric.variant=flat", "--x0", f"0,{a},0", "--p0", "1,0,0",
             "--out", out)
    assert rc == EXIT_OK
    header, rows, cfg = read_csv(out)
    assert header[:4] == ["s", "x1", "x2", "x3"]
    table = np.array([[float(r[k]) for k in ("s", "x1", "x2", "x3")] for r in rows])
    np.testing.assert_allclose(table[:, 1], table[:, 0], atol=1e-12)
    np.testing.assert_allclose(table[:, 2], a, atol=1e-12)
    np.testing.assert_allclose(table[:, 3], 0, atol=1e-12)
    assert cfg.get("metric", "variant") == "flat"


def test_fit_on_exact_power_law(tmp_path):
    src = tmp_path / "sweep.csv"
    write_sweep_csv(src, [(2.0 ** -k, 3 * 2.0 ** (0.4 * k)) for k in range(4, 8)])
    out = tmp_path / "fit.json"
    assert run("fit", src, "--out", out) == EXIT_OK
    result = json.loads(out.read_text())["result"]
    assert result["slope"] == pytest.approx(-0.4, abs=1e-10)
    assert result["n"] == 4
    assert result["verdict"] == "BREAKDOWN"
    assert result["q"] == pytest.approx(10 / 3)
    for key in ("stderr", "intercept", "trivial_exponent", "predicted_exponent", "p",
                "threshold_p"):
        assert key in result


def test_fit_reports_inconclusive_with_status_two(tmp_path):
    src = tmp_path / "sweep.csv"
    write_sweep_csv(src, [(0.5, 1.0), (0.25, 20.0), (0.125, 0.05), (0.0625, 8.0)])
    out = tmp_path / "fit.json"
    assert run("fit", src, "--out", out) == EXIT_INCONCLUSIVE
    assert json.loads(out.read_text())["result"]["verdict"] == "INCONCLUSIVE"


def test_fit_skips_failed_rows(tmp_path):
    src = tmp_path / "sweep.csv"
    pairs = [(2.0 ** -k, 2.0 ** (0.5 * k)) for k in range(3, 7)]
    write_sweep_csv(src, pairs + [(2.0 ** -8, float("nan"))])
    out = tmp_path / "fit.json"
    assert run("fit", src, "--out", out) == EXIT_OK
    assert json.loads(out.read_text())["result"]["n"] == 4


def test_fit_with_too_few_rows_fails(tmp_path, capsys):
    src = tmp_path / "sweep.csv"
    write_sweep_csv(src, [(0.5, 1.0), (0.25, 2.0)])
    assert run("fit", src, "--out", tmp_path / "fit.json") == EXIT_ERROR
    assert "need at least" in capsys.readouterr().err


def test_bad_config_reports_line(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[metric]\ndim = 3\n\n[flow]\nstep = fast\n")
    assert run("shoot", "--config", cfg, "--out", tmp_path / "x.csv") == EXIT_ERROR
    err = capsys.readouterr().err
    assert "config error" in err and "line 5" in err


def test_unknown_override_fails(tmp_path):
    assert run("shoot", "--set", "metric.colour=red", "--out", tmp_path / "x.csv") == EXIT_ERROR


def test_usage_errors_exit_one():
    assert run("shoot", "--no-such-flag") == EXIT_ERROR
    assert run("teleport") == EXIT_ERROR


def test_wrong_vector_length_fails(tmp_path):
    assert run("shoot", "--x0", "0,0", "--out", tmp_path / "x.csv") == EXIT_ERROR


def test_identical_runs_are_byte_identical(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    args = ("shoot", "--x0", "0.05,0,0", "--p0", "1,0.2,0.1", "--s-max", "0.2")
    assert run(*args, "--out", a) == EXIT_OK
    assert run(*args, "--out", b) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()


def test_lemma_check_csv(tmp_path):
    out = tmp_path / "lemma.csv"
    assert run("lemma-check", "--points", 10, "--out", out) == EXIT_OK
    header, rows, _ = read_csv(out)
    assert header == ["s", "det_xi11", "bound", "margin", "verdict"]
    assert len(rows) == 10
    assert all(float(r["margin"]) > 0 for r in rows)


def test_invert_json(tmp_path):
    out = tmp_path / "inv.json"
    assert run("invert", "--target", "0.05,0.01,0.0001", "--out", out) == EXIT_OK
    rec = json.loads(out.read_text())["result"]
    assert set(rec) >= {"a", "theta", "s", "residual", "iterations"}
    assert rec["residual"] <= 1e-8


def test_maximal_writes_summary(tmp_path):
    out = tmp_path / "m.csv"
    rc = run("maximal", "--set", "maximal.region_n=1", "--grid-n", 64, "--out", out)
    assert rc == EXIT_OK
    header, rows, _ = read_csv(out)
    assert header[3] == "value" and len(rows) == 1
    summary = json.loads((tmp_path / "m.summary.json").read_text())
    assert summary["artifact"] == "maximal-summary"


TINY_VERIFY = """
[metric]
variant = flat
[maximal]
grid_n = 32
region_n = 1
min_cells = 1
[sweep]
deltas = 0.125, 0.0625, 0.03125
grid_floor = 32
grid_cap = 32
min_points = 3
"""


def test_verify_runs_the_pipeline(tmp_path):
    cfg = tmp_path / "tiny.ini"
    cfg.write_text(TINY_VERIFY)
    out = tmp_path / "verify.json"
    rc = run("verify", "--config", cfg, "--out", out)
    doc = json.loads(out.read_text())["result"]
    assert rc == (EXIT_INCONCLUSIVE if doc["verdict"] == "INCONCLUSIVE" else EXIT_OK)
    assert doc["lemma"]["verdict"] in (True, False)
    assert len(doc["sweep"]) == 3
    assert doc["fit"]["n"] == 3


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "nikodym_lab.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "verify" in proc.stdout
