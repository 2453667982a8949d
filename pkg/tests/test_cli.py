import json
import subprocess
import sys

import numpy as np
import pytest

from tled.cli import (
    EXIT_INSTABILITY, EXIT_INVALID_INPUT, EXIT_NOT_CONVERGED, EXIT_OK, EXIT_VERIFY_FAILED, default_threads, main,
)
from tled.errors import TledError
from tled.metrics import write_points_csv


def edit_config(workspace, **solver):
    data = json.loads((workspace / "run.json").read_text())
    data["solver"].update(solver)
    (workspace / "run.json").write_text(json.dumps(data))
    return str(workspace / "run.json")


@pytest.fixture
def point_csvs(tmp_path):
    write_points_csv(tmp_path / "a.csv", [[0.0, 0, 0]])
    write_points_csv(tmp_path / "b.csv", [[3.0, 4, 0]])
    return str(tmp_path / "a.csv"), str(tmp_path / "b.csv")


class TestExitCodes:
    def test_solve_ok(self, workspace, capsys):
        assert main(["solve", str(workspace / "run.json"), "--threads", "1"]) == EXIT_OK
        out = json.loads(capsys.readouterr().out)
        assert out["converged"] and (workspace / "out" / "displacements.csv").exists()

    def test_not_converged(self, workspace, capsys):
        assert main(["solve", edit_config(workspace, max_iterations=5)]) == EXIT_NOT_CONVERGED
        assert "did not converge" in capsys.readouterr().err
        assert (workspace / "out" / "displacements.csv").exists()

    def test_instability(self, workspace, capsys):
        assert main(["solve", edit_config(workspace, dt_safety=1.5)]) == EXIT_INSTABILITY
        assert "error:" in capsys.readouterr().err

    def test_invalid_config(self, tmp_path, capsys):
        (tmp_path / "bad.json").write_text('{"geometry": {}}')
        assert main(["solve", str(tmp_path / "bad.json")]) == EXIT_INVALID_INPUT
        assert "ConfigError" in capsys.readouterr().err

    def test_missing_config(self, tmp_path):
        assert main(["solve", str(tmp_path / "none.json")]) == EXIT_INVALID_INPUT

    def test_solve_then_warp(self, workspace, capsys):
        cfg = str(workspace / "run.json")
        assert main(["solve", cfg]) == EXIT_OK
        assert main(["warp", cfg]) == EXIT_OK
        out = capsys.readouterr().out
        assert "warped.json" in out

    def test_verify_unknown_suite(self, capsys):
        assert main(["verify", "nonsense"]) == EXIT_INVALID_INPUT

    def test_verify_failure_exit(self, monkeypatch, capsys):
        monkeypatch.setenv("TLED_HOURGLASS_KAPPA", "0")
        assert main(["verify", "hourglass", "--threads", "1"]) == EXIT_VERIFY_FAILED
        assert "FAIL hourglass" in capsys.readouterr().err


class TestMetricsCommand:
    def test_report(self, point_csvs, capsys):
        assert main(["metrics", *point_csvs]) == EXIT_OK
        rep = json.loads(capsys.readouterr().out)
        assert rep["hausdorff_mm"] == 5.0 and rep["threshold_mm"] == 1.7 and rep["percentile"] == 95.0

    def test_options_and_output(self, point_csvs, tmp_path, capsys):
        out = tmp_path / "r.json"
        assert main(["metrics", *point_csvs, "--percentile", "100", "--threshold", "6", "--output", str(out)]) == 0
        rep = json.loads(out.read_text())
        assert rep["threshold_mm"] == 6.0 and rep["success_percentile"] == 100.0

    def test_bad_percentile(self, point_csvs):
        assert main(["metrics", *point_csvs, "--percentile", "0"]) == EXIT_INVALID_INPUT


class TestThreads:
    def test_env(self, monkeypatch):
        monkeypatch.setenv("TLED_THREADS", "3")
        assert default_threads() == 3

    @pytest.mark.parametrize("value", ["zero", "0", "-2"])
    def test_bad_env(self, monkeypatch, value):
        monkeypatch.setenv("TLED_THREADS", value)
        with pytest.raises(TledError, match="TLED_THREADS"):
            default_threads()

    def test_bad_env_exit_code(self, monkeypatch, point_csvs):
        monkeypatch.setenv("TLED_THREADS", "many")
        assert main(["metrics", *point_csvs]) == EXIT_INVALID_INPUT

    def test_flag_rejects_zero(self, point_csvs):
        assert main(["metrics", *point_csvs, "--threads", "0"]) == EXIT_INVALID_INPUT

    def test_thread_count_does_not_change_result(self, workspace):
        cfg = str(workspace / "run.json")
        out = []
        for n in ("1", "4"):
            assert main(["solve", cfg, "--threads", n]) == EXIT_OK
            out.append((workspace / "out" / "displacements.csv").read_bytes())
        assert out[0] == out[1]


def test_module_entry_point(point_csvs):
    proc = subprocess.run([sys.executable, "-m", "tled.cli", "metrics", *point_csvs],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert np.isclose(json.loads(proc.stdout)["hausdorff_mm"], 5.0)
