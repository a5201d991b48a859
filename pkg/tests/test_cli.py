"""Smoke tests for the command line interface."""

import numpy as np
import pytest

from rcracer.cli import main
from rcracer.sim import Scenario, run, save_scenario, save_telemetry


def test_run_writes_telemetry_and_report(tmp_path, capsys):
    scn = tmp_path / "scn.txt"
    save_scenario(Scenario(laps=1, max_time=1.0), scn)
    out = tmp_path / "tele.csv"
    code = main(["run", "--scenario", str(scn), "--out", str(out)])
    captured = capsys.readouterr().out
    assert code == 0
    assert out.exists()
    assert "wrote" in captured


def test_plot_subcommand(tmp_path, capsys):
    res = run(Scenario(laps=1, max_time=1.0))
    tele = tmp_path / "t.csv"
    save_telemetry(res.telemetry, tele)
    code = main(["plot", str(tele), "--out", str(tmp_path / "plots")])
    assert code == 0
    assert (tmp_path / "plots" / "trajectory.svg").exists()


def test_trims_subcommand(tmp_path, capsys):
    out = tmp_path / "lib.txt"
    code = main(["trims", "--out", str(out)])
    captured = capsys.readouterr().out
    assert code == 0
    assert out.exists()
    assert "95 trims" in captured


def test_bench_subcommand(capsys):
    code = main(["bench", "--horizons", "4,8", "--reps", "1"])
    captured = capsys.readouterr().out
    assert code == 0
    assert "linear fit" in captured


def test_dp_demo_subcommand(tmp_path, capsys):
    from rcracer.corridor import Obstacle
    scn = tmp_path / "scn.txt"
    save_scenario(Scenario(obstacles=(Obstacle(0.5, 0.2, 0.07),)), scn)
    code = main(["dp-demo", "--scenario", str(scn), "--layers", "8"])
    captured = capsys.readouterr().out
    assert code == 0
    assert "theta" in captured
