import json
from pathlib import Path

import numpy as np
import pytest

from teleimmersion.cli import main
from teleimmersion.config import AppConfig, parse_value
from teleimmersion.errors import ConfigError, FormatError
from teleimmersion.report import render_table, use_color
from teleimmersion.rgbdio import read_pgm

GOLDEN = Path(__file__).parent / "golden"
FAST = ["--set", "scene.frame_count=4", "--set", "accuracy.grid=3,3,3"]


def test_no_args_prints_usage_and_exits_1(capsys):
    assert main([]) == 1
    assert "usage:" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["frobnicate"],
    ["simulate", "--set", "nope.key=1", "--out", "x.json"],
    ["simulate", "--set", "scene.seed=abc", "--out", "x.json"],
    ["simulate", "--set", "novalue", "--out", "x.json"],
    ["segment", "--frame", "a.rgbd"],
    ["report", "--format", "xml", "--in", "r.json"],
])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1
    assert capsys.readouterr().out == ""


def test_missing_scene_file_exits_2_with_path(capsys, tmp_path):
    missing = tmp_path / "missing.cfg"
    assert main(["simulate", "--scene", str(missing), "--out", str(tmp_path / "r.json")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_report_table_matches_golden(capsys, monkeypatch):
    monkeypatch.setenv("NO_COLOR", "1")
    assert main(["report", "--in", str(GOLDEN / "report.json"), "--format", "table", "--color", "always"]) == 0
    assert capsys.readouterr().out == (GOLDEN / "report_table.txt").read_text()


def test_report_json_and_color(capsys, monkeypatch):
    monkeypatch.delenv("NO_COLOR", raising=False)
    assert main(["report", "--in", str(GOLDEN / "report.json"), "--format", "json"]) == 0
    assert json.loads(capsys.readouterr().out) == json.loads((GOLDEN / "report.json").read_text())
    assert main(["report", "--in", str(GOLDEN / "report.json"), "--color", "always"]) == 0
    assert "\x1b[32mPASS" in capsys.readouterr().out
    assert not use_color(None, "auto")


def test_report_bad_input_exits_2(tmp_path, capsys):
    bad = tmp_path / "r.json"
    bad.write_text("[1, 2")
    assert main(["report", "--in", str(bad)]) == 2
    assert "r.json" in capsys.readouterr().err
    assert render_table({}) == "(empty report)\n"


def test_print_config_round_trips(capsys):
    assert main(["report", "--print-config", "--set", "segmentation.w_p=3.5", "--seed", "9"]) == 0
    text = capsys.readouterr().out
    cfg = AppConfig.from_text(text)
    assert cfg.segmentation.w_p == 3.5 and cfg.scene.seed == 9 and cfg.bench.seed == 9
    assert cfg.to_text() == text
    assert set(AppConfig().flat()) <= {line.split(" = ")[0] for line in text.splitlines()}


def test_params_file_is_loaded(tmp_path, capsys):
    p = tmp_path / "p.cfg"
    p.write_text("# comment\ntracking.morph_radius = 3\n")
    assert main(["report", "--params", str(p), "--print-config"]) == 0
    assert "tracking.morph_radius = 3\n" in capsys.readouterr().out
    p.write_text("tracking.morph_radius\n")
    assert main(["report", "--params", str(p), "--print-config"]) == 2


def test_simulate_is_byte_reproducible(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["simulate", "--seed", "3", "--out", str(a)] + FAST) == 0
    assert main(["simulate", "--seed", "3", "--out", str(b)] + FAST) == 0
    assert a.read_bytes() == b.read_bytes()
    data = json.loads(a.read_text())
    assert {"accuracy", "tracking", "timing", "config_echo"} <= set(data)
    assert data["config_echo"]["scene.seed"] == 3


def test_stage_subcommands_on_generated_frames(tmp_path, capsys):
    frames = tmp_path / "frames"
    assert main(["simulate", "--out", str(tmp_path / "r.json"), "--frames-out", str(frames)] + FAST) == 0
    capsys.readouterr()
    mask = tmp_path / "m.pgm"
    bg = tmp_path / "bg.npz"
    assert main(["segment", "--frame", str(frames / "frame_0000.rgbd"), "--background", str(frames / "background"),
                 "--out", str(mask), "--save-background", str(bg)]) == 0
    assert capsys.readouterr().out.startswith("energy ")
    assert read_pgm(mask).shape == (424, 512) and read_pgm(mask).any()
    csv_path = tmp_path / "track.csv"
    assert main(["track", "--frames", str(frames), "--background", str(bg), "--out", str(csv_path)]) == 0
    rows = csv_path.read_text().splitlines()
    assert len(rows) == 5 and rows[1].split(",")[2] == "DEPTH"
    scene = tmp_path / "boxes.txt"
    scene.write_text("0 0 0 0 1 1 1\n1 0.5 0.5 0.5 2 2 2\n2 5 5 5 6 6 6\n")
    assert main(["collide", "--scene", str(scene)]) == 0
    assert capsys.readouterr().out == "0 1\n"


def test_data_errors_exit_2(tmp_path, capsys):
    assert main(["collide", "--scene", str(tmp_path / "none.txt")]) == 2
    assert main(["serve", "--replay", str(tmp_path / "none.log")]) == 2
    assert main(["track", "--frames", str(tmp_path), "--background", str(tmp_path)]) == 2
    assert "none.txt" in capsys.readouterr().err


def test_config_overrides_validate():
    cfg = AppConfig()
    with pytest.raises(ConfigError):
        cfg.with_overrides({"bogus": "1"})
    with pytest.raises(ConfigError):
        cfg.with_overrides({"server.capacity": "0"})
    with pytest.raises(ConfigError, match="cfg:2"):
        AppConfig.from_text("scene.seed = 1\nbroken line\n", "cfg")
    with pytest.raises(FormatError):
        AppConfig.load("/nonexistent/app.cfg")
    assert parse_value("4, 5, 6", (1, 2, 3)) == (4, 5, 6)
    assert parse_value("off", True) is False
    assert cfg.with_overrides({"scene.intrinsics.fx": "400"}).scene.intrinsics.fx == 400.0
