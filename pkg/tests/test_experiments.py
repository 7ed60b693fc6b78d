import math

import numpy as np
import pytest

from forestsim.config import ConfigError, format_value, parse_config
from forestsim.experiments import (
    WIND_HEADING,
    WIND_LEVELS,
    AbortedRun,
    MatrixReport,
    Scenario,
    canopy_segment,
    run_follow,
    run_matrix,
    run_out_and_back,
    summarize,
    under_canopy,
)
from forestsim.scene import SceneConfig, build_scene

SMALL = """
scenario = out_and_back
width = 96
height = 72
ticks = 20
[grid]
margin = 16
[scene]
area = -15, -15, 15, 15
tree_count = 10
bush_count = 5
rock_count = 5
grass_count = 5
"""


def test_parse_defaults_and_sections():
    s = Scenario.parse("wind = high\naltitude = high\n[vehicle]\nc_d = 0.5\n")
    assert s.run.wind == "high" and s.run.altitude_value == 12.0
    assert s.vehicle.c_d == 0.5
    assert s.hsv.hue_lo == 340.0


@pytest.mark.parametrize(
    "text",
    [
        "wind = gale\n",
        "tick = 5\n",
        "[bogus]\nx = 1\n",
        "[scene]\ntree_cuont = 1\n",
        "[world]\ndt = 0.1\n",
        "ticks = many\n",
        "out_offset = 1, 2\n",
        "trial_seeds = 3, 3\n",
        "[run]\nwind = low\n[run]\nwind = high\n",
    ],
)
def test_parse_errors(text):
    with pytest.raises(ConfigError):
        Scenario.parse(text)


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        Scenario.load(tmp_path / "nope.cfg")


def test_config_hash_tracks_effective_parameters():
    a = Scenario.parse("wind = low\n")
    b = Scenario.parse("# comment\nwind = low   # inline\n")
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != Scenario.parse("wind = high\n").config_hash()
    assert a.config_hash() != Scenario.parse("wind = low\n[scene]\ntree_count = 3\n").config_hash()
    # spelling out a default does not change the hash
    assert a.config_hash() == Scenario.parse("wind = low\nticks = 600\n").config_hash()
    assert len(a.config_hash()) == 64


def test_canonical_round_trips():
    s = Scenario.parse(SMALL)
    again = Scenario.parse(s.canonical())
    assert again.canonical() == s.canonical()


def test_seeds():
    assert Scenario.parse("trial_seed = 5\ntrials = 3\n").run.seeds() == (5, 6, 7)
    assert Scenario.parse("trial_seeds = 9, 2, 4\ntrials = 2\n").run.seeds() == (9, 2)


def test_wind_level_mapping():
    s = Scenario.parse("wind = high\n")
    cfg = s.scene_config(3)
    speed, sigma = WIND_LEVELS["high"]
    assert np.allclose(cfg.wind_mean, np.array(WIND_HEADING) * speed)
    assert cfg.turbulence_intensity == sigma and cfg.gust_seed == 3
    assert Scenario.parse("wind = none\n").scene_config(1).wind_mean == (0.0, 0.0, 0.0)
    assert Scenario.parse("static_flora = true\n").scene_config(1).sway_k == 0.0


def test_follow_uses_larger_drones():
    assert Scenario.parse("scenario = follow\n").world_config().drone_scale == 2.0
    assert Scenario.parse("scenario = follow\n[world]\ndrone_scale = 1.5\n").world_config().drone_scale == 1.5


def test_short_run_aborts_but_keeps_logs(tmp_path):
    s = Scenario.parse(SMALL)
    with pytest.raises(AbortedRun):
        run_out_and_back(s, tmp_path)
    assert (tmp_path / "poses.csv").exists()
    assert (tmp_path / "summary.csv").exists()
    with pytest.raises(ValueError):
        run_follow(s)


def test_matrix_records_incomplete_cells(tmp_path):
    s = Scenario.parse("trials = 1\nlog_frames = false\n" + SMALL + "[matrix]\nwinds = low\naltitudes = low\n")
    rep = run_matrix(s, tmp_path)
    assert rep.incomplete and rep.incomplete[0][:3] == ("low", "low", 1)
    assert (tmp_path / "matrix.csv").read_text() == "wind,alt,trial,G,percent,seed\n"
    assert math.isnan(rep.median("low", "low"))


def test_matrix_report_outputs(tmp_path):
    rep = MatrixReport({("low", "low"): [(1.0, 90.0, 1), (3.0, 95.0, 2), (2.0, 99.0, 3)], ("high", "low"): [(8.0, 80.0, 1)]}, "h", (1, 2, 3))
    assert rep.median("low", "low") == 2.0
    (tmp_path / "matrix.csv").write_text(rep.to_csv())
    assert summarize(tmp_path)["matrix"] == {("low", "low"): 2.0, ("high", "low"): 8.0}
    table = rep.table().splitlines()
    assert table[1].startswith("low-wind") and table[2].startswith("high-wind")


def test_summarize_follow_log(tmp_path):
    (tmp_path / "follow_cam1.csv").write_text("tick,found,cx,cy\n0,1,10.5,20.0\n1,0,,\n")
    out = summarize(tmp_path)
    assert out["follow_cam1"][0] == (0, True, 10.5, 20.0)
    assert out["follow_cam1"][1][:2] == (1, False)


def test_under_canopy():
    scene = build_scene(3, SceneConfig(tree_count=0, bush_count=0, rock_count=0, grass_count=0, fixed_trees=((0.0, 0.0),)))
    centers, radii = scene.canopy_spheres()
    c, r = centers[0], radii[0]
    assert under_canopy(scene, (c[0], c[1], c[2] - r - 0.1))
    assert not under_canopy(scene, (c[0], c[1], c[2] + r + 0.1))
    assert not under_canopy(scene, (c[0] + r + 0.1, c[1], 0.0))
    path = [(c[0] + x, c[1], 1.0) for x in np.linspace(-2 * r, 2 * r, 41)]
    a, b = canopy_segment(scene, path)
    assert 0 < a <= b < 40
    assert canopy_segment(scene, [(50.0, 50.0, 1.0)]) is None


def test_config_primitives():
    assert parse_config("[a]\nx = 1\n") == {"a": {"x": "1"}}
    with pytest.raises(ConfigError):
        parse_config("x = 1\n")
    assert format_value((1.0, 2.0)) == "1.0, 2.0"
    assert format_value(True) == "true" and format_value(None) == "none"
