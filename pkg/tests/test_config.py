import pytest

from hongbao.config import RunConfig, apply, flatten, format_duration, load_config, parse_duration, parse_lines
from hongbao.errors import InvalidConfigError


@pytest.mark.parametrize("text,sec", [("10m", 600), ("24h", 86400), ("7d", 604800), ("90", 90), ("1.5h", 5400),
                                      (30, 30)])
def test_parse_duration(text, sec):
    assert parse_duration(text) == sec


@pytest.mark.parametrize("bad", ["", "10x", "-1h", "0", "h"])
def test_parse_duration_rejects(bad):
    with pytest.raises(InvalidConfigError):
        parse_duration(bad)


def test_format_duration_round_trip():
    for s in ("10m", "1h", "3h", "24h", "2d", "7d", "90s"):
        assert format_duration(parse_duration(s)) == s


def test_file_values_and_comments(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nseed = 7\nwindows = 10m, 24h  # trailing\npopulation.n_groups = 50\n"
                 "behavior.theta_ext = 0.01\nbootstrap.reps = 20\nbehavior.festival_days = 3, 4\n\n")
    cfg = load_config(p, env={})
    assert cfg.seed == 7 and cfg.windows == ("10m", "24h")
    assert cfg.population.n_groups == 50 and cfg.behavior.theta_ext == 0.01
    assert cfg.bootstrap_reps == 20 and cfg.behavior.festival_days == (3, 4)
    assert cfg.window_seconds == (600.0, 86400.0)


def test_precedence(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("seed = 7\n")
    assert load_config(p, env={"HONGBAO_SEED": "9"}).seed == 9
    assert load_config(p, ["seed=11"], env={"HONGBAO_SEED": "9"}).seed == 11
    assert load_config(None, env={}).seed == RunConfig().seed


@pytest.mark.parametrize("item", ["nope=1", "behavior.nope=1", "other.seed=1", "seed=abc", "seed"])
def test_bad_overrides(item):
    with pytest.raises(InvalidConfigError):
        load_config(None, [item], env={})


def test_validation_errors():
    for item in ("horizon_days=1", "bootstrap.reps=-1", "randomization.alpha=1.5", "windows=5x",
                 "behavior.open_prob=2", "population.n_groups=0"):
        with pytest.raises(InvalidConfigError):
            load_config(None, [item], env={})
    with pytest.raises(InvalidConfigError):
        load_config("/nonexistent/run.cfg", env={})


def test_line_errors_name_the_line():
    with pytest.raises(InvalidConfigError, match="x.cfg:2"):
        parse_lines(["seed = 1", "no equals sign"], source="x.cfg")


def test_to_text_round_trips():
    cfg = apply(apply(RunConfig(), "behavior.delta_luck", "0.05"), "moderators", "clustering, eigen")
    back = parse_lines(cfg.to_text().splitlines())
    assert back == cfg
    assert flatten(back)["behavior.delta_luck"] == "0.05"
    assert "bootstrap.reps" in flatten(back)
