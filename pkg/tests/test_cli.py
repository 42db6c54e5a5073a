import filecmp
from pathlib import Path

import pandas as pd
import pytest

from hongbao import cli, pipeline

SMALL = ["--set", "population.n_groups=60", "--set", "horizon_days=10", "--set", "bootstrap.reps=30",
         "--set", "seed=4"]


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def tree(root: Path) -> list:
    return sorted(str(p.relative_to(root)) for p in root.rglob("*") if p.is_file())


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["pipeline", "--out", str(root / "run"), *SMALL]) == 0
    return root / "run"


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main([])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        cli.main(["verify-splitter", "--amount", "x", "--n", "2"])
    assert e.value.code == 2
    assert run(["gen", "--out", "x", "--workers", "0"], capsys)[0] == 2
    code, _, err = run(["gen", "--out", "x", "--set", "behavior.bogus=1"], capsys)
    assert code == 2 and "unknown key" in err


def test_verify_splitter(capsys):
    code, out, _ = run(["verify-splitter", "--amount", "1000", "--n", "5", "--reps", "200000", "--seed", "3"], capsys)
    assert code == 0
    assert "law-of-total-variance recursion" in out and out.rstrip().endswith("PASS")
    assert run(["verify-splitter", "--amount", "1", "--n", "1", "--reps", "1000"], capsys)[0] == 0
    assert run(["verify-splitter", "--amount", "1", "--n", "5"], capsys)[0] == 2
    assert run(["verify-splitter", "--amount", "100", "--n", "2", "--reps", "1"], capsys)[0] == 2


def test_pipeline_outputs(small_run):
    files = tree(small_run)
    for name in ("config.txt", "events.csv", "panel.csv", "report.csv", "report.txt", "matched.csv",
                 "randomization_report.csv", "population/members.csv", "plotdata/tau_sensitivity.csv",
                 "plotdata/share_histograms.csv", "plotdata/share_ks.csv", "plotdata/marginal_effects.csv"):
        assert name in files
    rep = pd.read_csv(small_run / "report.csv")
    assert {"stratified:extensive_24h:T", "naive:extensive_24h:T"} <= set(rep["name"])
    assert not list(small_run.parent.glob(".run.*"))


def test_pipeline_deterministic_across_workers(small_run, tmp_path):
    assert cli.main(["pipeline", "--out", str(tmp_path / "w2"), "--workers", "2", *SMALL]) == 0
    files = tree(small_run)
    assert files == tree(tmp_path / "w2")
    _, mismatch, errors = filecmp.cmpfiles(small_run, tmp_path / "w2", files, shallow=False)
    assert mismatch == [] and errors == []


def test_stagewise_commands_reproduce_pipeline(small_run, tmp_path, capsys):
    cfg = ["--config", str(small_run / "config.txt")]
    assert run(["gen", "--out", str(tmp_path / "pop"), *cfg], capsys)[0] == 0
    assert run(["simulate", "--population", str(tmp_path / "pop"), "--out", str(tmp_path / "events.csv"), *cfg],
               capsys)[0] == 0
    assert run(["panel", "--population", str(tmp_path / "pop"), "--events", str(tmp_path / "events.csv"),
                "--out", str(tmp_path / "panel.csv"), *cfg], capsys)[0] == 0
    assert run(["estimate", "--population", str(tmp_path / "pop"), "--panel", str(tmp_path / "panel.csv"),
                "--out", str(tmp_path / "est"), *cfg], capsys)[0] == 0
    for a, b in (("events.csv", "events.csv"), ("panel.csv", "panel.csv"), ("report.csv", "est/report.csv"),
                 ("population/members.csv", "pop/members.csv")):
        assert filecmp.cmp(small_run / a, tmp_path / b, shallow=False), a


def test_match_and_randomization_check(small_run, tmp_path, capsys):
    args = ["--population", str(small_run / "population"), "--panel", str(small_run / "panel.csv"),
            "--config", str(small_run / "config.txt")]
    code, out, _ = run(["match", *args, "--out", str(tmp_path / "m.csv")], capsys)
    assert code == 0 and "match rate" in out and (tmp_path / "m.csv").is_file()
    base = ["randomization-check", "--panel", str(small_run / "panel.csv")]
    code, out, _ = run([*base, "--set", "randomization.max_share=1.0", "--out", str(tmp_path / "r.csv")], capsys)
    assert code == 0 and out.rstrip().endswith("PASS")
    assert len(pd.read_csv(tmp_path / "r.csv")) > 0
    code, out, _ = run([*base, "--set", "randomization.max_share=-1"], capsys)
    assert code == 1 and "FAIL" in out


def test_failed_stage_leaves_no_output(tmp_path, monkeypatch, capsys):
    def boom(*a, **k):
        raise RuntimeError("injected")

    monkeypatch.setattr(pipeline, "tau_sensitivity", boom)
    code, _, err = run(["pipeline", "--out", str(tmp_path / "run"), *SMALL], capsys)
    assert code == 1 and "tau-sweep" in err
    assert list(tmp_path.iterdir()) == []


def test_refuses_to_overwrite_foreign_directory(tmp_path, capsys):
    target = tmp_path / "keep"
    target.mkdir()
    (target / "precious.txt").write_text("x")
    code, _, err = run(["pipeline", "--out", str(target), *SMALL], capsys)
    assert code == 1 and "not a previous run" in err
    assert tree(target) == ["precious.txt"]


def test_missing_inputs_exit_1(tmp_path, capsys):
    code, _, err = run(["panel", "--population", str(tmp_path / "none"), "--events", str(tmp_path / "e.csv"),
                        "--out", str(tmp_path / "p.csv")], capsys)
    assert code == 1 and err
