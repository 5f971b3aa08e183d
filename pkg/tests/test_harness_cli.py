import csv
import statistics
from pathlib import Path

import pytest

from chirp.cli import main
from chirp.harness import (ExperimentConfig, MetricsRow, config_from_text, curve, default_hyper, emit_curve,
                           hyper_overrides, read_metrics, run_experiment, write_metrics)


def rows_for(trial, fractions, step=10_000):
    return [MetricsRow(trial, k, (k + 1) * step, True, f, 0, 1) for k, f in enumerate(fractions)]


# -- hyperparameter tables ---------------------------------------------------------------


def test_taxi_chirp_column():
    h = default_hyper("taxi", "chirp")
    assert (h.gamma, h.stepmax, h.k_cap, h.sigma_thre, h.s_factor, h.e_max) == (1.0, 1000, 2, 1.0, 4, 200)
    assert h.budget == 4_000_000


def test_office_chirp_column():
    h = default_hyper("office", "chirp")
    assert (h.k_cap, h.alpha, h.decay) == (5, 0.05, 0.9991)


def test_maze_catrl_column():
    h = default_hyper("maze", "catrl_baseline")
    assert (h.k_cap, h.decay, h.min_epsilon, h.budget) == (5, 0.997, 0.05, 1_500_000)


def test_task_budgets_per_domain():
    budgets = {d: default_hyper(d).budget for d in ("maze", "four_rooms", "taxi", "office", "minecraft")}
    assert budgets == {"maze": 1_500_000, "four_rooms": 2_000_000, "taxi": 4_000_000, "office": 4_000_000,
                       "minecraft": 3_000_000}


def test_unknown_table_entries_raise():
    with pytest.raises(ValueError):
        default_hyper("chess")
    with pytest.raises(ValueError):
        default_hyper("maze", "ppo")
    with pytest.raises(ValueError):
        hyper_overrides({"learning_rate": "0.1"})


def test_overrides_are_typed():
    got = hyper_overrides({"k_cap": "3", "alpha": "0.1", "sigma_weights": "(0.25, 0.75)"})
    assert got == {"k_cap": 3, "alpha": 0.1, "sigma_weights": (0.25, 0.75)}


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig("maze", n_trials=0)
    with pytest.raises(ValueError):
        ExperimentConfig("maze", method="dqn")
    cfg = ExperimentConfig("maze", budget=1234, overrides={"k_cap": "4"})
    assert cfg.hyper().budget == 1234 and cfg.hyper().k_cap == 4
    assert cfg.trial_seed(3) == 3


def test_config_text_parsing():
    text = "domain = taxi  # comment\n\nhyper.k_cap=3\nmap-file=x.txt\n"
    assert config_from_text(text) == {"domain": "taxi", "map_file": "x.txt", "overrides": {"k_cap": "3"}}
    with pytest.raises(ValueError):
        config_from_text("just words")


# -- metrics and curves ------------------------------------------------------------------


def test_metrics_round_trip(tmp_path):
    rows = rows_for(0, [0.5, 1.0])
    path = tmp_path / "m.csv"
    write_metrics(path, rows)
    assert path.read_text().splitlines()[0] == ",".join(MetricsRow.COLUMNS)
    assert read_metrics(path) == rows


def test_curve_of_one_trial_has_zero_std():
    points = curve([rows_for(0, [0.25, 0.5, 1.0])])
    assert [p[0] for p in points] == [0, 10_000, 20_000, 30_000]
    assert [p[1] for p in points] == [0.0, 0.25, 0.5, 1.0]
    assert all(p[2] == 0.0 for p in points)


def test_curve_of_identical_trials():
    a, b = rows_for(0, [0.5, 1.0]), rows_for(1, [0.5, 1.0])
    assert curve([a, b]) == [(s, m, 0.0) for s, m, _ in curve([a])]


def test_curve_rejects_empty_input():
    with pytest.raises(ValueError):
        curve([])
    with pytest.raises(ValueError):
        emit_curve([], "x.csv")


def test_emit_curve_groups_by_method(tmp_path):
    files = []
    for method, fracs in (("chirp", [0.5, 1.0]), ("catrl_baseline", [0.0, 0.5])):
        for t in range(2):
            p = tmp_path / f"metrics_{method}_trial{t}.csv"
            write_metrics(p, rows_for(t, fracs))
            files.append(p)
    out = emit_curve(files, tmp_path / "curve.csv")
    with open(out) as fh:
        table = list(csv.DictReader(fh))
    assert list(table[0]) == ["step", "catrl_baseline_mean", "catrl_baseline_std", "chirp_mean", "chirp_std"]
    means = [float(r["chirp_mean"]) for r in table]
    assert means == sorted(means) and means[-1] == 1.0


# -- experiments ------------------------------------------------------------------------


def _desk_config(tmp_path, method="chirp", n_tasks=3, n_trials=2):
    return ExperimentConfig("maze", method=method, n_tasks=n_tasks, n_trials=n_trials, size="desk",
                            budget=100_000, out_dir=str(tmp_path))


def test_run_experiment_outputs(tmp_path):
    out = run_experiment(_desk_config(tmp_path))
    assert [p.name for p in out["metrics"]] == ["metrics_chirp_trial0.csv", "metrics_chirp_trial1.csv"]
    assert (tmp_path / "stream_trial0.txt").exists()
    trials = [read_metrics(p) for p in out["metrics"]]
    for rows in trials:
        fr = [r.fraction_solved for r in rows]
        cum = [r.cumulative_timesteps for r in rows]
        assert fr == sorted(fr) and all(0.0 <= f <= 1.0 for f in fr)
        assert cum == sorted(cum)
    with open(out["summary"]) as fh:
        summary = list(csv.DictReader(fh))
    for rec in summary:
        step = int(rec["step"])
        vals = []
        for rows in trials:
            v = 0.0
            for r in rows:
                if r.cumulative_timesteps <= step:
                    v = r.fraction_solved
            vals.append(v)
        assert float(rec["mean"]) == pytest.approx(statistics.fmean(vals))


def test_single_trivial_task_is_fully_solved(tmp_path):
    out = run_experiment(_desk_config(tmp_path, n_tasks=1, n_trials=1))
    assert read_metrics(out["metrics"][0])[-1].fraction_solved == 1.0


def test_same_config_gives_identical_files(tmp_path):
    a = run_experiment(_desk_config(tmp_path / "a"))
    b = run_experiment(_desk_config(tmp_path / "b"))
    for p, q in zip(a["metrics"] + [a["summary"]], b["metrics"] + [b["summary"]]):
        assert Path(p).read_bytes() == Path(q).read_bytes()


# -- command line -----------------------------------------------------------------------


def test_cli_run_and_tools(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["run", "--domain", "maze", "--size", "desk", "--tasks", "2", "--budget", "100000", "--out",
                 str(out), "--checkpoints", "--quiet", "--set", "k_cap=3"])
    assert code == 0
    assert (out / "metrics_chirp_trial0.csv").exists()
    ckpt = out / "checkpoints_chirp_trial0" / "checkpoint_task001.json"
    assert main(["list-options", str(ckpt)]) == 0
    assert "option(s) in maze checkpoint after 2 task(s)" in capsys.readouterr().out
    code = main(["plan-debug", str(ckpt), "--start", "0.5,0.5", "--goal", "x=[9.0,10.0);y=[9.0,10.0)"])
    text = capsys.readouterr().out
    assert code == 0 and text.strip().endswith("valid")
    assert main(["emit-curve", str(out / "metrics_chirp_trial0.csv"), "--out", str(tmp_path / "c.csv")]) == 0
    assert (tmp_path / "c.csv").read_text().startswith("step,chirp_mean,chirp_std")


def test_cli_config_file_overrides_flags(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(f"domain=maze\nsize=desk\ntasks=1\nbudget=50000\nout={tmp_path / 'cfg'}\nmethod=catrl_baseline\n")
    assert main(["run", "--config", str(cfg), "--method", "chirp", "--quiet"]) == 0
    assert (tmp_path / "cfg" / "metrics_catrl_baseline_trial0.csv").exists()


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["run", "--size", "desk"]) == 2  # no domain
    assert "--domain is required" in capsys.readouterr().err
    assert main(["run", "--domain", "maze", "--set", "oops"]) == 2
    assert main(["list-options", str(tmp_path / "missing.json")]) == 1
    assert "error" in capsys.readouterr().err
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour=blue\n")
    assert main(["run", "--config", str(bad)]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["fly"])
    assert exc.value.code == 2
