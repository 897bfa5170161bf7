import csv
import json
import math

import pytest

from advens.checkpoint import load_checkpoint, save_checkpoint
from advens.cli import main
from advens.config import load_config, parse_config
from advens.errors import ContractError
from advens.experiment import run_experiment, select_best
from advens.data import gen_two_gaussians, split
from advens.models import Architecture, init_model
from advens.training import TrainConfig, train_model

FAST = (
    "n = 120\ndim = 4\nmargin = 4\nhidden_dims = 4\nepochs = 2\nbatch_size = 32\n"
    "train_steps = 2\neval_steps = 3\neval_restarts = 1\n"
)


def write_cfg(tmp_path, body, name="exp.cfg"):
    p = tmp_path / name
    p.write_text(FAST + body)
    return p


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_curve_on_saved_natural_model(tmp_path):
    train, _, _ = split(gen_two_gaussians(120, 4, 4.0, 1.0, seed=0), (0.6, 0.2, 0.2), seed=0)
    natural = train_model(train, Architecture(4, (4,), 2), TrainConfig(epochs=3), 1)
    save_checkpoint(natural, tmp_path / "m.ckpt")
    cfg = write_cfg(tmp_path, "mode = curve\ncheckpoint = m.ckpt\neps_grid = 0, 0.22, 0.35, 0.5\n")
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 0
    rows = read_csv(tmp_path / "out" / "run_000" / "report.csv")
    assert [float(r["eps"]) for r in rows] == [0.0, 0.22, 0.35, 0.5]
    assert all(r["auc_flag"] == "0" for r in rows)
    accs = [float(r["acc"]) for r in rows]
    assert accs == sorted(accs, reverse=True)


def test_curve_subcommand_adds_auc_row(tmp_path):
    save_checkpoint(init_model(Architecture(4, (4,), 2), 3), tmp_path / "m.ckpt")
    cfg = write_cfg(tmp_path, "mode = curve\ncheckpoint = m.ckpt\neps_target = 0.5\neps_grid = 0,0.25,0.5\n")
    assert main(["curve", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 0
    rows = read_csv(tmp_path / "out" / "run_000" / "report.csv")
    assert [r["auc_flag"] for r in rows] == ["0", "0", "0", "1"]
    assert 0.0 <= float(rows[-1]["acc"]) <= 1.0


def test_run_count_layout_and_records(tmp_path):
    cfg = parse_config(FAST + "mode = robust\nalpha = 0.2\neps_target = 0.2\nrun_count = 5\n")
    out = run_experiment(cfg, tmp_path / "out")
    assert sorted(p.name for p in out.iterdir()) == [f"run_00{i}" for i in range(5)] + ["summary.json"]
    summary = json.loads((out / "summary.json").read_text())
    seeds = [r["run_seed"] for r in summary["runs"]]
    assert len(set(seeds)) == 5
    assert summary["best_run"] in range(5)
    for i, seed in enumerate(seeds):
        run = json.loads((out / f"run_00{i}" / "run.json").read_text())
        assert run["run_seed"] == seed
        assert run["attack"]["steps"] == 3 and run["attack"]["zero_start"] is True
        assert set(run["checkpoints"]) == {"robust"}
        model = load_checkpoint(out / f"run_00{i}" / "checkpoints" / "robust.ckpt")
        assert model.train_eps == 0.2
        rows = read_csv(out / f"run_00{i}" / "report.csv")
        assert all(r["model_id"] == f"robust_a0.2_s{seed}" for r in rows)
    assert not list(tmp_path.glob(".out.partial-*"))


@pytest.mark.parametrize(
    "body",
    [
        "mode = natural\n",
        "mode = ensemble\nK = 2\nalpha = 0.1\n",
        "mode = composite\neps = 0.3\nalpha = 0.05\n",
        "mode = composite_ensemble\nK = 2\neps = 0.3\nalpha = 0, 0.05\n",
    ],
)
def test_train_modes_are_byte_identical(tmp_path, body):
    cfg = parse_config(FAST + body + "eps_target = 0.3\n")
    a = tree_bytes(run_experiment(cfg, tmp_path / "a"))
    b = tree_bytes(run_experiment(cfg, tmp_path / "b"))
    assert a == b
    assert any(k.endswith(".ckpt") for k in a)


def test_workers_do_not_change_outputs(tmp_path):
    body = FAST + "mode = natural\nrun_count = 3\n"
    a = tree_bytes(run_experiment(parse_config(body), tmp_path / "a"))
    b = tree_bytes(run_experiment(parse_config(body + "workers = 3\n"), tmp_path / "b"))
    a.pop("summary.json"), b.pop("summary.json")
    assert a == b


def test_alpha_search_run(tmp_path):
    cfg = parse_config(FAST + "mode = alpha_search\nK = 2\neps_target = 0.3\nalpha_grid = 0.1, 0.3\n")
    out = run_experiment(cfg, tmp_path / "out", subcommand="alpha-search")
    run = json.loads((out / "run_000" / "run.json").read_text())
    search = run["alpha_search"]
    assert search["alpha_star"] in (0.1, 0.3)
    assert len(search["rows"]) == 2
    rows = read_csv(out / "run_000" / "report.csv")
    assert len(rows) == 6 and all(math.isnan(float(r["loss"])) for r in rows)
    assert {"reference", "alpha0.1_member_1", "alpha0.3_member_2"} <= set(run["checkpoints"])


def test_equivalence_run(tmp_path):
    cfg = parse_config(FAST + "mode = equivalence\nK = 2\nalpha = 0.1\nfamily_eps = 0.05, 0.1, 0.2\n")
    out = run_experiment(cfg, tmp_path / "out", subcommand="equivalence")
    eq = json.loads((out / "run_000" / "run.json").read_text())["equivalence"]
    assert eq["epsilons"] == [0.05, 0.1, 0.2]
    assert eq["eps_eq"] in (None, 0.05, 0.1, 0.2)


def test_failure_leaves_no_partial_output(tmp_path):
    cfg = parse_config(FAST + "mode = curve\ncheckpoint = missing.ckpt\n", base_dir=tmp_path)
    with pytest.raises(OSError):
        run_experiment(cfg, tmp_path / "out", subcommand="eval")
    assert list(tmp_path.iterdir()) == []


def test_failure_keeps_previous_output(tmp_path):
    out = tmp_path / "out"
    run_experiment(parse_config(FAST + "mode = natural\n"), out)
    before = tree_bytes(out)
    cfg = parse_config(FAST + "mode = curve\ncheckpoint = missing.ckpt\n", base_dir=tmp_path)
    with pytest.raises(OSError):
        run_experiment(cfg, out, subcommand="eval")
    assert tree_bytes(out) == before
    assert sorted(p.name for p in tmp_path.iterdir()) == ["out"]


def test_grid_must_reach_target(tmp_path):
    cfg = parse_config(FAST + "mode = natural\neps_target = 0.5\neps_grid = 0, 0.2\n")
    with pytest.raises(ContractError):
        run_experiment(cfg, tmp_path / "out")
    assert list(tmp_path.iterdir()) == []


def test_subcommand_mode_mismatch(tmp_path):
    with pytest.raises(ContractError):
        run_experiment(parse_config(FAST + "mode = natural\n"), tmp_path / "out", subcommand="eval")


def test_select_best_respects_floor():
    recs = [
        {"validation": {"natural_acc": 0.95, "adversarial_acc": 0.40}},
        {"validation": {"natural_acc": 0.90, "adversarial_acc": 0.60}},
        {"validation": {"natural_acc": 0.85, "adversarial_acc": 0.70}},
    ]
    assert select_best(recs, 0.0) == 0
    assert select_best(recs, 0.5) == 1
    assert select_best(recs, 0.65) == 2
    assert select_best(recs, 0.9) is None
    tie = [{"validation": {"natural_acc": 0.9}}, {"validation": {"natural_acc": 0.9}}]
    assert select_best(tie, 0.5) == 0


# -- command line -----------------------------------------------------------


def test_cli_success(tmp_path):
    cfg = write_cfg(tmp_path, "mode = ensemble\nK = 2\nalpha = 0.1\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 0
    assert (tmp_path / "out" / "summary.json").exists()


def test_cli_invalid_config_exit_1(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "mode = robust\nalpha = abc\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 1
    assert "line 11: bad value for 'alpha'" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["train"],
        ["fly", "--config", "x", "--out", "y"],
        ["train", "--config", "/nonexistent/exp.cfg", "--out", "y"],
    ],
)
def test_cli_usage_errors_exit_1(argv):
    assert main(argv) == 1


def test_cli_mode_mismatch_exit_1(tmp_path):
    cfg = write_cfg(tmp_path, "mode = curve\ncheckpoint = m.ckpt\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 1


def test_cli_runtime_failure_exit_2(tmp_path):
    (tmp_path / "m.ckpt").write_bytes(b"not a checkpoint")
    cfg = write_cfg(tmp_path, "mode = curve\ncheckpoint = m.ckpt\n")
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 2
    assert sorted(p.name for p in tmp_path.iterdir()) == ["exp.cfg", "m.ckpt"]


def test_cli_help_exit_0(capsys):
    assert main(["--help"]) == 0
    assert "alpha-search" in capsys.readouterr().out


def test_loaded_config_round_trip(tmp_path):
    cfg = load_config(write_cfg(tmp_path, "mode = natural\n"))
    assert parse_config(FAST + "mode = natural\n") == cfg
