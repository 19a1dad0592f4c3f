import json
import os

import pytest

from propsched import tasks
from propsched.cli import main
from propsched.policy import PolicyConfig, init_params, save_checkpoint


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, (json.loads(out) if out.strip() else {})


def test_gen_writes_instance_files(tmp_path, capsys):
    cfg = write_json(tmp_path / "gen.json", {
        "instances": [{"family": "knapsack", "items": 4, "count": 2, "seed": 1}],
    })
    code, out = run_cli(capsys, "gen", "--config", cfg, "--out", str(tmp_path / "inst"))
    assert code == 0
    assert len(out["written"]) == 2
    for p in out["written"]:
        assert os.path.exists(p)
        json.load(open(p))


def test_run_command_and_exit_codes(tmp_path, capsys):
    cfg = write_json(tmp_path / "run.json", {
        "instances": [{"family": "coloring", "n": 4, "edge_prob": 0.5,
                       "colors": 3, "count": 1, "seed": 2}],
        "schedulers": [{"kind": "fifo"}, {"kind": "greedy"}],
        "reps": 2, "warmup": 0,
        "out": str(tmp_path / "res"),
    })
    code, out = run_cli(capsys, "run", "--config", cfg)
    assert code == 0
    assert out["rows"] == 4
    assert (tmp_path / "res" / "results.csv").exists()
    assert (tmp_path / "res" / "summary.csv").exists()
    assert (tmp_path / "res" / "config.json").exists()


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    code = main(["run", "--config", str(bad)])
    assert code == 1
    code = main(["run", "--config", str(tmp_path / "missing.json")])
    assert code == 1
    cfg = write_json(tmp_path / "badsched.json", {
        "instances": [{"family": "knapsack", "count": 1}],
        "schedulers": [{"kind": "mystery"}],
    })
    assert main(["run", "--config", cfg]) == 1


def test_oracle_command(tmp_path, capsys):
    spec = tasks.adversarial_two_choice()
    inst = tmp_path / "adv.json"
    spec.dump(inst)
    cfg = write_json(tmp_path / "oracle.json", {"file": str(inst), "horizon": 10})
    code, out = run_cli(capsys, "oracle", "--config", cfg)
    assert code == 0
    assert out["optimal_cost"] == 71.0
    assert out["schedule"][0] == 1


def test_oracle_horizon_is_runtime_failure(tmp_path, capsys):
    g, words = tasks.toy_grammar()
    sent = [words[w] for w in "the dog saw the cat".split()]
    inst = tmp_path / "parse.json"
    tasks.build_parse_instance(g, sent).dump(inst)
    cfg = write_json(tmp_path / "oracle.json", {"file": str(inst), "horizon": 3})
    assert main(["oracle", "--config", cfg]) == 2


def test_calibrate_tau_from_entropies(tmp_path, capsys):
    cfg = write_json(tmp_path / "tau.json",
                     {"entropies": [round(0.1 * i, 1) for i in range(1, 11)]})
    code, out = run_cli(capsys, "calibrate-tau", "--config", cfg)
    assert code == 0
    assert out["tau"] == 0.9


def test_gradcheck_command(tmp_path, capsys):
    cfg = write_json(tmp_path / "gc.json", {"n_configs": 2, "seed": 1})
    code, out = run_cli(capsys, "gradcheck", "--config", cfg)
    assert code == 0
    assert out["ok"] is True
    assert out["max_rel_err"] < 1e-4


def test_adapt_zero_steps_reports_equal_metrics(tmp_path, capsys):
    params = init_params(PolicyConfig(layers=1, hidden=8, heads=2, dropout=0.0), seed=0)
    ckpt = tmp_path / "ckpt.json"
    save_checkpoint(params, ckpt)
    cfg = write_json(tmp_path / "adapt.json", {
        "checkpoint": str(ckpt),
        "task": {"family": "parse", "grammar_seed": 3, "length": [3, 4]},
        "steps": 0,
        "train": {"batch_size": 16, "ppo_epochs": 1},
    })
    code, out = run_cli(capsys, "adapt", "--config", cfg, "--out", str(tmp_path / "ad"))
    assert code == 0
    assert out["report"]["pre"] == out["report"]["post"]
    assert (tmp_path / "ad" / "adapted.json").exists()


def test_proxy_validate_command(tmp_path, capsys):
    cfg = write_json(tmp_path / "proxy.json", {
        "instances": [{"family": "random_csp", "n": 5, "domain": 5,
                       "density": 0.8, "tightness": 0.2, "count": 2, "seed": 4}],
        "reps": 2, "warmup": 1,
    })
    code, out = run_cli(capsys, "proxy-validate", "--config", cfg,
                        "--out", str(tmp_path / "px"))
    assert code == 0
    assert out["n"] > 0
    assert (tmp_path / "px" / "proxy_samples.csv").exists()


def test_train_command_smoke(tmp_path, capsys):
    cfg = write_json(tmp_path / "train.json", {
        "task": {"family": "parse", "grammar_seed": 7, "length": [3, 4]},
        "policy": {"layers": 1, "hidden": 8, "heads": 2, "dropout": 0.0},
        "train": {"batch_size": 16, "ppo_epochs": 1, "seed": 0},
        "updates": 1,
    })
    code, out = run_cli(capsys, "train", "--config", cfg,
                        "--out", str(tmp_path / "run"), "--seed", "3")
    assert code == 0
    assert (tmp_path / "run" / "final.json").exists()


def test_meta_train_command_smoke(tmp_path, capsys):
    cfg = write_json(tmp_path / "meta.json", {
        "tasks": [{"family": "parse", "grammar_seed": 11, "length": [3, 4]},
                  {"family": "parse", "grammar_seed": 12, "length": [3, 4]}],
        "policy": {"layers": 1, "hidden": 8, "heads": 2, "dropout": 0.0},
        "train": {"batch_size": 16, "ppo_epochs": 1},
        "meta": {"inner_steps": 1, "support_episodes": 1, "query_episodes": 1,
                 "tasks_per_batch": 2},
        "iterations": 1,
    })
    code, out = run_cli(capsys, "meta-train", "--config", cfg,
                        "--out", str(tmp_path / "meta"))
    assert code == 0
    assert (tmp_path / "meta" / "meta_init.json").exists()
