import csv

import pytest

from lstmtrojan.checkpoint import load_checkpoint
from lstmtrojan.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main

TINY = """
[network]
units = 5

[trainer]
n_iter = 16
batch_size = 8
eval_episodes_per_env = 2

[stage.1]
side = 5
trigger_min = 1
trigger_max = 2
max_steps = 15

[eval]
trials = 4
max_steps = 30

[analyzer]
trials = 3
max_steps = 20

[monitor]
baseline_episodes = 3
episodes = 3

[sweep]
configs = 7/0, 7/2
trials = 2
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    out = root / "run"
    assert main(["train", "backdoor", "--config", str(cfg), "--seed", "3", "--out", str(out)]) == EXIT_OK
    return cfg, out


def rows(path):
    with open(path) as fh:
        first = fh.readline()
        return first, list(csv.reader(fh))


def test_train_outputs(run):
    cfg, out = run
    ck = load_checkpoint(out / "checkpoint_final.stlb")
    assert ck.params.units == (5,) and ck.metadata["seed"] == 3 and ck.metadata["env_steps"] > 0
    first, body = rows(out / "learning_curve.csv")
    assert first.startswith("# config_hash=") and "seed=3" in first
    assert body[0][:6] == ["iteration", "stage", "P_c", "P_t", "score", "env_steps"] and len(body) == 3
    assert rows(out / "training_log.csv")[1][0][-1] == "approx_kl"


def test_training_is_reproducible(run, tmp_path):
    cfg, out = run
    assert main(["train", "backdoor", "--config", str(cfg), "--seed", "3", "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "checkpoint_final.stlb").read_bytes() == (out / "checkpoint_final.stlb").read_bytes()
    assert (tmp_path / "learning_curve.csv").read_text() == (out / "learning_curve.csv").read_text()


def test_evaluate_and_replay(run, tmp_path):
    cfg, out = run
    ck = str(out / "checkpoint_final.stlb")
    assert main(["evaluate", "--checkpoint", ck, "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
    _, body = rows(tmp_path / "eval.csv")
    assert [r[3] for r in body[1:]] == ["normal", "trojan"]
    assert main(["replay", "--checkpoint", ck, "--trial-log", str(tmp_path / "trials.csv"), "--row", "5",
                 "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
    _, tr = rows(tmp_path / "transcript.csv")
    assert tr[0] == ["t", "agent_x", "agent_y", "action", "reward", "trigger_flag"]
    assert sum(int(r[5]) for r in tr[1:]) <= 1


def test_sweep_table(run, tmp_path):
    cfg, out = run
    assert main(["evaluate", "--checkpoint", str(out / "checkpoint_final.stlb"), "--sweep", str(cfg),
                 "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
    _, body = rows(tmp_path / "table.csv")
    assert body[0] == ["agent", "7x7/0", "7x7/2"]
    assert [r[0] for r in body[1:]] == ["checkpoint_final:normal", "checkpoint_final:trojan"]


def test_analyze_and_defend(run, tmp_path):
    cfg, out = run
    ck = str(out / "checkpoint_final.stlb")
    common = ["--config", str(cfg), "--out", str(tmp_path)]
    assert main(["analyze", "traces", "--checkpoint", ck] + common) == EXIT_OK
    assert main(["analyze", "classify", "--traces", str(tmp_path)] + common) == EXIT_OK
    assert main(["analyze", "clamp", "--checkpoint", ck, "--traces", str(tmp_path), "--units", "L1C2,L1H0",
                 "--source", "normal-mean"] + common) == EXIT_OK
    assert main(["analyze", "clamp", "--checkpoint", ck, "--units", "L1C1", "--source", "0.25"] + common) == EXIT_OK
    assert main(["analyze", "scan", "--checkpoint", ck] + common) == EXIT_OK
    assert main(["defend", "baseline", "--checkpoint", ck] + common) == EXIT_OK
    assert main(["defend", "monitor", "--checkpoint", ck, "--baseline", str(tmp_path / "baseline.npz")]
                + common) == EXIT_OK
    assert main(["defend", "params", "--checkpoint", ck, "--against", ck] + common) == EXIT_OK
    for name in ("traces_L1_cell.csv", "classes.csv", "clamp.csv", "scan.csv", "monitor.csv", "alerts.csv",
                 "param_hist.csv"):
        assert (tmp_path / name).read_text().startswith("# config_hash="), name


@pytest.mark.parametrize("argv", [[], ["bogus"], ["train"], ["train", "sideways"], ["evaluate", "--nope"],
                                  ["analyze", "clamp", "--units"]])
def test_usage_errors(argv, capsys):
    assert main(argv) == EXIT_USAGE
    assert "usage:" in capsys.readouterr().err


def test_semantic_usage_errors(run, tmp_path):
    cfg, out = run
    ck = str(out / "checkpoint_final.stlb")
    common = ["--config", str(cfg), "--out", str(tmp_path)]
    assert main(["evaluate"] + common) == EXIT_USAGE
    assert main(["analyze", "clamp", "--checkpoint", ck, "--units", "Q9", ] + common) == EXIT_USAGE
    assert main(["analyze", "clamp", "--checkpoint", ck, "--source", "median"] + common) == EXIT_USAGE


def test_runtime_errors(run, tmp_path):
    cfg, out = run
    common = ["--out", str(tmp_path)]
    assert main(["evaluate", "--checkpoint", str(tmp_path / "missing.stlb")] + common) == EXIT_RUNTIME
    bad = tmp_path / "bad.cfg"
    bad.write_text("[trainer]\nlearning_rate = 1\n")
    assert main(["train", "clean", "--config", str(bad)] + common) == EXIT_RUNTIME
    corrupt = tmp_path / "c.stlb"
    corrupt.write_bytes((out / "checkpoint_final.stlb").read_bytes()[:40])
    assert main(["evaluate", "--checkpoint", str(corrupt)] + common) == EXIT_RUNTIME
    assert main(["analyze", "clamp", "--checkpoint", str(out / "checkpoint_final.stlb"), "--units", "L3C0",
                 "--config", str(cfg)] + common) == EXIT_RUNTIME
