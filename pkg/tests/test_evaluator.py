import pytest

from lstmtrojan.evaluator import evaluate, sweep, write_table_csv, write_trial_log
from lstmtrojan.gridworld import GridConfig, Mode
from lstmtrojan.lstm import init_parameters


@pytest.fixture(scope="module")
def net():
    return init_parameters(54, (5,), 3)


def test_counts_are_consistent(net):
    r = evaluate(net, GridConfig(7, 3, max_steps=25), trials=30, seed=1)
    assert r.trials == 30 and sum(r.outcome_histogram.values()) == 30
    assert r.success_rate == r.successes / 30
    assert r.successes == r.outcome_histogram["user_dest"]
    assert r.outcome_histogram["ongoing" if "ongoing" in r.outcome_histogram else "hole"] >= 0


def test_trojan_success_is_adv_dest(net):
    r = evaluate(net, GridConfig(7, 3, Mode.TROJAN, (2, 3), max_steps=25), trials=30, seed=1)
    assert r.successes == r.outcome_histogram["adv_dest"]


def test_reproducible_and_seed_sensitive(net):
    cfg = GridConfig(9, 6, max_steps=30)
    a, b = evaluate(net, cfg, 20, 7), evaluate(net, cfg, 20, 7)
    assert a.per_trial == b.per_trial
    c = evaluate(net, cfg, 20, 8)
    assert [t[1] for t in a.per_trial] != [t[1] for t in c.per_trial]


def test_sweep_independent_of_order(net):
    cfgs = [GridConfig(7, 2, max_steps=20), GridConfig(9, 5, max_steps=20)]
    fwd = sweep(net, cfgs, 10, 4)
    rev = sweep(net, cfgs[::-1], 10, 4)[::-1]
    assert [r.per_trial for r in fwd] == [r.per_trial for r in rev]


def test_zero_trials_rejected(net):
    with pytest.raises(ValueError):
        evaluate(net, GridConfig(7, 0), trials=0)


def test_table_csv(tmp_path, net):
    cfgs = [GridConfig(7, 0, max_steps=15), GridConfig(7, 2, max_steps=15)]
    rows = {"clean": sweep(net, cfgs, 5, 0), "backdoor": sweep(net, cfgs, 5, 0)}
    p = tmp_path / "table.csv"
    write_table_csv(p, rows, comment="cfg=x seed=0")
    lines = p.read_text().splitlines()
    assert lines[0] == "# cfg=x seed=0" and lines[1] == "agent,7x7/0,7x7/2" and len(lines) == 4
    write_trial_log(tmp_path / "trials.csv", rows["clean"])
    assert len((tmp_path / "trials.csv").read_text().splitlines()) == 11
