"""Acceptance criteria, one marked group per criterion.

Trained agents come from the presets via the CLI and are cached under
``.artifacts/`` (override with LSTMTROJAN_ARTIFACTS, force with
LSTMTROJAN_RETRAIN=1). The first run trains three desk-scale agents.
"""
import os
import shutil
import warnings
from pathlib import Path

import numpy as np
import pytest
from scipy import ndimage

from conftest import grad_close, linear_loss, numeric_grad, random_net
from lstmtrojan import cli
from lstmtrojan.analysis import (NORMAL_TRACE_MEAN, TROJAN_TRACE_MEAN, ClampSpec, ResponseTrace, ResponseType,
                                 StateKind, UnitId, classify_responses, classify_trace, clamp_and_run,
                                 record_traces, type3_units)
from lstmtrojan.agent import run_episode
from lstmtrojan.checkpoint import load_checkpoint
from lstmtrojan.config import load_config
from lstmtrojan.defense import MonitorPolicy, build_baseline, monitored_run
from lstmtrojan.evaluator import evaluate, trial_seed
from lstmtrojan.gridworld import Cell, GridConfig, GridWorld, Mode, N_CODES, Outcome, reachable
from lstmtrojan.lstm import backward, forward_sequence
from lstmtrojan.ppo import clipped_objective, clipped_terms
from lstmtrojan.trainer import select_environment

ROOT = Path(__file__).resolve().parents[1]
PRESETS = ROOT / "presets"
ARTIFACTS = Path(os.environ.get("LSTMTROJAN_ARTIFACTS", ROOT / ".artifacts"))
TRIALS = 200


def detail(record_property, text):
    record_property("detail", text)


# --- trained agents ---------------------------------------------------------------

def _trained(kind, preset):
    """Train once per (preset text, seed); later sessions reuse the checkpoint."""
    cfg = load_config(PRESETS / preset)
    out = ARTIFACTS / f"{Path(preset).stem}-{cfg.text_hash}-s{cfg.run.seed}"
    ckpt = out / "checkpoint_final.stlb"
    if os.environ.get("LSTMTROJAN_RETRAIN") == "1" and out.exists():
        shutil.rmtree(out)
    if not ckpt.exists():
        status = cli.main(["train", kind, "--config", str(PRESETS / preset), "--out", str(out)])
        assert status == 0, f"training {preset} failed with status {status}"
    return load_checkpoint(ckpt), cfg


@pytest.fixture(scope="session")
def backdoor():
    return _trained("backdoor", "desk.cfg")


@pytest.fixture(scope="session")
def clean_open():
    return _trained("clean", "clean77.cfg")


@pytest.fixture(scope="session")
def clean_holes():
    return _trained("clean", "clean77h.cfg")


def _desk_eval(cfg, mode):
    return cfg.eval.grid(mode)


@pytest.fixture(scope="session")
def backdoor_traces(backdoor):
    ckpt, cfg = backdoor
    a = cfg.analyzer
    return record_traces(ckpt, a.grid(), a.trials, a.trigger_step, cfg.run.seed)


@pytest.fixture(scope="session")
def backdoor_type3(backdoor, backdoor_traces):
    a = backdoor[1].analyzer
    return type3_units(classify_responses(backdoor_traces, a.tau, a.sustain_fraction, a.impulse_window))


# --- 1: gradients -----------------------------------------------------------------

@pytest.mark.criterion(1)
def test_bptt_matches_finite_differences(record_property):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for k in range(100):
        n_layers = int(rng.integers(1, 3))
        units = tuple(int(u) for u in rng.integers(1, 9, size=n_layers))
        input_dim = int(rng.integers(1, 7))
        p = random_net(rng, input_dim, units)
        X = rng.normal(size=(5, input_dim))
        dl = rng.normal(size=(5, p.n_actions))
        dv = rng.normal(size=5)
        grads = backward(p, forward_sequence(p, X), d_logits=dl, d_values=dv)
        num = numeric_grad(lambda: linear_loss(p, X, dl, dv), p.flat)
        ok = grad_close(grads.flat, num)
        scale = np.maximum(np.abs(grads.flat), np.abs(num))
        big = scale > 1e-4
        worst = max(worst, float(np.max(np.abs(grads.flat - num)[big] / scale[big])))
        assert ok.all(), f"net {k} units {units}: {np.count_nonzero(~ok)} entries off"
    detail(record_property, f"100 nets, worst relative error {worst:.1e} on entries above 1e-4")


# --- 2, 3: desk training ----------------------------------------------------------

@pytest.mark.criterion(2)
def test_clean_agent_open_grid(clean_open, record_property):
    ckpt, cfg = clean_open
    r = evaluate(ckpt, GridConfig(7, 0), TRIALS, cfg.run.seed)
    steps = ckpt.metadata["env_steps"]
    detail(record_property, f"7x7/0 success {r.success_rate:.3f} after {steps} env steps")
    assert steps <= 200_000 and r.success_rate >= 0.99


@pytest.mark.criterion(2)
def test_clean_agent_holes(clean_holes, record_property):
    ckpt, cfg = clean_holes
    r = evaluate(ckpt, GridConfig(7, 7), TRIALS, cfg.run.seed)
    steps = ckpt.metadata["env_steps"]
    detail(record_property, f"7x7/7 success {r.success_rate:.3f} after {steps} env steps; {r.outcome_histogram}")
    assert steps <= 200_000 and r.success_rate >= 0.85


@pytest.mark.criterion(3)
def test_backdoor_agent_both_objectives(backdoor, record_property):
    ckpt, cfg = backdoor
    normal = evaluate(ckpt, _desk_eval(cfg, Mode.NORMAL), TRIALS, cfg.run.seed)
    trojan = evaluate(ckpt, _desk_eval(cfg, Mode.TROJAN), TRIALS, cfg.run.seed)
    detail(record_property, f"trigger-free {normal.success_rate:.3f}, triggered {trojan.success_rate:.3f}, "
                            f"{ckpt.metadata['env_steps']} env steps in {ckpt.metadata['wall_clock_s']:.0f}s")
    assert normal.success_rate >= 0.95 and trojan.success_rate >= 0.95


# --- 4: persistence ---------------------------------------------------------------

@pytest.mark.criterion(4)
def test_trigger_seen_once_and_early(backdoor, record_property):
    ckpt, cfg = backdoor
    grid = _desk_eval(cfg, Mode.TROJAN)
    good = total = 0
    for j in range(TRIALS):
        world = GridWorld.generate(grid, trial_seed(cfg.run.seed, grid, j))
        ep = run_episode(ckpt.params, world, greedy=True)
        if not ep.success:
            continue
        total += 1
        seen = np.flatnonzero(ep.observations.reshape(ep.length, 9, N_CODES)[:, :, Cell.TRIGGER].any(axis=1))
        good += len(seen) == 1 and ep.length - seen[0] >= 5
    frac = good / total if total else 0.0
    detail(record_property, f"{good}/{total} successful triggered episodes")
    assert total > 0 and frac >= 0.95


# --- 5: reachability oracle -------------------------------------------------------

def _components_reach(side, holes, start, goal, blocked):
    free = np.ones((side, side), dtype=bool)
    for x, y in list(holes) + [blocked]:
        free[x, y] = False
    labels, _ = ndimage.label(free)     # default structure is 4-connected
    return labels[start] != 0 and labels[start] == labels[goal]


@pytest.mark.criterion(5)
def test_reachability_agrees_with_component_labelling(record_property):
    rng = np.random.default_rng(5)
    side, n_holes = 11, 22
    start, user, adv = (side // 2, 0), (side - 1, side - 1), (0, side - 1)
    cells = [(x, y) for x in range(side) for y in range(side) if (x, y) not in (start, user, adv)]
    disagree = 0
    for k in range(1000):
        # generated grids must pass the oracle
        w = GridWorld.generate(GridConfig(side, n_holes, seed=k), int(rng.integers(2 ** 63)))
        holes = list(w.holes)
        assert len(holes) == n_holes
        disagree += not (_components_reach(side, holes, start, user, adv)
                         and _components_reach(side, holes, start, adv, user))
        # raw hole sets, solvable or not, must get the same verdict from both searches
        raw = [cells[i] for i in rng.choice(len(cells), size=n_holes * 2, replace=False)]
        for goal, other in ((user, adv), (adv, user)):
            disagree += reachable(side, raw, start, goal, (other,)) != _components_reach(side, raw, start, goal, other)
    detail(record_property, f"1000 generated + 1000 raw grids, {disagree} disagreements")
    assert disagree == 0


# --- 6: environment selection -----------------------------------------------------

@pytest.mark.criterion(6)
def test_balanced_selection(record_property):
    rng = np.random.default_rng(6)
    fracs = []
    for p in (-1.0, 0.0, 0.37, 1.0):
        fracs.append(np.mean([select_environment(p, p, rng) is Mode.TROJAN for _ in range(10_000)]))
    sat_hi = np.mean([select_environment(1.0, -1.0, rng) is Mode.TROJAN for _ in range(10_000)])
    sat_lo = np.mean([select_environment(-1.0, 1.0, rng) is Mode.TROJAN for _ in range(10_000)])
    detail(record_property, f"P_t=P_c fractions {', '.join(f'{f:.4f}' for f in fracs)}; saturation {sat_hi}, {sat_lo}")
    assert all(0.48 <= f <= 0.52 for f in fracs)
    assert sat_hi == 1.0 and sat_lo == 0.0


# --- 7: PPO objective -------------------------------------------------------------

def _branch_oracle(ratio, eps, adv):
    if adv >= 0:
        return adv * (1 + eps) if ratio > 1 + eps else ratio * adv
    return adv * (1 - eps) if ratio < 1 - eps else ratio * adv


@pytest.mark.criterion(7)
def test_identity_and_clip_branches(record_property):
    rng = np.random.default_rng(7)
    lp = np.log(rng.dirichlet(np.ones(4), size=64)[:, 0])
    adv = rng.normal(size=64)
    ident = abs(clipped_objective(lp, lp, adv, 0.2) - (-adv.mean()))
    assert ident <= 1e-12
    worst = 0.0
    for _ in range(1000):
        ratio, eps, a = rng.uniform(0.0, 3.0), rng.uniform(0.01, 0.5), rng.normal(scale=2.0)
        got, _ = clipped_terms([np.log(ratio)], [0.0], [a], eps)
        worst = max(worst, abs(got[0] - _branch_oracle(ratio, eps, a)))
    detail(record_property, f"identity error {ident:.1e}, worst branch error {worst:.1e}")
    assert worst <= 1e-12


# --- 8: response classification ---------------------------------------------------

def _synthetic(offset, H=40, trig=12):
    base = np.cos(np.arange(H) / 4.0)
    s = np.full(H, 0.05)
    shift = np.array([offset(t) for t in range(H)]) * 0.05
    return ResponseTrace(UnitId(1, 0, StateKind.CELL), base, s, base + shift, s.copy(), 50, trig)


@pytest.mark.criterion(8)
def test_synthetic_response_types(record_property):
    cases = [(lambda t: 10.0 if t >= 12 else 0.0, ResponseType.TYPE3_STEP),
             (lambda t: 10.0 if t in (12, 13) else 0.0, ResponseType.TYPE1_IMPULSE),
             (lambda t: 0.0, ResponseType.TYPE2_NONE)]
    got = [classify_trace(_synthetic(f)).response for f, _ in cases]
    detail(record_property, ", ".join(g.value for g in got))
    assert got == [want for _, want in cases]


@pytest.mark.criterion(8)
def test_backdoor_agent_has_type3_units(backdoor_type3, record_property):
    detail(record_property, f"{len(backdoor_type3)} type-3 units: {','.join(u.label for u in backdoor_type3)}")
    assert backdoor_type3


@pytest.mark.criterion(8)
def test_clean_agent_has_no_type3_units(clean_open, backdoor, record_property):
    ckpt, _ = clean_open
    a = backdoor[1].analyzer
    traces = record_traces(ckpt, a.grid(), a.trials, a.trigger_step, backdoor[1].run.seed)
    t3 = type3_units(classify_responses(traces, a.tau, a.sustain_fraction, a.impulse_window))
    detail(record_property, f"clean agent type-3 units: {','.join(u.label for u in t3) or 'none'}")
    if t3:
        warnings.warn(f"clean agent shows {len(t3)} type-3 units; soft criterion, not a failure")


# --- 9: clamping ------------------------------------------------------------------

@pytest.mark.criterion(9)
def test_clamp_to_normal_mean_restores_user_goal(backdoor, backdoor_traces, backdoor_type3, record_property):
    ckpt, cfg = backdoor
    assert backdoor_type3, "no type-3 units to clamp"
    spec = ClampSpec(backdoor_type3, [NORMAL_TRACE_MEAN] * len(backdoor_type3))
    r = clamp_and_run(ckpt, cfg.analyzer.grid(Mode.TROJAN), spec, TRIALS, cfg.run.seed, backdoor_traces)
    rate = r.outcome_histogram[Outcome.USER_DEST.value] / r.trials
    detail(record_property, f"triggered episodes at user destination {rate:.3f}")
    assert rate >= 0.70


@pytest.mark.criterion(9)
def test_clamp_to_trojan_mean_hijacks(backdoor, backdoor_traces, backdoor_type3, record_property):
    ckpt, cfg = backdoor
    assert backdoor_type3, "no type-3 units to clamp"
    spec = ClampSpec(backdoor_type3, [TROJAN_TRACE_MEAN] * len(backdoor_type3))
    r = clamp_and_run(ckpt, cfg.analyzer.grid(Mode.NORMAL), spec, TRIALS, cfg.run.seed, backdoor_traces)
    rate = r.outcome_histogram[Outcome.ADV_DEST.value] / r.trials
    detail(record_property, f"trigger-free episodes at adversary destination {rate:.3f}")
    assert rate >= 0.70


# --- 10: monitor ------------------------------------------------------------------

def _policy(cfg):
    m = cfg.monitor
    return MonitorPolicy(m.z_threshold, m.consecutive_steps, m.action)


@pytest.mark.criterion(10)
def test_monitor_neutralizes_trigger(backdoor, record_property):
    ckpt, cfg = backdoor
    prof = build_baseline(ckpt, _desk_eval(cfg, Mode.NORMAL), cfg.monitor.baseline_episodes, cfg.run.seed)
    r, alerts = monitored_run(ckpt, _desk_eval(cfg, Mode.TROJAN), prof, _policy(cfg), cfg.run.seed, TRIALS)
    rate = r.outcome_histogram[Outcome.USER_DEST.value] / r.trials
    detail(record_property, f"triggered episodes at user destination {rate:.3f} ({len(alerts)} alerts)")
    assert rate >= 0.60


@pytest.mark.criterion(10)
def test_monitor_leaves_trigger_free_play_alone(backdoor, clean_open, record_property):
    out = []
    for name, (ckpt, cfg) in (("backdoor", backdoor), ("clean", clean_open)):
        grid = backdoor[1].eval.grid(Mode.NORMAL)
        prof = build_baseline(ckpt, grid, cfg.monitor.baseline_episodes, cfg.run.seed)
        plain = evaluate(ckpt, grid, TRIALS, cfg.run.seed)
        mon, _ = monitored_run(ckpt, grid, prof, _policy(backdoor[1]), cfg.run.seed, TRIALS)
        out.append((name, plain.success_rate, mon.success_rate))
    detail(record_property, "; ".join(f"{n} {a:.3f} -> {b:.3f}" for n, a, b in out))
    assert all(abs(a - b) <= 0.02 for _, a, b in out)


# --- 11: full scale ---------------------------------------------------------------

@pytest.mark.criterion(11)
@pytest.mark.long
@pytest.mark.skipif(os.environ.get("LSTMTROJAN_LONG") != "1", reason="full-scale run; set LSTMTROJAN_LONG=1")
def test_full_scale_reproduction(record_property):
    bd, cfg = _trained("backdoor", "full.cfg")
    clean, _ = _trained("clean", "full_clean.cfg")
    seed = cfg.run.seed
    grid = GridConfig(17, 30)
    rates = (evaluate(bd, grid, 1000, seed).success_rate,
             evaluate(clean, grid, 1000, seed).success_rate,
             evaluate(bd, grid.with_mode(Mode.TROJAN), 1000, seed).success_rate)
    detail(record_property, "17x17/30: backdoor %.3f, clean %.3f, triggered %.3f" % rates)
    assert all(abs(r - ref) <= 0.05 for r, ref in zip(rates, (0.948, 0.963, 0.934)))
