"""Success-rate measurement over fresh random grids, and config sweeps."""
from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field

from .agent import StateHook, run_episode
from .gridworld import GridConfig, GridWorld, Outcome
from .lstm import LstmParameters

DEFAULT_TRIALS = 200


@dataclass
class EvalReport:
    config: tuple           # (side_length, hole_count, mode)
    trials: int
    successes: int
    success_rate: float
    outcome_histogram: dict
    per_trial: list = field(default_factory=list, repr=False)   # (trial, grid_seed, outcome, steps, success)

    @property
    def rate_of(self):
        return {k: v / self.trials for k, v in self.outcome_histogram.items()}


def config_seed(seed: int, config: GridConfig) -> int:
    """Per-config seed so a sweep does not depend on config order."""
    key = f"{config.side_length}/{config.hole_count}/{config.mode.value}".encode()
    return (int(seed) ^ zlib.crc32(key)) & 0xFFFFFFFFFFFFFFFF


def trial_seed(seed: int, config: GridConfig, trial: int) -> int:
    # zero-hole grids are identical every trial; only the trigger time varies
    return (config_seed(seed, config) * 1_000_003 + trial) & 0xFFFFFFFFFFFFFFFF


def _params(checkpoint) -> LstmParameters:
    return getattr(checkpoint, "params", checkpoint)


def evaluate(checkpoint, config: GridConfig, trials: int = DEFAULT_TRIALS, seed: int = 0,
             hook_factory=None) -> EvalReport:
    """Greedy play on ``trials`` freshly generated grids.

    ``hook_factory(trial) -> StateHook`` lets interventions (clamping,
    monitoring) share this exact trial loop.
    """
    if trials <= 0:
        raise ValueError("trials must be positive for a success rate to be defined")
    params = _params(checkpoint)
    hist = {o.value: 0 for o in Outcome if o is not Outcome.ONGOING}
    successes = 0
    per_trial = []
    for j in range(trials):
        gs = trial_seed(seed, config, j)
        world = GridWorld.generate(config, gs)
        hook: StateHook | None = hook_factory(j) if hook_factory else None
        ep = run_episode(params, world, greedy=True, hook=hook)
        hist[ep.outcome.value] += 1
        successes += ep.success
        per_trial.append((j, gs, ep.outcome.value, ep.length, bool(ep.success)))
    return EvalReport((config.side_length, config.hole_count, config.mode.value), trials,
                      successes, successes / trials, hist, per_trial)


def sweep(checkpoint, configs, trials: int = DEFAULT_TRIALS, seed: int = 0) -> list[EvalReport]:
    return [evaluate(checkpoint, c, trials, seed) for c in configs]


def write_table_csv(path, rows: dict, comment: str | None = None):
    """``rows`` maps agent name -> list of EvalReport; columns are (side, holes)."""
    cols = []
    for reports in rows.values():
        for r in reports:
            key = (r.config[0], r.config[1])
            if key not in cols:
                cols.append(key)
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(["agent"] + [f"{s}x{s}/{h}" for s, h in cols])
        for name, reports in rows.items():
            by = {(r.config[0], r.config[1]): r.success_rate for r in reports}
            w.writerow([name] + [f"{by[c]:.3f}" if c in by else "" for c in cols])


def write_trial_log(path, reports, comment: str | None = None):
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(["side", "holes", "mode", "trial", "grid_seed", "outcome", "steps", "success"])
        for r in reports:
            for trial, gs, outcome, steps, ok in r.per_trial:
                w.writerow([*r.config, trial, gs, outcome, steps, int(ok)])
