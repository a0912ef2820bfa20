"""Online internal-state monitor and offline parameter-distribution report."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .agent import run_episode
from .analysis import StateKind, UnitId, unit_index
from .evaluator import DEFAULT_TRIALS, EvalReport, evaluate
from .gridworld import GridConfig, GridWorld, Mode
from .lstm import LstmParameters, LstmState
from .seeding import child_seed

Z_EPS = 1e-6


def _params(checkpoint) -> LstmParameters:
    return getattr(checkpoint, "params", checkpoint)


class RunningStats:
    """Welford accumulator over vectors."""

    def __init__(self, n):
        self.count = 0
        self.mean = np.zeros(n)
        self.m2 = np.zeros(n)

    def push(self, x):
        self.count += 1
        d = x - self.mean
        self.mean += d / self.count
        self.m2 += d * (x - self.mean)

    @property
    def variance(self):
        return self.m2 / self.count if self.count else np.zeros_like(self.m2)


@dataclass
class BaselineProfile:
    units: list
    mean: np.ndarray
    variance: np.ndarray
    sample_count: int

    def index_of(self, unit: UnitId) -> int:
        return self.units.index(unit)

    def save(self, path):
        np.savez(path, mean=self.mean, variance=self.variance, sample_count=self.sample_count,
                 units=np.array([(u.layer, u.unit, u.kind is StateKind.CELL) for u in self.units]))

    @classmethod
    def load(cls, path) -> "BaselineProfile":
        z = np.load(path)
        units = [UnitId(int(l), int(j), StateKind.CELL if c else StateKind.HIDDEN) for l, j, c in z["units"]]
        return cls(units, z["mean"], z["variance"], int(z["sample_count"]))


def build_baseline(checkpoint, config: GridConfig, episodes: int, seed: int) -> BaselineProfile:
    """Per-unit mean/variance of c and h over every step of trusted trigger-free play."""
    if episodes < 2:
        raise ValueError("baseline needs at least 2 episodes")
    params = _params(checkpoint)
    normal = GridConfig(config.side_length, config.hole_count, Mode.NORMAL,
                        config.trigger_step_range, config.max_steps)
    units = unit_index(params.units)
    acc = RunningStats(len(units))
    for j in range(episodes):
        world = GridWorld.generate(normal, child_seed(seed, "baseline", j))
        ep = run_episode(params, world, greedy=True, record_states=True)
        for s in ep.states:
            acc.push(s.flatten())
    return BaselineProfile(units, acc.mean.copy(), acc.variance, acc.count)


class MonitorAction(str, Enum):
    REPORT = "report"
    RESET_UNIT = "reset-unit"
    RESET_ALL = "reset-all"


@dataclass
class MonitorPolicy:
    z_threshold: float = 4.0
    consecutive_steps: int = 3
    action: MonitorAction = MonitorAction.REPORT
    watch: list | None = None      # unit ids to monitor; None = all

    def __post_init__(self):
        self.action = MonitorAction(self.action)
        if self.z_threshold <= 0 or self.consecutive_steps < 1:
            raise ValueError("z_threshold must be positive and consecutive_steps >= 1")


@dataclass
class Alert:
    episode: int
    step: int
    unit: UnitId
    z: float
    action: MonitorAction


class _EpisodeMonitor:
    def __init__(self, params, profile: BaselineProfile, policy: MonitorPolicy, episode, log):
        self.params, self.profile, self.policy = params, profile, policy
        self.episode, self.log = episode, log
        watch = policy.watch if policy.watch is not None else profile.units
        self.idx = np.array([profile.index_of(u) for u in watch], dtype=int)
        self.sd = np.sqrt(profile.variance[self.idx]) + Z_EPS
        self.mu = profile.mean[self.idx]
        self.run = np.zeros(len(self.idx), dtype=int)
        # offsets of each layer's c and h blocks inside LstmState.flatten()
        self.offsets = []
        pos = 0
        for u in params.units:
            self.offsets.append((pos, pos + u))
            pos += 2 * u

    def __call__(self, t, state: LstmState, world):
        z = np.abs(state.flatten()[self.idx] - self.mu) / self.sd
        over = z > self.policy.z_threshold
        self.run = np.where(over, self.run + 1, 0)
        fired = np.flatnonzero(self.run >= self.policy.consecutive_steps)
        if fired.size == 0:
            return None
        self.run[fired] = 0
        units = [self.profile.units[self.idx[k]] for k in fired]
        for k, u in zip(fired, units):
            self.log.append(Alert(self.episode, t, u, float(z[k]), self.policy.action))
        if self.policy.action is MonitorAction.REPORT:
            return None
        if self.policy.action is MonitorAction.RESET_ALL:
            return LstmState.zeros(self.params)
        new = state.copy()
        mean = self.profile.mean
        for u in units:
            c0, h0 = self.offsets[u.layer]
            new.c[u.layer][u.unit] = mean[c0 + u.unit]
            new.h[u.layer][u.unit] = mean[h0 + u.unit]
        return new


def monitored_run(checkpoint, config: GridConfig, profile: BaselineProfile, policy: MonitorPolicy,
                  seed: int, episodes: int = DEFAULT_TRIALS) -> tuple[EvalReport, list[Alert]]:
    params = _params(checkpoint)
    if len(profile.units) != 2 * sum(params.units):
        raise ValueError("baseline profile does not cover every unit of this network")
    alerts: list[Alert] = []
    report = evaluate(params, config, episodes, seed,
                      hook_factory=lambda j: _EpisodeMonitor(params, profile, policy, j, alerts))
    return report, alerts


def write_alerts_csv(path, alerts, comment: str | None = None):
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(["episode", "step", "layer", "unit", "kind", "z", "action"])
        for a in alerts:
            w.writerow([a.episode, a.step, a.unit.layer + 1, a.unit.unit, a.unit.kind.value,
                        f"{a.z:.6g}", a.action.value])


# --- parameter distributions ------------------------------------------------

class ArchitectureMismatchError(ValueError):
    pass


NEAR_ZERO = 1e-3
N_BINS = 20


@dataclass
class ArrayStats:
    name: str
    mean: float
    std: float
    kurtosis: float
    near_zero: float
    hist: np.ndarray
    edges: np.ndarray = field(repr=False, default=None)


def _kurtosis(w):
    sd = w.std()
    if sd == 0:
        return 0.0
    return float(np.mean(((w - w.mean()) / sd) ** 4) - 3.0)


def _describe(name, w, edges):
    w = w.ravel()
    hist, _ = np.histogram(w, bins=edges)
    return ArrayStats(name, float(w.mean()), float(w.std()), _kurtosis(w),
                      float(np.mean(np.abs(w) < NEAR_ZERO)), hist, edges)


@dataclass
class DistributionReport:
    rows: list     # (name, ArrayStats a, ArrayStats b)

    def diffs(self):
        return {name: {"mean": b.mean - a.mean, "std": b.std - a.std,
                       "kurtosis": b.kurtosis - a.kurtosis, "near_zero": b.near_zero - a.near_zero,
                       "hist": b.hist - a.hist}
                for name, a, b in self.rows}

    def to_text(self) -> str:
        lines = [f"{'array':<18} {'mean_a':>10} {'mean_b':>10} {'std_a':>9} {'std_b':>9} "
                 f"{'kurt_a':>8} {'kurt_b':>8} {'nz_a':>6} {'nz_b':>6}"]
        for name, a, b in self.rows:
            lines.append(f"{name:<18} {a.mean:>10.4f} {b.mean:>10.4f} {a.std:>9.4f} {b.std:>9.4f} "
                         f"{a.kurtosis:>8.3f} {b.kurtosis:>8.3f} {a.near_zero:>6.3f} {b.near_zero:>6.3f}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path, comment: str | None = None):
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh)
            w.writerow(["array", "bin_lo", "bin_hi", "count_a", "count_b"])
            for name, a, b in self.rows:
                for k in range(len(a.hist)):
                    w.writerow([name, f"{a.edges[k]:.6g}", f"{a.edges[k + 1]:.6g}", a.hist[k], b.hist[k]])


def parameter_distribution_report(checkpoint_a, checkpoint_b) -> DistributionReport:
    """Side-by-side weight statistics per named array (W1..W8, b1..b4 per layer, heads)."""
    pa, pb = _params(checkpoint_a), _params(checkpoint_b)
    if pa.dims != pb.dims:
        raise ArchitectureMismatchError(f"cannot compare {pa.dims} with {pb.dims}")
    rows = []
    for (name, a), (_, b) in zip(pa.named_arrays(), pb.named_arrays()):
        lo = min(a.min(), b.min())
        hi = max(a.max(), b.max())
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
        edges = np.linspace(lo, hi, N_BINS + 1)
        rows.append((name, _describe(name, a, edges), _describe(name, b, edges)))
    return DistributionReport(rows)
