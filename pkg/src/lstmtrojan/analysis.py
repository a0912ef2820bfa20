"""Internal-state forensics: paired trace recording, Type 1/2/3 response
classification, state clamping and the unintentional-trigger scan."""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .agent import run_episode
from .evaluator import EvalReport, evaluate
from .gridworld import GridConfig, GridWorld, Mode, Outcome
from .lstm import LstmParameters, LstmState
from .seeding import child_rng, child_seed

DEFAULT_TAU = 2.0
DEFAULT_SUSTAIN = 0.8
IMPULSE_WINDOW = 5
POOLED_EPS = 1e-6


class StateKind(str, Enum):
    CELL = "cell"
    HIDDEN = "hidden"


class UnitId(NamedTuple):
    layer: int      # 0-based
    unit: int       # 0-based
    kind: StateKind

    @property
    def label(self) -> str:
        return f"L{self.layer + 1}{'C' if self.kind is StateKind.CELL else 'H'}{self.unit}"

    @classmethod
    def parse(cls, text: str) -> "UnitId":
        """``L2C5`` is layer 2 (1-based), cell state, unit 5 (0-based)."""
        m = re.fullmatch(r"[Ll](\d+)([CcHh])(\d+)", text.strip())
        if not m or int(m.group(1)) < 1:
            raise ValueError(f"bad unit id {text!r}; expected e.g. L2C5 or L1H0")
        kind = StateKind.CELL if m.group(2).upper() == "C" else StateKind.HIDDEN
        return cls(int(m.group(1)) - 1, int(m.group(3)), kind)


class UnknownUnitError(KeyError):
    pass


def unit_index(units) -> list[UnitId]:
    """Unit ids in ``LstmState.flatten`` order (c1, h1, c2, h2, ...)."""
    out = []
    for k, u in enumerate(units):
        out += [UnitId(k, j, StateKind.CELL) for j in range(u)]
        out += [UnitId(k, j, StateKind.HIDDEN) for j in range(u)]
    return out


def _params(checkpoint) -> LstmParameters:
    return getattr(checkpoint, "params", checkpoint)


@dataclass
class ResponseTrace:
    unit_id: UnitId
    mean_normal: np.ndarray
    std_normal: np.ndarray
    mean_trojan: np.ndarray
    std_trojan: np.ndarray
    trials: int
    trigger_step: int


@dataclass
class Population:
    """Padded per-trial state values (trials x horizon x units) with an alive mask."""

    values: np.ndarray
    alive: np.ndarray
    gates_if: np.ndarray = field(default=None, repr=False)   # trials x horizon x (i, f per unit)
    outcomes: list = field(default_factory=list)

    def stats(self):
        n = self.alive.sum(axis=0)                              # horizon
        w = self.alive[:, :, None].astype(float)
        cnt = np.maximum(n, 1)[:, None]
        mean_alive = (self.values * w).sum(axis=0) / cnt
        var_alive = (((self.values - mean_alive) ** 2) * w).sum(axis=0) / cnt
        mean_all = self.values.mean(axis=0)
        var_all = self.values.var(axis=0)
        none = (n == 0)[:, None]
        mean = np.where(none, mean_all, mean_alive)
        std = np.sqrt(np.maximum(np.where(none, var_all, var_alive), 0.0))
        return mean, std


@dataclass
class TraceSet:
    units: list
    trigger_step: int
    normal: Population
    trojan: Population

    @property
    def trials(self) -> int:
        return self.normal.values.shape[0]

    @property
    def horizon(self) -> int:
        return self.normal.values.shape[1]

    def summary(self):
        """``(mean_N, std_N, mean_T, std_T)``, each horizon x units."""
        mn, sn = self.normal.stats()
        mt, st = self.trojan.stats()
        return mn, sn, mt, st

    def traces(self) -> list[ResponseTrace]:
        mn, sn, mt, st = self.summary()
        return [ResponseTrace(u, mn[:, k], sn[:, k], mt[:, k], st[:, k], self.trials, self.trigger_step)
                for k, u in enumerate(self.units)]

    def mean_series(self, population: str) -> dict:
        mn, _, mt, _ = self.summary()
        arr = mn if population == "normal" else mt
        return {u: arr[:, k] for k, u in enumerate(self.units)}


def _run_population(params, config: GridConfig, trials, seed, horizon, greedy=False, check=True) -> Population:
    n_units = 2 * sum(params.units)
    n_gate = 2 * sum(params.units)
    values = np.zeros((trials, horizon, n_units))
    gates_if = np.zeros((trials, horizon, n_gate))
    alive = np.zeros((trials, horizon), dtype=bool)
    outcomes = []
    for j in range(trials):
        # same grid and action stream for the j-th normal and trojan run: pairs agree until the trigger
        world = GridWorld.generate(config, child_seed(seed, "grid", j))
        ep = run_episode(params, world, child_rng(seed, "act", j), greedy=greedy, record_states=True)
        T = min(ep.length, horizon)
        for t in range(T):
            values[j, t] = ep.states[t].flatten()
            gates_if[j, t] = np.concatenate(
                [np.concatenate([a[2 * u:3 * u], a[u:2 * u]]) for a, u in zip(ep.gates[t], params.units)])
        values[j, T:] = values[j, T - 1]
        gates_if[j, T:] = gates_if[j, T - 1]
        alive[j, :T] = True
        outcomes.append(ep.outcome)
        if check:
            _assert_state_bounds(params, ep.states)
    return Population(values, alive, gates_if, outcomes)


def _assert_state_bounds(params, states):
    for t, s in enumerate(states):
        for c, h in zip(s.c, s.h):
            if not (np.all(np.abs(h) < 1.0) and np.all(np.abs(c) <= t + 1)):
                raise AssertionError(f"recurrent state out of bounds at step {t}")


def record_traces(checkpoint, config: GridConfig, trials: int, trigger_step: int, seed: int,
                  horizon: int | None = None, greedy: bool = False) -> TraceSet:
    """Paired normal/trojan runs with the trigger pinned at ``trigger_step``.

    Actions are sampled so the populations have spread even on hole-free
    grids, where greedy play would repeat one trajectory.
    """
    params = _params(checkpoint)
    if trials < 1:
        raise ValueError("trials must be positive")
    normal = GridConfig(config.side_length, config.hole_count, Mode.NORMAL,
                        (trigger_step, trigger_step), config.max_steps)
    trojan = normal.with_mode(Mode.TROJAN)
    horizon = horizon or normal.max_steps
    return TraceSet(unit_index(params.units), trigger_step,
                    _run_population(params, normal, trials, seed, horizon, greedy),
                    _run_population(params, trojan, trials, seed, horizon, greedy))


class ResponseType(str, Enum):
    TYPE1_IMPULSE = "type1_impulse"
    TYPE2_NONE = "type2_none"
    TYPE3_STEP = "type3_step"


@dataclass
class ResponseClass:
    unit_id: UnitId
    response: ResponseType
    divergence_onset: int | None
    divergence_duration: int


def divergence(trace: ResponseTrace) -> np.ndarray:
    pooled = np.sqrt(0.5 * (trace.std_normal ** 2 + trace.std_trojan ** 2))
    return np.abs(trace.mean_trojan - trace.mean_normal) / (pooled + POOLED_EPS)


def classify_trace(trace: ResponseTrace, tau=DEFAULT_TAU, sustain_fraction=DEFAULT_SUSTAIN,
                   impulse_window=IMPULSE_WINDOW) -> ResponseClass:
    over = divergence(trace)[trace.trigger_step:] > tau
    hits = np.flatnonzero(over)
    if hits.size == 0:
        return ResponseClass(trace.unit_id, ResponseType.TYPE2_NONE, None, 0)
    onset = trace.trigger_step + int(hits[0])
    duration = int(hits.size)
    if over.mean() >= sustain_fraction:
        kind = ResponseType.TYPE3_STEP
    elif hits[0] < impulse_window and not over[impulse_window:].any():
        kind = ResponseType.TYPE1_IMPULSE
    else:
        kind = ResponseType.TYPE2_NONE
    return ResponseClass(trace.unit_id, kind, onset, duration)


def classify_responses(traces, tau=DEFAULT_TAU, sustain_fraction=DEFAULT_SUSTAIN,
                       impulse_window=IMPULSE_WINDOW) -> list[ResponseClass]:
    if isinstance(traces, TraceSet):
        if traces.trials < 2:
            raise ValueError("classification needs traces aggregated over at least 2 trials")
        traces = traces.traces()
    return [classify_trace(t, tau, sustain_fraction, impulse_window) for t in traces]


def type3_units(classes) -> list[UnitId]:
    return [c.unit_id for c in classes if c.response is ResponseType.TYPE3_STEP]


# --- clamping -------------------------------------------------------------

@dataclass(frozen=True)
class FixedScalar:
    value: float


NORMAL_TRACE_MEAN = "normal-mean"
TROJAN_TRACE_MEAN = "trojan-mean"


@dataclass
class ClampSpec:
    targets: list
    values: list            # per target: FixedScalar, NORMAL_TRACE_MEAN or TROJAN_TRACE_MEAN
    active_window: tuple = (0, None)   # [start, end), end None = episode end

    def __post_init__(self):
        if len(self.targets) != len(self.values):
            raise ValueError("each clamp target needs one value source")


def _check_units(params, targets):
    for u in targets:
        if not (0 <= u.layer < len(params.units) and 0 <= u.unit < params.units[u.layer]):
            raise UnknownUnitError(f"{u.label} is not a unit of a {params.units} network")


def make_clamp_hook(params, clamp: ClampSpec, traces: TraceSet | None = None):
    """State hook that overwrites the clamped components inside the window."""
    _check_units(params, clamp.targets)
    if not clamp.targets:
        return None
    series = {}
    for src in set(v for v in clamp.values if not isinstance(v, FixedScalar)):
        if traces is None:
            raise ValueError(f"clamp source {src!r} needs recorded traces")
        series[src] = traces.mean_series("normal" if src == NORMAL_TRACE_MEAN else "trojan")
    start, end = clamp.active_window

    def hook(t, state: LstmState, world):
        if t < start or (end is not None and t >= end):
            return None
        new = state.copy()
        for u, src in zip(clamp.targets, clamp.values):
            if isinstance(src, FixedScalar):
                val = src.value
            else:
                s = series[src][u]
                val = s[min(t, len(s) - 1)]
            (new.c if u.kind is StateKind.CELL else new.h)[u.layer][u.unit] = val
        return new

    return hook


def clamp_and_run(checkpoint, config: GridConfig, clamp: ClampSpec, episodes: int, seed: int,
                  traces: TraceSet | None = None) -> EvalReport:
    params = _params(checkpoint)
    hook = make_clamp_hook(params, clamp, traces)
    factory = (lambda j: hook) if hook is not None else None
    return evaluate(params, config, episodes, seed, hook_factory=factory)


@dataclass
class ScanResult:
    config: GridConfig
    wrong_destination_rate: float
    flagged: bool


def unintentional_trigger_scan(checkpoint, configs, trials: int, seed: int,
                               threshold: float = 0.5) -> list[ScanResult]:
    """Trigger-free sweep flagging configs where the agent heads for the adversary corner."""
    out = []
    for cfg in configs:
        if cfg.mode is not Mode.NORMAL:
            raise ValueError("unintentional-trigger scan runs on normal-mode configs only")
        rep = evaluate(checkpoint, cfg, trials, seed)
        rate = rep.outcome_histogram[Outcome.ADV_DEST.value] / rep.trials
        out.append(ScanResult(cfg, rate, rate > threshold))
    return out


# --- export ---------------------------------------------------------------

def write_traces_csv(out_dir, traces: TraceSet, comment: str | None = None) -> list[Path]:
    """One CSV per (layer, state kind): t, unit, mean_N, std_N, mean_T, std_T."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mn, sn, mt, st = traces.summary()
    groups = {}
    for k, u in enumerate(traces.units):
        groups.setdefault((u.layer, u.kind), []).append((k, u))
    paths = []
    for (layer, kind), members in groups.items():
        p = out_dir / f"traces_L{layer + 1}_{kind.value}.csv"
        with open(p, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}; trigger_step={traces.trigger_step}; trials={traces.trials}\n")
            w = csv.writer(fh)
            w.writerow(["t", "unit", "mean_N", "std_N", "mean_T", "std_T"])
            for t in range(traces.horizon):
                for k, u in members:
                    w.writerow([t, u.unit] + [repr(float(a[t, k])) for a in (mn, sn, mt, st)])
        paths.append(p)
    return paths


def read_traces_csv(in_dir) -> tuple[list[ResponseTrace], int]:
    """Inverse of ``write_traces_csv`` (statistics only, no per-trial data)."""
    in_dir = Path(in_dir)
    found = {}
    trigger_step, trials = 0, 0
    for p in sorted(in_dir.glob("traces_L*_*.csv")):
        m = re.fullmatch(r"traces_L(\d+)_(cell|hidden)\.csv", p.name)
        if not m:
            continue
        layer, kind = int(m.group(1)) - 1, StateKind(m.group(2))
        with open(p) as fh:
            first = fh.readline()
            mt = re.search(r"trigger_step=(\d+); trials=(\d+)", first)
            if mt:
                trigger_step, trials = int(mt.group(1)), int(mt.group(2))
            else:
                fh.seek(0)
            for row in csv.DictReader(fh):
                u = UnitId(layer, int(row["unit"]), kind)
                found.setdefault(u, []).append([float(row[c]) for c in ("mean_N", "std_N", "mean_T", "std_T")])
    out = []
    for u in sorted(found, key=lambda x: (x.layer, x.kind != StateKind.CELL, x.unit)):
        a = np.array(found[u])
        out.append(ResponseTrace(u, a[:, 0], a[:, 1], a[:, 2], a[:, 3], trials, trigger_step))
    return out, trigger_step


class TraceMeans:
    """Minimal stand-in for ``TraceSet`` when clamping from exported CSVs."""

    def __init__(self, traces: list[ResponseTrace]):
        self._normal = {t.unit_id: t.mean_normal for t in traces}
        self._trojan = {t.unit_id: t.mean_trojan for t in traces}

    def mean_series(self, population: str) -> dict:
        return self._normal if population == "normal" else self._trojan


def write_classes_csv(path, classes, comment: str | None = None):
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(["unit", "layer", "index", "kind", "response", "onset", "duration"])
        for c in classes:
            u = c.unit_id
            w.writerow([u.label, u.layer + 1, u.unit, u.kind.value, c.response.value,
                        "" if c.divergence_onset is None else c.divergence_onset, c.divergence_duration])
