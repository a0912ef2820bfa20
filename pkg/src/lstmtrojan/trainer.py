"""Backdoor generation loop: performance-balanced environment sampling,
batched PPO updates, paired evaluation and a difficulty curriculum."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .agent import run_episode
from .gridworld import GridConfig, GridWorld, Mode, Outcome
from .lstm import OBS_DIM, LstmParameters, init_parameters
from .ppo import Adam, PpoConfig, Trajectory, update
from .seeding import child_rng, child_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Stage:
    """One curriculum rung: a grid size/hole count used for both environments."""

    normal: GridConfig
    trojan: GridConfig
    promote_pc: float = 0.9
    promote_pt: float = 0.9

    @classmethod
    def build(cls, side, holes, trigger_step_range=(5, 15), max_steps=None,
              promote_pc=0.9, promote_pt=0.9) -> "Stage":
        base = GridConfig(side, holes, Mode.NORMAL, trigger_step_range, max_steps)
        return cls(base, base.with_mode(Mode.TROJAN), promote_pc, promote_pt)

    @property
    def difficulty(self):
        return (self.normal.side_length, self.normal.hole_count)


@dataclass
class TrainerConfig:
    n_iter: int
    curriculum: list
    batch_size: int = 32
    eval_episodes_per_env: int = 20
    unintentional_penalty: float = 0.0
    units: tuple = (64, 32)
    max_env_steps: int | None = None
    early_stop: bool = False
    greedy_eval: bool = False

    def __post_init__(self):
        if self.n_iter < 0 or self.batch_size < 1 or self.eval_episodes_per_env < 1:
            raise ValueError("n_iter >= 0, batch_size >= 1, eval_episodes_per_env >= 1 required")
        if not self.curriculum:
            raise ValueError("curriculum needs at least one stage")
        if self.unintentional_penalty > 0:
            raise ValueError("unintentional_penalty must be <= 0")
        diffs = [s.difficulty for s in self.curriculum]
        if any(a >= b for a, b in zip(diffs, diffs[1:])):
            raise ValueError(f"curriculum stages must strictly increase in difficulty: {diffs}")


@dataclass
class PerformancePair:
    P_c: float
    P_t: float

    @property
    def score(self) -> float:
        return self.P_c + self.P_t


@dataclass
class CurveRow:
    iteration: int
    stage: int
    P_c: float
    P_t: float
    score: float
    env_steps: int
    policy_loss: float
    value_loss: float
    entropy: float
    approx_kl: float
    batch_reward: float = 0.0
    batch_length: float = 0.0
    greedy_P_c: float | None = None     # only measured when the sampled scores pass promotion
    greedy_P_t: float | None = None


CURVE_COLUMNS = ["iteration", "stage", "P_c", "P_t", "score", "env_steps", "greedy_P_c", "greedy_P_t"]
TRAINING_LOG_COLUMNS = ["iteration", "P_c", "P_t", "policy_loss", "value_loss", "entropy", "approx_kl"]


@dataclass
class TrainResult:
    params: LstmParameters
    curve: list = field(default_factory=list)
    stage: int = 0
    iterations: int = 0
    env_steps: int = 0
    updates: int = 0
    stage_params: dict = field(default_factory=dict)   # stage index -> params at promotion


def select_environment(P_c: float, P_t: float, rng: np.random.Generator) -> Mode:
    """Trojan iff a uniform draw exceeds clamp(0.5 + P_t - P_c, 0, 1)."""
    threshold = min(1.0, max(0.0, 0.5 + (P_t - P_c)))
    return Mode.TROJAN if rng.random() > threshold else Mode.NORMAL


def evaluate_pair(params, stage: Stage, episodes: int, seed: int, greedy: bool = False) -> PerformancePair:
    """Mean terminal reward in each environment (sampled actions unless ``greedy``)."""
    scores = []
    for mode, cfg in ((Mode.NORMAL, stage.normal), (Mode.TROJAN, stage.trojan)):
        total = 0.0
        rng = child_rng(seed, "act", mode.value)
        for j in range(episodes):
            world = GridWorld.generate(cfg, child_seed(seed, mode.value, j))
            total += run_episode(params, world, rng, greedy=greedy).rewards[-1]
        scores.append(total / episodes)
    return PerformancePair(*scores)


def _passes(perf: PerformancePair, stage: Stage, clean: bool) -> bool:
    return perf.P_c >= stage.promote_pc and (clean or perf.P_t >= stage.promote_pt)


def train(cfg: TrainerConfig, ppo: PpoConfig, seed: int, clean: bool = False,
          on_row: Callable[[CurveRow], None] | None = None) -> TrainResult:
    """Train one agent; ``clean`` restricts sampling to the normal environment."""
    params = init_parameters(OBS_DIM, cfg.units, child_seed(seed, "init"))
    result = TrainResult(params)
    if cfg.n_iter == 0:
        return result
    opt = Adam(params.flat.size, ppo.learning_rate)
    select_rng = child_rng(seed, "select")
    rollout_rng = child_rng(seed, "rollout")
    perf = PerformancePair(0.0, 0.0)
    batch = []
    stage_idx = 0
    for k in range(cfg.n_iter):
        stage = cfg.curriculum[stage_idx]
        mode = Mode.NORMAL if clean else select_environment(perf.P_c, perf.P_t, select_rng)
        env_cfg = stage.normal if mode is Mode.NORMAL else stage.trojan
        world = GridWorld.generate(env_cfg, child_seed(seed, "grid", k))
        ep = run_episode(params, world, rollout_rng)
        if mode is Mode.NORMAL and ep.outcome is Outcome.ADV_DEST and cfg.unintentional_penalty:
            ep.rewards[-1] += cfg.unintentional_penalty
        batch.append(Trajectory.from_episode(ep))
        result.env_steps += ep.length
        result.iterations = k + 1
        if len(batch) >= cfg.batch_size:
            batch_reward = float(np.mean([t.rewards[-1] for t in batch]))
            batch_length = float(np.mean([len(t.rewards) for t in batch]))
            params, stats = update(params, batch, ppo, opt, child_rng(seed, "minibatch", result.updates))
            result.updates += 1
            batch = []
            perf = evaluate_pair(params, stage, cfg.eval_episodes_per_env,
                                 child_seed(seed, "eval", result.updates), cfg.greedy_eval)
            row = CurveRow(k + 1, stage_idx, perf.P_c, perf.P_t, perf.score, result.env_steps,
                           stats.policy_loss, stats.value_loss, stats.entropy, stats.approx_kl,
                           batch_reward, batch_length)
            promoted = _passes(perf, stage, clean)
            if promoted and not cfg.greedy_eval:
                # sampled play can pass while argmax play loops; promotion needs both
                greedy = evaluate_pair(params, stage, cfg.eval_episodes_per_env,
                                       child_seed(seed, "eval-greedy", result.updates), greedy=True)
                row.greedy_P_c, row.greedy_P_t = greedy.P_c, greedy.P_t
                promoted = _passes(greedy, stage, clean)
            result.curve.append(row)
            if on_row is not None:
                on_row(row)
            log.debug("iter %d stage %d P_c %.2f P_t %.2f", k + 1, stage_idx, perf.P_c, perf.P_t)
            if promoted:
                result.stage_params[stage_idx] = params.copy()
                if stage_idx + 1 < len(cfg.curriculum):
                    stage_idx += 1
                    log.info("promoted to stage %d at iteration %d", stage_idx, k + 1)
                elif cfg.early_stop:
                    break
        if cfg.max_env_steps is not None and result.env_steps >= cfg.max_env_steps:
            break
    result.params = params
    result.stage = stage_idx
    return result


def train_clean(cfg: TrainerConfig, ppo: PpoConfig, seed: int, on_row=None) -> TrainResult:
    return train(cfg, ppo, seed, clean=True, on_row=on_row)
