"""Experiment configuration: sectioned ``key = value`` files.

Every key has a default; unknown sections or keys are rejected. Curriculum
stages are sections named ``[stage.1]``, ``[stage.2]``, ... in order.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .analysis import DEFAULT_SUSTAIN, DEFAULT_TAU, IMPULSE_WINDOW
from .gridworld import GridConfig, Mode
from .ppo import PpoConfig
from .trainer import Stage, TrainerConfig


class ConfigError(ValueError):
    pass


def _ints(text):
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


def _bool(text):
    v = str(text).strip().lower()
    if v in {"1", "true", "yes", "on"}:
        return True
    if v in {"0", "false", "no", "off"}:
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _opt_int(text):
    v = str(text).strip().lower()
    return None if v in {"", "none"} else int(v)


def parse_grid_list(text) -> list[tuple[int, int]]:
    """``"7/0, 7/7, 11/0"`` -> ``[(7, 0), (7, 7), (11, 0)]``."""
    out = []
    for item in str(text).split(","):
        item = item.strip()
        if not item:
            continue
        try:
            side, holes = item.split("/")
            out.append((int(side), int(holes)))
        except ValueError as exc:
            raise ConfigError(f"bad grid spec {item!r}; expected side/holes") from exc
    return out


@dataclass
class EvalSection:
    side: int = 7
    holes: int = 0
    trials: int = 200
    trigger_min: int = 2
    trigger_max: int = 4
    max_steps: int | None = None

    def grid(self, mode=Mode.NORMAL) -> GridConfig:
        return GridConfig(self.side, self.holes, Mode(mode), (self.trigger_min, self.trigger_max), self.max_steps)


@dataclass
class SweepSection:
    configs: str = "7/0, 7/7, 11/0, 11/11, 11/22, 15/0, 15/15, 19/0, 19/19, 19/38, 23/0, 23/23, 23/46, 27/27"
    trials: int = 200
    trigger_min: int = 5
    trigger_max: int = 15

    def grids(self, mode=Mode.NORMAL) -> list[GridConfig]:
        return [GridConfig(s, h, Mode(mode), (self.trigger_min, self.trigger_max))
                for s, h in parse_grid_list(self.configs)]


@dataclass
class AnalyzerSection:
    side: int = 7
    holes: int = 0
    trials: int = 50
    trigger_step: int = 3
    max_steps: int | None = None
    tau: float = DEFAULT_TAU
    sustain_fraction: float = DEFAULT_SUSTAIN
    impulse_window: int = IMPULSE_WINDOW
    scan_threshold: float = 0.5

    def grid(self, mode=Mode.NORMAL) -> GridConfig:
        return GridConfig(self.side, self.holes, Mode(mode), (self.trigger_step, self.trigger_step), self.max_steps)


@dataclass
class MonitorSection:
    z_threshold: float = 4.0
    consecutive_steps: int = 3
    action: str = "reset-unit"
    baseline_episodes: int = 100
    episodes: int = 200


@dataclass
class RunSection:
    seed: int = 0
    workers: int = 1


@dataclass
class ExperimentConfig:
    units: tuple = (64, 32)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    trainer: dict = field(default_factory=dict)
    stages: list = field(default_factory=list)
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    analyzer: AnalyzerSection = field(default_factory=AnalyzerSection)
    monitor: MonitorSection = field(default_factory=MonitorSection)
    run: RunSection = field(default_factory=RunSection)
    text_hash: str = "defaults"

    def trainer_config(self) -> TrainerConfig:
        stages = self.stages or [Stage.build(7, 0, (2, 4))]
        return TrainerConfig(curriculum=stages, units=self.units, **self.trainer)


TRAINER_KEYS = {
    "n_iter": int, "batch_size": int, "eval_episodes_per_env": int,
    "unintentional_penalty": float, "max_env_steps": _opt_int, "early_stop": _bool,
    "greedy_eval": _bool,
}
STAGE_KEYS = {"side": int, "holes": int, "trigger_min": int, "trigger_max": int,
              "max_steps": _opt_int, "promote_pc": float, "promote_pt": float}


def _coerce_into(obj_cls, section, items, converters=None):
    known = {f.name: f for f in fields(obj_cls)}
    out = {}
    for key, raw in items:
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        conv = (converters or {}).get(key)
        if conv is None:
            default = known[key].default
            if isinstance(default, bool):
                conv = _bool
            elif isinstance(default, int):
                conv = int
            elif isinstance(default, float):
                conv = float
            elif default is None:
                conv = _opt_int
            else:
                conv = str
        try:
            out[key] = conv(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc
    return out


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = ExperimentConfig(text_hash=hashlib.sha256(text.encode()).hexdigest()[:16])
    stage_sections = []
    for sec in cp.sections():
        items = cp.items(sec)
        if sec == "network":
            for k, v in items:
                if k != "units":
                    raise ConfigError(f"unknown key {k!r} in [network]")
                cfg.units = _ints(v)
        elif sec == "ppo":
            try:
                cfg.ppo = PpoConfig(**_coerce_into(PpoConfig, sec, items))
            except ValueError as exc:
                raise ConfigError(f"[ppo] {exc}") from exc
        elif sec == "trainer":
            for k, v in items:
                if k not in TRAINER_KEYS:
                    raise ConfigError(f"unknown key {k!r} in [trainer]")
                try:
                    cfg.trainer[k] = TRAINER_KEYS[k](v)
                except ValueError as exc:
                    raise ConfigError(f"[trainer] {k} = {v!r}: {exc}") from exc
        elif sec.startswith("stage."):
            try:
                order = int(sec.split(".", 1)[1])
            except ValueError as exc:
                raise ConfigError(f"stage sections are [stage.N], got [{sec}]") from exc
            vals = {}
            for k, v in items:
                if k not in STAGE_KEYS:
                    raise ConfigError(f"unknown key {k!r} in [{sec}]")
                vals[k] = STAGE_KEYS[k](v)
            if "side" not in vals:
                raise ConfigError(f"[{sec}] needs a side")
            stage_sections.append((order, vals))
        elif sec in ("eval", "sweep", "analyzer", "monitor", "run"):
            cls = {"eval": EvalSection, "sweep": SweepSection, "analyzer": AnalyzerSection,
                   "monitor": MonitorSection, "run": RunSection}[sec]
            setattr(cfg, sec, cls(**_coerce_into(cls, sec, items)))
        else:
            raise ConfigError(f"unknown section [{sec}]")
    for _, v in sorted(stage_sections, key=lambda p: p[0]):
        try:
            cfg.stages.append(Stage.build(v["side"], v.get("holes", 0),
                                          (v.get("trigger_min", 5), v.get("trigger_max", 15)),
                                          v.get("max_steps"), v.get("promote_pc", 0.9),
                                          v.get("promote_pt", 0.9)))
        except ValueError as exc:
            raise ConfigError(f"bad curriculum stage: {exc}") from exc
    try:
        cfg.trainer.setdefault("n_iter", 100_000)
        cfg.trainer_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())
