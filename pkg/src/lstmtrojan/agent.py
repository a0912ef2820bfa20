"""Running the network as an agent inside a gridworld episode."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .gridworld import GridWorld, Outcome
from .lstm import LstmParameters, LstmState, forward, heads, softmax


@dataclass
class EpisodeRecord:
    observations: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    outcome: Outcome
    success: bool
    trigger_step: int | None
    positions: list
    states: list = field(default=None, repr=False)   # LstmState after each step, if recorded
    gates: list = field(default=None, repr=False)    # per step, per layer gate activations

    @property
    def length(self) -> int:
        return len(self.actions)


# hook(t, state, world) -> replacement LstmState or None
StateHook = Callable[[int, LstmState, GridWorld], "LstmState | None"]


def run_episode(params: LstmParameters, world: GridWorld, rng: np.random.Generator | None = None,
                greedy: bool = False, record_states: bool = False,
                hook: StateHook | None = None) -> EpisodeRecord:
    """Play one episode from a zero recurrent state.

    Sampling uses ``rng`` unless ``greedy``; ``hook`` may overwrite the
    recurrent state after each forward update, before the action is chosen.
    """
    obs = world.reset()
    state = LstmState.zeros(params)
    observations, actions, logps, values, rewards = [], [], [], [], []
    positions = [world.agent_pos]
    states = [] if record_states else None
    gates = [] if record_states else None
    t = 0
    while True:
        out = forward(params, state, obs)
        state, probs, value = out.new_state, out.action_probs, out.value
        if hook is not None:
            replaced = hook(t, state, world)
            if replaced is not None:
                state = replaced
                logits, v = heads(params, state.h[-1])
                probs, value = softmax(logits), float(v)
        if record_states:
            states.append(state.copy())
            gates.append(out.gates)
        if greedy:
            a = int(np.argmax(probs))
        else:
            a = int(min(np.searchsorted(np.cumsum(probs), rng.random(), side="right"), len(probs) - 1))
        observations.append(obs)
        actions.append(a)
        logps.append(np.log(probs[a]))
        values.append(value)
        res = world.step(a)
        rewards.append(res.reward)
        positions.append(world.agent_pos)
        obs = res.observation
        t += 1
        if res.done:
            break
    return EpisodeRecord(np.array(observations), np.array(actions, dtype=np.int64),
                         np.array(logps), np.array(values), np.array(rewards), res.info,
                         world.is_success(res.info), world.trigger_step, positions, states, gates)
