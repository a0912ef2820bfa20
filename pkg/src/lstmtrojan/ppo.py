"""Proximal policy optimization over full recurrent episodes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lstm import LstmParameters, LstmState, backward, forward_sequence


@dataclass
class Trajectory:
    observations: np.ndarray
    actions: np.ndarray
    log_probs_old: np.ndarray
    values_old: np.ndarray
    rewards: np.ndarray
    done: bool = True
    initial_state: LstmState | None = None

    def __post_init__(self):
        n = len(self.actions)
        if not (len(self.observations) == len(self.log_probs_old) == len(self.values_old)
                == len(self.rewards) == n):
            raise ValueError("trajectory fields have unequal lengths")
        if np.any(self.log_probs_old > 0):
            raise ValueError("log_probs_old must be <= 0")

    @classmethod
    def from_episode(cls, ep) -> "Trajectory":
        return cls(ep.observations, ep.actions, ep.log_probs, ep.values, ep.rewards, True)


@dataclass
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    learning_rate: float = 3e-4
    epochs_per_update: int = 4
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    batch_size: int = 32
    minibatches: int = 1
    max_grad_norm: float = 0.5

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if self.clip_epsilon <= 0 or self.learning_rate <= 0:
            raise ValueError("clip_epsilon and learning_rate must be positive")
        if self.epochs_per_update < 1 or self.batch_size < 1 or self.minibatches < 1:
            raise ValueError("epochs, batch_size and minibatches must be positive")
        if self.value_coef < 0 or self.entropy_coef < 0:
            raise ValueError("loss coefficients must be non-negative")


@dataclass
class AdvantageEstimate:
    advantages: np.ndarray
    returns: np.ndarray


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float
    approx_kl: float
    clip_fraction: float = 0.0
    grad_norm: float = 0.0


class NonFiniteLossError(FloatingPointError):
    """Raised when an update would produce NaN/inf; carries diagnostics."""

    def __init__(self, msg, diagnostics):
        super().__init__(f"{msg}: {diagnostics}")
        self.diagnostics = diagnostics


def compute_advantages(traj: Trajectory, cfg: PpoConfig) -> AdvantageEstimate:
    """GAE over one terminated episode (bootstrap value past the end is 0).

    Advantages are returned raw; batch normalization is ``normalize_advantages``.
    """
    r = np.asarray(traj.rewards, float)
    v = np.asarray(traj.values_old, float)
    T = len(r)
    v_next = np.zeros(T)
    v_next[:-1] = v[1:]
    if not traj.done:
        v_next[-1] = v[-1]
    delta = r + cfg.gamma * v_next - v
    adv = np.zeros(T)
    acc = 0.0
    decay = cfg.gamma * cfg.gae_lambda
    for t in range(T - 1, -1, -1):
        acc = delta[t] + decay * acc
        adv[t] = acc
    return AdvantageEstimate(adv, adv + v)


def normalize_advantages(estimates: list[AdvantageEstimate]) -> list[np.ndarray]:
    """Zero-mean, unit-variance advantages pooled over the whole batch."""
    allv = np.concatenate([e.advantages for e in estimates])
    mu, sd = allv.mean(), allv.std()
    return [(e.advantages - mu) / (sd + 1e-8) for e in estimates]


def clipped_terms(log_probs_new, log_probs_old, advantages, epsilon):
    """Per-step ``min(ratio*A, clip(ratio)*A)`` and the ratio."""
    ratio = np.exp(np.asarray(log_probs_new) - np.asarray(log_probs_old))
    adv = np.asarray(advantages)
    return np.minimum(ratio * adv, np.clip(ratio, 1 - epsilon, 1 + epsilon) * adv), ratio


def clipped_objective(log_probs_new, log_probs_old, advantages, epsilon) -> float:
    """Negated mean clipped surrogate (a loss to minimize)."""
    if not len(log_probs_new) == len(log_probs_old) == len(advantages):
        raise ValueError("inputs must have equal lengths")
    terms, _ = clipped_terms(log_probs_new, log_probs_old, advantages, epsilon)
    return -float(np.mean(terms))


class Adam:
    def __init__(self, size, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        theta -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self):
        return {"m": self.m.copy(), "v": self.v.copy(), "t": self.t}


@dataclass
class _Prepared:
    traj: Trajectory
    advantages: np.ndarray
    returns: np.ndarray


def loss_and_grad(params: LstmParameters, batch: list[_Prepared], cfg: PpoConfig):
    """Total PPO loss over the steps of ``batch`` and its parameter gradient.

    Every step of every episode is weighted equally. Returns
    ``(loss, grad_params, stats)``.
    """
    n = sum(len(p.traj.actions) for p in batch)
    grad = params.zeros_like()
    pl = vl = ent = kl = clipped = 0.0
    eps = cfg.clip_epsilon
    for p in batch:
        tr = p.traj
        cache = forward_sequence(params, tr.observations, tr.initial_state)
        T = len(tr.actions)
        idx = np.arange(T)
        logp_all = np.log(cache.probs + 1e-300)
        logp = logp_all[idx, tr.actions]
        terms, ratio = clipped_terms(logp, tr.log_probs_old, p.advantages, eps)
        unclipped = ratio * p.advantages
        active = unclipped <= np.clip(ratio, 1 - eps, 1 + eps) * p.advantages
        H = -(cache.probs * logp_all).sum(axis=1)
        verr = cache.values - p.returns
        pl -= terms.sum()
        vl += (verr ** 2).sum()
        ent += H.sum()
        kl += (tr.log_probs_old - logp).sum()
        clipped += (~active).sum()

        onehot = np.zeros_like(cache.probs)
        onehot[idx, tr.actions] = 1.0
        g_surr = np.where(active, unclipped, 0.0)
        d_logits = -(g_surr[:, None] * (onehot - cache.probs))
        d_logits += cfg.entropy_coef * cache.probs * (logp_all + H[:, None])
        d_values = cfg.value_coef * 2.0 * verr
        g = backward(params, cache, d_logits / n, d_values / n)
        grad.flat += g.flat
    stats = UpdateStats(pl / n, vl / n, ent / n, kl / n, clipped / n)
    loss = stats.policy_loss + cfg.value_coef * stats.value_loss - cfg.entropy_coef * stats.entropy
    return loss, grad, stats


def prepare(trajectories: list[Trajectory], cfg: PpoConfig) -> list[_Prepared]:
    est = [compute_advantages(t, cfg) for t in trajectories]
    norm = normalize_advantages(est)
    return [_Prepared(t, a, e.returns) for t, a, e in zip(trajectories, norm, est)]


def update(params: LstmParameters, trajectories: list[Trajectory], cfg: PpoConfig,
           optimizer: Adam | None = None, rng: np.random.Generator | None = None):
    """Run ``epochs_per_update`` passes of clipped-PPO on ``trajectories``.

    Returns ``(new_params, stats)``; ``params`` is left untouched. Stats are
    the last pass's losses, with ``approx_kl`` measured after the final step.
    """
    if not trajectories:
        raise ValueError("update needs at least one trajectory")
    new = params.copy()
    if optimizer is None:
        optimizer = Adam(new.flat.size, cfg.learning_rate)
    optimizer.lr = cfg.learning_rate
    prepared = prepare(trajectories, cfg)
    order = np.arange(len(prepared))
    stats = None
    for _ in range(cfg.epochs_per_update):
        if cfg.minibatches > 1 and rng is not None:
            order = rng.permutation(len(prepared))
        for chunk in np.array_split(order, min(cfg.minibatches, len(prepared))):
            batch = [prepared[i] for i in chunk]
            loss, grad, stats = loss_and_grad(new, batch, cfg)
            gnorm = float(np.linalg.norm(grad.flat))
            if not (np.isfinite(loss) and np.isfinite(gnorm)):
                raise NonFiniteLossError("non-finite PPO loss", {
                    "loss": loss, "grad_norm": gnorm, "policy_loss": stats.policy_loss,
                    "value_loss": stats.value_loss, "entropy": stats.entropy})
            if gnorm > cfg.max_grad_norm:
                grad.flat *= cfg.max_grad_norm / gnorm
            stats.grad_norm = gnorm
            optimizer.step(new.flat, grad.flat)
    kl_num = kl_den = 0.0
    for tr in trajectories:
        cache = forward_sequence(new, tr.observations, tr.initial_state)
        logp = np.log(cache.probs[np.arange(len(tr.actions)), tr.actions] + 1e-300)
        kl_num += (tr.log_probs_old - logp).sum()
        kl_den += len(logp)
    stats.approx_kl = kl_num / kl_den
    return new, stats
