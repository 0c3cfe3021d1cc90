"""PPO pieces: tagged rollout collection, GAE, clipped surrogate and critic regression."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import diffenv
from .bptt import NumericalFailure
from .nets import (
    AdamState,
    MlpParams,
    adam_step,
    clamp_log_std,
    entropy,
    log_prob,
    mlp_backward,
    mlp_forward,
    policy_forward,
    sample_reparam,
    value_backward,
    value_forward,
)

PRIMARY = 0
EXPLORE = 1
SOURCE_NAMES = {PRIMARY: "primary", EXPLORE: "explore"}


@dataclass
class Lanes:
    """Persistent state of a set of collection lanes between rollouts."""

    sim: np.ndarray
    step_count: np.ndarray
    ep_return: np.ndarray

    @classmethod
    def fresh(cls, spec, n, rng) -> "Lanes":
        return cls(diffenv.reset_batch(spec, n, rng), np.zeros(n, dtype=np.int64), np.zeros(n))

    def __len__(self):
        return self.sim.shape[0]

    def take(self, idx) -> "Lanes":
        return Lanes(self.sim[idx].copy(), self.step_count[idx].copy(), self.ep_return[idx].copy())

    @staticmethod
    def concat(parts) -> "Lanes":
        return Lanes(
            np.concatenate([p.sim for p in parts]),
            np.concatenate([p.step_count for p in parts]),
            np.concatenate([p.ep_return for p in parts]),
        )


@dataclass
class RolloutBatch:
    """Transitions laid out lane-major as ``(n_envs, T, ...)``.

    ``truncated`` is set both at the episode cap and at the last step of the
    rollout segment; in either case ``bootstrap_value`` holds V at the successor.
    """

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    truncated: np.ndarray
    behavior_log_prob: np.ndarray
    values: np.ndarray
    bootstrap_value: np.ndarray
    source: np.ndarray
    episode_returns: list = None
    advantages: np.ndarray = None
    returns: np.ndarray = None

    @property
    def n_envs(self) -> int:
        return self.obs.shape[0]

    @property
    def horizon(self) -> int:
        return self.obs.shape[1]

    def __len__(self):
        return self.n_envs * self.horizon

    def select_lanes(self, mask) -> "RolloutBatch":
        fields = {}
        for name in ("obs", "actions", "rewards", "dones", "truncated", "behavior_log_prob",
                     "values", "bootstrap_value", "source", "advantages", "returns"):
            arr = getattr(self, name)
            fields[name] = None if arr is None else arr[mask]
        return RolloutBatch(**fields, episode_returns=None)

    def flat(self, name):
        arr = getattr(self, name)
        return arr.reshape(len(self), *arr.shape[2:])

    @staticmethod
    def concat(parts) -> "RolloutBatch":
        def cat(name):
            arrs = [getattr(p, name) for p in parts]
            return None if any(a is None for a in arrs) else np.concatenate(arrs)

        names = ("obs", "actions", "rewards", "dones", "truncated", "behavior_log_prob",
                 "values", "bootstrap_value", "source", "advantages", "returns")
        eps = []
        for p in parts:
            eps += list(p.episode_returns or [])
        return RolloutBatch(**{n: cat(n) for n in names}, episode_returns=eps)


def draw_rollout_noise(spec, n: int, T: int, rng: np.random.Generator):
    """Pre-draw action noise ``(T, n, dim_a)`` and auto-reset states ``(T, n, dim_s)``.

    Lane ``j`` resetting after step ``t`` restarts from ``reset_pool[t, j]``, so
    two rollouts given the same draws see identical randomness lane by lane.
    """
    noise = rng.standard_normal((T, n, spec.dim_a))
    reset_pool = diffenv.reset_batch(spec, T * n, rng).reshape(T, n, spec.dim_s)
    return noise, reset_pool


def collect_rollout(spec, policy: MlpParams, critic: MlpParams, lanes: Lanes, T: int,
                    rng: np.random.Generator = None, source: int = PRIMARY, noise=None, reset_pool=None):
    """Run ``T`` steps in every lane; returns the batch and the advanced lanes.

    Log-probs are taken at the unclipped sample; the environment sees the
    clipped action. Lanes reset automatically when an episode ends. Pass
    ``noise``/``reset_pool`` (see :func:`draw_rollout_noise`) to replay fixed
    randomness instead of drawing from ``rng``.
    """
    n = len(lanes)
    if n < 1 or T < 1:
        raise ValueError("n_envs and T must be at least 1")
    if noise is None or reset_pool is None:
        noise, reset_pool = draw_rollout_noise(spec, n, T, rng)
    ds, da = spec.dim_s, spec.dim_a
    sim = lanes.sim.copy()
    count = lanes.step_count.copy()
    ep_ret = lanes.ep_return.copy()

    obs = np.zeros((n, T, ds))
    actions = np.zeros((n, T, da))
    rewards = np.zeros((n, T))
    dones = np.zeros((n, T), dtype=bool)
    truncated = np.zeros((n, T), dtype=bool)
    blp = np.zeros((n, T))
    values = np.zeros((n, T))
    boot = np.zeros((n, T))
    finished = []

    for t in range(T):
        out = policy_forward(policy, sim)
        a = sample_reparam(out, noise[t])
        res = diffenv.step_batch(spec, sim, spec.clip(a))
        obs[:, t] = sim
        actions[:, t] = a
        blp[:, t] = log_prob(out, a)
        values[:, t] = value_forward(critic, sim)
        rewards[:, t] = res.reward

        count += 1
        ep_ret += res.reward
        term = res.terminated
        cap = ~term & (count >= spec.episode_cap)
        dones[:, t] = term
        truncated[:, t] = cap
        end_seg = ~term & ~cap & (t == T - 1)
        need_boot = cap | end_seg
        if np.any(need_boot):
            boot[need_boot, t] = value_forward(critic, res.next_sim[need_boot])
        truncated[:, t] |= end_seg

        sim = res.next_sim
        ended = term | cap
        if np.any(ended):
            idx = np.flatnonzero(ended)
            finished += [float(ep_ret[i]) for i in idx]
            sim[idx] = reset_pool[t, idx]
            count[idx] = 0
            ep_ret[idx] = 0.0

    batch = RolloutBatch(obs, actions, rewards, dones, truncated, blp, values, boot,
                         np.full((n, T), source, dtype=np.int8), finished)
    return batch, Lanes(sim, count, ep_ret)


def compute_gae(batch: RolloutBatch, gamma: float, lam: float) -> RolloutBatch:
    """Fill advantages and return targets from the stored critic values."""
    if batch.values is None or not np.all(np.isfinite(batch.values)):
        raise ValueError("batch values must be populated before computing advantages")
    n, T = batch.rewards.shape
    adv = np.zeros((n, T))
    running = np.zeros(n)
    for t in range(T - 1, -1, -1):
        cut = batch.dones[:, t] | batch.truncated[:, t]
        next_v = np.where(batch.truncated[:, t], batch.bootstrap_value[:, t],
                          batch.values[:, t + 1] if t + 1 < T else 0.0)
        delta = batch.rewards[:, t] + gamma * next_v * (~batch.dones[:, t]) - batch.values[:, t]
        running = delta + gamma * lam * np.where(cut, 0.0, running)
        adv[:, t] = running
    return replace(batch, advantages=adv, returns=adv + batch.values)


def ppo_policy_loss(policy: MlpParams, obs, actions, behavior_log_prob, advantages,
                    clip: float, ent_coef: float):
    """Clipped surrogate with entropy bonus; returns (loss, gradient).

    The ratio denominator is whatever behaviour log-prob was recorded with each
    sample, so mixed primary/exploratory minibatches get their own ratios.
    """
    obs = np.atleast_2d(obs)
    actions = np.atleast_2d(actions)
    adv = np.asarray(advantages, dtype=np.float64).reshape(-1)
    B = obs.shape[0]
    mean, inputs = mlp_forward(policy, obs)
    std = np.exp(policy.log_std)
    z = (actions - mean) / std
    logp = -0.5 * np.sum(z**2 + 2.0 * policy.log_std + np.log(2.0 * np.pi), axis=1)
    with np.errstate(over="ignore"):
        ratio = np.exp(logp - behavior_log_prob)
    if not np.all(np.isfinite(ratio)):
        bad = int(np.flatnonzero(~np.isfinite(ratio))[0])
        raise NumericalFailure(f"non-finite importance ratio at sample {bad}", step=bad)
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip)
    unclipped_obj = ratio * adv
    clipped_obj = clipped * adv
    obj = np.minimum(unclipped_obj, clipped_obj)
    ent = entropy(policy)
    loss = -float(np.mean(obj)) - ent_coef * ent

    # gradient flows only where the unclipped term is the active one
    live = unclipped_obj <= clipped_obj
    d_logp = -(adv * ratio * live) / B
    g_mean = d_logp[:, None] * z / std
    g_log_std = np.sum(d_logp[:, None] * (z**2 - 1.0), axis=0) - ent_coef
    dws, dbs, _ = mlp_backward(policy, inputs, g_mean)
    return loss, MlpParams(dws, dbs, g_log_std)


def value_loss(critic: MlpParams, obs, returns, source=None):
    """Mean squared error of V against return targets, over primary samples only."""
    obs = np.atleast_2d(obs)
    returns = np.asarray(returns, dtype=np.float64).reshape(-1)
    if source is not None:
        keep = np.asarray(source).reshape(-1) == PRIMARY
        obs, returns = obs[keep], returns[keep]
    if returns.size == 0:
        raise ValueError("value loss needs at least one primary-sourced sample")
    v = value_forward(critic, obs)
    err = v - returns
    loss = float(np.mean(err**2))
    grad, _ = value_backward(critic, obs, 2.0 * err / err.size)
    return loss, grad


def importance_ratios(policy: MlpParams, obs, actions, behavior_log_prob):
    out = policy_forward(policy, np.atleast_2d(obs))
    return np.exp(log_prob(out, actions) - behavior_log_prob)


@dataclass
class PPOSettings:
    epochs: int = 4
    minibatches: int = 8
    lr_policy: float = 3e-4
    lr_critic: float = 3e-4
    clip: float = 0.2
    ent_coef: float = 1e-3


def _minibatch_indices(n, minibatches, rng):
    perm = rng.permutation(n)
    return np.array_split(perm, min(minibatches, n))


def ppo_update(policy: MlpParams, critic: MlpParams, aug: RolloutBatch, primary: RolloutBatch,
               cfg: PPOSettings, rng: np.random.Generator, policy_opt: AdamState = None,
               critic_opt: AdamState = None):
    """Policy epochs over the augmented batch, critic epochs over primary data.

    Returns ``(policy, critic, policy_opt, critic_opt, stats)``.
    """
    if aug.advantages is None or primary.returns is None:
        raise ValueError("advantages must be computed before the update")
    policy_opt = AdamState.zeros(policy.size) if policy_opt is None else policy_opt
    critic_opt = AdamState.zeros(critic.size) if critic_opt is None else critic_opt

    obs, act = aug.flat("obs"), aug.flat("actions")
    blp, adv = aug.flat("behavior_log_prob"), aug.flat("advantages")
    p_losses = []
    for _ in range(cfg.epochs):
        for idx in _minibatch_indices(len(obs), cfg.minibatches, rng):
            a = adv[idx]
            a = (a - a.mean()) / max(a.std(), 1e-8)
            loss, grad = ppo_policy_loss(policy, obs[idx], act[idx], blp[idx], a, cfg.clip, cfg.ent_coef)
            policy, policy_opt = adam_step(policy, grad, policy_opt, cfg.lr_policy)
            clamp_log_std(policy)
            p_losses.append(loss)

    v_obs, v_ret = primary.flat("obs"), primary.flat("returns")
    v_losses = []
    for _ in range(cfg.epochs):
        for idx in _minibatch_indices(len(v_obs), cfg.minibatches, rng):
            loss, grad = value_loss(critic, v_obs[idx], v_ret[idx])
            critic, critic_opt = adam_step(critic, grad, critic_opt, cfg.lr_critic)
            v_losses.append(loss)

    stats = {"policy_loss": float(np.mean(p_losses)), "value_loss": float(np.mean(v_losses))}
    return policy, critic, policy_opt, critic_opt, stats
