"""Training loop: PPO whose rollouts are periodically augmented with APG exploration."""
from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import astuple, dataclass, fields

import numpy as np

from . import diffenv
from .bptt import make_exploratory_policy
from .config import TrainConfig
from .nets import AdamState, MlpParams, init_critic, init_policy, policy_forward
from .ppo import (
    EXPLORE,
    PRIMARY,
    Lanes,
    PPOSettings,
    RolloutBatch,
    collect_rollout,
    compute_gae,
    draw_rollout_noise,
    ppo_update,
)

log = logging.getLogger(__name__)

# random stream tags; each (seed, iteration, tag) triple gets its own generator
_INIT, _LANES, _COLLECT_PRIMARY, _APG, _UPDATE, _EVAL = range(6)


def _stream(seed, k, tag):
    return np.random.default_rng([seed, k, tag])


@dataclass
class IterationMetrics:
    iteration: int
    env_steps: int
    eval_return_mean: float
    eval_return_std: float
    train_return_mean: float
    adv_primary_mean: float
    adv_explore_mean: float
    adv_gap: float
    apg_loss: float
    wall_ms: float

    def as_row(self):
        return astuple(self)


METRIC_COLUMNS = tuple(f.name for f in fields(IterationMetrics))


@dataclass
class TrainResult:
    config: TrainConfig
    metrics: list
    policy: MlpParams
    critic: MlpParams
    apg_failures: int = 0


def evaluate(policy: MlpParams, spec: diffenv.EnvSpec, episodes: int, rng: np.random.Generator):
    """Mean and std of undiscounted returns under the deterministic mean action."""
    if episodes < 1:
        raise ValueError("episodes must be at least 1")
    sim = diffenv.reset_batch(spec, episodes, rng)
    returns = np.zeros(episodes)
    running = np.ones(episodes, dtype=bool)
    for _ in range(spec.episode_cap):
        a = spec.clip(policy_forward(policy, sim).mean)
        res = diffenv.step_batch(spec, sim, a)
        returns += np.where(running, res.reward, 0.0)
        running &= ~res.terminated
        sim = res.next_sim
        if not running.any():
            break
    return float(returns.mean()), float(returns.std())


def advantage_gap(batch: RolloutBatch):
    """Mean explore-sourced advantage minus mean primary-sourced advantage.

    Returns ``(gap, primary_mean, explore_mean)``; a missing source yields NaN.
    """
    if batch.advantages is None:
        raise ValueError("advantages have not been computed")
    src = batch.source
    prim = batch.advantages[src == PRIMARY]
    expl = batch.advantages[src == EXPLORE]
    p = float(prim.mean()) if prim.size else float("nan")
    e = float(expl.mean()) if expl.size else float("nan")
    return e - p, p, e


def _nan_mean(values):
    return float(np.mean(values)) if len(values) else float("nan")


def train(cfg: TrainConfig, callback=None) -> TrainResult:
    """Run ``cfg.iterations`` iterations in the configured mode.

    ``callback(k, batch, policy, critic)`` is invoked right before every PPO
    update with the advantage-annotated augmented batch.
    """
    spec = diffenv.make_env(cfg.env)
    init_rng = _stream(cfg.seed, 0, _INIT)
    policy = init_policy(spec.dim_s, spec.dim_a, cfg.hidden, init_rng)
    critic = init_critic(spec.dim_s, cfg.hidden, init_rng)
    ppo_cfg = PPOSettings(cfg.ppo_epochs, cfg.minibatches, cfg.ppo_lr, cfg.ppo_lr, cfg.clip, cfg.entropy_coef)
    policy_opt = AdamState.zeros(policy.size)
    critic_opt = AdamState.zeros(critic.size)
    lanes = Lanes.fresh(spec, cfg.n_envs, _stream(cfg.seed, 0, _LANES))
    recent = deque(maxlen=100)
    env_steps = 0
    failures = 0
    metrics = []

    if cfg.mode == "apg_only":
        # pure short-horizon APG: no learned terminal value
        critic = critic.zeros_like()

    for k in range(cfg.iterations):
        t0 = time.perf_counter()
        apg_loss = float("nan")
        gap = adv_p = adv_e = train_ret = float("nan")

        if cfg.mode == "apg_only":
            res = make_exploratory_policy(policy, critic, spec, cfg.agents, cfg.horizon, cfg.apg_epochs,
                                          cfg.apg_lr, cfg.gamma, _stream(cfg.seed, k, _APG),
                                          cfg.apg_max_grad_norm)
            env_steps += res.env_steps
            failures += res.failed
            policy = res.policy
            if res.losses:
                apg_loss = res.losses[-1]
                train_ret = -apg_loss * cfg.horizon
        else:
            explore = None
            if cfg.mode == "augmented" and cfg.n_explore > 0 and k % cfg.frequency == 0:
                res = make_exploratory_policy(policy, critic, spec, cfg.agents, cfg.horizon, cfg.apg_epochs,
                                              cfg.apg_lr, cfg.gamma, _stream(cfg.seed, k, _APG),
                                              cfg.apg_max_grad_norm)
                env_steps += res.env_steps
                if res.losses:
                    apg_loss = res.losses[-1]
                if res.failed:
                    failures += 1
                else:
                    explore = res.policy

            if explore is None:
                batch, lanes = collect_rollout(spec, policy, critic, lanes, cfg.rollout_len,
                                               _stream(cfg.seed, k, _COLLECT_PRIMARY), PRIMARY)
                recent.extend(batch.episode_returns)
            else:
                # exploratory lanes branch from the first primary lanes and share their noise
                n_p, n_e = cfg.n_primary, cfg.n_explore
                noise, pool = draw_rollout_noise(spec, n_p, cfg.rollout_len,
                                                 _stream(cfg.seed, k, _COLLECT_PRIMARY))
                prim, head = collect_rollout(spec, policy, critic, lanes.take(slice(0, n_p)), cfg.rollout_len,
                                             source=PRIMARY, noise=noise, reset_pool=pool)
                expl, _ = collect_rollout(spec, explore, critic, lanes.take(slice(0, n_e)), cfg.rollout_len,
                                          source=EXPLORE, noise=noise[:, :n_e], reset_pool=pool[:, :n_e])
                recent.extend(prim.episode_returns)
                batch = RolloutBatch.concat([prim, expl])
                lanes = Lanes.concat([head, lanes.take(slice(n_p, None))])
                del explore
            env_steps += cfg.n_envs * cfg.rollout_len

            batch = compute_gae(batch, cfg.gamma, cfg.gae_lambda)
            gap, adv_p, adv_e = advantage_gap(batch)
            primary = batch.select_lanes(batch.source[:, 0] == PRIMARY)
            if callback is not None:
                callback(k, batch, policy, critic)
            policy, critic, policy_opt, critic_opt, _ = ppo_update(
                policy, critic, batch, primary, ppo_cfg, _stream(cfg.seed, k, _UPDATE), policy_opt, critic_opt
            )
            train_ret = _nan_mean(recent)

        ev_mean, ev_std = evaluate(policy, spec, cfg.eval_episodes, _stream(cfg.seed, 0, _EVAL))
        wall = (time.perf_counter() - t0) * 1000.0 if cfg.wall_clock else 0.0
        metrics.append(IterationMetrics(k, env_steps, ev_mean, ev_std, train_ret, adv_p, adv_e, gap,
                                        apg_loss, wall))
        log.debug("iter %d steps %d eval %.3f gap %.4f", k, env_steps, ev_mean, gap)

    return TrainResult(cfg, metrics, policy, critic, failures)
