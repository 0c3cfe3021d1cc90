"""scikit-learn style wrapper around :func:`apgppo.trainer.train`.

The agent is fitted against one of the built-in environments rather than a
design matrix; after fitting, :meth:`APGPPOAgent.predict` maps observations to
deterministic actions and :meth:`APGPPOAgent.score` returns the evaluation return.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import diffenv
from .config import ENV_DEFAULTS, TrainConfig
from .nets import policy_forward, value_forward
from .trainer import METRIC_COLUMNS, evaluate, train


class APGPPOAgent(BaseEstimator):
    """PPO agent with optional APG-directed exploration.

    Hyperparameters left as ``None`` take the environment's defaults.

    Attributes set by :meth:`fit`: ``policy_``, ``critic_``, ``metrics_``,
    ``config_``, ``n_features_in_`` and ``apg_failures_``.
    """

    def __init__(self, env="point_mass", mode="augmented", iterations=100, seed=0, gamma=None,
                 hidden=(64, 64), eval_episodes=8, n_envs=64, rollout_len=32, ppo_epochs=4,
                 minibatches=8, ppo_lr=3e-4, clip=0.2, entropy_coef=1e-3, gae_lambda=0.95,
                 frequency=None, horizon=None, apg_epochs=None, agents=None, alpha=None,
                 apg_lr=None, apg_max_grad_norm=1.0):
        self.env = env
        self.mode = mode
        self.iterations = iterations
        self.seed = seed
        self.gamma = gamma
        self.hidden = hidden
        self.eval_episodes = eval_episodes
        self.n_envs = n_envs
        self.rollout_len = rollout_len
        self.ppo_epochs = ppo_epochs
        self.minibatches = minibatches
        self.ppo_lr = ppo_lr
        self.clip = clip
        self.entropy_coef = entropy_coef
        self.gae_lambda = gae_lambda
        self.frequency = frequency
        self.horizon = horizon
        self.apg_epochs = apg_epochs
        self.agents = agents
        self.alpha = alpha
        self.apg_lr = apg_lr
        self.apg_max_grad_norm = apg_max_grad_norm

    def _make_config(self) -> TrainConfig:
        params = self.get_params()
        env = params.pop("env")
        params["hidden"] = tuple(params["hidden"])
        params = {k: v for k, v in params.items() if v is not None}
        return TrainConfig.for_env(env, **params)

    def fit(self, X=None, y=None, callback=None):
        """Train on the configured environment. ``X`` and ``y`` are ignored."""
        cfg = self._make_config()
        result = train(cfg, callback=callback)
        self.config_ = cfg
        self.policy_ = result.policy
        self.critic_ = result.critic
        self.metrics_ = result.metrics
        self.apg_failures_ = result.apg_failures
        self.n_features_in_ = diffenv.make_env(cfg.env).dim_s
        return self

    def _check_obs(self, X):
        check_is_fitted(self, "policy_")
        X = check_array(X, dtype=np.float64, ensure_all_finite=True)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, the {self.config_.env} agent expects {self.n_features_in_}")
        return X

    def predict(self, X):
        """Deterministic (mean) actions, clipped to the action bounds."""
        X = self._check_obs(X)
        spec = diffenv.make_env(self.config_.env)
        return spec.clip(policy_forward(self.policy_, X).mean)

    def predict_value(self, X):
        X = self._check_obs(X)
        return value_forward(self.critic_, X)

    def score(self, X=None, y=None, episodes=None, seed=None):
        """Mean undiscounted return of deterministic evaluation episodes."""
        check_is_fitted(self, "policy_")
        spec = diffenv.make_env(self.config_.env)
        episodes = self.config_.eval_episodes if episodes is None else episodes
        rng = np.random.default_rng(self.config_.seed if seed is None else seed)
        return evaluate(self.policy_, spec, episodes, rng)[0]

    def metrics_table(self):
        """Metrics as a ``(n_iterations, n_columns)`` array with the column names."""
        check_is_fitted(self, "metrics_")
        return np.array([m.as_row() for m in self.metrics_], dtype=np.float64), METRIC_COLUMNS


__all__ = ["APGPPOAgent", "ENV_DEFAULTS"]
