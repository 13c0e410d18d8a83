"""scikit-learn style wrapper around :func:`sauna.agent.train`.

``fit`` trains one seed on the configured environment (the ``X``/``y``
arguments exist only for API compatibility and are ignored), ``predict``
maps raw observations to deterministic actions and ``score`` is the mean
evaluation return.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .agent import METRICS_COLUMNS, evaluate, train
from .config import ExperimentConfig
from .envs import make_env


class SaunaPPO(BaseEstimator):
    """PPO with optional V^ex transition filtering, as an estimator.

    Parameters mirror :class:`sauna.config.ExperimentConfig`; ``random_state``
    is the training seed.
    """

    def __init__(self, env="pendulum", variant="sauna", total_steps=100_000, horizon=2048,
                 epochs=10, minibatch_size=64, learning_rate=3e-4, lr_schedule="constant",
                 gamma=0.99, lam=0.95,
                 clip=0.2, value_coef=0.5, vex_coef=0.5, ent_coef=0.0, max_grad_norm=0.5,
                 rho=0.3, eps0=1e-8, hidden=(64, 64), vex_hidden=64, normalize_obs=True,
                 normalize_reward=False, vex_into_trunk=True, eval_every=10,
                 eval_episodes=10, random_state=0):
        self.env = env
        self.variant = variant
        self.total_steps = total_steps
        self.horizon = horizon
        self.epochs = epochs
        self.minibatch_size = minibatch_size
        self.learning_rate = learning_rate
        self.lr_schedule = lr_schedule
        self.gamma = gamma
        self.lam = lam
        self.clip = clip
        self.value_coef = value_coef
        self.vex_coef = vex_coef
        self.ent_coef = ent_coef
        self.max_grad_norm = max_grad_norm
        self.rho = rho
        self.eps0 = eps0
        self.hidden = hidden
        self.vex_hidden = vex_hidden
        self.normalize_obs = normalize_obs
        self.normalize_reward = normalize_reward
        self.vex_into_trunk = vex_into_trunk
        self.eval_every = eval_every
        self.eval_episodes = eval_episodes
        self.random_state = random_state

    def to_config(self) -> ExperimentConfig:
        params = self.get_params()
        seed = params.pop("random_state")
        params["hidden"] = tuple(params["hidden"])
        return ExperimentConfig(seeds=(int(seed),), save_checkpoint=False, **params)

    def fit(self, X=None, y=None, callback=None):
        config = self.to_config()
        result = train(config, config.seeds[0], callback=callback)
        spec = make_env(config.env).spec
        self.nets_ = result.nets
        self.normalizer_ = result.normalizer
        self.normalizer_.frozen = True
        self.metrics_ = {c: np.array([getattr(r, c) for r in result.records])
                         for c in METRICS_COLUMNS}
        self.n_features_in_ = spec.state_dim
        self.action_low_ = spec.action_low
        self.action_high_ = spec.action_high
        return self

    def predict(self, X):
        """Deterministic (mean) actions for raw observations, clipped to the action box."""
        check_is_fitted(self, "nets_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        mean = self.nets_.mean_action(self.normalizer_(X))
        return np.clip(mean, self.action_low_, self.action_high_)

    def score(self, X=None, y=None):
        """Mean return of the deterministic policy over ``eval_episodes`` episodes."""
        check_is_fitted(self, "nets_")
        return evaluate(self.nets_, make_env(self.env), self.eval_episodes,
                        seed=self.random_state, normalizer=self.normalizer_)
