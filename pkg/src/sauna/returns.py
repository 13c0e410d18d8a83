"""Discounted returns, GAE advantages and advantage normalisation.

Episode boundaries are given per step by two flags. ``terminals[t]`` means the
episode ended at step ``t`` by the environment's own rule (no tail value);
``truncations[t]`` means it was cut by a time limit and the tail is
``bootstrap_value`` of the next state. The final step of the arrays is always a
segment end: when it is neither terminal nor truncated it is bootstrapped too.

``bootstrap_value`` may be a scalar or a per-step array holding ``V(s_{t+1})``;
only the entries at segment ends are read.
"""

from __future__ import annotations

import numpy as np

from .exceptions import ConfigurationError


def _prepare(rewards, terminals, truncations, bootstrap_value):
    rewards = np.asarray(rewards, dtype=np.float64)
    n = rewards.shape[0]
    terminals = np.zeros(n, bool) if terminals is None else np.asarray(terminals, bool)
    truncations = np.zeros(n, bool) if truncations is None else np.asarray(truncations, bool)
    boot = np.broadcast_to(np.asarray(bootstrap_value, dtype=np.float64), (n,))
    if terminals.shape != (n,) or truncations.shape != (n,):
        raise ConfigurationError("boundary flags must match rewards in length")
    return rewards, terminals, truncations, boot


def discounted_returns(rewards, bootstrap_value=0.0, gamma=0.99, terminals=None, truncations=None):
    """``R_t = r_t + gamma * R_{t+1}`` within each segment."""
    if not 0.0 <= gamma < 1.0:
        raise ConfigurationError("gamma must lie in [0, 1)")
    rewards, terminals, truncations, boot = _prepare(rewards, terminals, truncations, bootstrap_value)
    n = rewards.shape[0]
    out = np.empty(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        if terminals[t]:
            running = 0.0
        elif truncations[t] or t == n - 1:
            running = boot[t]
        out[t] = running = rewards[t] + gamma * running
    return out


def gae_advantages(rewards, values, bootstrap_value=0.0, gamma=0.99, lam=0.95,
                   terminals=None, truncations=None):
    """Generalised advantage estimates ``A_t = sum_k (gamma lam)^k delta_{t+k}``."""
    if not 0.0 <= gamma < 1.0:
        raise ConfigurationError("gamma must lie in [0, 1)")
    if not 0.0 <= lam <= 1.0:
        raise ConfigurationError("lam must lie in [0, 1]")
    rewards, terminals, truncations, boot = _prepare(rewards, terminals, truncations, bootstrap_value)
    values = np.asarray(values, dtype=np.float64)
    n = rewards.shape[0]
    if values.shape != (n,):
        raise ConfigurationError("values must align with rewards")
    adv = np.empty(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        if terminals[t]:
            next_value, running = 0.0, 0.0
        elif truncations[t] or t == n - 1:
            next_value, running = boot[t], 0.0
        else:
            next_value = values[t + 1]
        delta = rewards[t] + gamma * next_value - values[t]
        adv[t] = running = delta + gamma * lam * running
    return adv


def normalize_advantages(adv, eps=1e-8):
    adv = np.asarray(adv, dtype=np.float64)
    if adv.size == 0:
        raise ConfigurationError("cannot normalise an empty advantage list")
    centred = adv - adv.mean()
    std = centred.std()
    if std == 0.0:
        return np.zeros_like(adv)
    return centred / max(std, eps)
