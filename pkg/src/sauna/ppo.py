"""Clipped-surrogate PPO extended with the V^ex regression term.

The minimised loss for a minibatch is::

    -mean(clip_objective(A, ratio, clip))
    + value_coef * mean((V(s) - R)^2)
    + vex_coef * mean((Vex(s) - vex_target)^2)
    - ent_coef * entropy

Parameters are updated per *group*, each with its own Adam state and its own
gradient-norm clip: ``policy`` and ``critic`` by default, a single ``shared``
group when the policy reads the critic trunk, and a separate ``vex`` group
when the V^ex head is detached from the trunk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .approximator import ActorCritic, AdamState, adam_step, clip_by_global_norm, l1_norm
from .exceptions import ConfigurationError, UsageError
from .returns import normalize_advantages


@dataclass
class PpoHyperparams:
    clip: float = 0.2
    epochs: int = 10
    minibatch_size: int = 64
    horizon: int = 2048
    gamma: float = 0.99
    lam: float = 0.95
    value_coef: float = 0.5
    vex_coef: float = 0.5
    ent_coef: float = 0.0
    max_grad_norm: float = 0.5
    learning_rate: float = 3e-4
    rho: float = 0.3
    eps0: float = 1e-8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    normalize_advantages: bool = True
    vex_into_trunk: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0.0 < self.clip < 1.0:
            raise ConfigurationError("clip must lie in (0, 1)")
        if self.rho < 0.0:
            raise ConfigurationError("rho must be >= 0")
        if self.value_coef < 0.0 or self.vex_coef < 0.0:
            raise ConfigurationError("loss coefficients must be >= 0")
        if self.minibatch_size < 1 or self.epochs < 0:
            raise ConfigurationError("minibatch_size must be >= 1 and epochs >= 0")
        if self.horizon < self.minibatch_size or self.horizon % self.minibatch_size:
            raise ConfigurationError("horizon must be a multiple of minibatch_size")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class UpdateReport:
    surrogate_loss: float = 0.0
    value_loss: float = 0.0
    vex_loss: float = 0.0
    entropy: float = 0.0
    approx_kl: float = 0.0
    clip_fraction: float = 0.0
    grad_l1_layers: list = field(default_factory=list)
    critic_grad_l1_layers: list = field(default_factory=list)
    epoch_value_losses: list = field(default_factory=list)
    skipped_minibatches: int = 0
    minibatches: int = 0

    @property
    def grad_l1_first_layer(self):
        return self.grad_l1_layers[0] if self.grad_l1_layers else float("nan")

    @property
    def grad_l1_last_layer(self):
        return self.grad_l1_layers[-1] if self.grad_l1_layers else float("nan")


def clip_objective(advantage, ratio, clip):
    """Piecewise clipped surrogate.

    ``min(ratio*A, (1+clip)*A)`` for ``A >= 0`` and ``min(ratio*A, (1-clip)*A)``
    for ``A < 0``. Works elementwise on arrays.
    """
    advantage = np.asarray(advantage, dtype=np.float64)
    ratio = np.asarray(ratio, dtype=np.float64)
    bound = np.where(advantage >= 0, 1.0 + clip, 1.0 - clip) * advantage
    out = np.minimum(ratio * advantage, bound)
    return out if out.ndim else float(out)


def _clip_active(advantage, ratio, clip):
    """Where the ratio branch of :func:`clip_objective` is the minimum."""
    return np.where(advantage >= 0, ratio < 1.0 + clip, ratio > 1.0 - clip)


@dataclass
class Minibatch:
    obs: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    vex_target: float

    def __len__(self):
        return self.obs.shape[0]

    def subset(self, idx):
        return Minibatch(self.obs[idx], self.actions[idx], self.old_log_probs[idx],
                         self.advantages[idx], self.returns[idx], self.vex_target)


def param_groups(nets: ActorCritic, train_vex=True, vex_into_trunk=True):
    """Parameter lists per optimisation group (live references)."""
    critic = nets.critic
    value_side = critic.trunk.params + critic.value_head.params
    vex = critic.vex_head.params if train_vex else []
    groups = {}
    if nets.shared_trunk:
        groups["shared"] = nets.policy.params + value_side + (vex if vex_into_trunk else [])
    else:
        groups["policy"] = nets.policy.params
        groups["critic"] = value_side + (vex if vex_into_trunk else [])
    if vex and not vex_into_trunk:
        groups["vex"] = vex
    return groups


def sauna_loss(nets: ActorCritic, mb: Minibatch, hyper: PpoHyperparams, train_vex=True):
    """Loss value, per-group gradients (aligned with :func:`param_groups`) and diagnostics."""
    n = len(mb)
    if n == 0:
        raise UsageError("empty minibatch")
    policy, critic = nets.policy, nets.critic
    vex_into_trunk = hyper.vex_into_trunk

    feats = critic.trunk.forward(mb.obs, cache=True)
    value = critic.value_head.forward(feats, cache=True)[:, 0]
    vex = critic.vex_head.forward(feats, cache=True)[:, 0] if train_vex else None
    policy_in = feats if nets.shared_trunk else mb.obs
    logp, entropy = policy.log_prob_and_entropy(policy_in, mb.actions)

    log_ratio = logp - mb.old_log_probs
    ratio = np.exp(log_ratio)
    adv = mb.advantages
    surrogate = float(np.mean(clip_objective(adv, ratio, hyper.clip)))
    value_err = value - mb.returns
    value_loss = float(np.mean(value_err ** 2))
    vex_loss = float(np.mean((vex - mb.vex_target) ** 2)) if train_vex else 0.0
    loss = -surrogate + hyper.value_coef * value_loss - hyper.ent_coef * entropy
    if train_vex:
        loss += hyper.vex_coef * vex_loss

    dlogp = -adv * ratio * _clip_active(adv, ratio, hyper.clip) / n
    g_policy, dpolicy_in = policy.backward(dlogp, -hyper.ent_coef)
    dvalue = 2.0 * hyper.value_coef * value_err / n
    dvex = 2.0 * hyper.vex_coef * (vex - mb.vex_target) / n if train_vex else None
    g_trunk, g_value, g_vex = critic.backward(
        dvalue, dvex, vex_into_trunk=vex_into_trunk,
        dfeatures=dpolicy_in if nets.shared_trunk else None)

    value_side = g_trunk + g_value
    vex_grads = g_vex if train_vex else []
    grads = {}
    if nets.shared_trunk:
        grads["shared"] = g_policy + value_side + (vex_grads if vex_into_trunk else [])
        policy_layers = _layer_l1(g_trunk) + _layer_l1(g_policy[:-1])
    else:
        grads["policy"] = g_policy
        grads["critic"] = value_side + (vex_grads if vex_into_trunk else [])
        policy_layers = _layer_l1(g_policy[:-1])
    if vex_grads and not vex_into_trunk:
        grads["vex"] = vex_grads

    info = {
        "loss": float(loss),
        "surrogate": surrogate,
        "value_loss": value_loss,
        "vex_loss": vex_loss,
        "entropy": float(entropy),
        "approx_kl": float(np.mean((ratio - 1.0) - log_ratio)),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > hyper.clip)),
        "grad_l1_layers": policy_layers,
        "critic_grad_l1_layers": _layer_l1(g_trunk) + _layer_l1(g_value),
    }
    return float(loss), grads, info


def _layer_l1(grads):
    """L1 norm per (weight, bias) pair."""
    return [l1_norm(grads[i:i + 2]) for i in range(0, len(grads) - 1, 2)]


def make_optimizers(groups, hyper: PpoHyperparams):
    return {name: AdamState(lr=hyper.learning_rate, beta1=hyper.adam_beta1,
                            beta2=hyper.adam_beta2, eps=hyper.adam_eps)
            for name in groups}


def update(nets: ActorCritic, batch: Minibatch, optimizers, hyper: PpoHyperparams,
           rng: np.random.Generator, train_vex=True) -> UpdateReport:
    """Run ``hyper.epochs`` passes of shuffled minibatches over ``batch``."""
    n = len(batch)
    if n < hyper.minibatch_size:
        raise UsageError(f"batch of {n} is shorter than one minibatch ({hyper.minibatch_size})")
    groups = param_groups(nets, train_vex, hyper.vex_into_trunk)
    missing = set(groups) - set(optimizers)
    if missing:
        raise UsageError(f"no optimizer state for groups {sorted(missing)}")
    if hyper.normalize_advantages:
        batch = Minibatch(batch.obs, batch.actions, batch.old_log_probs,
                          normalize_advantages(batch.advantages), batch.returns, batch.vex_target)

    report = UpdateReport()
    sums = {k: 0.0 for k in ("surrogate", "value_loss", "vex_loss", "entropy",
                             "approx_kl", "clip_fraction")}
    l1_policy = None
    l1_critic = None
    counted = 0
    for _ in range(hyper.epochs):
        perm = rng.permutation(n)
        epoch_value = []
        for start in range(0, n - hyper.minibatch_size + 1, hyper.minibatch_size):
            mb = batch.subset(perm[start:start + hyper.minibatch_size])
            report.minibatches += 1
            loss, grads, info = sauna_loss(nets, mb, hyper, train_vex)
            if not math.isfinite(loss):
                report.skipped_minibatches += 1
                continue
            epoch_value.append(info["value_loss"])
            counted += 1
            for k in sums:
                sums[k] += info[k]
            pl = np.asarray(info["grad_l1_layers"])
            cl = np.asarray(info["critic_grad_l1_layers"])
            l1_policy = pl if l1_policy is None else l1_policy + pl
            l1_critic = cl if l1_critic is None else l1_critic + cl
            for name, params in groups.items():
                clipped, _ = clip_by_global_norm(grads[name], hyper.max_grad_norm)
                if not adam_step(params, clipped, optimizers[name]):
                    report.skipped_minibatches += 1
        if epoch_value:
            report.epoch_value_losses.append(float(np.mean(epoch_value)))
    if counted:
        report.surrogate_loss = -sums["surrogate"] / counted
        report.value_loss = sums["value_loss"] / counted
        report.vex_loss = sums["vex_loss"] / counted
        report.entropy = sums["entropy"] / counted
        report.approx_kl = sums["approx_kl"] / counted
        report.clip_fraction = sums["clip_fraction"] / counted
        report.grad_l1_layers = (l1_policy / counted).tolist()
        report.critic_grad_l1_layers = (l1_critic / counted).tolist()
    else:
        nan = float("nan")
        report.surrogate_loss = report.value_loss = report.vex_loss = nan
        report.entropy = report.approx_kl = report.clip_fraction = nan
    return report
