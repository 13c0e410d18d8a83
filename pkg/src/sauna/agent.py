"""Filtered batch collection, target computation and the training loop.

One call to :meth:`Collector.collect` gathers exactly ``horizon`` *accepted*
transitions. Every visited step is kept internally so that returns and
advantages follow the real reward stream; rejected steps only drop out of the
gradient batch.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .approximator import ActorCritic, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, Variant
from .envs import IdentityNormalizer, RunningNormalizer, make_env
from .exceptions import TrainingAborted, UsageError
from .ppo import Minibatch, PpoHyperparams, UpdateReport, make_optimizers, param_groups, update
from .returns import discounted_returns, gae_advantages
from .vex import MeanTracker, MedianTracker, accept_transition, adjusted_vex, vex_of_batch

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    value: float
    next_state: np.ndarray
    vex: float
    log_prob: float
    terminal: bool
    truncated: bool


@dataclass
class Batch:
    """Accepted transitions of one collection plus their training targets.

    ``vex_preds`` is NaN for variants that never consult the V^ex head while
    collecting.
    """

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    next_obs: np.ndarray
    vex_preds: np.ndarray
    log_probs: np.ndarray
    terminals: np.ndarray
    truncations: np.ndarray
    returns: np.ndarray
    advantages: np.ndarray
    vex_target: float
    vex_batch: float
    visited: int
    rejected: int
    episode_returns: list = field(default_factory=list)

    def __len__(self):
        return self.obs.shape[0]

    @property
    def rejection_fraction(self):
        return self.rejected / self.visited if self.visited else 0.0

    def transition(self, i) -> Transition:
        return Transition(self.obs[i], self.actions[i], float(self.rewards[i]),
                          float(self.values[i]), self.next_obs[i], float(self.vex_preds[i]),
                          float(self.log_probs[i]), bool(self.terminals[i]),
                          bool(self.truncations[i]))

    def minibatch(self) -> Minibatch:
        return Minibatch(self.obs, self.actions, self.log_probs, self.advantages,
                         self.returns, self.vex_target)


def accepted_only_targets(rewards, values, next_values, terminals, truncations, accepted, gamma, lam):
    """Returns/advantages computed as if rejected steps never happened.

    A gap that contains an episode end becomes a boundary on the preceding
    accepted step, carrying that end's terminal flag and bootstrap value.
    """
    idx = np.flatnonzero(accepted)
    k = idx.size
    term = np.zeros(k, bool)
    trunc = np.zeros(k, bool)
    boot = np.zeros(k)
    for j, i in enumerate(idx):
        stop = idx[j + 1] if j + 1 < k else len(rewards)
        ends = np.flatnonzero(terminals[i:stop] | truncations[i:stop])
        if ends.size:
            e = i + ends[0]
            term[j] = terminals[e]
            trunc[j] = truncations[e]
            boot[j] = next_values[e]
        elif j + 1 == k:
            boot[j] = next_values[-1]
    r, v = rewards[idx], values[idx]
    returns = discounted_returns(r, boot, gamma, term, trunc)
    adv = gae_advantages(r, v, boot, gamma, lam, term, trunc)
    return returns, adv


class Collector:
    """Environment interaction state that persists across collections."""

    def __init__(self, env, nets: ActorCritic, variant: Variant, hyper: PpoHyperparams, *,
                 action_rng, filter_rng, normalizer=None, env_seed=None,
                 median_accepted_only=False, returns_on_accepted_only=False,
                 random_filter_rate=0.05, random_filter_schedule=None,
                 adjusted_vex_predictors=1, normalize_reward=False):
        self.env = env
        self.nets = nets
        self.variant = Variant(variant)
        self.hyper = hyper
        self.action_rng = action_rng
        self.filter_rng = filter_rng
        self.normalizer = normalizer if normalizer is not None else IdentityNormalizer()
        self.median_accepted_only = median_accepted_only
        self.returns_on_accepted_only = returns_on_accepted_only
        self.random_filter_rate = random_filter_rate
        self.random_filter_schedule = list(random_filter_schedule or [])
        self.adjusted_vex_predictors = adjusted_vex_predictors
        self.reward_normalizer = RunningNormalizer(1) if normalize_reward else None
        self._disc_return = 0.0
        self.iteration = 0
        self.total_visited = 0
        self.total_accepted = 0
        self._raw_obs = env.reset(seed=env_seed)
        self._ep_return = 0.0
        self._ep_rewards = []
        self._ep_values = []
        self.last_empirical_vex = None

    def _new_tracker(self):
        if self.variant is Variant.MEAN_INSTEAD_OF_MEDIAN:
            return MeanTracker()
        return MedianTracker()

    def _random_rate(self):
        sched = self.random_filter_schedule
        if not sched:
            return self.random_filter_rate
        return sched[min(self.iteration, len(sched) - 1)]

    def _episode_vex(self, terminal, tail_value):
        rewards = np.asarray(self._ep_rewards)
        values = np.asarray(self._ep_values)
        term = np.zeros(len(rewards), bool)
        term[-1] = terminal
        returns = discounted_returns(rewards, tail_value, self.hyper.gamma, term)
        return vex_of_batch(returns, values).vex_batch

    def collect(self) -> Batch:
        hyper = self.hyper
        horizon = hyper.horizon
        variant = self.variant
        tracker = self._new_tracker()
        reject_rate = self._random_rate() if variant is Variant.RANDOM_FILTER else 0.0

        obs_l, act_l, rew_l, val_l, vex_l, logp_l = [], [], [], [], [], []
        next_obs_l, term_l, trunc_l, nextval_l, acc_l = [], [], [], [], []
        episode_returns = []
        accepted = 0
        env = self.env
        # only the V^ex filters read psi's prediction during collection
        needs_vex = variant.filters and variant is not Variant.RANDOM_FILTER
        while accepted < horizon:
            raw = self._raw_obs
            self.normalizer.update(raw)
            obs = self.normalizer(raw)
            action, logp, value, vex_pred = self.nets.act(obs, self.action_rng, needs_vex)
            res = env.step(action)

            if variant is Variant.PPO_BASELINE or variant is Variant.NO_FILTER_AUX:
                keep = True
            elif variant is Variant.RANDOM_FILTER:
                keep = bool(self.filter_rng.random() >= reject_rate)
            else:
                signal = vex_pred
                if variant is Variant.EMPIRICAL_VEX_FILTER and self.last_empirical_vex is not None:
                    signal = self.last_empirical_vex
                keep = accept_transition(signal, tracker, hyper.rho, hyper.eps0)
                if keep or not self.median_accepted_only:
                    tracker.add(signal)

            reward = res.reward
            if self.reward_normalizer is not None:
                # scale by the running std of the discounted return (no centring)
                self._disc_return = self._disc_return * hyper.gamma + reward
                self.reward_normalizer.update(np.array([self._disc_return]))
                reward = reward / math.sqrt(self.reward_normalizer.var[0] + 1e-8)

            obs_l.append(obs)
            act_l.append(action)
            rew_l.append(reward)
            val_l.append(value)
            vex_l.append(vex_pred)
            logp_l.append(logp)
            next_obs_l.append(res.next_state)
            term_l.append(res.terminal)
            trunc_l.append(res.truncated)
            acc_l.append(keep)
            accepted += keep
            self._ep_return += res.reward
            self._ep_rewards.append(reward)
            self._ep_values.append(value)

            next_value = 0.0
            if res.truncated:
                next_value, _ = self.nets.predict_values(self.normalizer(res.next_state))
                next_value = float(next_value)
            nextval_l.append(next_value)

            if res.terminal or res.truncated:
                episode_returns.append(self._ep_return)
                self.last_empirical_vex = self._episode_vex(res.terminal, next_value)
                self._ep_return = 0.0
                self._ep_rewards, self._ep_values = [], []
                self._disc_return = 0.0
                self._raw_obs = env.reset()
            else:
                self._raw_obs = res.next_state

        if not (term_l[-1] or trunc_l[-1]):
            tail, _ = self.nets.predict_values(self.normalizer(self._raw_obs))
            nextval_l[-1] = float(tail)

        rewards = np.asarray(rew_l)
        values = np.asarray(val_l, dtype=np.float64)
        next_values = np.asarray(nextval_l)
        terminals = np.asarray(term_l)
        truncations = np.asarray(trunc_l)
        keep = np.asarray(acc_l)
        if self.returns_on_accepted_only:
            returns, adv = accepted_only_targets(rewards, values, next_values, terminals,
                                                 truncations, keep, hyper.gamma, hyper.lam)
        else:
            returns = discounted_returns(rewards, next_values, hyper.gamma, terminals, truncations)
            adv = gae_advantages(rewards, values, next_values, hyper.gamma, hyper.lam,
                                 terminals, truncations)
            returns, adv = returns[keep], adv[keep]

        stat = vex_of_batch(returns, values[keep])
        target = stat.vex_batch
        if variant is Variant.ADJUSTED_VEX:
            target = adjusted_vex(stat, stat.sample_count, self.adjusted_vex_predictors)

        visited = len(rew_l)
        self.iteration += 1
        self.total_visited += visited
        self.total_accepted += int(keep.sum())
        return Batch(
            obs=np.asarray(obs_l)[keep],
            actions=np.asarray(act_l)[keep],
            rewards=rewards[keep],
            values=values[keep],
            next_obs=np.asarray(next_obs_l)[keep],
            vex_preds=np.asarray(vex_l, dtype=np.float64)[keep],
            log_probs=np.asarray(logp_l, dtype=np.float64)[keep],
            terminals=terminals[keep],
            truncations=truncations[keep],
            returns=returns,
            advantages=adv,
            vex_target=float(target),
            vex_batch=float(stat.vex_batch),
            visited=visited,
            rejected=visited - int(keep.sum()),
            episode_returns=episode_returns,
        )


def evaluate(nets: ActorCritic, env, episodes: int, seed=None, normalizer=None) -> float:
    """Mean undiscounted return of the deterministic (mean-action) policy.

    Episodes run in lockstep on copies of ``env`` so the policy sees one
    batched forward pass per time step.
    """
    if episodes < 1:
        raise UsageError("episodes must be >= 1")
    norm = normalizer if normalizer is not None else IdentityNormalizer()
    rng = np.random.default_rng(seed)
    envs = [copy.deepcopy(env) for _ in range(episodes)]
    obs = np.stack([e.reset(seed=int(rng.integers(2 ** 31))) for e in envs])
    totals = np.zeros(episodes)
    live = list(range(episodes))
    while live:
        actions = nets.mean_action(norm(obs[live]))
        still = []
        for i, a in zip(live, actions):
            res = envs[i].step(a)
            totals[i] += res.reward
            if not (res.terminal or res.truncated):
                obs[i] = res.next_state
                still.append(i)
        live = still
    return float(np.mean(totals))


METRICS_COLUMNS = [
    "update", "env_steps", "accepted_steps", "episodes", "return_mean", "return_std",
    "eval_return", "vex_batch", "vex_target", "rejection_fraction",
    "grad_l1_first_layer", "grad_l1_last_layer",
    "grad_l1_value_first_layer", "grad_l1_value_last_layer",
    "surrogate_loss", "value_loss", "vex_loss", "entropy", "approx_kl", "clip_fraction",
    "skipped_minibatches",
]


@dataclass
class MetricsRecord:
    update: int
    env_steps: int
    accepted_steps: int
    episodes: int
    return_mean: float
    return_std: float
    eval_return: float
    vex_batch: float
    vex_target: float
    rejection_fraction: float
    grad_l1_first_layer: float
    grad_l1_last_layer: float
    grad_l1_value_first_layer: float
    grad_l1_value_last_layer: float
    surrogate_loss: float
    value_loss: float
    vex_loss: float
    entropy: float
    approx_kl: float
    clip_fraction: float
    skipped_minibatches: int
    wall_ms: float = 0.0

    def row(self):
        return [_fmt(getattr(self, c)) for c in METRICS_COLUMNS]


def _fmt(value):
    if isinstance(value, float):
        if math.isnan(value):
            return ""
        return repr(value)
    return str(value)


@dataclass
class TrainResult:
    records: list
    nets: ActorCritic
    normalizer: object
    policy_history: list = field(default_factory=list)
    aborted: bool = False


def seed_streams(seed):
    """Independent generators for each source of randomness in a run."""
    names = ("init", "action", "shuffle", "env", "eval", "filter")
    children = np.random.SeedSequence(int(seed)).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def build_agent(config: ExperimentConfig, seed):
    env = make_env(config.env)
    spec = env.spec
    streams = seed_streams(seed)
    nets = ActorCritic(spec.state_dim, spec.action_dim, config.hidden, config.vex_hidden,
                       shared_trunk=config.shared_policy_trunk,
                       log_std_init=config.log_std_init, rng=streams["init"])
    normalizer = RunningNormalizer(spec.state_dim) if config.normalize_obs else IdentityNormalizer()
    return env, nets, normalizer, streams


def load_rejection_schedule(path):
    with open(path, newline="") as fh:
        return [float(row["rejection_fraction"]) for row in csv.DictReader(fh)]


def train(config: ExperimentConfig, seed=None, *, record_policy=False, callback=None) -> TrainResult:
    """Alternate collection and update until ``total_steps`` visited steps."""
    seed = config.effective_seeds()[0] if seed is None else int(seed)
    hyper = config.ppo()
    variant = config.variant_enum
    env, nets, normalizer, streams = build_agent(config, seed)
    schedule = None
    if variant is Variant.RANDOM_FILTER and config.random_filter_schedule:
        schedule = load_rejection_schedule(config.random_filter_schedule)
    collector = Collector(
        env, nets, variant, hyper,
        action_rng=streams["action"], filter_rng=streams["filter"], normalizer=normalizer,
        env_seed=int(streams["env"].integers(2 ** 31)),
        median_accepted_only=config.median_accepted_only,
        returns_on_accepted_only=config.returns_on_accepted_only,
        random_filter_rate=config.random_filter_rate,
        random_filter_schedule=schedule,
        adjusted_vex_predictors=config.adjusted_vex_predictors,
        normalize_reward=config.normalize_reward,
    )
    train_vex = variant.trains_vex
    optimizers = make_optimizers(param_groups(nets, train_vex, hyper.vex_into_trunk), hyper)
    eval_env = make_env(config.env)
    eval_seed = int(streams["eval"].integers(2 ** 31))

    records = []
    history = []
    failures = 0
    update_index = 0
    while collector.total_visited < config.total_steps:
        t0 = time.perf_counter()
        if config.lr_schedule == "linear":
            frac = 1.0 - collector.total_visited / config.total_steps
            for opt in optimizers.values():
                opt.lr = hyper.learning_rate * frac
        batch = collector.collect()
        report: UpdateReport = update(nets, batch.minibatch(), optimizers, hyper,
                                      streams["shuffle"], train_vex=train_vex)
        update_index += 1
        if report.minibatches and report.skipped_minibatches == report.minibatches:
            failures += 1
            logger.warning("update %d: every minibatch was non-finite", update_index)
            if failures >= 3:
                raise TrainingAborted(
                    f"non-finite loss in three consecutive updates (last: {update_index})")
        else:
            failures = 0
        if record_policy:
            history.append(np.concatenate([p.ravel() for p in nets.policy.params]))

        done = collector.total_visited >= config.total_steps
        eval_return = float("nan")
        if update_index % config.eval_every == 0 or done:
            normalizer.frozen = True
            eval_return = evaluate(nets, eval_env, config.eval_episodes,
                                   seed=eval_seed + update_index, normalizer=normalizer)
            normalizer.frozen = False
        ep = np.asarray(batch.episode_returns)
        pl = report.grad_l1_layers or [float("nan")]
        cl = report.critic_grad_l1_layers or [float("nan")]
        record = MetricsRecord(
            update=update_index,
            env_steps=collector.total_visited,
            accepted_steps=collector.total_accepted,
            episodes=len(ep),
            return_mean=float(ep.mean()) if ep.size else float("nan"),
            return_std=float(ep.std()) if ep.size else float("nan"),
            eval_return=eval_return,
            vex_batch=batch.vex_batch,
            vex_target=batch.vex_target,
            rejection_fraction=batch.rejection_fraction,
            grad_l1_first_layer=float(pl[0]),
            grad_l1_last_layer=float(pl[-1]),
            grad_l1_value_first_layer=float(cl[0]),
            grad_l1_value_last_layer=float(cl[-1]),
            surrogate_loss=report.surrogate_loss,
            value_loss=report.value_loss,
            vex_loss=report.vex_loss,
            entropy=report.entropy,
            approx_kl=report.approx_kl,
            clip_fraction=report.clip_fraction,
            skipped_minibatches=report.skipped_minibatches,
            wall_ms=(time.perf_counter() - t0) * 1000.0,
        )
        records.append(record)
        if callback is not None:
            callback(record)
    return TrainResult(records, nets, normalizer, history)


def write_metrics(records, path):
    """Deterministic metrics CSV (no wall-clock column)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(METRICS_COLUMNS)
        for r in records:
            w.writerow(r.row())


def write_timing(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["update", "wall_ms"])
        for r in records:
            w.writerow([r.update, f"{r.wall_ms:.3f}"])


def checkpoint_arrays(nets: ActorCritic, normalizer):
    arrays = dict(nets.named_arrays())
    for k, v in normalizer.state_dict().items():
        arrays[f"obs_norm.{k}"] = v
    return arrays


def save_agent(path, nets: ActorCritic, normalizer, extra_meta=None):
    meta = {"architecture": nets.architecture(), **(extra_meta or {})}
    save_checkpoint(path, checkpoint_arrays(nets, normalizer), meta)


def load_agent(path):
    """Rebuild ``(nets, normalizer, meta)`` from a checkpoint file."""
    arrays, meta = load_checkpoint(path)
    arch = meta["architecture"]
    nets = ActorCritic(arch["state_dim"], arch["action_dim"], arch["hidden"], arch["vex_hidden"],
                       shared_trunk=arch["shared_trunk"])
    nets.load_arrays(arrays)
    if "obs_norm.mean" in arrays:
        normalizer = RunningNormalizer(arch["state_dim"])
        normalizer.load_state_dict({k.split(".", 1)[1]: v for k, v in arrays.items()
                                    if k.startswith("obs_norm.")})
    else:
        normalizer = IdentityNormalizer()
    return nets, normalizer, meta


__all__ = [
    "Batch", "Collector", "METRICS_COLUMNS", "MetricsRecord", "TrainResult", "Transition",
    "evaluate", "load_agent", "save_agent", "train", "write_metrics",
]
