"""Dense feedforward networks with hand-written backprop, Adam, and checkpoints.

Networks operate on batches: inputs are ``(n, in_dim)`` arrays (a 1-D input is
treated as a batch of one and the output is squeezed back). ``forward`` caches
what ``backward`` needs; ``backward`` takes the gradient of a scalar objective
with respect to the outputs and returns parameter gradients in the same order
as :attr:`DenseNet.params`.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, UsageError

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_LOG_2PI = math.log(2.0 * math.pi)


def _clamp(x, lo, hi):
    # np.clip carries several microseconds of dispatch overhead on tiny arrays
    return np.minimum(np.maximum(x, lo), hi)

ACTIVATIONS = ("tanh", "identity")


def orthogonal_init(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    """Orthogonal ``(n_in, n_out)`` matrix scaled by ``gain``."""
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


class DenseNet:
    """Multi-layer perceptron with tanh hidden layers.

    Parameters
    ----------
    layer_sizes : sequence of int
        ``[in_dim, hidden..., out_dim]``; at least two entries.
    output_activation : {"identity", "tanh"}
        Activation of the last layer. Trunks feeding heads use ``"tanh"``.
    rng : numpy Generator, optional
        Source for orthogonal initialisation. Zero weights if omitted.
    hidden_gain, output_gain : float
        Orthogonal init gains for hidden and output layers.
    """

    def __init__(self, layer_sizes, output_activation="identity", rng=None,
                 hidden_gain=math.sqrt(2.0), output_gain=1.0):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ConfigurationError(f"invalid layer sizes {layer_sizes!r}")
        if output_activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {output_activation!r}")
        self.layer_sizes = sizes
        self.output_activation = output_activation
        self.weights = []
        self.biases = []
        n_layers = len(sizes) - 1
        for i in range(n_layers):
            gain = output_gain if i == n_layers - 1 else hidden_gain
            if rng is None:
                w = np.zeros((sizes[i], sizes[i + 1]))
            else:
                w = orthogonal_init(rng, sizes[i], sizes[i + 1], gain)
            self.weights.append(w)
            self.biases.append(np.zeros(sizes[i + 1]))
        self._cache = None

    @property
    def in_dim(self):
        return self.layer_sizes[0]

    @property
    def out_dim(self):
        return self.layer_sizes[-1]

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def params(self):
        """Parameter arrays as ``[W0, b0, W1, b1, ...]`` (live references)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def _activation(self, i):
        return "tanh" if i < self.n_layers - 1 else self.output_activation

    def _check_input(self, x):
        if type(x) is not np.ndarray or x.dtype != np.float64:
            x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ConfigurationError(
                f"expected input of width {self.in_dim}, got shape {np.shape(x)}")
        return x, squeeze

    def forward(self, x, cache=True):
        x, squeeze = self._check_input(x)
        activations = [x]
        h = x
        last = len(self.weights) - 1
        tanh_out = self.output_activation == "tanh"
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w
            h += b
            if i < last or tanh_out:
                np.tanh(h, out=h)
            activations.append(h)
        if cache:
            self._cache = (activations, squeeze)
        return h[0] if squeeze else h

    __call__ = forward

    def backward(self, upstream):
        """Backpropagate ``upstream = d objective / d output``.

        Returns ``(param_grads, input_grad)`` where ``param_grads`` follows
        :attr:`params`.
        """
        if self._cache is None:
            raise UsageError("backward called before forward")
        activations, squeeze = self._cache
        g = np.asarray(upstream, dtype=np.float64)
        if squeeze and g.ndim == 1:
            g = g[None, :]
        if g.shape != activations[-1].shape:
            raise ConfigurationError(
                f"upstream gradient shape {g.shape} != output shape {activations[-1].shape}")
        grads = [None] * (2 * self.n_layers)
        for i in reversed(range(self.n_layers)):
            if self._activation(i) == "tanh":
                g = g * (1.0 - activations[i + 1] ** 2)
            grads[2 * i] = activations[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return grads, (g[0] if squeeze else g)

    def get_flat(self):
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat):
        _assign_flat(self.params, flat)

    def copy(self):
        clone = DenseNet.__new__(DenseNet)
        clone.layer_sizes = list(self.layer_sizes)
        clone.output_activation = self.output_activation
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        clone._cache = None
        return clone


def _assign_flat(arrays, flat):
    flat = np.asarray(flat, dtype=np.float64)
    total = sum(a.size for a in arrays)
    if flat.shape != (total,):
        raise ConfigurationError(f"expected {total} values, got shape {flat.shape}")
    offset = 0
    for a in arrays:
        a[...] = flat[offset:offset + a.size].reshape(a.shape)
        offset += a.size


def gaussian_log_prob(mean, log_std, action):
    """Diagonal Gaussian log-density summed over the action dimension."""
    log_std = _clamp(log_std, LOG_STD_MIN, LOG_STD_MAX)
    z = (action - mean) * np.exp(-log_std)
    return -0.5 * (z * z).sum(axis=-1) - float(log_std.sum()) - 0.5 * mean.shape[-1] * _LOG_2PI


def gaussian_entropy(log_std):
    log_std = _clamp(log_std, LOG_STD_MIN, LOG_STD_MAX)
    return float((0.5 + 0.5 * _LOG_2PI + log_std).sum())


class GaussianPolicy:
    """State-conditioned diagonal Gaussian with a state-independent log-std.

    ``mean_net`` maps states (or trunk features, when the trunk is shared with
    the critic) to action means.
    """

    def __init__(self, mean_net: DenseNet, action_dim: int, log_std_init: float = 0.0):
        if mean_net.out_dim != action_dim:
            raise ConfigurationError("policy mean net output must equal action_dim")
        self.mean_net = mean_net
        self.log_std = np.full(action_dim, float(log_std_init))
        self._cache = None

    @property
    def params(self):
        return self.mean_net.params + [self.log_std]

    @property
    def std(self):
        return np.exp(_clamp(self.log_std, LOG_STD_MIN, LOG_STD_MAX))

    def mean(self, x, cache=False):
        return self.mean_net.forward(x, cache=cache)

    def sample(self, x, rng: np.random.Generator):
        mean = self.mean(x)
        action = mean + self.std * rng.standard_normal(mean.shape)
        return action, gaussian_log_prob(mean, self.log_std, action)

    def log_prob_and_entropy(self, x, action):
        """Log-density of ``action`` and the (state-independent) entropy.

        Caches the forward pass so :meth:`backward` can route gradients.
        """
        mean = self.mean_net.forward(x, cache=True)
        action = np.asarray(action, dtype=np.float64)
        if action.shape != mean.shape:
            raise ConfigurationError(f"action shape {action.shape} != {mean.shape}")
        self._cache = (mean, action)
        return gaussian_log_prob(mean, self.log_std, action), gaussian_entropy(self.log_std)

    def backward(self, dlogp, dentropy=0.0):
        """Gradients for ``sum(dlogp * logp) + dentropy * entropy``.

        Returns ``(param_grads, input_grad)`` ordered like :attr:`params`.
        """
        if self._cache is None:
            raise UsageError("backward called before log_prob_and_entropy")
        mean, action = self._cache
        dlogp = np.asarray(dlogp, dtype=np.float64)
        squeeze = mean.ndim == 1
        if squeeze:
            mean, action, dlogp = mean[None], action[None], np.atleast_1d(dlogp)
        inside = (self.log_std > LOG_STD_MIN) & (self.log_std < LOG_STD_MAX)
        var_inv = np.exp(-2.0 * _clamp(self.log_std, LOG_STD_MIN, LOG_STD_MAX))
        diff = action - mean
        dmean = dlogp[:, None] * diff * var_inv
        dlog_std = (dlogp[:, None] * (diff ** 2 * var_inv - 1.0)).sum(axis=0) + dentropy
        dlog_std = np.where(inside, dlog_std, 0.0)
        grads, dx = self.mean_net.backward(dmean[0] if squeeze else dmean)
        return grads + [dlog_std], dx

    def copy(self):
        clone = GaussianPolicy(self.mean_net.copy(), len(self.log_std))
        clone.log_std = self.log_std.copy()
        return clone


class ValueVexNet:
    """Shared trunk with a linear value head and a one-hidden-layer V^ex head."""

    def __init__(self, state_dim, hidden=(64, 64), vex_hidden=64, rng=None):
        hidden = tuple(int(h) for h in hidden)
        self.trunk = DenseNet([state_dim, *hidden], output_activation="tanh", rng=rng)
        self.value_head = DenseNet([hidden[-1], 1], rng=rng, output_gain=1.0)
        self.vex_head = DenseNet([hidden[-1], int(vex_hidden), 1], rng=rng, output_gain=0.01)

    @property
    def trunk_params(self):
        return self.trunk.params

    @property
    def params(self):
        return self.trunk.params + self.value_head.params + self.vex_head.params

    def predict(self, x):
        """Value and V^ex predictions, no caching."""
        features = self.trunk.forward(x, cache=False)
        value = self.value_head.forward(features, cache=False)[..., 0]
        vex = self.vex_head.forward(features, cache=False)[..., 0]
        return value, vex

    def forward(self, x):
        features = self.trunk.forward(x, cache=True)
        value = self.value_head.forward(features, cache=True)[..., 0]
        vex = self.vex_head.forward(features, cache=True)[..., 0]
        return value, vex

    def backward(self, dvalue, dvex=None, vex_into_trunk=True, dfeatures=None):
        """Gradients ``(trunk, value_head, vex_head)`` for the given output grads.

        ``dvex=None`` skips the V^ex head (its gradient comes back as None).
        With ``vex_into_trunk=False`` the V^ex head is trained on detached
        trunk features and only ``dvalue`` reaches the trunk. ``dfeatures`` is
        an extra gradient on the trunk output from another head.
        """
        dvalue = np.asarray(dvalue, dtype=np.float64)[..., None]
        g_value, dfeat = self.value_head.backward(dvalue)
        g_vex = None
        if dvex is not None:
            g_vex, dfeat_vex = self.vex_head.backward(np.asarray(dvex, dtype=np.float64)[..., None])
            if vex_into_trunk:
                dfeat = dfeat + dfeat_vex
        if dfeatures is not None:
            dfeat = dfeat + dfeatures
        g_trunk, _ = self.trunk.backward(dfeat)
        return g_trunk, g_value, g_vex

    def copy(self):
        clone = ValueVexNet.__new__(ValueVexNet)
        clone.trunk = self.trunk.copy()
        clone.value_head = self.value_head.copy()
        clone.vex_head = self.vex_head.copy()
        return clone


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    rejected: int = 0


def adam_step(params, grads, state: AdamState) -> bool:
    """In-place Adam update with bias correction.

    Moments are kept as flat vectors over the concatenated parameters.
    Returns False (and leaves params and moments untouched) when any gradient
    is non-finite; ``state.rejected`` counts such events.
    """
    if len(params) != len(grads):
        raise ConfigurationError("params and grads differ in length")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ConfigurationError(f"gradient shape {g.shape} != parameter shape {p.shape}")
    g = np.concatenate([np.ravel(x) for x in grads])
    if not np.isfinite(g).all():
        state.rejected += 1
        return False
    if state.m is None:
        state.m = np.zeros_like(g)
        state.v = np.zeros_like(g)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * g
    state.v *= b2
    state.v += (1.0 - b2) * (g * g)
    m_hat = state.m / (1.0 - b1 ** state.step)
    v_hat = state.v / (1.0 - b2 ** state.step)
    delta = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    offset = 0
    for p in params:
        n = p.size
        p -= delta[offset:offset + n].reshape(p.shape)
        offset += n
    return True


def l1_norm(arrays) -> float:
    return float(sum(np.abs(a).sum() for a in arrays))


def clip_by_global_norm(grads, max_norm):
    """Scale ``grads`` so their joint L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm is None or max_norm <= 0 or total <= max_norm or not math.isfinite(total):
        return grads, total
    scale = max_norm / (total + 1e-6)
    return [g * scale for g in grads], total


# ---------------------------------------------------------------------------
# checkpoints: <u32 header length><JSON header><float64 little-endian data>

_MAGIC = b"SAUNACK1"


def save_checkpoint(path, arrays: dict, meta: dict | None = None):
    """Write named arrays to ``path``; ``meta`` goes into the JSON header."""
    entries = []
    chunks = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape)})
        chunks.append(a.tobytes())
    header = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(arrays, meta)``."""
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ConfigurationError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + n].decode("utf-8"))
    offset = 12 + n
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arrays[entry["name"]] = np.frombuffer(
            data, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    if offset != len(data):
        raise ConfigurationError(f"{path}: trailing bytes after checkpoint payload")
    return arrays, header["meta"]


class ActorCritic:
    """Policy plus value/V^ex critic, optionally sharing one trunk.

    With ``shared_trunk=False`` the policy has its own ``state -> hidden ->
    action`` network. With ``shared_trunk=True`` the policy mean is a linear
    head on the critic trunk and all losses meet in the trunk.
    """

    def __init__(self, state_dim, action_dim, hidden=(64, 64), vex_hidden=64,
                 shared_trunk=False, log_std_init=0.0, rng=None):
        if rng is None:
            rng = np.random.default_rng(0)
        elif not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        hidden = tuple(int(h) for h in hidden)
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.hidden = hidden
        self.vex_hidden = int(vex_hidden)
        self.shared_trunk = bool(shared_trunk)
        if self.shared_trunk:
            mean_net = DenseNet([hidden[-1], action_dim], rng=rng, output_gain=0.01)
        else:
            mean_net = DenseNet([state_dim, *hidden, action_dim], rng=rng, output_gain=0.01)
        self.policy = GaussianPolicy(mean_net, action_dim, log_std_init)
        self.critic = ValueVexNet(state_dim, hidden, vex_hidden, rng=rng)

    def _policy_input(self, obs):
        if self.shared_trunk:
            return self.critic.trunk.forward(obs, cache=False)
        return obs

    def mean_action(self, obs):
        return self.policy.mean(self._policy_input(obs))

    def act(self, obs, rng, with_vex=True):
        """Sample an action; returns ``(action, log_prob, value, vex)``.

        ``with_vex=False`` skips the V^ex head and returns NaN in its place.
        """
        critic = self.critic
        feats = critic.trunk.forward(obs, cache=False)
        mean = self.policy.mean_net.forward(feats if self.shared_trunk else obs, cache=False)
        value = critic.value_head.forward(feats, cache=False)[..., 0]
        if with_vex:
            vex = critic.vex_head.forward(feats, cache=False)[..., 0]
        else:
            vex = np.full_like(value, np.nan)
        action = mean + self.policy.std * rng.standard_normal(mean.shape)
        return action, gaussian_log_prob(mean, self.policy.log_std, action), value, vex

    def predict_values(self, obs):
        return self.critic.predict(obs)

    def named_arrays(self):
        """Live references to every parameter, keyed by a stable name."""
        out = {}
        for prefix, net in (("policy", self.policy.mean_net), ("trunk", self.critic.trunk),
                            ("value", self.critic.value_head), ("vex", self.critic.vex_head)):
            for i, (w, b) in enumerate(zip(net.weights, net.biases)):
                out[f"{prefix}.{i}.weight"] = w
                out[f"{prefix}.{i}.bias"] = b
        out["policy.log_std"] = self.policy.log_std
        return out

    def architecture(self):
        return {"state_dim": self.state_dim, "action_dim": self.action_dim,
                "hidden": list(self.hidden), "vex_hidden": self.vex_hidden,
                "shared_trunk": self.shared_trunk,
                "layer_sizes": {"policy": self.policy.mean_net.layer_sizes,
                                "trunk": self.critic.trunk.layer_sizes,
                                "value": self.critic.value_head.layer_sizes,
                                "vex": self.critic.vex_head.layer_sizes}}

    def load_arrays(self, arrays):
        for name, ref in self.named_arrays().items():
            if name not in arrays:
                raise ConfigurationError(f"checkpoint is missing {name}")
            if arrays[name].shape != ref.shape:
                raise ConfigurationError(f"{name}: shape {arrays[name].shape} != {ref.shape}")
            ref[...] = arrays[name]

    def copy(self):
        clone = ActorCritic.__new__(ActorCritic)
        clone.__dict__.update(self.__dict__)
        clone.policy = self.policy.copy()
        clone.critic = self.critic.copy()
        return clone
