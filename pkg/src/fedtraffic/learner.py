"""Independent deep Q-learner: network, replay buffer and gradient primitives.

Parameters of a :class:`QNetwork` live in one flat float64 vector. For each
layer in turn the vector holds the weight matrix (``fan_in x fan_out``,
row-major) followed by the bias vector. Hidden layers use ``tanh``; the
output layer is linear with one unit per discrete acceleration.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numba import njit

OBS_DIM = 6
BATCH_SIZE = 256
MAGIC = b"QNET"


class NumericError(FloatingPointError):
    """A non-finite value appeared while computing a gradient."""

    def __init__(self, layer: int, what: str = "value"):
        super().__init__(f"non-finite {what} in layer {layer}")
        self.layer = layer


class ReplayNotReady(RuntimeError):
    pass


@dataclass(frozen=True)
class LearnerConfig:
    action_set: tuple[float, ...] = (-3.0, -1.5, 0.0, 1.5, 3.0)
    hidden_sizes: tuple[int, ...] = (64, 64)
    learning_rate: float = 3e-2
    gamma: float = 0.9
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_epochs: int = 100
    replay_capacity: int = 20_000
    target_sync_period: int = 10
    batch_size: int = BATCH_SIZE

    def __post_init__(self):
        if not self.action_set or list(self.action_set) != sorted(self.action_set):
            raise ValueError("action_set must be non-empty and sorted")
        if self.replay_capacity < self.batch_size:
            raise ValueError("replay_capacity must be >= batch_size")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must be in [0, 1)")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (OBS_DIM, *self.hidden_sizes, len(self.action_set))

    def epsilon(self, epoch: int) -> float:
        """Linear decay from ``epsilon_start`` to ``epsilon_end``."""
        if self.epsilon_decay_epochs <= 0:
            return self.epsilon_end
        frac = min(1.0, epoch / self.epsilon_decay_epochs)
        return self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac


def param_count(layer_sizes: Sequence[int]) -> int:
    return sum(i * o + o for i, o in zip(layer_sizes[:-1], layer_sizes[1:]))


@dataclass(eq=False)
class QNetwork:
    layer_sizes: tuple[int, ...]
    params: np.ndarray

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.params.shape != (param_count(self.layer_sizes),):
            raise ValueError(f"expected {param_count(self.layer_sizes)} parameters, "
                             f"got {self.params.shape}")
        self._sizes = np.asarray(self.layer_sizes, dtype=np.int64)

    @classmethod
    def initialize(cls, layer_sizes: Sequence[int], rng: np.random.Generator) -> "QNetwork":
        """Uniform in +-sqrt(6 / (fan_in + fan_out)) for weights, zero biases."""
        chunks = []
        for i, o in zip(layer_sizes[:-1], layer_sizes[1:]):
            lim = np.sqrt(6.0 / (i + o))
            chunks.append(rng.uniform(-lim, lim, size=i * o))
            chunks.append(np.zeros(o))
        return cls(tuple(layer_sizes), np.concatenate(chunks))

    @classmethod
    def zeros(cls, layer_sizes: Sequence[int]) -> "QNetwork":
        return cls(tuple(layer_sizes), np.zeros(param_count(layer_sizes)))

    def copy(self) -> "QNetwork":
        return QNetwork(self.layer_sizes, self.params.copy())

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W, b) views into the flat parameter vector."""
        return unflatten(self.layer_sizes, self.params)

    def to_bytes(self) -> bytes:
        """Little-endian: magic, layer count, layer sizes (uint32), float64 params."""
        head = MAGIC + struct.pack(f"<I{len(self.layer_sizes)}I", len(self.layer_sizes),
                                   *self.layer_sizes)
        return head + self.params.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, payload: bytes) -> "QNetwork":
        if payload[:4] != MAGIC or len(payload) < 8:
            raise ValueError("not a serialized QNetwork (bad magic)")
        (n,) = struct.unpack_from("<I", payload, 4)
        sizes = struct.unpack_from(f"<{n}I", payload, 8)
        body = payload[8 + 4 * n:]
        if len(body) != 8 * param_count(sizes):
            raise ValueError("payload length does not match layer sizes")
        return cls(sizes, np.frombuffer(body, dtype="<f8").astype(np.float64))


def unflatten(layer_sizes: Sequence[int], vec: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    if vec.shape != (param_count(layer_sizes),):
        raise ValueError("parameter vector has the wrong length")
    out, k = [], 0
    for i, o in zip(layer_sizes[:-1], layer_sizes[1:]):
        w = vec[k:k + i * o].reshape(i, o)
        k += i * o
        out.append((w, vec[k:k + o]))
        k += o
    return out


def flatten(layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    return np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in layers])


@njit(cache=True)
def _forward_one(params, sizes, x):
    h = x.copy()
    k = 0
    n_layers = sizes.shape[0] - 1
    for layer in range(n_layers):
        fan_in = sizes[layer]
        fan_out = sizes[layer + 1]
        out = params[k + fan_in * fan_out:k + fan_in * fan_out + fan_out].copy()
        for i in range(fan_in):
            hi = h[i]
            base = k + i * fan_out
            for j in range(fan_out):
                out[j] += hi * params[base + j]
        k += fan_in * fan_out + fan_out
        if layer < n_layers - 1:
            for j in range(fan_out):
                out[j] = np.tanh(out[j])
        h = out
    return h


@njit(cache=True)
def _act_many(param_stack, sizes, obs, uniforms, epsilon):
    n_actions = sizes[-1]
    out = np.empty(obs.shape[0], dtype=np.int64)
    for k in range(obs.shape[0]):
        if uniforms[k, 0] < epsilon:
            out[k] = int(uniforms[k, 1] * n_actions)
        else:
            out[k] = np.argmax(_forward_one(param_stack[k], sizes, obs[k]))
    return out


def act_many(param_stack: np.ndarray, layer_sizes: Sequence[int], obs: np.ndarray,
             uniforms: np.ndarray, epsilon: float) -> np.ndarray:
    """Vectorised :func:`act` for several agents.

    Row ``k`` of ``param_stack`` holds agent ``k``'s parameters and row ``k``
    of ``uniforms`` the two uniform draws that :func:`act` would take.
    """
    return _act_many(param_stack, np.asarray(layer_sizes, dtype=np.int64), obs,
                     uniforms, epsilon)


def _forward_batch(net: QNetwork, x: np.ndarray):
    """Batched forward pass keeping activations for backprop."""
    acts = [x]
    h = x
    layers = net.layers()
    for n, (w, b) in enumerate(layers):
        z = h @ w + b
        h = np.tanh(z) if n < len(layers) - 1 else z
        acts.append(h)
    return acts


def forward(net: QNetwork, obs: np.ndarray) -> np.ndarray:
    """Q-values of one observation (1-D) or a batch of observations (2-D)."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape[-1] != net.layer_sizes[0]:
        raise ValueError(f"observation has {obs.shape[-1]} features, "
                         f"network expects {net.layer_sizes[0]}")
    if obs.ndim == 1:
        return _forward_one(net.params, net._sizes, obs)
    return _forward_batch(net, obs)[-1]


def act(net: QNetwork, obs: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy action index.

    Always consumes exactly two uniform draws from ``rng``: the first decides
    whether to explore, the second picks the random action. Greedy ties go
    to the lowest index.
    """
    u = rng.random(2)
    if u[0] < epsilon:
        return int(u[1] * (net.layer_sizes[-1]))
    return int(np.argmax(forward(net, obs)))


@dataclass
class Minibatch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    terminal: np.ndarray

    def __len__(self):
        return self.actions.shape[0]

    def check(self, allow_small: bool = False) -> None:
        if not allow_small and len(self) != BATCH_SIZE:
            raise ValueError(f"minibatch must hold {BATCH_SIZE} transitions, got {len(self)}")


@dataclass
class Gradient:
    values: np.ndarray
    source_agent: int = 0
    round_index: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)


def _targets(target_net: QNetwork, batch: Minibatch, gamma: float) -> np.ndarray:
    q_next = _forward_batch(target_net, batch.next_obs)[-1].max(axis=1)
    return batch.rewards + np.where(batch.terminal, 0.0, gamma * q_next)


def td_loss(net: QNetwork, target_net: QNetwork, batch: Minibatch, gamma: float) -> float:
    """Mean squared one-step TD error; the target network is held fixed."""
    q = _forward_batch(net, batch.obs)[-1]
    pred = q[np.arange(len(batch)), batch.actions]
    return float(np.mean((pred - _targets(target_net, batch, gamma)) ** 2))


def compute_gradient(net: QNetwork, target_net: QNetwork, batch: Minibatch, gamma: float,
                     source_agent: int = 0, round_index: int = 0,
                     allow_small: bool = False) -> Gradient:
    """Analytic gradient of :func:`td_loss` with respect to ``net.params``."""
    batch.check(allow_small)
    if net.layer_sizes != target_net.layer_sizes:
        raise ValueError("online and target networks differ in layout")
    n = len(batch)
    y = _targets(target_net, batch, gamma)
    acts = _forward_batch(net, batch.obs)
    rows = np.arange(n)
    delta = np.zeros_like(acts[-1])
    delta[rows, batch.actions] = 2.0 * (acts[-1][rows, batch.actions] - y) / n
    layers = net.layers()
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(layers)
    # overflow is reported through NumericError below, not as warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for li in range(len(layers) - 1, -1, -1):
            if not np.all(np.isfinite(delta)):
                raise NumericError(li, "error signal")
            w, _ = layers[li]
            grads[li] = (acts[li].T @ delta, delta.sum(axis=0))
            if li > 0:
                delta = (delta @ w.T) * (1.0 - acts[li] ** 2)
    values = flatten(grads)
    if not np.all(np.isfinite(values)):
        bad = next(i for i, (gw, gb) in enumerate(grads)
                   if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))))
        raise NumericError(bad, "gradient")
    return Gradient(values, source_agent, round_index)


def apply_gradient(net: QNetwork, g: Gradient, learning_rate: float) -> QNetwork:
    """Plain descent step; returns a new network."""
    if g.values.shape != net.params.shape:
        raise ValueError(f"gradient length {g.values.shape} != parameter length "
                         f"{net.params.shape}")
    return QNetwork(net.layer_sizes, net.params - learning_rate * g.values)


def merge_gradients(gs: Sequence[Gradient]) -> Gradient:
    """Element-wise mean of gradients.

    Values are sorted per coordinate and averaged as offsets from the
    coordinate minimum, so the result is bit-identical for any ordering of
    ``gs`` and exactly ``g`` for copies of one gradient.
    """
    if not gs:
        raise ValueError("merge_gradients needs at least one gradient")
    shape = gs[0].values.shape
    if any(g.values.shape != shape for g in gs):
        raise ValueError("gradients differ in length")
    if len(gs) == 1:
        g = gs[0]
        return Gradient(g.values.copy(), g.source_agent, g.round_index)
    stack = np.sort(np.stack([g.values for g in gs]), axis=0)
    lo = stack[0]
    mean = lo + (stack[1:] - lo).sum(axis=0) / len(gs)
    agents = {g.source_agent for g in gs}
    source = gs[0].source_agent if len(agents) == 1 else -1
    return Gradient(mean, source, max(g.round_index for g in gs))


@dataclass(eq=False)
class ReplayBuffer:
    """Fixed-capacity FIFO of transitions stored column-wise."""

    capacity: int
    obs_dim: int = OBS_DIM
    size: int = 0
    _next: int = 0
    _obs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        c = self.capacity
        self._obs = np.zeros((c, self.obs_dim))
        self._next_obs = np.zeros((c, self.obs_dim))
        self._act = np.zeros(c, dtype=np.int64)
        self._rew = np.zeros(c)
        self._term = np.zeros(c, dtype=bool)


    def __len__(self):
        return self.size

    def push(self, obs, action: int, reward: float, next_obs, terminal: bool) -> None:
        i = self._next
        self._obs[i] = obs
        self._act[i] = action
        self._rew[i] = reward
        self._next_obs[i] = next_obs
        self._term[i] = terminal
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def transitions(self) -> list[tuple]:
        """Stored transitions from oldest to newest."""
        start = self._next if self.size == self.capacity else 0
        idx = (start + np.arange(self.size)) % self.capacity
        return [(self._obs[i].copy(), int(self._act[i]), float(self._rew[i]),
                 self._next_obs[i].copy(), bool(self._term[i])) for i in idx]

    def sample(self, rng: np.random.Generator, batch_size: int = BATCH_SIZE) -> Minibatch:
        """Uniform sampling with replacement; one ``rng.integers`` call of
        ``batch_size`` draws."""
        if self.size < batch_size:
            raise ReplayNotReady(f"buffer holds {self.size} < {batch_size} transitions")
        idx = rng.integers(0, self.size, size=batch_size)
        return Minibatch(self._obs[idx], self._act[idx], self._rew[idx],
                         self._next_obs[idx], self._term[idx])


class ReplayBank:
    """Replay buffers for several agents that fill in lockstep.

    Each agent still owns a :class:`ReplayBuffer`; the bank only shares the
    underlying storage so that one step's transitions for every agent are
    written with a single array assignment.
    """

    def __init__(self, n_agents: int, capacity: int, obs_dim: int = OBS_DIM):
        self.capacity = capacity
        self._obs = np.zeros((n_agents, capacity, obs_dim))
        self._next_obs = np.zeros((n_agents, capacity, obs_dim))
        self._act = np.zeros((n_agents, capacity), dtype=np.int64)
        self._rew = np.zeros((n_agents, capacity))
        self._term = np.zeros((n_agents, capacity), dtype=bool)
        self.buffers = []
        for k in range(n_agents):
            buf = ReplayBuffer.__new__(ReplayBuffer)
            buf.capacity, buf.obs_dim, buf.size, buf._next = capacity, obs_dim, 0, 0
            buf._obs, buf._next_obs = self._obs[k], self._next_obs[k]
            buf._act, buf._rew, buf._term = self._act[k], self._rew[k], self._term[k]
            self.buffers.append(buf)
        self._i = 0
        self._size = 0

    def push_all(self, obs, actions, reward: float, next_obs, terminal: bool) -> None:
        i = self._i
        self._obs[:, i] = obs
        self._act[:, i] = actions
        self._rew[:, i] = reward
        self._next_obs[:, i] = next_obs
        self._term[:, i] = terminal
        self.advance(1)

    def advance(self, n: int) -> None:
        """Account for ``n`` rows written in place starting at the ring index."""
        self._i = (self._i + n) % self.capacity
        self._size = min(self._size + n, self.capacity)
        for buf in self.buffers:
            buf._next, buf.size = self._i, self._size


def replay_push(buffer: ReplayBuffer, obs, action: int, reward: float, next_obs,
                terminal: bool) -> None:
    buffer.push(obs, action, reward, next_obs, terminal)


def replay_sample(buffer: ReplayBuffer, rng: np.random.Generator,
                  batch_size: int = BATCH_SIZE) -> Minibatch:
    return buffer.sample(rng, batch_size)


def network_for(config: LearnerConfig, rng: Optional[np.random.Generator] = None) -> QNetwork:
    if rng is None:
        return QNetwork.zeros(config.layer_sizes)
    return QNetwork.initialize(config.layer_sizes, rng)
