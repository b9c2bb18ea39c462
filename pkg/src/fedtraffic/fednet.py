"""Federation server, simulated channels and the training loop.

Time is counted in integer ticks of 0.1 s so that message latencies are
exact. Four channel variants model the transport between the learning
vehicles and the aggregation server:

``perfect``
    messages arrive in the tick they are sent.
``sync_delay``
    uploads arrive ``up_delay_epochs`` epochs later, downloads
    ``down_delay_epochs`` epochs later, for every agent alike.
``out_of_order``
    as ``sync_delay`` plus an independent extra delay of 0..J whole epochs
    per message, so model downloads may arrive in any order and an older
    model can overwrite a newer one.
``local_merge``
    no latency; agents average ``merge_count`` consecutive minibatch
    gradients locally and upload only the merged gradient.
"""
from __future__ import annotations

import dataclasses
import heapq
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Union

import numpy as np
from numba import njit

from fedtraffic import _kernels as K
from fedtraffic import learner as L
from fedtraffic.config import NetworkParams, ScenarioConfig
from fedtraffic.traffic import (TrafficParams, WorldState, build_figure_eight, observe_slots,
                                reset_epoch)

TICK_SECONDS = 0.1

PERFECT = "perfect"
SYNC_DELAY = "sync_delay"
OUT_OF_ORDER = "out_of_order"
LOCAL_MERGE = "local_merge"
VARIANTS = (PERFECT, SYNC_DELAY, OUT_OF_ORDER, LOCAL_MERGE)

MODE_CHANNEL = {"FIRL": PERFECT, "FIRL-D": SYNC_DELAY, "FIRL-D-OR": OUT_OF_ORDER,
                "FIRL-D-LM": LOCAL_MERGE}

_msg_ids = itertools.count()


class DuplicateGradientError(ValueError):
    pass


def seconds(ticks: int) -> float:
    return ticks / 10 if TICK_SECONDS == 0.1 else ticks * TICK_SECONDS


@dataclass(frozen=True)
class ChannelModel:
    variant: str = PERFECT
    up_delay_epochs: int = 4
    down_delay_epochs: int = 2
    extra_delay_max_epochs: int = 3
    merge_count: int = 6
    epoch_duration: float = 150.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown channel variant {self.variant!r}")
        if min(self.up_delay_epochs, self.down_delay_epochs, self.extra_delay_max_epochs) < 0:
            raise ValueError("delays must be non-negative")
        if self.merge_count < 1:
            raise ValueError("merge_count must be >= 1")

    @property
    def epoch_ticks(self) -> int:
        return round(self.epoch_duration / TICK_SECONDS)

    @classmethod
    def for_mode(cls, mode: str, net: NetworkParams = NetworkParams()) -> "ChannelModel":
        return cls(MODE_CHANNEL[mode], net.up_delay_epochs, net.down_delay_epochs,
                   net.extra_delay_max_epochs, net.merge_count, net.epoch_duration)


@dataclass(frozen=True)
class GradientMsg:
    payload: L.Gradient
    agent_id: int
    round_index: int
    send_tick: int
    deliver_tick: Optional[int] = None
    msg_id: int = field(default_factory=lambda: next(_msg_ids))

    @property
    def send_time(self) -> float:
        return seconds(self.send_tick)

    @property
    def deliver_time(self) -> Optional[float]:
        return None if self.deliver_tick is None else seconds(self.deliver_tick)


@dataclass(frozen=True)
class ModelMsg:
    payload: bytes
    version: int
    destination_agent: int
    send_tick: int
    deliver_tick: Optional[int] = None
    msg_id: int = field(default_factory=lambda: next(_msg_ids))

    def __post_init__(self):
        if self.version < 1:
            raise ValueError("model versions start at 1")

    @property
    def send_time(self) -> float:
        return seconds(self.send_tick)

    @property
    def deliver_time(self) -> Optional[float]:
        return None if self.deliver_tick is None else seconds(self.deliver_tick)


Message = Union[GradientMsg, ModelMsg]


def assign_delivery(channel: ChannelModel, msg: Message,
                    rng: Optional[np.random.Generator] = None) -> Message:
    """Return ``msg`` with its delivery tick set by the channel.

    The out-of-order channel draws one integer from ``rng`` per message.
    """
    delay = 0
    if channel.variant in (SYNC_DELAY, OUT_OF_ORDER):
        epochs = (channel.up_delay_epochs if isinstance(msg, GradientMsg)
                  else channel.down_delay_epochs)
        if channel.variant == OUT_OF_ORDER:
            epochs += int(rng.integers(0, channel.extra_delay_max_epochs + 1))
        delay = epochs * channel.epoch_ticks
    return dataclasses.replace(msg, deliver_tick=msg.send_tick + delay,
                               msg_id=msg.msg_id)


class MessageQueue:
    """In-transit messages ordered by (deliver tick, send tick, message id)."""

    def __init__(self, messages: Iterable[Message] = ()):
        self._heap: list = []
        for m in messages:
            self.push(m)

    def __len__(self):
        return len(self._heap)

    def push(self, msg: Message) -> None:
        if msg.deliver_tick is None or msg.deliver_tick < msg.send_tick:
            raise ValueError("message needs a delivery tick no earlier than its send tick")
        heapq.heappush(self._heap, (msg.deliver_tick, msg.send_tick, msg.msg_id, msg))

    def next_tick(self) -> Optional[int]:
        return self._heap[0][0] if self._heap else None

    def pop_due(self, now: int) -> list[Message]:
        out = []
        while self._heap and self._heap[0][0] <= now:
            out.append(heapq.heappop(self._heap)[3])
        return out


def deliver_due(queue: MessageQueue, now: int) -> list[Message]:
    """Remove and return every message due at or before tick ``now``."""
    return queue.pop_due(now)


def apply_model_msg(agent_model: L.QNetwork, msg: ModelMsg,
                    channel: Optional[ChannelModel] = None) -> L.QNetwork:
    """Overwrite the agent's model with the payload, whatever its version.

    No version check is made, which is what lets a delayed old model replace
    a newer one on the out-of-order channel.
    """
    model = L.QNetwork.from_bytes(msg.payload)
    if model.layer_sizes != agent_model.layer_sizes:
        raise ValueError(f"payload layout {model.layer_sizes} does not match "
                         f"agent layout {agent_model.layer_sizes}")
    return model


@dataclass(eq=False)
class FedServer:
    global_model: L.QNetwork
    n_agents: int
    server_learning_rate: float
    version: int = 0
    round_stride: int = 1
    next_round: int = 0
    pending: dict[int, dict[int, L.Gradient]] = field(default_factory=dict)

    def __post_init__(self):
        if self.next_round == 0:
            self.next_round = self.round_stride


def server_ingest(server: FedServer, msg: GradientMsg, now: Optional[int] = None) -> list[ModelMsg]:
    """Store a delivered gradient and aggregate every round that is complete.

    Rounds are aggregated strictly in order: the gradients of all agents for
    the oldest outstanding round are averaged, one descent step is taken on
    the global model and the version is bumped. Returns the model messages
    for the new versions (one per agent and version, not yet scheduled);
    an empty list means no aggregation happened.
    """
    k = msg.round_index
    slot = server.pending.setdefault(k, {})
    if msg.agent_id in slot or k < server.next_round:
        raise DuplicateGradientError(f"gradient for agent {msg.agent_id} round {k} "
                                     "already received")
    slot[msg.agent_id] = msg.payload
    now = msg.deliver_tick if now is None else now
    out = []
    while len(server.pending.get(server.next_round, ())) == server.n_agents:
        grads = server.pending.pop(server.next_round)
        merged = L.merge_gradients([grads[a] for a in sorted(grads)])
        server.global_model = L.apply_gradient(server.global_model, merged,
                                               server.server_learning_rate)
        server.version += 1
        server.next_round += server.round_stride
        payload = server.global_model.to_bytes()
        out.extend(ModelMsg(payload, server.version, a, now) for a in range(server.n_agents))
    return out


def local_merge_schedule(channel: ChannelModel, round_counter: int) -> bool:
    """Whether an agent uploads after its ``round_counter``-th minibatch."""
    if channel.variant != LOCAL_MERGE:
        return True
    return round_counter % channel.merge_count == 0


@dataclass
class EpochMetrics:
    epoch_index: int
    mean_speed: float
    crashed: bool
    steps: int
    cumulative_reward: float


class EventTrace:
    """Append-only audit log of network and learning events."""

    FIELDS = ("t", "kind", "agent", "round", "version", "latency")

    def __init__(self):
        self.rows: list[tuple] = []

    def __len__(self):
        return len(self.rows)

    def record(self, tick: int, kind: str, agent: Optional[int] = None,
               round_index: Optional[int] = None, version: Optional[int] = None,
               latency_ticks: Optional[int] = None) -> None:
        self.rows.append((tick, kind, agent, round_index, version, latency_ticks))

    def __iter__(self) -> Iterator[dict]:
        for tick, kind, agent, rnd, ver, lat in self.rows:
            yield {"t": seconds(tick), "kind": kind, "agent": agent, "round": rnd,
                   "version": ver, "latency": None if lat is None else seconds(lat)}

    def kinds(self, kind: str) -> list[dict]:
        return [e for e in self if e["kind"] == kind]

    def to_jsonl(self, path: str | Path) -> None:
        path = Path(path)
        try:
            with path.open("w", encoding="utf-8", newline="\n") as fh:
                for e in self:
                    fh.write(json.dumps(e, separators=(",", ":")) + "\n")
        except OSError as exc:
            raise OSError(f"cannot write trace to {path}: {exc}") from exc

    @staticmethod
    def read_jsonl(path: str | Path) -> list[dict]:
        with Path(path).open(encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]


@njit(cache=True)
def _rollout(pos, speed, length, ids, idm_mask, slots, action_values, param_stack, sizes,
             uniforms, step0, epsilon, n_steps, total_length, centers, half_length, horizon,
             v_max, v0, T, a_max, b, delta, s0, b_emergency, crash_threshold, dt, r_crash,
             obs, bank_obs, bank_act, bank_rew, bank_next, bank_term, bank_i):
    """Run up to ``n_steps`` steps with fixed policies.

    Each step: epsilon-greedy actions for the learners, one physics step,
    the shared reward, new observations, and one replay row per agent
    written at ``bank_i`` (ring index). Stops early on a crash.
    Returns (pos, speed, obs, steps, crashed, speed_sum, reward_sum, bank_i).
    """
    n = pos.shape[0]
    capacity = bank_act.shape[1]
    given = np.zeros(n)
    speed_sum = 0.0
    reward_sum = 0.0
    crashed = False
    steps = 0
    for t in range(n_steps):
        actions = L._act_many(param_stack, sizes, obs, uniforms[step0 + t], epsilon)
        for k in range(slots.shape[0]):
            given[slots[k]] = action_values[actions[k]]
        pos, speed, _, crashed = K.step_kernel(
            pos, speed, length, ids, idm_mask, given, total_length, centers, half_length,
            horizon, v_max, v0, T, a_max, b, delta, s0, b_emergency, crash_threshold, dt)
        total = 0.0
        for i in range(n):
            total += speed[i]
        r = total / n / v_max
        if crashed:
            r -= r_crash
        next_obs = K.observe_kernel(pos, speed, length, slots, total_length, v_max)
        for k in range(slots.shape[0]):
            bank_obs[k, bank_i] = obs[k]
            bank_act[k, bank_i] = actions[k]
            bank_rew[k, bank_i] = r
            bank_next[k, bank_i] = next_obs[k]
            bank_term[k, bank_i] = crashed
        bank_i = (bank_i + 1) % capacity
        obs = next_obs
        speed_sum += total
        reward_sum += r
        steps += 1
        if crashed:
            break
    return pos, speed, obs, steps, crashed, speed_sum, reward_sum, bank_i


@dataclass(eq=False)
class Agent:
    """A learning vehicle's private state."""

    agent_id: int
    net: L.QNetwork
    target: L.QNetwork
    buffer: L.ReplayBuffer
    rng: np.random.Generator
    round_index: int = 0
    model_version: int = 0
    merge_acc: list = field(default_factory=list)
    applied_versions: list = field(default_factory=list)


def seed_streams(seed: int, n_agents: int):
    """Independent generators: (model init, channel, one per agent).

    Children are spawned by index, so agent ``k`` gets the same stream for
    any number of agents.
    """
    ss = np.random.SeedSequence(seed)
    init_ss, chan_ss, agents_ss = ss.spawn(3)
    agent_rngs = [np.random.default_rng(c) for c in agents_ss.spawn(n_agents)]
    return np.random.default_rng(init_ss), np.random.default_rng(chan_ss), agent_rngs


def make_agents(config: ScenarioConfig, seed: int):
    """Agents sharing one seeded initial model, plus the channel rng."""
    n = config.traffic.n_learners
    init_rng, chan_rng, agent_rngs = seed_streams(seed, n)
    model = L.network_for(config.learner, init_rng)
    agents = [Agent(k, model.copy(), model.copy(),
                    L.ReplayBuffer(config.learner.replay_capacity), agent_rngs[k])
              for k in range(n)]
    return agents, model, chan_rng


@dataclass
class RunResult:
    mode: str
    seed: int
    metrics: list[EpochMetrics]
    trace: EventTrace
    agents: list[Agent]
    server: Optional[FedServer]
    param_history: list[list[np.ndarray]] = field(default_factory=list)
    in_flight: int = 0


def run_federated_epochs(mode: str, agents: list[Agent], server: Optional[FedServer],
                         channel: Optional[ChannelModel], config: ScenarioConfig, seed: int,
                         chan_rng: Optional[np.random.Generator] = None,
                         epochs: Optional[int] = None,
                         on_epoch: Optional[Callable[[EpochMetrics], None]] = None,
                         record_params: bool = False) -> RunResult:
    """Train the learner vehicles for ``epochs`` epochs in the given mode.

    Each step every learner picks an epsilon-greedy acceleration with its
    current local model and stores the transition. Every
    ``gradient_period_steps`` steps each agent samples a minibatch and
    computes a gradient. In IRL the agent applies it at once; otherwise it
    is routed through ``channel`` to ``server``, whose new models come back
    over the same channel. Target networks are re-synced from the local
    model every ``target_sync_period`` minibatches.
    """
    if mode == "IRL":
        if server is not None or channel is not None:
            raise ValueError("IRL runs without server or channel")
    elif server is None or channel is None:
        raise ValueError(f"{mode} needs a server and a channel")
    tp: TrafficParams = config.traffic
    lc: L.LearnerConfig = config.learner
    period = config.network.gradient_period_steps
    epochs = config.training_epochs if epochs is None else epochs
    geom = build_figure_eight(tp.loop_radius, tp.conflict_half_length)
    action_values = np.asarray(lc.action_set, dtype=float)
    queue = MessageQueue()
    trace = EventTrace()
    metrics: list[EpochMetrics] = []
    history: list[list[np.ndarray]] = []
    clock = 0
    n_agents = len(agents)
    if not n_agents:
        raise ValueError("a learning run needs at least one learner vehicle")

    def route_gradient(ag: Agent, g: L.Gradient) -> None:
        if channel.variant == LOCAL_MERGE:
            ag.merge_acc.append(g)
            if not local_merge_schedule(channel, ag.round_index):
                return
            g = L.merge_gradients(ag.merge_acc)
            ag.merge_acc = []
        msg = assign_delivery(channel, GradientMsg(g, ag.agent_id, ag.round_index, clock),
                              chan_rng)
        trace.record(clock, "send_up", ag.agent_id, ag.round_index)
        queue.push(msg)

    def deliver() -> None:
        while queue and queue.next_tick() <= clock:
            for msg in deliver_due(queue, clock):
                lat = msg.deliver_tick - msg.send_tick
                if isinstance(msg, GradientMsg):
                    trace.record(clock, "deliver_up", msg.agent_id, msg.round_index,
                                 latency_ticks=lat)
                    for out in server_ingest(server, msg, clock):
                        if out.destination_agent == 0:
                            trace.record(clock, "aggregate", version=out.version,
                                         round_index=out.version * server.round_stride)
                        out = assign_delivery(channel, out, chan_rng)
                        trace.record(clock, "send_down", out.destination_agent,
                                     version=out.version)
                        queue.push(out)
                else:
                    ag = agents[msg.destination_agent]
                    ag.net = apply_model_msg(ag.net, msg, channel)
                    ag.model_version = msg.version
                    ag.applied_versions.append(msg.version)
                    trace.record(clock, "apply_model", ag.agent_id, version=msg.version,
                                 latency_ticks=lat)

    sizes = np.asarray(lc.layer_sizes, dtype=np.int64)
    stack = np.stack([ag.net.params for ag in agents])
    stacked = [ag.net for ag in agents]
    bank = L.ReplayBank(n_agents, lc.replay_capacity)
    for ag, buf in zip(agents, bank.buffers):
        ag.buffer = buf
    steps = tp.steps_per_epoch

    idm = tp.idm
    geo_args = (geom.total_length, geom.centers, geom.conflict_half_length, tp.horizon,
                tp.v_max, idm.v0, idm.T, idm.a_max, idm.b, idm.delta, idm.s0,
                tp.b_emergency, tp.crash_threshold, tp.dt, tp.r_crash)

    for epoch in range(epochs):
        world = reset_epoch(geom, seed, tp, epoch_index=epoch, tick=clock)
        eps = lc.epsilon(epoch)
        slots = world.learner_slots()
        idm_mask = world.agent < 0
        obs = observe_slots(world, slots)
        # two uniforms per agent and step, as in learner.act
        uniforms = np.stack([ag.rng.random((steps, 2)) for ag in agents], axis=1)
        pos, speed = world.pos, world.speed
        step_index = 0
        crashed = False
        speed_sum = 0.0
        cum_reward = 0.0
        while step_index < steps and not crashed:
            # policies only change at gradient ticks and model deliveries
            n = min(steps - step_index, period - clock % period)
            if queue:
                n = min(n, max(1, queue.next_tick() - clock))
            pos, speed, obs, done, crashed, ssum, rsum, bank_i = _rollout(
                pos, speed, world.length, world.ids, idm_mask, slots, action_values, stack,
                sizes, uniforms, step_index, eps, n, *geo_args, obs, bank._obs, bank._act,
                bank._rew, bank._next_obs, bank._term, bank._i)
            bank.advance(done)
            clock += done
            step_index += done
            speed_sum += ssum
            cum_reward += rsum

            if clock % period == 0 and len(agents[0].buffer) >= lc.batch_size:
                synced = []
                for ag in agents:
                    ag.round_index += 1
                    batch = ag.buffer.sample(ag.rng, lc.batch_size)
                    grad = L.compute_gradient(ag.net, ag.target, batch, lc.gamma,
                                              ag.agent_id, ag.round_index)
                    trace.record(clock, "minibatch", ag.agent_id, ag.round_index)
                    if mode == "IRL":
                        ag.net = L.apply_gradient(ag.net, grad, lc.learning_rate)
                        trace.record(clock, "local_update", ag.agent_id, ag.round_index)
                    else:
                        route_gradient(ag, grad)
                    if ag.round_index % lc.target_sync_period == 0:
                        synced.append(ag)
                if mode != "IRL":
                    deliver()
                for ag in synced:
                    ag.target = ag.net.copy()
                if record_params:
                    history.append([ag.net.params.copy() for ag in agents])
            elif mode != "IRL" and queue and queue.next_tick() <= clock:
                deliver()
            for k, ag in enumerate(agents):
                if ag.net is not stacked[k]:
                    stack[k] = ag.net.params
                    stacked[k] = ag.net
        world = WorldState(geom, tp, world.ids, pos, speed, world.length, world.agent,
                           clock, step_index, epoch, crashed)

        m = EpochMetrics(epoch, speed_sum / (world.step_index * tp.n_vehicles),
                         world.crashed, world.step_index, cum_reward)
        metrics.append(m)
        trace.record(clock, "epoch_end", round_index=epoch)
        if on_epoch is not None:
            on_epoch(m)
    return RunResult(mode, seed, metrics, trace, agents, server, history, len(queue))


def run_mode(config: ScenarioConfig, seed: int, mode: Optional[str] = None,
             epochs: Optional[int] = None, **kwargs) -> RunResult:
    """Set up agents, server and channel for ``mode`` and train."""
    mode = mode or config.mode
    agents, model, chan_rng = make_agents(config, seed)
    server = channel = None
    if mode != "IRL":
        channel = ChannelModel.for_mode(mode, config.network)
        lr = config.network.server_learning_rate or config.learner.learning_rate
        stride = channel.merge_count if channel.variant == LOCAL_MERGE else 1
        server = FedServer(model.copy(), len(agents), lr, round_stride=stride)
    return run_federated_epochs(mode, agents, server, channel, config, seed,
                                chan_rng=chan_rng, epochs=epochs, **kwargs)
