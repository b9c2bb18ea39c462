"""Figure-eight single-lane world: geometry, kinematics, observations, rewards.

The lane is parameterised by arc length. Starting at the crossing, a vehicle
drives once around the first loop, passes the crossing again at half the
track length, drives around the second loop and comes back to the start.
Positions are front-bumper positions, so the bumper-to-bumper gap to the
vehicle ahead is the arc distance minus the ahead vehicle's length.

Baseline ("human") vehicles follow the Intelligent Driver Model and yield at
the crossing according to :func:`intersection_gate`. Learner vehicles take
their acceleration from outside. Every vehicle is subject to forced
emergency braking when it is about to run into its leader.
"""
from __future__ import annotations

import math
from functools import cached_property
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from fedtraffic import _kernels as K

N_VEHICLES = 14
N_LEARNERS = 7


class GeometryError(ValueError):
    """Raised for a track that cannot be built."""


class IncompleteControlError(ValueError):
    """Raised when ``step`` is not given an acceleration for every vehicle."""


@dataclass(frozen=True)
class TrackGeometry:
    loop_radius: float
    total_length: float
    conflict_center_positions: tuple[float, float]
    conflict_half_length: float

    @cached_property
    def centers(self) -> np.ndarray:
        return np.asarray(self.conflict_center_positions, dtype=float)


@dataclass(frozen=True)
class IdmParams:
    """Intelligent Driver Model parameters.

    Attributes
    ----------
    v0 : float
        desired speed, in m/s
    T : float
        safe time headway, in s
    a_max : float
        maximum acceleration, in m/s2
    b : float
        comfortable deceleration, in m/s2
    delta : float
        acceleration exponent
    s0 : float
        minimum gap, in m
    """

    v0: float = 8.0
    T: float = 1.0
    a_max: float = 1.0
    b: float = 1.5
    delta: float = 4.0
    s0: float = 2.0

    def __post_init__(self):
        for name in ("v0", "T", "a_max", "b", "s0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"IdmParams.{name} must be > 0")
        if not self.delta >= 1:
            raise ValueError("IdmParams.delta must be >= 1")


@dataclass(frozen=True)
class TrafficParams:
    """Physical constants of the scenario (defaults are design choices)."""

    loop_radius: float = 30.0
    conflict_half_length: float = 5.0
    vehicle_length: float = 5.0
    v_max: float = 8.0
    b_emergency: float = 9.0
    crash_threshold: float = 0.1
    lookahead: float = 3.0
    r_crash: float = 10.0
    dt: float = 0.1
    steps_per_epoch: int = 1500
    n_vehicles: int = N_VEHICLES
    n_learners: int = N_LEARNERS
    placement_jitter: float = 1.0
    idm: IdmParams = field(default_factory=IdmParams)

    @property
    def horizon(self) -> float:
        # lookahead distance for the crossing gate, at the speed limit
        return self.v_max * self.lookahead


@dataclass(frozen=True)
class VehicleState:
    id: int
    arc_pos: float
    speed: float
    length: float
    agent_id: Optional[int] = None

    @property
    def is_learner(self) -> bool:
        return self.agent_id is not None

    @property
    def controller(self) -> str:
        return "baseline" if self.agent_id is None else f"learner({self.agent_id})"


@dataclass(frozen=True, eq=False)
class WorldState:
    """Full simulation state.

    Per-vehicle data is held column-wise in arrays indexed by a fixed slot.
    ``agent[i]`` is the learning agent controlling slot ``i`` or -1 for a
    baseline vehicle. Simulated time is kept as an integer tick count so
    that time arithmetic is exact.
    """

    geometry: TrackGeometry
    params: TrafficParams
    ids: np.ndarray
    pos: np.ndarray
    speed: np.ndarray
    length: np.ndarray
    agent: np.ndarray
    tick: int = 0
    step_index: int = 0
    epoch_index: int = 0
    crashed: bool = False

    @property
    def sim_time(self) -> float:
        return self.tick * self.params.dt

    @property
    def done(self) -> bool:
        return self.crashed or self.step_index >= self.params.steps_per_epoch

    @property
    def vehicles(self) -> list[VehicleState]:
        """Vehicles in arc-length order starting from the lowest position."""
        order = K.arc_order(self.pos)
        return [self._vehicle(i) for i in order]

    def slot(self, vehicle_id: int) -> int:
        hits = np.flatnonzero(self.ids == vehicle_id)
        if hits.size == 0:
            raise KeyError(f"no vehicle with id {vehicle_id}")
        return int(hits[0])

    def vehicle(self, vehicle_id: int) -> VehicleState:
        return self._vehicle(self.slot(vehicle_id))

    def learner_slots(self) -> np.ndarray:
        """Slots of learner vehicles ordered by agent id."""
        slots = np.flatnonzero(self.agent >= 0)
        return slots[np.argsort(self.agent[slots], kind="stable")]

    def _vehicle(self, i) -> VehicleState:
        a = int(self.agent[i])
        return VehicleState(int(self.ids[i]), float(self.pos[i]), float(self.speed[i]),
                            float(self.length[i]), None if a < 0 else a)

    def equals(self, other: "WorldState") -> bool:
        """Bit-for-bit state comparison."""
        return (self.tick == other.tick and self.step_index == other.step_index
                and self.epoch_index == other.epoch_index
                and self.crashed == other.crashed
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("ids", "pos", "speed", "length", "agent")))


def build_figure_eight(loop_radius: float = 30.0,
                       conflict_half_length: float = 5.0) -> TrackGeometry:
    """Build the figure-eight lane from two equal circular loops.

    A zero ``conflict_half_length`` is accepted and disables the crossing.
    """
    if not loop_radius > 0:
        raise GeometryError(f"loop_radius must be > 0, got {loop_radius}")
    if conflict_half_length < 0 or not conflict_half_length < math.pi * loop_radius / 2:
        raise GeometryError(
            f"conflict_half_length must be in [0, pi*r/2), got {conflict_half_length}")
    total = 2.0 * 2.0 * math.pi * loop_radius
    return TrackGeometry(loop_radius, total, (0.0, total / 2.0), conflict_half_length)


def _kernel_geometry(world: WorldState):
    g, p = world.geometry, world.params
    return g.total_length, g.centers, g.conflict_half_length, p.horizon


def neighbors(world: WorldState, vehicle_id: int):
    """Return (ahead, gap_ahead, behind, gap_behind) for one vehicle."""
    i = world.slot(vehicle_id)
    if world.ids.size < 2:
        raise ValueError("neighbors needs at least two vehicles")
    ahead, gap_ahead, behind, gap_behind = K.neighbor_table(
        world.pos, world.length, world.geometry.total_length)
    return (world._vehicle(ahead[i]), float(gap_ahead[i]),
            world._vehicle(behind[i]), float(gap_behind[i]))


def idm_acceleration(v: float, v_lead: float, gap: float, p: IdmParams = IdmParams(),
                     b_emergency: float = 9.0) -> float:
    """IDM acceleration clamped to ``[-b_emergency, p.a_max]``.

    A non-positive gap is a collision and must be handled by the caller.
    """
    if not gap > 0:
        raise ValueError(f"gap must be > 0, got {gap}")
    if v < 0 or v_lead < 0:
        raise ValueError("speeds must be non-negative")
    return float(K.idm_accel(float(v), float(v_lead), float(gap), p.v0, p.T, p.a_max,
                             p.b, p.delta, p.s0, b_emergency))


def intersection_gate(world: WorldState, geom: Optional[TrackGeometry] = None) -> set[int]:
    """Ids of vehicles that must treat the crossing entry as a stopped leader.

    A vehicle occupying either conflict interval holds the crossing, and so
    does an approacher that can no longer stop before the entry. Approachers
    on the other interval within the lookahead distance are gated. With the
    crossing free, the approacher with the smallest time to entry (lowest id
    on ties) wins and every approacher on the opposite interval is gated.
    """
    geom = geom or world.geometry
    p = world.params
    gated, _, _ = K.gate_kernel(world.pos, world.speed, world.length, world.ids,
                                geom.total_length,
                                np.asarray(geom.conflict_center_positions, dtype=float),
                                geom.conflict_half_length, p.horizon, p.b_emergency)
    return {int(v) for v in world.ids[gated]}


def baseline_accelerations(world: WorldState) -> dict[int, float]:
    """Gate-aware IDM acceleration for every baseline vehicle."""
    p = world.params
    acc = K.idm_kernel(world.pos, world.speed, world.length, world.ids,
                       *_kernel_geometry(world), p.idm.v0, p.idm.T, p.idm.a_max,
                       p.idm.b, p.idm.delta, p.idm.s0, p.b_emergency)
    return {int(world.ids[i]): float(acc[i]) for i in np.flatnonzero(world.agent < 0)}


def _integrate(world: WorldState, idm_mask: np.ndarray, given: np.ndarray) -> WorldState:
    if world.crashed:
        raise ValueError("cannot step a crashed world; reset the epoch")
    p = world.params
    new_pos, new_speed, _, crashed = K.step_kernel(
        world.pos, world.speed, world.length, world.ids, idm_mask, given,
        *_kernel_geometry(world), p.v_max, p.idm.v0, p.idm.T, p.idm.a_max,
        p.idm.b, p.idm.delta, p.idm.s0, p.b_emergency, p.crash_threshold, p.dt)
    return WorldState(world.geometry, p, world.ids, new_pos, new_speed, world.length,
                      world.agent, world.tick + 1, world.step_index + 1,
                      world.epoch_index, bool(crashed))


def step(world: WorldState, accel: Mapping[int, float], dt: float = 0.1) -> WorldState:
    """Advance every vehicle by one step with the given accelerations.

    Accelerations below ``-b_emergency`` are clamped, vehicles about to run
    into their (possibly virtual) leader are forced to brake at
    ``-b_emergency``, then speeds and positions are integrated with
    semi-implicit Euler. The returned state is flagged ``crashed`` when any
    bumper-to-bumper gap drops below the crash threshold or both conflict
    intervals are occupied at once.
    """
    if not math.isclose(dt, world.params.dt):
        raise ValueError(f"dt must be {world.params.dt}, got {dt}")
    missing = [int(v) for v in world.ids if int(v) not in accel]
    if missing:
        raise IncompleteControlError(f"no acceleration for vehicles {missing}")
    given = np.array([float(accel[int(v)]) for v in world.ids])
    return _integrate(world, np.zeros(world.ids.size, dtype=bool), given)


def advance(world: WorldState, learner_accel: np.ndarray) -> WorldState:
    """Step with IDM for baseline vehicles and ``learner_accel`` (indexed by
    slot, ignored for baseline slots) for the learners."""
    return _integrate(world, world.agent < 0, learner_accel)


def observe(world: WorldState, vehicle_id: int) -> np.ndarray:
    """Six normalised features: own position and speed, then gap and speed
    of the vehicle ahead, then gap and speed of the vehicle behind."""
    return observe_slots(world, np.array([world.slot(vehicle_id)]))[0]


def observe_slots(world: WorldState, slots: np.ndarray) -> np.ndarray:
    return K.observe_kernel(world.pos, world.speed, world.length,
                            np.asarray(slots, dtype=np.int64),
                            world.geometry.total_length, world.params.v_max)


def reward(world_before: WorldState, world_after: WorldState) -> float:
    """Shared per-step reward: mean speed over v_max, minus the crash penalty."""
    p = world_after.params
    r = float(world_after.speed.sum()) / world_after.speed.size / p.v_max
    if world_after.crashed:
        r -= p.r_crash
    return r


def reset_epoch(geom: TrackGeometry, rng_seed: int, params: TrafficParams = TrafficParams(),
                epoch_index: int = 0, tick: int = 0) -> WorldState:
    """Evenly spaced vehicles at rest with a small seeded position jitter.

    Controllers alternate baseline/learner along the lane, so the default
    14 vehicles split into 7 and 7. Placement starts half a spacing past
    the crossing so that no vehicle begins inside a conflict interval.
    """
    n = params.n_vehicles
    if not 0 <= params.n_learners <= n:
        raise ValueError("n_learners must be between 0 and n_vehicles")
    spacing = geom.total_length / n
    rng = np.random.default_rng(rng_seed)
    jitter = rng.uniform(-1.0, 1.0, size=n) * params.placement_jitter
    pos = (spacing / 2.0 + spacing * np.arange(n) + jitter) % geom.total_length
    agent = np.full(n, -1, dtype=np.int64)
    # spread learners as evenly as possible, alternating when there are n/2
    learner_slots = np.floor((np.arange(params.n_learners) + 0.5) * n
                             / max(params.n_learners, 1)).astype(np.int64)
    agent[learner_slots] = np.arange(params.n_learners)
    return WorldState(
        geometry=geom, params=params,
        ids=np.arange(n, dtype=np.int64), pos=pos, speed=np.zeros(n),
        length=np.full(n, params.vehicle_length), agent=agent,
        tick=tick, epoch_index=epoch_index)
