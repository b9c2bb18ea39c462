"""Walk through the figure-eight world and the all-IDM baseline.

Run with ``python demos/track_and_baseline.py``.
"""
import dataclasses

import numpy as np

from fedtraffic.traffic import (TrafficParams, advance, build_figure_eight, intersection_gate,
                                neighbors, observe, reset_epoch)

# Two loops of radius 30 m joined at one crossing. Arc length runs once around
# both loops, so the crossing shows up twice: at 0 and at half the track.
geom = build_figure_eight(30.0, 5.0)
print("track length  %.2f m" % geom.total_length)
print("crossing at   %s m" % np.round(geom.conflict_center_positions, 2))

# 14 vehicles at rest, evenly spaced with a little jitter; every second one
# is a learner (agent ids 0..6), the rest are IDM drivers.
world = reset_epoch(geom, rng_seed=0)
for v in world.vehicles[:4]:
    print(v)

ahead, gap, behind, gap_behind = neighbors(world, 0)
print("vehicle 0: %.2f m behind vehicle %d, %.2f m ahead of vehicle %d"
      % (gap, ahead.id, gap_behind, behind.id))
print("observation of vehicle 1:", np.round(observe(world, 1), 3))

# The baseline: every vehicle drives IDM and yields at the crossing.
params = dataclasses.replace(TrafficParams(), n_learners=0)
world = reset_epoch(geom, rng_seed=0, params=params)
speeds, gated = [], []
while not world.done:
    world = advance(world, np.zeros(params.n_vehicles))
    speeds.append(world.speed.mean())
    gated.append(len(intersection_gate(world)))
print("baseline: %d steps, crashed=%s, mean speed %.3f m/s"
      % (world.step_index, world.crashed, np.mean(speeds)))
print("vehicles held at the crossing per step: mean %.2f, max %d"
      % (np.mean(gated), max(gated)))

# Learners flooring the accelerator: the forced braking keeps them from
# running into their leaders, and the IDM drivers still yield at the crossing.
world = reset_epoch(geom, rng_seed=0)
full = np.full(14, 3.0)
speeds = []
while not world.done:
    world = advance(world, full)
    speeds.append(world.speed.mean())
print("learners at +3 m/s2: crashed=%s, mean speed %.3f m/s" % (world.crashed, np.mean(speeds)))
