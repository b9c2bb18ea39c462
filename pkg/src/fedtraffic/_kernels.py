"""Compiled per-step kernels for the figure-eight world.

Everything here works on flat float64/int64 arrays so the simulation loop
can call it once per 0.1 s step without Python-level per-vehicle work.
The public, documented surface lives in :mod:`fedtraffic.traffic`.
"""
import math

import numpy as np
from numba import njit

NO_SIDE = -1


@njit(cache=True)
def idm_accel(v, v_lead, gap, v0, T, a_max, b, delta, s0, b_emergency):
    s_star = s0 + v * T + v * (v - v_lead) / (2.0 * math.sqrt(a_max * b))
    if s_star < s0:
        s_star = s0
    a = a_max * (1.0 - (v / v0) ** delta - (s_star / gap) ** 2)
    if a > a_max:
        a = a_max
    if a < -b_emergency:
        a = -b_emergency
    return a


@njit(cache=True)
def arc_order(pos):
    return np.argsort(pos, kind="mergesort")


@njit(cache=True)
def neighbor_table(pos, length, total_length):
    """Index, gap and speed lookup tables for ahead/behind vehicles.

    Returns (ahead_idx, gap_ahead, behind_idx, gap_behind).
    """
    n = pos.shape[0]
    order = arc_order(pos)
    ahead = np.empty(n, dtype=np.int64)
    behind = np.empty(n, dtype=np.int64)
    gap_ahead = np.empty(n)
    gap_behind = np.empty(n)
    for k in range(n):
        i = order[k]
        j = order[(k + 1) % n]
        ahead[i] = j
        behind[j] = i
    for i in range(n):
        j = ahead[i]
        g = (pos[j] - pos[i]) % total_length - length[j]
        gap_ahead[i] = g if g > 0.0 else 0.0
        gap_behind[j] = gap_ahead[i]
    return ahead, gap_ahead, behind, gap_behind


@njit(cache=True)
def gate_kernel(pos, speed, length, ids, total_length, centers, half_length,
                horizon, b_emergency):
    """Intersection gating.

    Returns (gated mask, distance to the conflict entry each vehicle is
    approaching, occupied side per vehicle).
    """
    n = pos.shape[0]
    occ = np.full(n, NO_SIDE, dtype=np.int64)
    appr = np.full(n, NO_SIDE, dtype=np.int64)
    dist = np.full(n, np.inf)
    committed = np.zeros(n, dtype=np.bool_)
    gated = np.zeros(n, dtype=np.bool_)
    if half_length <= 0.0:
        return gated, dist, occ
    for i in range(n):
        best = np.inf
        for s in range(2):
            entry = centers[s] - half_length
            into = (pos[i] - entry) % total_length
            if into < 2.0 * half_length + length[i]:
                occ[i] = s
            else:
                d = (entry - pos[i]) % total_length
                if d <= horizon and d < best:
                    best = d
                    appr[i] = s
        if occ[i] != NO_SIDE:
            appr[i] = NO_SIDE
            continue
        if appr[i] != NO_SIDE:
            dist[i] = best
            # cannot stop before the entry any more: behaves as an occupant
            if best < speed[i] * speed[i] / (2.0 * b_emergency):
                committed[i] = True

    held = np.zeros(2, dtype=np.bool_)
    for i in range(n):
        if occ[i] != NO_SIDE:
            held[occ[i]] = True
        elif committed[i]:
            held[appr[i]] = True

    if held[0] or held[1]:
        for i in range(n):
            if appr[i] == NO_SIDE or committed[i]:
                continue
            if held[1 - appr[i]]:
                gated[i] = True
        return gated, dist, occ

    winner = -1
    best_tte = np.inf
    for i in range(n):
        if appr[i] == NO_SIDE:
            continue
        tte = dist[i] / speed[i] if speed[i] > 0.0 else np.inf
        if winner < 0 or tte < best_tte or (tte == best_tte and ids[i] < ids[winner]):
            winner = i
            best_tte = tte
    if winner >= 0:
        side = appr[winner]
        for i in range(n):
            if appr[i] != NO_SIDE and appr[i] != side:
                gated[i] = True
    return gated, dist, occ


@njit(cache=True)
def step_kernel(pos, speed, length, ids, idm_mask, given_accel,
                total_length, centers, half_length, horizon,
                v_max, v0, T, a_max, b, delta, s0, b_emergency,
                crash_threshold, dt):
    """One semi-implicit Euler step.

    Vehicles flagged in ``idm_mask`` get their acceleration from the IDM
    (honouring the intersection gate); all others use ``given_accel``.
    Returns (new_pos, new_speed, applied_accel, crashed).
    """
    n = pos.shape[0]
    ahead, gap_ahead, _, _ = neighbor_table(pos, length, total_length)
    gated, dist, _ = gate_kernel(pos, speed, length, ids, total_length,
                                 centers, half_length, horizon, b_emergency)
    accel = np.empty(n)
    for i in range(n):
        gap = gap_ahead[i]
        v_lead = speed[ahead[i]]
        if gated[i] and dist[i] < gap:
            gap = dist[i]
            v_lead = 0.0
        if idm_mask[i]:
            a = idm_accel(speed[i], v_lead, max(gap, 1e-3), v0, T, a_max, b,
                          delta, s0, b_emergency)
        else:
            a = given_accel[i]
            if a < -b_emergency:
                a = -b_emergency
        # forced emergency braking for vehicles about to crash
        v_next = speed[i] + a * dt
        if v_next < 0.0:
            v_next = 0.0
        if v_next > v_max:
            v_next = v_max
        gap_next = gap - v_next * dt + v_lead * dt
        room = gap_next - crash_threshold - v_lead * dt
        if v_next > v_lead or room <= 0.0:
            if room <= 0.0:
                a = -b_emergency
            else:
                need = (v_next * v_next - v_lead * v_lead) / (2.0 * room)
                if need > b_emergency:
                    a = -b_emergency
        accel[i] = a

    new_speed = np.empty(n)
    new_pos = np.empty(n)
    for i in range(n):
        v = speed[i] + accel[i] * dt
        if v < 0.0:
            v = 0.0
        if v > v_max:
            v = v_max
        new_speed[i] = v
        new_pos[i] = (pos[i] + v * dt) % total_length
        if new_pos[i] >= total_length:
            new_pos[i] = 0.0

    crashed = False
    for i in range(n):
        d = (new_pos[ahead[i]] - new_pos[i]) % total_length
        if n > 1 and d - length[ahead[i]] < crash_threshold:
            crashed = True
    if half_length > 0.0:
        hit = np.zeros(2, dtype=np.bool_)
        for i in range(n):
            for s in range(2):
                entry = centers[s] - half_length
                if (new_pos[i] - entry) % total_length < 2.0 * half_length + length[i]:
                    hit[s] = True
        if hit[0] and hit[1]:
            crashed = True
    return new_pos, new_speed, accel, crashed


@njit(cache=True)
def idm_kernel(pos, speed, length, ids, total_length, centers, half_length,
               horizon, v0, T, a_max, b, delta, s0, b_emergency):
    """Gate-aware IDM acceleration for every vehicle (before the failsafe)."""
    n = pos.shape[0]
    ahead, gap_ahead, _, _ = neighbor_table(pos, length, total_length)
    gated, dist, _ = gate_kernel(pos, speed, length, ids, total_length,
                                 centers, half_length, horizon, b_emergency)
    out = np.empty(n)
    for i in range(n):
        gap = gap_ahead[i]
        v_lead = speed[ahead[i]]
        if gated[i] and dist[i] < gap:
            gap = dist[i]
            v_lead = 0.0
        out[i] = idm_accel(speed[i], v_lead, max(gap, 1e-3), v0, T, a_max, b,
                           delta, s0, b_emergency)
    return out


@njit(cache=True)
def observe_kernel(pos, speed, length, rows, total_length, v_max):
    """Observation rows for the vehicle indices in ``rows``."""
    ahead, gap_ahead, behind, gap_behind = neighbor_table(pos, length, total_length)
    out = np.empty((rows.shape[0], 6))
    for k in range(rows.shape[0]):
        i = rows[k]
        out[k, 0] = pos[i] / total_length
        out[k, 1] = speed[i] / v_max
        out[k, 2] = gap_ahead[i] / total_length
        out[k, 3] = speed[ahead[i]] / v_max
        out[k, 4] = gap_behind[i] / total_length
        out[k, 5] = speed[behind[i]] / v_max
    return out
