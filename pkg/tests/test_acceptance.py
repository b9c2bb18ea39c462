"""Acceptance suite.

One test per criterion, named ``test_criterion_<n>_...``. A PASS/FAIL line
per criterion is printed in the terminal summary (see ``conftest.py``).
Criteria 3 and 4 share one full default sweep (5 seeds x 300 epochs x six
modes), which dominates the runtime of this module.
"""
import dataclasses
import time

import numpy as np
import pytest
from numba import njit

from fedtraffic import _kernels as K
from fedtraffic.cli import main
from fedtraffic.config import MODES, ScenarioConfig
from fedtraffic.fednet import EventTrace, run_mode
from fedtraffic.harness import REPRODUCED, compare, sweep
from fedtraffic.learner import compute_gradient
from fedtraffic.traffic import TrafficParams, advance, build_figure_eight, reset_epoch

from oracles import fd_gradient, random_problem, relative_error

DEFAULT = ScenarioConfig()


@pytest.fixture(scope="module")
def default_sweep(tmp_path_factory):
    trace_dir = tmp_path_factory.mktemp("sweep_traces")
    start = time.perf_counter()
    reports = sweep(DEFAULT, MODES, trace_dir=trace_dir)
    return reports, trace_dir, time.perf_counter() - start


def claims_of(reports):
    return {c.name: c for c in compare(reports, DEFAULT.claims).claims}


def test_criterion_1_gradient_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(20240)
    worst = 0.0
    for _ in range(25):
        net, target, mb = random_problem(rng, batch=int(rng.integers(1, 17)))
        gamma = float(rng.uniform(0.0, 0.99))
        g = compute_gradient(net, target, mb, gamma, allow_small=True)
        num = fd_gradient(net, target, mb, gamma, h=1e-5)
        worst = max(worst, float(relative_error(g.values, num).max()))
    elapsed = time.perf_counter() - start
    print(f"25 networks, worst per-coordinate relative error {worst:.2e}, {elapsed:.1f} s")
    assert worst < 1e-4
    assert elapsed < 10


def test_criterion_2_single_agent_federation_equals_irl():
    start = time.perf_counter()
    cfg = dataclasses.replace(DEFAULT, traffic=dataclasses.replace(DEFAULT.traffic,
                                                                   n_learners=1))
    for seed in (0, 1, 2):
        irl = run_mode(cfg, seed, "IRL", epochs=10, record_params=True)
        firl = run_mode(cfg, seed, "FIRL", epochs=10, record_params=True)
        assert len(irl.param_history) == len(firl.param_history) > 50
        for a, b in zip(irl.param_history, firl.param_history):
            assert np.array_equal(a[0], b[0])
        assert [m.mean_speed for m in irl.metrics] == [m.mean_speed for m in firl.metrics]
    elapsed = time.perf_counter() - start
    print(f"3 seeds x 10 epochs bit-identical, {elapsed:.1f} s")
    assert elapsed < 60


def test_criterion_3_firl_beats_irl_and_approaches_baseline(default_sweep):
    reports, _, elapsed = default_sweep
    claims = claims_of(reports)
    for name in ("FIRL>IRL", "FIRL~Baseline"):
        c = claims[name]
        print(f"{name}: {c.status} ({c.detail}, wins={c.wins}/{c.n})")
    print(f"sweep wall time {elapsed / 60:.1f} min")
    assert claims["FIRL>IRL"].status == REPRODUCED
    assert claims["FIRL~Baseline"].status == REPRODUCED
    assert elapsed < 15 * 60


def test_criterion_4_impairment_claims(default_sweep):
    reports, _, _ = default_sweep
    claims = claims_of(reports)
    for name in ("FIRL-D~FIRL", "degradation"):
        print(f"{name}: {claims[name].status} ({claims[name].detail})")
    assert claims["FIRL-D~FIRL"].status == REPRODUCED
    assert claims["degradation"].status == REPRODUCED
    code = main(["compare", "--check", "--out", str(default_sweep[1]),
                 *[str(r.save(default_sweep[1] / f"report_{r.mode}.json")) for r in reports]])
    assert code == 0


def test_criterion_5_channel_timing(default_sweep):
    _, trace_dir, _ = default_sweep
    n_up = n_down = 0
    for seed in DEFAULT.seeds:
        ev = EventTrace.read_jsonl(trace_dir / f"trace_FIRL-D_seed{seed}.jsonl")
        ups = [e["latency"] for e in ev if e["kind"] == "deliver_up"]
        downs = [e["latency"] for e in ev if e["kind"] == "apply_model"]
        assert ups and downs
        assert set(ups) == {600.0} and set(downs) == {300.0}
        n_up, n_down = n_up + len(ups), n_down + len(downs)

        lm = EventTrace.read_jsonl(trace_dir / f"trace_FIRL-D-LM_seed{seed}.jsonl")
        for agent in range(DEFAULT.traffic.n_learners):
            mb = [e["round"] for e in lm if e["kind"] == "minibatch" and e["agent"] == agent]
            up = [e["round"] for e in lm if e["kind"] == "send_up" and e["agent"] == agent]
            assert up == mb[5::6]
    print(f"{n_up} uploads at 600 s and {n_down} downloads at 300 s; "
          "LM uploads exactly every 6th minibatch")


def test_criterion_6_out_of_order_override(default_sweep):
    _, trace_dir, _ = default_sweep
    ev = EventTrace.read_jsonl(trace_dir / f"trace_FIRL-D-OR_seed{DEFAULT.seeds[0]}.jsonl")
    drops = 0
    for agent in range(DEFAULT.traffic.n_learners):
        versions = [e["version"] for e in ev if e["kind"] == "apply_model"
                    and e["agent"] == agent]
        drops += sum(b < a for a, b in zip(versions, versions[1:]))
    print(f"{drops} stale overrides in seed {DEFAULT.seeds[0]}")
    assert drops >= 1


@njit(cache=True)
def _random_rollout(pos, speed, length, ids, idm_mask, accel_draws, total_length, centers,
                    half_length, horizon, v_max, v0, T, a_max, b, delta, s0, b_emergency,
                    crash_threshold, dt):
    """Step one epoch with the production kernel; count invariant violations."""
    bad = 0
    steps = 0
    for k in range(accel_draws.shape[0]):
        pos, speed, _, crashed = K.step_kernel(
            pos, speed, length, ids, idm_mask, accel_draws[k], total_length, centers,
            half_length, horizon, v_max, v0, T, a_max, b, delta, s0, b_emergency,
            crash_threshold, dt)
        steps += 1
        for i in range(pos.shape[0]):
            if not (np.isfinite(pos[i]) and np.isfinite(speed[i])):
                bad += 1
            elif speed[i] < 0.0 or pos[i] < 0.0 or pos[i] >= total_length:
                bad += 1
        if crashed:
            break
    return bad, steps


def test_criterion_7_physics_invariants():
    start = time.perf_counter()
    p = TrafficParams()
    geom = build_figure_eight(p.loop_radius, p.conflict_half_length)
    rng = np.random.default_rng(7)
    total_steps = violations = 0
    epochs = 0
    while total_steps < 1_000_000:
        w = reset_epoch(geom, int(rng.integers(2**31)), p)
        # mixed control: random learner accelerations, some well outside the clamp range
        draws = rng.uniform(-15.0, 8.0, size=(p.steps_per_epoch, p.n_vehicles))
        bad, steps = _random_rollout(
            w.pos, w.speed, w.length, w.ids, w.agent < 0, draws, geom.total_length,
            geom.centers, geom.conflict_half_length, p.horizon, p.v_max, p.idm.v0,
            p.idm.T, p.idm.a_max, p.idm.b, p.idm.delta, p.idm.s0, p.b_emergency,
            p.crash_threshold, p.dt)
        assert steps <= p.steps_per_epoch
        violations += bad
        total_steps += steps
        epochs += 1
    # the all-baseline world through the public API
    base = dataclasses.replace(p, n_learners=0)
    for seed in range(5):
        w = reset_epoch(geom, seed, base)
        zero = np.zeros(p.n_vehicles)
        while not w.done:
            w = advance(w, zero)
        assert not w.crashed and w.step_index == p.steps_per_epoch
    elapsed = time.perf_counter() - start
    print(f"{total_steps} random steps over {epochs} epochs, {violations} violations, "
          f"{elapsed:.1f} s")
    assert violations == 0
    assert elapsed < 60


def test_criterion_8_determinism(tmp_path):
    cfg = tmp_path / "small.toml"
    cfg.write_text("[learner]\nhidden_sizes = [16, 16]\n")
    outputs = []
    for rep in range(3):
        out = tmp_path / f"rep{rep}"
        code = main(["sweep", "--config", str(cfg), "--seed", "0,1", "--epochs", "4",
                     "--out", str(out), "--trace"])
        assert code == 0
        files = sorted(p for p in out.iterdir()
                       if p.suffix in (".csv", ".jsonl", ".svg", ".json"))
        outputs.append({p.name: p.read_bytes() for p in files})
    kinds = {n.rsplit(".", 1)[1] for n in outputs[0]}
    assert {"csv", "jsonl", "svg"} <= kinds
    assert outputs[0] == outputs[1] == outputs[2]
    print(f"{len(outputs[0])} files byte-identical across 3 runs")
