"""The four channels between learners and the server, on a short run each.

Run with ``python demos/network_impairments.py`` (about a minute).
"""
import dataclasses

from fedtraffic.config import ScenarioConfig
from fedtraffic.fednet import run_mode
from fedtraffic.learner import LearnerConfig

cfg = ScenarioConfig(learner=dataclasses.replace(LearnerConfig(), hidden_sizes=(16, 16)))

for mode in ("FIRL", "FIRL-D", "FIRL-D-OR", "FIRL-D-LM"):
    res = run_mode(cfg, seed=0, mode=mode, epochs=15)
    tr = res.trace
    up = sorted({e["latency"] for e in tr.kinds("deliver_up")})
    down = sorted({e["latency"] for e in tr.kinds("apply_model")})
    versions = res.agents[0].applied_versions
    drops = sum(b < a for a, b in zip(versions, versions[1:]))
    print(f"{mode:10s} uploads {len(tr.kinds('send_up')):4d}  "
          f"upload latencies {up}  download latencies {down}")
    print(f"{'':10s} agent 0 applied {len(versions)} models, "
          f"{drops} of them older than the one they replaced")

# the first few records of an out-of-order trace
res = run_mode(cfg, seed=0, mode="FIRL-D-OR", epochs=8)
for e in [e for e in res.trace if e["kind"] == "apply_model" and e["agent"] == 0][:8]:
    print(e)
