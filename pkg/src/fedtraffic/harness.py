"""Experiment orchestration: scenario runs, reports and claim checks."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from fedtraffic.config import MODES, ClaimThresholds, ScenarioConfig, config_from_dict
from fedtraffic.fednet import EpochMetrics, EventTrace, run_mode
from fedtraffic.traffic import advance, build_figure_eight, reset_epoch, reward

REPRODUCED = "REPRODUCED"
NOT_REPRODUCED = "NOT-REPRODUCED"
NOT_EVALUATED = "NOT-EVALUATED"


class IncomparableRunsError(ValueError):
    pass


def final_window(values: Sequence[float], fraction: float = 0.2) -> list[float]:
    """Trailing ``fraction`` of a series (at least one element)."""
    n = len(values)
    k = max(1, int(round(n * fraction)))
    return list(values[n - k:])


@dataclass
class RunReport:
    mode: str
    fingerprint: str
    config: dict
    series: dict[int, list[EpochMetrics]]
    final_fraction: float = 0.2

    @property
    def seeds(self) -> list[int]:
        return sorted(self.series)

    @property
    def epochs(self) -> int:
        return len(next(iter(self.series.values())))

    def final_means(self) -> dict[int, float]:
        return {s: float(np.mean(final_window([m.mean_speed for m in self.series[s]],
                                              self.final_fraction)))
                for s in self.seeds}

    def summary(self) -> dict:
        per_seed = {}
        pooled = []
        for s in self.seeds:
            w = final_window([m.mean_speed for m in self.series[s]], self.final_fraction)
            pooled.extend(w)
            per_seed[str(s)] = {"mean": float(np.mean(w)), "std": float(np.std(w))}
        return {"per_seed": per_seed,
                "pooled": {"mean": float(np.mean(pooled)), "std": float(np.std(pooled))}}

    @property
    def pooled_mean(self) -> float:
        return self.summary()["pooled"]["mean"]

    def to_json(self) -> str:
        data = {
            "mode": self.mode,
            "fingerprint": self.fingerprint,
            "config": self.config,
            "final_fraction": self.final_fraction,
            "series": {str(s): [dataclasses.asdict(m) for m in self.series[s]]
                       for s in self.seeds},
            "summary": self.summary(),
        }
        return json.dumps(data, sort_keys=True, indent=1) + "\n"

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        try:
            path.write_text(self.to_json(), encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot write report to {path}: {exc}") from exc
        return path

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        d = json.loads(text)
        series = {int(s): [EpochMetrics(**m) for m in ms] for s, ms in d["series"].items()}
        return cls(d["mode"], d["fingerprint"], d["config"], series, d["final_fraction"])

    @classmethod
    def load(cls, path: str | Path) -> "RunReport":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"report not found: {path}")
        return cls.from_json(path.read_text(encoding="utf-8"))


def run_baseline(config: ScenarioConfig, seed: int, epochs: int) -> list[EpochMetrics]:
    """All-IDM world. Without learners every epoch replays the same
    deterministic trajectory, so one epoch is simulated and repeated."""
    tp = dataclasses.replace(config.traffic, n_learners=0)
    geom = build_figure_eight(tp.loop_radius, tp.conflict_half_length)
    world = reset_epoch(geom, seed, tp)
    accel = np.zeros(tp.n_vehicles)
    speed_sum = cum = 0.0
    while not world.done:
        new = advance(world, accel)
        cum += reward(world, new)
        speed_sum += float(new.speed.sum())
        world = new
    mean = speed_sum / (world.step_index * tp.n_vehicles)
    return [EpochMetrics(e, mean, world.crashed, world.step_index, cum) for e in range(epochs)]


def run_scenario(config: ScenarioConfig, trace_dir: Optional[str | Path] = None,
                 progress=None) -> RunReport:
    """Run ``config.mode`` for every seed and collect per-epoch metrics.

    With ``trace_dir`` set, each learning run's event trace is written there
    as ``trace_<mode>_seed<seed>.jsonl``.
    """
    series = {}
    for seed in config.seeds:
        if config.mode == "Baseline":
            series[seed] = run_baseline(config, seed, config.training_epochs)
        else:
            res = run_mode(config, seed)
            series[seed] = res.metrics
            if trace_dir is not None:
                res.trace.to_jsonl(Path(trace_dir) / f"trace_{config.mode}_seed{seed}.jsonl")
        if progress is not None:
            progress(config.mode, seed)
    return RunReport(config.mode, config.fingerprint(), config.to_dict(), series,
                     config.claims.final_fraction)


# --- comparison -------------------------------------------------------------

@dataclass
class ClaimResult:
    name: str
    description: str
    status: str
    detail: str = ""
    wins: Optional[int] = None
    n: Optional[int] = None
    p_value: Optional[float] = None


@dataclass
class ComparisonTable:
    pooled: dict[str, float]
    per_seed: dict[str, dict[int, float]]
    differences: dict[str, float]
    claims: list[ClaimResult] = field(default_factory=list)

    @property
    def all_reproduced(self) -> bool:
        return all(c.status != NOT_REPRODUCED for c in self.claims)

    def render(self) -> str:
        lines = ["mode        final-window mean speed (pooled)"]
        for mode, v in self.pooled.items():
            lines.append(f"{mode:11s} {v:8.4f}")
        lines.append("")
        for c in self.claims:
            extra = ""
            if c.wins is not None:
                extra = f" [{c.wins}/{c.n} seeds, sign test p={c.p_value:.4f}]"
            lines.append(f"{c.status:15s} {c.name}: {c.description}{extra}")
            if c.detail:
                lines.append(f"{'':15s}   {c.detail}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        d = {"pooled": self.pooled,
             "per_seed": {m: {str(s): v for s, v in d.items()} for m, d in self.per_seed.items()},
             "differences": self.differences,
             "claims": [dataclasses.asdict(c) for c in self.claims]}
        return json.dumps(d, sort_keys=True, indent=1) + "\n"


def sign_test(wins: int, n: int) -> float:
    """One-sided sign test p-value, P(X >= wins) for X ~ Binomial(n, 1/2)."""
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2 ** n


def _required(n: int, fraction: float) -> int:
    return max(1, math.ceil(fraction * n - 1e-9))


def compare(reports: Sequence[RunReport],
            thresholds: Optional[ClaimThresholds] = None) -> ComparisonTable:
    """Pooled final-window speeds per mode and the four ordering claims.

    Claims: FIRL beats IRL on most seeds; FIRL gets within
    ``approach_fraction`` of the all-IDM baseline; synchronous delay moves
    FIRL by at most ``trivial_fraction``; out-of-order delivery and local
    merging each drop FIRL below ``degrade_fraction`` on most seeds.
    """
    if len(reports) < 2:
        raise ValueError("compare needs at least two reports")
    th = thresholds or ClaimThresholds()
    seeds, epochs = reports[0].seeds, reports[0].epochs
    for r in reports[1:]:
        if r.seeds != seeds:
            raise IncomparableRunsError(f"seed sets differ: {seeds} vs {r.seeds} ({r.mode})")
        if r.epochs != epochs:
            raise IncomparableRunsError(f"epoch counts differ: {epochs} vs {r.epochs} ({r.mode})")
    by_mode: dict[str, RunReport] = {}
    for r in reports:
        by_mode.setdefault(r.mode, r)
    order = [m for m in MODES if m in by_mode] + [m for m in by_mode if m not in MODES]
    pooled = {m: by_mode[m].pooled_mean for m in order}
    per_seed = {m: by_mode[m].final_means() for m in order}
    diffs = {f"{a} - {b}": pooled[a] - pooled[b]
             for i, a in enumerate(order) for b in order[i + 1:]}
    table = ComparisonTable(pooled, per_seed, diffs)
    n = len(seeds)
    need = _required(n, th.min_seed_fraction)

    def seedwise(a: str, b: str, factor: float = 1.0):
        wins = sum(per_seed[a][s] < factor * per_seed[b][s] for s in seeds)
        return wins, sign_test(wins, n)

    def missing(*modes):
        gone = [m for m in modes if m not in by_mode]
        return f"missing modes: {', '.join(gone)}" if gone else ""

    # 1. FIRL over IRL
    desc = "FIRL final-window speed exceeds IRL's"
    if missing("FIRL", "IRL"):
        table.claims.append(ClaimResult("FIRL>IRL", desc, NOT_EVALUATED, missing("FIRL", "IRL")))
    else:
        wins, p = seedwise("IRL", "FIRL")
        ok = wins >= need
        table.claims.append(ClaimResult("FIRL>IRL", desc, REPRODUCED if ok else NOT_REPRODUCED,
                                        f"needs {need} seed wins", wins, n, p))

    # 2. FIRL approaching the baseline
    desc = f"pooled FIRL >= {th.approach_fraction:g} x pooled Baseline"
    if missing("FIRL", "Baseline"):
        table.claims.append(ClaimResult("FIRL~Baseline", desc, NOT_EVALUATED,
                                        missing("FIRL", "Baseline")))
    else:
        ratio = pooled["FIRL"] / pooled["Baseline"] if pooled["Baseline"] else math.inf
        ok = pooled["FIRL"] >= th.approach_fraction * pooled["Baseline"]
        table.claims.append(ClaimResult("FIRL~Baseline", desc,
                                        REPRODUCED if ok else NOT_REPRODUCED,
                                        f"ratio {ratio:.4f}"))

    # 3. synchronous delay has trivial impact
    desc = f"|FIRL-D - FIRL| <= {th.trivial_fraction:g} x FIRL (pooled)"
    if missing("FIRL", "FIRL-D"):
        table.claims.append(ClaimResult("FIRL-D~FIRL", desc, NOT_EVALUATED,
                                        missing("FIRL", "FIRL-D")))
    else:
        rel = abs(pooled["FIRL-D"] - pooled["FIRL"]) / pooled["FIRL"] if pooled["FIRL"] else math.inf
        ok = rel <= th.trivial_fraction
        table.claims.append(ClaimResult("FIRL-D~FIRL", desc, REPRODUCED if ok else NOT_REPRODUCED,
                                        f"relative difference {rel:.4f}"))

    # 4. out-of-order and local-merge degrade
    desc = (f"FIRL-D-OR and FIRL-D-LM each < {th.degrade_fraction:g} x FIRL "
            f"(pooled and on >= {need}/{n} seeds)")
    if missing("FIRL", "FIRL-D-OR", "FIRL-D-LM"):
        table.claims.append(ClaimResult("degradation", desc, NOT_EVALUATED,
                                        missing("FIRL", "FIRL-D-OR", "FIRL-D-LM")))
    else:
        parts, ok, worst = [], True, None
        for m in ("FIRL-D-OR", "FIRL-D-LM"):
            wins, p = seedwise(m, "FIRL", th.degrade_fraction)
            pooled_ok = pooled[m] < th.degrade_fraction * pooled["FIRL"]
            ok &= pooled_ok and wins >= need
            ratio = pooled[m] / pooled["FIRL"] if pooled["FIRL"] else math.inf
            parts.append(f"{m}: ratio {ratio:.4f}, {wins}/{n} seeds, p={p:.4f}")
            if worst is None or wins < worst[0]:
                worst = (wins, p)
        table.claims.append(ClaimResult("degradation", desc, REPRODUCED if ok else NOT_REPRODUCED,
                                        "; ".join(parts), worst[0], n, worst[1]))
    return table


def sweep(config: ScenarioConfig, modes: Sequence[str] = MODES,
          trace_dir: Optional[str | Path] = None, jobs: int = 1,
          progress=None) -> list[RunReport]:
    """Run every mode with the same seeds, hence identical initial worlds and
    initial models across modes."""
    configs = [config.with_mode(m) for m in modes]
    if jobs <= 1:
        return [run_scenario(c, trace_dir, progress) for c in configs]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_scenario, configs, [trace_dir] * len(configs)))


def config_of(report: RunReport) -> ScenarioConfig:
    d = dict(report.config)
    for k in ("traffic", "learner", "network", "claims"):
        d[k] = dict(d[k])
    d["traffic"]["idm"] = dict(d["traffic"]["idm"])
    return config_from_dict(d)
