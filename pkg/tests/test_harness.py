import dataclasses
import json

import numpy as np
import pytest

from fedtraffic.cli import main
from fedtraffic.config import (ClaimThresholds, ConfigError, ScenarioConfig, config_from_dict,
                               load_config)
from fedtraffic.export import export_csv, export_plot
from fedtraffic.fednet import EpochMetrics
from fedtraffic.harness import (
    NOT_EVALUATED, NOT_REPRODUCED, REPRODUCED, IncomparableRunsError, RunReport, compare,
    final_window, run_scenario, sign_test,
)
from fedtraffic.learner import LearnerConfig


def fixture_report(mode, means, epochs=10):
    """Report whose every epoch of seed ``s`` has mean speed ``means[s]``."""
    series = {s: [EpochMetrics(e, float(m), False, 1500, 0.0) for e in range(epochs)]
              for s, m in enumerate(means)}
    return RunReport(mode, "0" * 16, {}, series)


def claim(table, name):
    return next(c for c in table.claims if c.name == name)


def all_claims_fixture():
    return [fixture_report("Baseline", [4.5] * 5), fixture_report("IRL", [3.0] * 5),
            fixture_report("FIRL", [4.0] * 5), fixture_report("FIRL-D", [3.9] * 5),
            fixture_report("FIRL-D-OR", [3.0] * 5), fixture_report("FIRL-D-LM", [2.0] * 5)]


def tiny_config(**kw):
    kw = {"seeds": (0,), "training_epochs": 2, **kw}
    return ScenarioConfig(learner=LearnerConfig(hidden_sizes=(8,), replay_capacity=2000), **kw)


# statistics

def test_final_window():
    assert final_window(list(range(10))) == [8, 9]
    assert final_window([1.0]) == [1.0]
    assert final_window(list(range(300))) == list(range(240, 300))


def test_sign_test_values():
    assert sign_test(5, 5) == pytest.approx(1 / 32)
    assert sign_test(4, 5) == pytest.approx(6 / 32)
    assert sign_test(0, 5) == 1.0


def test_summary_pooled_and_per_seed():
    r = fixture_report("FIRL", [2.0, 4.0])
    s = r.summary()
    assert s["per_seed"]["0"] == {"mean": 2.0, "std": 0.0}
    assert s["pooled"]["mean"] == 3.0 and s["pooled"]["std"] == 1.0


# comparison

def test_identical_reports_not_reproduced():
    a = fixture_report("FIRL", [4.0, 3.5, 3.0])
    b = dataclasses.replace(a, mode="IRL")
    t = compare([a, b])
    assert all(d == 0 for d in t.differences.values())
    assert claim(t, "FIRL>IRL").status == NOT_REPRODUCED
    assert claim(t, "FIRL~Baseline").status == NOT_EVALUATED


def test_firl_beats_irl_fixture():
    t = compare([fixture_report("FIRL", [4.0] * 5), fixture_report("IRL", [3.0] * 5)])
    c = claim(t, "FIRL>IRL")
    assert c.status == REPRODUCED and c.wins == 5 and c.p_value == pytest.approx(1 / 32)
    assert t.differences["IRL - FIRL"] == pytest.approx(-1.0)


def test_trivial_impact_fixture():
    t = compare([fixture_report("FIRL", [4.0] * 5), fixture_report("FIRL-D", [3.9] * 5)])
    assert claim(t, "FIRL-D~FIRL").status == REPRODUCED
    t = compare([fixture_report("FIRL", [4.0] * 5), fixture_report("FIRL-D", [3.7] * 5)])
    assert claim(t, "FIRL-D~FIRL").status == NOT_REPRODUCED


def test_all_four_claims_fixture():
    t = compare(all_claims_fixture())
    assert [c.status for c in t.claims] == [REPRODUCED] * 4
    assert t.all_reproduced
    assert "REPRODUCED" in t.render()


def test_degradation_needs_both_modes():
    reports = all_claims_fixture()
    reports[4] = fixture_report("FIRL-D-OR", [3.9, 3.9, 3.9, 3.0, 3.0])
    t = compare(reports)
    assert claim(t, "degradation").status == NOT_REPRODUCED


def test_approach_threshold():
    reports = all_claims_fixture()
    reports[0] = fixture_report("Baseline", [5.1] * 5)   # 4.0 / 5.1 < 0.8
    assert claim(compare(reports), "FIRL~Baseline").status == NOT_REPRODUCED
    loose = ClaimThresholds(approach_fraction=0.7)
    assert claim(compare(reports, loose), "FIRL~Baseline").status == REPRODUCED


def test_mismatched_seeds_rejected():
    with pytest.raises(IncomparableRunsError):
        compare([fixture_report("FIRL", [4.0] * 5), fixture_report("IRL", [3.0] * 4)])
    with pytest.raises(IncomparableRunsError):
        compare([fixture_report("FIRL", [4.0] * 5),
                 fixture_report("IRL", [3.0] * 5, epochs=11)])


# running

def test_baseline_report_constant_and_crash_free():
    r = run_scenario(tiny_config(mode="Baseline", seeds=(0, 1), training_epochs=4))
    for s in r.seeds:
        speeds = {m.mean_speed for m in r.series[s]}
        assert len(speeds) == 1 and not any(m.crashed for m in r.series[s])
        assert all(m.steps == 1500 for m in r.series[s])


def test_single_epoch_irl_report():
    r = run_scenario(tiny_config(mode="IRL", training_epochs=1))
    assert len(r.series[0]) == 1


def test_report_files_byte_identical(tmp_path):
    cfg = tiny_config(mode="FIRL")
    run_scenario(cfg).save(tmp_path / "a.json")
    run_scenario(cfg).save(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    back = RunReport.load(tmp_path / "a.json")
    assert back.to_json() == (tmp_path / "a.json").read_text()
    with pytest.raises(FileNotFoundError):
        RunReport.load(tmp_path / "missing.json")


# export

def test_csv_rows_and_determinism(tmp_path):
    r = fixture_report("IRL", [3.0], epochs=2)
    export_csv(r, tmp_path / "a.csv")
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert len(lines) == 3
    assert lines[0] == "mode,seed,epoch,mean_speed,crashed,steps,cumulative_reward"
    export_csv(r, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_plot_has_one_curve_per_mode(tmp_path):
    export_plot(all_claims_fixture(), tmp_path / "p.svg")
    svg = (tmp_path / "p.svg").read_text()
    assert svg.count('class="curve"') == 6 and svg.count('class="band"') == 6
    assert "epoch" in svg and "mean speed" in svg


def test_export_io_error(tmp_path):
    with pytest.raises(OSError):
        export_csv(fixture_report("IRL", [3.0]), tmp_path / "no" / "such" / "dir.csv")


# configuration

def test_fingerprint_sensitivity():
    a = ScenarioConfig()
    assert a.fingerprint() == ScenarioConfig().fingerprint()
    assert a.fingerprint() != dataclasses.replace(a, training_epochs=299).fingerprint()
    lr = dataclasses.replace(a.learner, learning_rate=a.learner.learning_rate * 2)
    assert a.fingerprint() != dataclasses.replace(a, learner=lr).fingerprint()
    assert a.fingerprint() == dataclasses.replace(a, output_dir="elsewhere").fingerprint()


def test_fingerprint_stable_under_key_order(tmp_path):
    (tmp_path / "a.toml").write_text('mode = "IRL"\ntraining_epochs = 7\n'
                                     '[learner]\ngamma = 0.5\nlearning_rate = 0.1\n')
    (tmp_path / "b.toml").write_text('[learner]\nlearning_rate = 0.1\ngamma = 0.5\n')
    a = load_config(tmp_path / "a.toml")
    b = dataclasses.replace(load_config(tmp_path / "b.toml"), mode="IRL", training_epochs=7)
    assert a.fingerprint() == b.fingerprint()


def test_config_errors_list_keys(tmp_path):
    with pytest.raises(ConfigError) as err:
        config_from_dict({"bogus": 1, "learner": {"gama": 0.9}, "traffic": {"idm": {"x": 1}}})
    assert set(err.value.keys) == {"bogus", "learner.gama", "traffic.idm.x"}
    with pytest.raises(ConfigError):
        config_from_dict({"mode": "FIRL-X"})
    with pytest.raises(ConfigError):
        config_from_dict({"seeds": []})
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "nope.toml")


def test_shipped_config_matches_defaults():
    from pathlib import Path
    path = Path(__file__).resolve().parents[1] / "configs" / "default.toml"
    assert load_config(path).fingerprint() == ScenarioConfig().fingerprint()
    assert load_config(path).to_dict() == ScenarioConfig().to_dict()


# command line

def test_cli_missing_config(capsys):
    assert main(["run", "--config", "missing.toml"]) == 1
    assert "not found" in capsys.readouterr().err


def test_cli_unknown_flag(capsys):
    assert main(["run", "--frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err


def test_cli_bad_seed_list():
    assert main(["run", "--seed", "a,b"]) == 1


def test_cli_compare_check(tmp_path, capsys):
    paths = []
    for r in all_claims_fixture():
        paths.append(str(r.save(tmp_path / f"report_{r.mode}.json")))
    assert main(["compare", "--check", "--out", str(tmp_path), *paths]) == 0
    bad = fixture_report("FIRL-D", [2.0] * 5).save(tmp_path / "report_FIRL-D.json")
    assert main(["compare", "--check", "--out", str(tmp_path)]) == 2
    assert main(["compare", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "comparison.txt").exists()


def test_cli_sweep_and_plot(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[learner]\nhidden_sizes = [8]\nreplay_capacity = 2000\n")
    out = tmp_path / "out"
    assert main(["sweep", "--config", str(cfg), "--seed", "1,2,3", "--epochs", "1",
                 "--out", str(out)]) == 0
    reports = sorted(out.glob("report_*.json"))
    assert len(reports) == 6
    assert sum(len(RunReport.load(p).series) for p in reports) == 18
    assert main(["plot", "--out", str(out)]) == 0
    assert (out / "mean_speed.svg").read_text().count('class="curve"') == 6
    data = json.loads((out / "comparison.json").read_text())
    assert len(data["claims"]) == 4
