"""Smoke test of the Python extension.

Install first:  pip install --no-build-isolation ./crates/python
Run:            python -m pytest python/smoke_test.py
"""

import math
import pathlib

import nisme
import pytest

ROOT = pathlib.Path(__file__).resolve().parent.parent
CASE1 = ROOT / "scenarios" / "case1.toml"


def short_case1(horizon=1.0):
    sc = nisme.Scenario.load(str(CASE1))
    sc.horizon = horizon
    text = sc.to_toml().replace('script = "case_study"', 'script = "none"')
    return nisme.Scenario.from_toml(text)


def test_scenario_round_trip():
    sc = nisme.Scenario.load(str(CASE1))
    sc.validate()
    assert sc.steps == 4000
    again = nisme.Scenario.from_toml(sc.to_toml())
    assert again.to_toml() == sc.to_toml()


def test_bad_scenario_raises():
    text = CASE1.read_text().replace("schema_version = 1", "schema_version = 9")
    with pytest.raises(ValueError, match="schema_version"):
        nisme.Scenario.from_toml(text).validate()
    with pytest.raises(OSError):
        nisme.Scenario.load(str(ROOT / "missing.toml"))


def test_execute_and_bank_agree():
    sc = short_case1(0.5)
    run = sc.execute()
    assert len(run["modes"]) == sc.steps
    assert set(run["modes"]) <= set(run["labels"])
    assert all(abs(sum(p) - 1.0) < 1e-12 for p in run["posteriors"])

    trace = sc.simulate()
    bank = nisme.Bank(sc, trace["outputs"][0], trace["inputs"][0])
    assert len(bank.labels) == 4
    for k in range(1, len(trace["times"])):
        out = bank.step(trace["outputs"][k], trace["inputs"][k - 1], trace["inputs"][k])
        assert out["step"] == k
    # The in-memory run uses the same seed, noise and bank.
    assert out["x_hat"] == run["x_hat"][-1]
    assert bank.posteriors == run["posteriors"][-1]


def test_run_writes_artifacts(tmp_path):
    metrics = short_case1(0.5).run(str(tmp_path))
    assert metrics["steps"] == 50
    for name in ["manifest.toml", "estimates.csv", "posteriors.csv", "trace.csv", "metrics.toml"]:
        assert (tmp_path / name).exists()


def test_decompose_and_quantile():
    # Locations [actuator 0, sensor 1] on a 2-state, 2-output system.
    h = [[0.0, 0.0], [0.0, 1.0]]
    r = [[1.0, 0.0], [0.0, 1.0]]
    c = [[1.0, 0.0], [0.0, 1.0]]
    g = [[2.0, 0.0], [0.0, 0.0]]
    t = nisme.decompose(h, r, c, g)
    assert t["p"] == (1, 1, 0)
    assert t["sigma_bar"] == pytest.approx([2.0])
    assert nisme.chi_square_quantile(2, 0.75) == pytest.approx(-2.0 * math.log(0.25))
