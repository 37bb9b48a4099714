import json

import pytest

import config
import harness
from harness import ConfigError, SuiteConfig, run_suite
from modulus import UpperGradientError
from reporting import emit_report


def test_defaults_come_from_config():
    cfg = SuiteConfig("hj")
    assert cfg.seeds == list(range(50))
    assert cfg.sizes == [12]
    assert cfg.exponents == [1.5, 2.0, 3.0]
    assert cfg.tolerance("HJ_TOL") == config.HJ_TOL


def test_tolerance_override_is_case_insensitive():
    cfg = SuiteConfig("hj", tolerances={"hj_tol": 1e-5})
    assert cfg.tolerance("HJ_TOL") == 1e-5
    assert cfg.payload()["tolerances"] == {"HJ_TOL": 1e-5}


@pytest.mark.parametrize("kwargs, match", [
    ({"suite": "nope"}, "unknown suite"),
    ({"suite": "hj", "seeds": []}, "empty"),
    ({"suite": "hj", "sizes": [1]}, "at least 2"),
    ({"suite": "hj", "exponents": [1.0]}, "exceed 1"),
    ({"suite": "hj", "tolerances": {"not_a_constant": 1.0}}, "unknown tolerance"),
    ({"suite": "hj", "tolerances": {"hj_tol": -1.0}}, "positive"),
])
def test_config_validation(kwargs, match):
    with pytest.raises(ConfigError, match=match):
        SuiteConfig(**kwargs)


def test_config_file(tmp_path):
    path = tmp_path / "hj.json"
    path.write_text(json.dumps({"suite": "hj", "seeds": [3], "sizes": [5]}))
    cfg = SuiteConfig.load(str(path))
    assert cfg.seeds == [3]
    assert cfg.exponents == [1.5, 2.0, 3.0]

    with pytest.raises(ConfigError, match="not 'flow'"):
        SuiteConfig.load(str(path), suite="flow")

    path.write_text(json.dumps({"suite": "hj", "seed": [3]}))
    with pytest.raises(ConfigError, match="unknown config keys"):
        SuiteConfig.load(str(path))

    path.write_text(json.dumps({"seeds": [3]}))
    with pytest.raises(ConfigError, match="suite"):
        SuiteConfig.load(str(path))


def test_hj_suite():
    report = run_suite(SuiteConfig("hj", seeds=[0, 1], sizes=[6], exponents=[2.0]))
    assert report.passed, [r.as_row() for r in report.failures]
    assert {r.instance for r in report.records} == {"seed=0000/n=006/p=2", "seed=0001/n=006/p=2"}
    assert {r.name for r in report.records} == {
        "dpm_monotone", "hj_subsolution", "dini_identity", "hopf_lax_invariants"}
    assert report.provenance["seeds"] == [0, 1]


def test_modulus_suite():
    report = run_suite(SuiteConfig("modulus", seeds=[0], sizes=[5], exponents=[2.0]))
    assert report.passed, [r.as_row() for r in report.failures]
    names = [r.name for r in report.records]
    assert "ug_brute_force" in names
    assert names.count("plan_modulus") == 2


def test_modulus_suite_default_grid():
    report = run_suite(SuiteConfig("modulus"))
    assert report.passed, [r.as_row() for r in report.failures]
    assert len({r.instance for r in report.records}) == 150


def test_duality_suite():
    report = run_suite(SuiteConfig("duality", seeds=[0], sizes=[5], exponents=[2.0]))
    assert report.passed, [r.as_row() for r in report.failures]
    assert {r.name for r in report.records} == {
        "coupling_marginals", "duality", "weak_duality_cold", "w_metric", "w_p_monotonicity"}


def test_flow_suite():
    report = run_suite(SuiteConfig("flow", seeds=[0], sizes=[5], exponents=[2.0]))
    assert report.passed, [r.as_row() for r in report.failures]
    assert {"kuwada", "dissipation_bridge", "chain_closure"} <= {r.name for r in report.records}
    halving = report.extra_tables["kuwada_halving"]
    assert len(halving) == 3
    assert halving["tau"].is_monotonic_increasing


def test_identification_suite():
    report = run_suite(SuiteConfig("identification"))
    assert report.passed, [r.as_row() for r in report.failures]
    assert len(report.records) == 25
    gap = [r for r in report.records if r.name == "identification_gap_monotone"]
    assert [r.instance for r in gap] == ["path/q=2"]

    refinement = report.extra_tables["refinement"]
    assert refinement["kind"].tolist() == ["grid"] * 4 + ["path"] * 4
    paths = refinement[refinement["kind"] == "path"]
    assert paths["n"].tolist() == [8, 16, 32, 64]
    assert paths["min_ug"].tolist() == pytest.approx([1.0] * 4, abs=1e-7)
    r_vs_q = report.extra_tables["r_vs_q"]
    assert len(r_vs_q) == 12
    assert sorted(set(r_vs_q["r"])) == [1.5, 2.0, 3.0]


def test_failed_r_vs_q_solve_keeps_the_identification_checks(monkeypatch):
    solve = harness.min_upper_gradient

    def only_quadratic(f, q, **kwargs):
        if q != 2.0:
            raise UpperGradientError("constraint generation did not close")
        return solve(f, q, **kwargs)

    monkeypatch.setattr(harness, "min_upper_gradient", only_quadratic)
    monkeypatch.setattr(config, "GRID_SIZES", (3,))
    report = run_suite(SuiteConfig("identification", sizes=[8, 16]))
    failed = {(r.instance, r.name) for r in report.failures}
    assert failed == {("path/n=008/q=2", "r_vs_q"), ("path/n=016/q=2", "r_vs_q")}
    assert len([r for r in report.failures if r.instance == "path/n=008/q=2"]) == 2
    passed = {r.name for r in report.records if r.passed}
    assert {"identification_ug", "identification_slope", "identification_gap_monotone"} <= passed
    assert len(report.extra_tables["r_vs_q"]) == 2


def test_instance_errors_become_failed_records(monkeypatch):
    def broken(seed, n):
        raise RuntimeError("no space today")

    monkeypatch.setattr(harness, "random_space", broken)
    report = run_suite(SuiteConfig("hj", seeds=[0, 1], sizes=[5], exponents=[2.0]))
    assert len(report.records) == 2
    assert all(not r.passed for r in report.records)
    assert all(r.note.startswith("error:") and "no space today" in r.note for r in report.records)


def test_report_files_are_reproducible(tmp_path):
    cfg = SuiteConfig("duality", seeds=[0, 1], sizes=[4], exponents=[1.5])
    first = emit_report(run_suite(cfg), "json", str(tmp_path / "a"))[0]
    second = emit_report(run_suite(cfg), "json", str(tmp_path / "b"))[0]
    with open(first, "rb") as a, open(second, "rb") as b:
        assert a.read() == b.read()
