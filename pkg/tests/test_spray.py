import math

import pytest

from exploitlab.machine import PHYS_BYTES, build_fixture, sensitive_bit_count
from exploitlab.spray import (
    ScenarioError,
    SprayScenario,
    expected_flips,
    load_fixture_params,
    load_scenarios,
    scenario_for_machine,
    scenario_from_config,
    spray_hit_probability,
)
from runlog import ConfigError

GIB = 1 << 30


def test_sensitive_fraction():
    s = SprayScenario(total_memory_bytes=4 * GIB, sprayed_bytes=GIB, sensitive_bits_per_pte=2, n_flips=1)
    assert s.sensitive_fraction == pytest.approx((GIB / 8 * 2) / (8 * 4 * GIB))


def test_single_flip_probability_is_the_fraction():
    s = SprayScenario(total_memory_bytes=4 * GIB, sprayed_bytes=GIB, n_flips=1)
    assert spray_hit_probability(s) == pytest.approx(s.sensitive_fraction)


def test_probability_formula():
    s = SprayScenario(total_memory_bytes=GIB, sprayed_bytes=GIB // 2, sensitive_bits_per_pte=8, n_flips=3)
    f = s.sensitive_fraction
    assert spray_hit_probability(s) == pytest.approx(1 - (1 - f) ** 3)


def test_degenerate_scenarios():
    assert spray_hit_probability(SprayScenario(GIB, 0, n_flips=100)) == 0.0
    assert spray_hit_probability(SprayScenario(GIB, GIB, sensitive_bits_per_pte=0, n_flips=100)) == 0.0
    assert spray_hit_probability(SprayScenario(GIB, GIB, n_flips=0)) == 0.0
    # every bit of the whole memory is sensitive
    assert spray_hit_probability(SprayScenario(GIB, GIB, sensitive_bits_per_pte=64, n_flips=1)) == 1.0


def test_probability_grows_with_flips():
    ps = [spray_hit_probability(SprayScenario(GIB, GIB // 4, n_flips=n)) for n in (1, 10, 100, 1000)]
    assert ps == sorted(ps)
    assert all(0 < p < 1 for p in ps)


def test_rate_and_duration():
    s = SprayScenario(GIB, GIB // 4, flip_rate_per_s=0.5, duration_s=60, refresh_derating=0.5)
    assert expected_flips(s) == pytest.approx(15.0)


@pytest.mark.parametrize("kwargs", [
    {"sprayed_bytes": 2 * GIB, "n_flips": 1},
    {"sprayed_bytes": GIB, "sensitive_bits_per_pte": 65, "n_flips": 1},
    {"sprayed_bytes": GIB},
    {"sprayed_bytes": GIB, "n_flips": 1, "duration_s": 10},
    {"sprayed_bytes": GIB, "flip_rate_per_s": 1.0},
    {"sprayed_bytes": GIB, "n_flips": -1},
    {"sprayed_bytes": GIB, "n_flips": 1, "refresh_interval_ms": 0},
])
def test_invalid_scenarios(kwargs):
    with pytest.raises(ScenarioError):
        SprayScenario(total_memory_bytes=GIB, **kwargs)


# ─────────────────────────────────────────────
# shipped scenarios
# ─────────────────────────────────────────────

def test_cobalt_session_is_about_one_percent():
    s = load_scenarios()["cobalt_session"]
    assert expected_flips(s) == pytest.approx(108.0)
    assert spray_hit_probability(s) == pytest.approx(0.00984, abs=5e-5)


def test_rowhammer_spray_is_about_thirty_percent():
    s = load_scenarios()["rowhammer_spray"]
    assert s.sensitive_fraction == pytest.approx(0.046875)
    assert spray_hit_probability(s) == pytest.approx(0.3057, abs=5e-4)


def test_no_flip_scenario():
    assert spray_hit_probability(load_scenarios()["no_flips"]) == 0.0


def test_fixture_params():
    params = load_fixture_params()
    assert params["suid_ping_sprayed"] == {"fixture": "suid_ping", "spray_fraction": 0.005}


def test_scenario_file_errors(tmp_path):
    empty = tmp_path / "empty.yaml"
    empty.write_text("fixtures: {}\n")
    with pytest.raises(ScenarioError):
        load_scenarios(empty)
    bad = tmp_path / "bad.yaml"
    bad.write_text("scenarios:\n  x:\n    total_memory_bytes: 10\n    colour: red\n")
    with pytest.raises(ScenarioError, match="colour"):
        load_scenarios(bad)
    with pytest.raises(ConfigError):
        load_scenarios(tmp_path / "missing.yaml")


def test_inline_scenario():
    s = scenario_from_config({"name": "desk", "total_memory_bytes": GIB, "sprayed_bytes": 0, "n_flips": 3})
    assert s.name == "desk" and expected_flips(s) == 3


# ─────────────────────────────────────────────
# analytic model vs the toy machine
# ─────────────────────────────────────────────

def test_machine_scenario_matches_census(sprayed_ping):
    s = scenario_for_machine(sprayed_ping)
    exact = sensitive_bit_count(sprayed_ping) / (8 * PHYS_BYTES)
    assert s.total_memory_bytes == PHYS_BYTES
    assert s.sensitive_bits_per_pte == 5
    # the analytic model leaves out the fixture's own handful of entries
    assert s.sensitive_fraction == pytest.approx(exact, rel=1e-3)
    assert s.sensitive_fraction < exact


def test_machine_scenario_for_firmware(firmware):
    s = scenario_for_machine(firmware, n_flips=1)
    assert s.sensitive_fraction == pytest.approx(1 / (8 * PHYS_BYTES))


def test_machine_scenario_without_spray():
    s = scenario_for_machine(build_fixture("suid_ping", 0.0), n_flips=27)
    assert s.sprayed_bytes == 0
    assert spray_hit_probability(s) == 0.0


def test_sprayed_fixture_session_probability(sprayed_ping):
    p = spray_hit_probability(scenario_for_machine(sprayed_ping, n_flips=27))
    assert p == pytest.approx(1 - math.exp(27 * math.log1p(-53760 / (8 * PHYS_BYTES))))
    assert 0.005 < p < 0.02
