import os
import sys
import tempfile
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT))

# config reads these at import time; keep test runs out of the repo's runs/
os.environ.setdefault("FALLOUT_OUTPUT_DIR", tempfile.mkdtemp(prefix="fallout-tests-"))
os.environ.setdefault("FALLOUT_REGISTER_RUNS", "false")

import config  # noqa: E402
from exploitlab.machine import build_fixture  # noqa: E402
from fluxsim import ExposurePlan, calibrate, load_observations  # noqa: E402
from memmodel import ALL_ONES, make_device  # noqa: E402

CONFIGS = ROOT / "data" / "configs"


def pytest_addoption(parser):
    parser.addoption("--bootstrap-golden", action="store_true",
                     help="write missing tests/golden files (with their manifests) from a verified run")


@pytest.fixture(autouse=True)
def isolated_outputs(tmp_path, monkeypatch):
    monkeypatch.setattr(config, "OUTPUT_DIR", tmp_path)
    monkeypatch.setattr(config, "DB_PATH", tmp_path / "registry.duckdb")
    monkeypatch.setattr(config, "REGISTER_RUNS", False)
    return tmp_path


@pytest.fixture(scope="session")
def observations():
    return load_observations()


@pytest.fixture(scope="session")
def model(observations):
    return calibrate(observations)


@pytest.fixture(scope="session")
def t41p():
    return make_device("t41p_1gb")


@pytest.fixture(scope="session")
def rpi4():
    return make_device("rpi4_4gb")


@pytest.fixture
def cobalt_plan(t41p):
    return ExposurePlan(isotope="Co-60", device=t41p, pattern=ALL_ONES, duration_s=1200.0)


@pytest.fixture(scope="session")
def bare_ping():
    return build_fixture("suid_ping", 0.0)


@pytest.fixture(scope="session")
def sprayed_ping():
    return build_fixture("suid_ping", 0.005)


@pytest.fixture(scope="session")
def firmware():
    return build_fixture("bare_metal_firmware")


@pytest.fixture(scope="session")
def configs_dir():
    return CONFIGS
