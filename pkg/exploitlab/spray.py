"""
Analytic page-table spray model.

A single upset lands uniformly over ``total_memory_bytes``; it hits when it
falls on one of the sensitive PTE bits inside the sprayed region:

    f = (sprayed_bytes / pte_size_bytes * sensitive_bits_per_pte) / (8 * total_memory_bytes)
    P(hit) = 1 - (1 - f) ** N

N is either given directly or derived from a flip rate and an exposure
duration.
"""

import logging
from dataclasses import asdict, dataclass
from math import expm1, log1p
from pathlib import Path

import config
from errors import FalloutError
from exploitlab.machine import (
    PAGE_SIZE,
    PTE_SIZE,
    Fixture,
    ToyMachine,
    sensitive_bits_per_sprayed_pte,
    sprayed_frame_count,
)
from runlog import load_yaml

log = logging.getLogger("EXPLOIT")

SCENARIOS_FILE = "spray_scenarios.yaml"
DEFAULT_REFRESH_MS = 64.0


class ScenarioError(FalloutError):
    pass


@dataclass(frozen=True)
class SprayScenario:
    total_memory_bytes: int
    sprayed_bytes: int
    pte_size_bytes: int = PTE_SIZE
    sensitive_bits_per_pte: int = 1
    page_size_bytes: int = PAGE_SIZE
    n_flips: float | None = None
    flip_rate_per_s: float | None = None
    duration_s: float | None = None
    refresh_interval_ms: float = DEFAULT_REFRESH_MS
    # multiplies N; 1.0 leaves the refresh interval without effect
    refresh_derating: float = 1.0
    name: str = ""

    def __post_init__(self):
        if self.total_memory_bytes <= 0 or self.page_size_bytes <= 0 or self.pte_size_bytes <= 0:
            raise ScenarioError("memory, page and PTE sizes must be positive")
        if not 0 <= self.sprayed_bytes <= self.total_memory_bytes:
            raise ScenarioError(
                f"sprayed bytes {self.sprayed_bytes} must be in [0, {self.total_memory_bytes}]"
            )
        if not 0 <= self.sensitive_bits_per_pte <= 8 * self.pte_size_bytes:
            raise ScenarioError(
                f"{self.sensitive_bits_per_pte} sensitive bits do not fit a "
                f"{self.pte_size_bytes}-byte PTE"
            )
        has_n = self.n_flips is not None
        has_rate = self.flip_rate_per_s is not None or self.duration_s is not None
        if has_n == has_rate:
            raise ScenarioError("give either n_flips or flip_rate_per_s with duration_s")
        if has_n and self.n_flips < 0:
            raise ScenarioError(f"n_flips must be >= 0, got {self.n_flips}")
        if has_rate:
            if self.flip_rate_per_s is None or self.duration_s is None:
                raise ScenarioError("flip_rate_per_s and duration_s go together")
            if self.flip_rate_per_s < 0 or self.duration_s < 0:
                raise ScenarioError("flip rate and duration must be >= 0")
        if not self.refresh_interval_ms > 0:
            raise ScenarioError("refresh interval must be positive")
        if not self.refresh_derating >= 0:
            raise ScenarioError("refresh derating must be >= 0")

    @property
    def sensitive_fraction(self) -> float:
        sensitive = self.sprayed_bytes // self.pte_size_bytes * self.sensitive_bits_per_pte
        return sensitive / (8 * self.total_memory_bytes)

    def to_record(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def expected_flips(s: SprayScenario) -> float:
    n = s.n_flips if s.n_flips is not None else s.flip_rate_per_s * s.duration_s
    return n * s.refresh_derating


def spray_hit_probability(s: SprayScenario) -> float:
    f = s.sensitive_fraction
    n = expected_flips(s)
    log.debug("scenario %s: f=%.3e N=%.3f refresh=%.0f ms (derating %.2f)",
              s.name or "-", f, n, s.refresh_interval_ms, s.refresh_derating)
    if n == 0 or f == 0:
        return 0.0
    if f >= 1.0:
        return 1.0
    return float(-expm1(n * log1p(-f)))


def scenario_for_machine(m: ToyMachine, n_flips: float = 1.0) -> SprayScenario:
    """The scenario describing a toy machine's spray.

    Counts the sprayed page-table pages only; the handful of sensitive bits
    in the fixture's own tables are left out.
    """
    if m.fixture is Fixture.BARE_METAL_FIRMWARE:
        # one 4-byte flag word with one decisive bit
        return SprayScenario(total_memory_bytes=m.size_bytes, sprayed_bytes=4, pte_size_bytes=4,
                             sensitive_bits_per_pte=1, n_flips=n_flips, name=m.fixture.value)
    return SprayScenario(
        total_memory_bytes=m.size_bytes,
        sprayed_bytes=sprayed_frame_count(m) * PAGE_SIZE,
        sensitive_bits_per_pte=sensitive_bits_per_sprayed_pte(m),
        n_flips=n_flips,
        name=f"{m.fixture.value}@{m.spray_fraction:g}",
    )


# ─────────────────────────────────────────────
# Scenario files
# ─────────────────────────────────────────────

def _from_dict(name: str, raw: dict) -> SprayScenario:
    if not isinstance(raw, dict):
        raise ScenarioError(f"scenario {name!r} must be a mapping")
    try:
        return SprayScenario(name=name, **raw)
    except TypeError as e:
        raise ScenarioError(f"scenario {name!r}: {e}") from None


def scenario_from_config(raw: dict, name: str = "") -> SprayScenario:
    return _from_dict(name or raw.get("name", "scenario"), {k: v for k, v in raw.items() if k != "name"})


def load_scenarios(path: Path | None = None) -> dict[str, SprayScenario]:
    """Named scenarios from the ``scenarios`` section of a YAML file."""
    path = Path(path or config.DATA_DIR / SCENARIOS_FILE)
    doc = load_yaml(path)
    section = doc.get("scenarios")
    if not isinstance(section, dict) or not section:
        raise ScenarioError(f"{path}: no 'scenarios' section")
    scenarios = {name: _from_dict(name, raw) for name, raw in section.items()}
    log.info("Loaded %d spray scenarios from %s", len(scenarios), path.name)
    return scenarios


def load_fixture_params(path: Path | None = None) -> dict[str, dict]:
    """Toy-machine parameter sets from the ``fixtures`` section."""
    path = Path(path or config.DATA_DIR / SCENARIOS_FILE)
    section = load_yaml(path).get("fixtures") or {}
    if not isinstance(section, dict):
        raise ScenarioError(f"{path}: 'fixtures' must be a mapping")
    return section
