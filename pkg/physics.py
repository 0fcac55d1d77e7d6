# =========================================================
# physics.py - radioactive source model
# ---------------------------------------------------------
# Decay, emission spectra, lead attenuation and the neutron-silicon
# reaction table. All constants live in data files under DATA_DIR:
#
#   isotopes.csv          one row per emission line
#   attenuation_lead.csv  gamma linear attenuation coefficients (1/cm)
#   si_reactions.csv      Si + n reaction branches
#
# Every type here is an immutable value; every operation is pure.
# =========================================================

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd

import config
from errors import FalloutError

log = logging.getLogger("PHYSICS")

# Alphas and betas are stopped by any lead sheet at least this thick.
CHARGED_STOP_MM = 0.1

ISOTOPES_FILE = "isotopes.csv"
ATTENUATION_FILE = "attenuation_lead.csv"
SI_REACTIONS_FILE = "si_reactions.csv"


class PhysicsError(FalloutError):
    pass


class NoCoefficientError(PhysicsError):
    """No attenuation coefficient exists for this particle/energy."""


class UnsupportedTargetError(PhysicsError):
    pass


class Particle(str, Enum):
    ALPHA = "alpha"
    BETA = "beta"
    GAMMA = "gamma"
    NEUTRON = "neutron"
    PROTON = "proton"


CHARGED = (Particle.ALPHA, Particle.BETA)


class SiIsotope(str, Enum):
    SI28 = "Si28"
    SI29 = "Si29"
    SI30 = "Si30"


# ═════════════════════════════════════════════
# 도메인 타입
# ═════════════════════════════════════════════

@dataclass(frozen=True)
class EmissionLine:
    particle: Particle
    energy_mev: float
    intensity: float  # emissions per decay

    def __post_init__(self):
        try:
            object.__setattr__(self, "particle", Particle(self.particle))
        except ValueError:
            raise PhysicsError(f"unknown particle kind {self.particle!r}") from None
        if not self.energy_mev > 0:
            raise PhysicsError(f"energy must be positive, got {self.energy_mev}")
        if not 0.0 <= self.intensity <= 1.0:
            raise PhysicsError(f"intensity must be in [0, 1], got {self.intensity}")


@dataclass(frozen=True)
class Isotope:
    name: str
    half_life_s: float
    daughter: str
    lines: tuple[EmissionLine, ...]

    def __post_init__(self):
        if not self.half_life_s > 0:
            raise PhysicsError(f"{self.name}: half-life must be positive")
        object.__setattr__(self, "lines", tuple(self.lines))
        if not self.lines:
            raise PhysicsError(f"{self.name}: at least one emission line required")


@dataclass(frozen=True)
class ShieldSpec:
    """Lead sheet over a half-open byte interval [start, end), or the whole device."""

    lead_thickness_mm: float = 0.0
    covered_start: int | None = None
    covered_end: int | None = None

    def __post_init__(self):
        if self.lead_thickness_mm < 0:
            raise PhysicsError(f"shield thickness must be >= 0, got {self.lead_thickness_mm}")
        if (self.covered_start is None) != (self.covered_end is None):
            raise PhysicsError("shield interval needs both start and end")
        if self.covered_start is not None:
            if self.covered_start < 0 or self.covered_start > self.covered_end:
                raise PhysicsError(
                    f"malformed shield interval [{self.covered_start}, {self.covered_end})"
                )

    @property
    def whole_device(self) -> bool:
        return self.covered_start is None

    def covers(self, offset: int) -> bool:
        if self.whole_device:
            return True
        return self.covered_start <= offset < self.covered_end

    def covered_bytes(self, region_bytes: int) -> int:
        """Number of bytes of [0, region_bytes) lying under the sheet."""
        if self.lead_thickness_mm == 0:
            return 0
        if self.whole_device:
            return region_bytes
        lo = min(self.covered_start, region_bytes)
        hi = min(self.covered_end, region_bytes)
        return hi - lo


NO_SHIELD = ShieldSpec()


@dataclass(frozen=True)
class SiReaction:
    silicon_isotope: SiIsotope
    product: str
    ejected: Particle
    energy: float
    unit: str  # "MeV" or "KeV", as printed in the source table

    @property
    def energy_mev(self) -> float:
        return self.energy / 1000.0 if self.unit == "KeV" else self.energy

    def __str__(self):
        mass = self.silicon_isotope.value[2:]
        symbol = "p" if self.ejected is Particle.PROTON else "alpha"
        return f"{mass}Si + n -> {self.product} + {symbol} @ {self.energy:g} {self.unit}"


# ═════════════════════════════════════════════
# 데이터 파일 로드
# ═════════════════════════════════════════════

def _data_path(name: str, data_dir: Path | None) -> Path:
    return Path(data_dir or config.DATA_DIR) / name


def _read_csv(path: Path) -> pd.DataFrame:
    try:
        df = pd.read_csv(path)
    except FileNotFoundError:
        raise PhysicsError(f"data file missing: {path}") from None
    df.columns = df.columns.str.strip()
    return df


@lru_cache(maxsize=8)
def _load_isotopes(path: str) -> dict[str, Isotope]:
    df = _read_csv(Path(path))
    isotopes = {}
    for name, grp in df.groupby("isotope", sort=True):
        lines = tuple(
            EmissionLine(r.particle.strip(), float(r.energy_mev), float(r.intensity))
            for r in grp.itertuples(index=False)
        )
        half_lives = grp["half_life_s"].unique()
        if len(half_lives) != 1:
            raise PhysicsError(f"{path}: {name} has conflicting half-lives {list(half_lives)}")
        isotopes[name] = Isotope(
            name=name,
            half_life_s=float(half_lives[0]),
            daughter=str(grp["daughter"].iloc[0]),
            lines=lines,
        )
    log.info("Loaded %d isotopes from %s", len(isotopes), path)
    return isotopes


def load_isotopes(data_dir: Path | None = None) -> dict[str, Isotope]:
    return _load_isotopes(str(_data_path(ISOTOPES_FILE, data_dir)))


def get_isotope(name: str, data_dir: Path | None = None) -> Isotope:
    isotopes = load_isotopes(data_dir)
    if name not in isotopes:
        raise PhysicsError(f"unknown isotope {name!r}; known: {', '.join(sorted(isotopes))}")
    return isotopes[name]


@lru_cache(maxsize=8)
def _load_attenuation(path: str) -> tuple[np.ndarray, np.ndarray]:
    df = _read_csv(Path(path)).sort_values("energy_mev")
    energies = df["energy_mev"].to_numpy(dtype=float)
    mu = df["mu_per_cm"].to_numpy(dtype=float)
    if len(energies) < 2 or (energies <= 0).any() or (mu <= 0).any():
        raise PhysicsError(f"{path}: need >= 2 rows of positive energies and coefficients")
    if (np.diff(mu) > 0).any():
        # photoelectric edges are outside 0.1 to 2 MeV for lead; the table must be monotone
        raise PhysicsError(f"{path}: coefficients must be non-increasing in energy")
    return energies, mu


def load_attenuation(data_dir: Path | None = None) -> tuple[np.ndarray, np.ndarray]:
    return _load_attenuation(str(_data_path(ATTENUATION_FILE, data_dir)))


@lru_cache(maxsize=8)
def _load_si_reactions(path: str) -> tuple[SiReaction, ...]:
    df = _read_csv(Path(path))
    rows = []
    for r in df.itertuples(index=False):
        unit = str(r.unit).strip()
        if unit not in ("MeV", "KeV"):
            raise PhysicsError(f"{path}: unknown energy unit {unit!r}")
        rows.append(SiReaction(
            silicon_isotope=SiIsotope(str(r.target).strip()),
            product=str(r.product).strip(),
            ejected=Particle(str(r.ejected).strip()),
            energy=float(r.energy),
            unit=unit,
        ))
    return tuple(rows)


def load_si_reactions(data_dir: Path | None = None) -> tuple[SiReaction, ...]:
    return _load_si_reactions(str(_data_path(SI_REACTIONS_FILE, data_dir)))


# ═════════════════════════════════════════════
# 붕괴 (decay)
# ═════════════════════════════════════════════

def decay_constant(isotope: Isotope) -> float:
    return math.log(2.0) / isotope.half_life_s


def mean_lifetime(isotope: Isotope) -> float:
    return 1.0 / decay_constant(isotope)


def decay_fraction(isotope: Isotope, elapsed_s: float) -> float:
    """Fraction of the initial activity left after ``elapsed_s`` seconds."""
    if elapsed_s < 0:
        raise PhysicsError(f"elapsed time must be >= 0, got {elapsed_s}")
    return math.pow(0.5, elapsed_s / isotope.half_life_s)


# ═════════════════════════════════════════════
# 차폐 (lead attenuation)
# ═════════════════════════════════════════════

def mu_lead(energy_mev: float, data_dir: Path | None = None) -> float:
    """Linear attenuation coefficient of lead (1/cm), interpolated in log-energy."""
    energies, mu = load_attenuation(data_dir)
    if not energies[0] <= energy_mev <= energies[-1]:
        raise NoCoefficientError(
            f"no lead coefficient for {energy_mev} MeV "
            f"(table covers {energies[0]} to {energies[-1]} MeV)"
        )
    return float(np.interp(math.log(energy_mev), np.log(energies), mu))


def attenuate(line: EmissionLine, lead_thickness_mm: float,
              data_dir: Path | None = None) -> EmissionLine:
    if lead_thickness_mm < 0:
        raise PhysicsError(f"shield thickness must be >= 0, got {lead_thickness_mm}")
    if lead_thickness_mm == 0:
        return line

    if line.particle in CHARGED:
        if lead_thickness_mm >= CHARGED_STOP_MM:
            return replace(line, intensity=0.0)
        return line

    if line.particle is not Particle.GAMMA:
        raise NoCoefficientError(f"no lead coefficient for {line.particle.value} radiation")

    factor = math.exp(-mu_lead(line.energy_mev, data_dir) * lead_thickness_mm / 10.0)
    return replace(line, intensity=line.intensity * factor)


def effective_spectrum(isotope: Isotope, elapsed_s: float, shield: ShieldSpec,
                       data_dir: Path | None = None) -> tuple[EmissionLine, ...]:
    """Lines as seen behind ``shield`` after ``elapsed_s`` seconds of decay."""
    remaining = decay_fraction(isotope, elapsed_s)
    return tuple(
        attenuate(replace(ln, intensity=ln.intensity * remaining),
                  shield.lead_thickness_mm, data_dir)
        for ln in isotope.lines
    )


def transmitted_fraction(isotope: Isotope, elapsed_s: float, lead_thickness_mm: float,
                         qualifies: Callable[[EmissionLine], bool],
                         data_dir: Path | None = None) -> float:
    """Aggregate qualifying intensity behind the shield over the fresh, unshielded one.

    Returns 0.0 when no line qualifies at all.
    """
    fresh = [ln for ln in isotope.lines if qualifies(ln)]
    total = math.fsum(ln.intensity for ln in fresh)
    if total == 0:
        return 0.0
    shield = ShieldSpec(lead_thickness_mm)
    seen = math.fsum(
        eff.intensity
        for ln, eff in zip(isotope.lines, effective_spectrum(isotope, elapsed_s, shield, data_dir))
        if qualifies(ln)
    )
    return seen / total


def distance_factor(distance_cm: float | None,
                    reference_cm: float = config.REFERENCE_DISTANCE_CM) -> float:
    """Inverse-square multiplier relative to the calibrated geometry.

    This is an extrapolation: the only measured geometry is "as close as
    possible" to the source. None keeps the calibrated geometry.
    """
    if distance_cm is None:
        return 1.0
    if distance_cm <= 0:
        raise PhysicsError(f"distance must be positive, got {distance_cm}")
    return (reference_cm / distance_cm) ** 2


# ═════════════════════════════════════════════
# Si + n 반응
# ═════════════════════════════════════════════

def lookup_si_reaction(si: SiIsotope | str, projectile: Particle | str = Particle.NEUTRON,
                       data_dir: Path | None = None) -> tuple[SiReaction, SiReaction]:
    """Both reaction branches (proton, alpha) for a neutron on a silicon isotope."""
    try:
        target = SiIsotope(si)
    except ValueError:
        raise UnsupportedTargetError(f"{si!r} is not a silicon isotope (Si28/Si29/Si30)") from None
    if projectile not in (Particle.NEUTRON, Particle.NEUTRON.value):
        raise UnsupportedTargetError(f"only neutron reactions are tabulated, got {projectile!r}")

    rows = [r for r in load_si_reactions(data_dir) if r.silicon_isotope is target]
    rows.sort(key=lambda r: 0 if r.ejected is Particle.PROTON else 1)
    if len(rows) != 2:
        raise PhysicsError(f"reaction table has {len(rows)} rows for {target.value}, expected 2")
    return rows[0], rows[1]
