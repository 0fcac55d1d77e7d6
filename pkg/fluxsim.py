# =========================================================
# fluxsim.py - calibrated SEU generator
# ---------------------------------------------------------
# source + device + pattern + duration  →  reproducible FlipEvent stream
#
#   1) calibrate()           Poisson MLE rates from exposure observations
#   2) effective_rate()      energy gating, shielding, decay, ambient
#   3) simulate_exposure()   homogeneous Poisson process, seeded
#
# Rates are "flips per second per GiB" at the calibrated geometry
# (DUT as close as possible to the source, < 5 cm).
# =========================================================

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np
import pandas as pd
from scipy import stats
from tqdm import tqdm

import config
from errors import FalloutError
from memmodel import (
    FlipEvent,
    MemoryDevice,
    TestPattern,
    make_device,
    make_flip_event,
)
from physics import NO_SHIELD, ShieldSpec, distance_factor, get_isotope, transmitted_fraction

log = logging.getLogger("FLUXSIM")

GIB = config.GIB
REFERENCE_PATTERN = 0xFF
SECONDS_PER_DAY = 86_400.0
DEFAULT_AMBIENT_RATE = config.AMBIENT_RATE_PER_DAY_PER_GIB / SECONDS_PER_DAY
CALIBRATION_FILE = "calibration_t41p.csv"


class CalibrationError(FalloutError):
    pass


class UncalibratedIsotopeError(FalloutError):
    pass


# ═════════════════════════════════════════════
# 관측치 & 모델
# ═════════════════════════════════════════════

@dataclass(frozen=True)
class Observation:
    isotope: str
    pattern: TestPattern
    duration_s: float
    region_gib: float
    flip_count: int
    device: str = ""

    def __post_init__(self):
        if not self.duration_s > 0:
            raise CalibrationError(f"{self.isotope} {self.pattern}: duration must be positive")
        if not self.region_gib > 0:
            raise CalibrationError(f"{self.isotope} {self.pattern}: region must be positive")
        if self.flip_count < 0:
            raise CalibrationError(f"{self.isotope} {self.pattern}: negative flip count")

    @property
    def exposure_gib_s(self) -> float:
        return self.duration_s * self.region_gib


def load_observations(path: Path | None = None) -> list[Observation]:
    path = Path(path or config.DATA_DIR / CALIBRATION_FILE)
    try:
        df = pd.read_csv(path)
    except FileNotFoundError:
        raise CalibrationError(f"calibration file missing: {path}") from None
    df.columns = df.columns.str.strip()
    return [
        Observation(
            isotope=str(r["isotope"]).strip(),
            pattern=TestPattern.parse(r["pattern"]),
            duration_s=float(r["duration_s"]),
            region_gib=float(r["region_gib"]),
            flip_count=int(r["flip_count"]),
            device=str(r.get("device", "")).strip(),
        )
        for r in df.to_dict("records")
    ]


@dataclass(frozen=True)
class FlipRateModel:
    base_rate_per_s_per_gib: dict[str, float]
    pattern_factors: dict[str, dict[int, float]]
    ambient_rate_per_s_per_gib: float = DEFAULT_AMBIENT_RATE
    flagged: tuple[str, ...] = ()

    def __post_init__(self):
        if self.ambient_rate_per_s_per_gib < 0:
            raise CalibrationError("ambient rate must be >= 0")
        for iso, rate in self.base_rate_per_s_per_gib.items():
            if rate < 0:
                raise CalibrationError(f"{iso}: negative rate")
        for iso, factors in self.pattern_factors.items():
            if any(f < 0 for f in factors.values()):
                raise CalibrationError(f"{iso}: negative pattern factor")
            if REFERENCE_PATTERN in factors and factors[REFERENCE_PATTERN] != 1.0:
                raise CalibrationError(f"{iso}: factors must be normalised so 0xFF is 1.0")

    def base_rate(self, isotope: str) -> float:
        if isotope not in self.base_rate_per_s_per_gib:
            raise UncalibratedIsotopeError(
                f"no calibration for {isotope!r}; calibrated: "
                f"{', '.join(sorted(self.base_rate_per_s_per_gib)) or 'none'}"
            )
        return self.base_rate_per_s_per_gib[isotope]

    def pattern_factor(self, isotope: str, fill_byte: int) -> float:
        factors = self.pattern_factors.get(isotope, {})
        if fill_byte not in factors:
            log.warning("%s: pattern 0x%02X was never observed, using factor 1.0", isotope, fill_byte)
            return 1.0
        return factors[fill_byte]

    def to_record(self) -> dict:
        return {
            "base_rate_per_s_per_gib": dict(sorted(self.base_rate_per_s_per_gib.items())),
            "pattern_factors": {
                iso: {f"0x{b:02X}": v for b, v in sorted(factors.items())}
                for iso, factors in sorted(self.pattern_factors.items())
            },
            "ambient_rate_per_s_per_gib": self.ambient_rate_per_s_per_gib,
            "flagged": list(self.flagged),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "FlipRateModel":
        return cls(
            base_rate_per_s_per_gib={k: float(v) for k, v in rec["base_rate_per_s_per_gib"].items()},
            pattern_factors={
                iso: {int(b, 16): float(v) for b, v in factors.items()}
                for iso, factors in rec["pattern_factors"].items()
            },
            ambient_rate_per_s_per_gib=float(rec.get("ambient_rate_per_s_per_gib", DEFAULT_AMBIENT_RATE)),
            flagged=tuple(rec.get("flagged", ())),
        )


def _poisson_rate(counts: pd.Series, exposures: pd.Series) -> float:
    # sorted fsum keeps the result independent of input order
    exposure = math.fsum(sorted(exposures))
    return float(counts.sum()) / exposure


def calibrate(observations: Iterable[Observation],
              ambient_rate_per_s_per_gib: float = DEFAULT_AMBIENT_RATE) -> FlipRateModel:
    """Maximum-likelihood Poisson rates per isotope plus per-pattern factors.

    The base rate comes from the 0xFF rows; each pattern's factor is its
    own MLE rate divided by the 0xFF rate.
    """
    rows = [
        {
            "isotope": o.isotope,
            "fill": o.pattern.fill_byte,
            "count": o.flip_count,
            "exposure": o.exposure_gib_s,
        }
        for o in observations
    ]
    if not rows:
        raise CalibrationError("no observations to calibrate from")
    df = pd.DataFrame(rows).sort_values(["isotope", "fill", "count", "exposure"], kind="mergesort")

    base, factors, flagged = {}, {}, []
    for iso, grp in df.groupby("isotope", sort=True):
        if grp["count"].sum() == 0:
            log.warning("%s: zero flips over %.0f GiB·s, calibrating to rate 0",
                        iso, math.fsum(grp["exposure"]))
            base[iso] = 0.0
            factors[iso] = {int(fill): 1.0 for fill in sorted(grp["fill"].unique())}
            factors[iso][REFERENCE_PATTERN] = 1.0
            flagged.append(iso)
            continue

        ref = grp[grp["fill"] == REFERENCE_PATTERN]
        if ref.empty:
            log.warning("%s: no 0xFF observation, pooling all patterns for the base rate", iso)
            ref = grp
        ref_rate = _poisson_rate(ref["count"], ref["exposure"])
        base[iso] = ref_rate

        iso_factors = {}
        for fill, pgrp in grp.groupby("fill", sort=True):
            rate = _poisson_rate(pgrp["count"], pgrp["exposure"])
            iso_factors[int(fill)] = rate / ref_rate if ref_rate > 0 else 1.0
        iso_factors[REFERENCE_PATTERN] = 1.0
        factors[iso] = iso_factors

        log.info("%s: base rate %.6g /s/GiB, factors %s", iso, ref_rate,
                 {f"0x{b:02X}": round(v, 4) for b, v in sorted(iso_factors.items())})

    return FlipRateModel(base, factors, ambient_rate_per_s_per_gib, tuple(flagged))


def aggregate_seconds_per_flip(observations: Iterable[Observation], isotope: str) -> float:
    """Mean seconds between flips pooled over every pattern of one isotope."""
    obs = [o for o in observations if o.isotope == isotope]
    flips = sum(o.flip_count for o in obs)
    if flips == 0:
        return math.inf
    return math.fsum(o.duration_s for o in obs) / flips


def rate_upper_limit(count: int, exposure_gib_s: float, cl: float = 0.95) -> float:
    """One-sided Poisson upper limit on the rate (/s/GiB) after ``count`` flips."""
    if exposure_gib_s <= 0:
        raise CalibrationError("exposure must be positive")
    return stats.chi2.ppf(cl, 2 * (count + 1)) / 2.0 / exposure_gib_s


# ═════════════════════════════════════════════
# 노출 계획 & 유효 선량률
# ═════════════════════════════════════════════

@dataclass(frozen=True)
class ExposurePlan:
    isotope: str | None           # None = ambient background only
    device: MemoryDevice
    pattern: TestPattern
    duration_s: float
    seed: int = config.DEFAULT_SEED
    shield: ShieldSpec = field(default=NO_SHIELD)
    region_bytes: int | None = None
    include_ambient: bool = False
    source_age_s: float = 0.0
    distance_cm: float | None = None

    def __post_init__(self):
        if not self.duration_s > 0:
            raise CalibrationError(f"exposure duration must be positive, got {self.duration_s}")
        if not 0 <= self.seed < 2 ** 64:
            raise CalibrationError(f"seed must fit in 64 bits, got {self.seed}")
        if self.source_age_s < 0:
            raise CalibrationError("source age must be >= 0")
        if self.region_bytes is not None and not 0 < self.region_bytes <= self.device.capacity_bytes:
            raise CalibrationError(
                f"region {self.region_bytes} must be in (0, {self.device.capacity_bytes}]"
            )

    @property
    def region(self) -> int:
        return self.region_bytes or self.device.test_region_bytes

    @property
    def ambient(self) -> bool:
        return self.isotope is None or self.include_ambient

    def to_record(self) -> dict:
        d = self.device
        return {
            "isotope": self.isotope,
            "device": {
                "label": d.label,
                "capacity_bytes": d.capacity_bytes,
                "test_region_bytes": d.test_region_bytes,
                "era": d.era.value,
                "susceptibility_threshold_mev": d.susceptibility_threshold_mev,
                "refresh_interval_ms": d.refresh_interval_ms,
            },
            "pattern": str(self.pattern),
            "duration_s": self.duration_s,
            "seed": self.seed,
            "shield": {
                "lead_thickness_mm": self.shield.lead_thickness_mm,
                "covered_start": self.shield.covered_start,
                "covered_end": self.shield.covered_end,
            },
            "region_bytes": self.region,
            "include_ambient": self.include_ambient,
            "source_age_s": self.source_age_s,
            "distance_cm": self.distance_cm,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ExposurePlan":
        return cls(
            isotope=rec["isotope"],
            device=make_device(**rec["device"]),
            pattern=TestPattern.parse(rec["pattern"]),
            duration_s=float(rec["duration_s"]),
            seed=int(rec["seed"]),
            shield=ShieldSpec(**rec["shield"]),
            region_bytes=int(rec["region_bytes"]),
            include_ambient=bool(rec["include_ambient"]),
            source_age_s=float(rec["source_age_s"]),
            distance_cm=rec["distance_cm"],
        )


@dataclass(frozen=True)
class _Segment:
    start: int
    end: int
    rate_per_gib: float  # flips/s/GiB inside [start, end)

    @property
    def rate(self) -> float:
        return self.rate_per_gib * (self.end - self.start) / GIB


def _source_rate_per_gib(model: FlipRateModel, plan: ExposurePlan,
                         data_dir: Path | None) -> tuple[float, float]:
    """(open, shielded) source rates per GiB; both 0 when energy-gated."""
    if plan.isotope is None:
        return 0.0, 0.0
    iso = get_isotope(plan.isotope, data_dir)
    qualifies = plan.device.is_susceptible
    if not any(qualifies(ln) for ln in iso.lines):
        log.debug("%s: no line reaches %.2f MeV on a %s device", iso.name,
                  plan.device.susceptibility_threshold_mev, plan.device.era.value)
        return 0.0, 0.0

    rate = (model.base_rate(iso.name)
            * model.pattern_factor(iso.name, plan.pattern.fill_byte)
            * distance_factor(plan.distance_cm))
    open_t = transmitted_fraction(iso, plan.source_age_s, 0.0, qualifies, data_dir)
    shield_t = transmitted_fraction(iso, plan.source_age_s, plan.shield.lead_thickness_mm,
                                    qualifies, data_dir)
    return rate * open_t, rate * shield_t


def _segments(model: FlipRateModel, plan: ExposurePlan,
              data_dir: Path | None = None) -> list[_Segment]:
    region = plan.region
    open_rate, shield_rate = _source_rate_per_gib(model, plan, data_dir)
    ambient = model.ambient_rate_per_s_per_gib if plan.ambient else 0.0

    shield = plan.shield
    if shield.lead_thickness_mm == 0 or shield.covered_bytes(region) == 0:
        pieces = [(0, region, open_rate)]
    elif shield.whole_device:
        pieces = [(0, region, shield_rate)]
    else:
        lo, hi = min(shield.covered_start, region), min(shield.covered_end, region)
        pieces = [(0, lo, open_rate), (lo, hi, shield_rate), (hi, region, open_rate)]

    return [_Segment(s, e, r + ambient) for s, e, r in pieces if e > s and r + ambient > 0]


def effective_rate(model: FlipRateModel, plan: ExposurePlan, data_dir: Path | None = None) -> float:
    """Expected flips per second over the plan's whole region."""
    return math.fsum(seg.rate for seg in _segments(model, plan, data_dir))


def expected_flip_count(model: FlipRateModel, plan: ExposurePlan, data_dir: Path | None = None) -> float:
    return effective_rate(model, plan, data_dir) * plan.duration_s


def expected_seconds_per_flip(model: FlipRateModel, plan: ExposurePlan,
                              data_dir: Path | None = None) -> float:
    rate = effective_rate(model, plan, data_dir)
    return 1.0 / rate if rate > 0 else math.inf


# ═════════════════════════════════════════════
# 시뮬레이션
# ═════════════════════════════════════════════

def simulate_exposure(plan: ExposurePlan, model: FlipRateModel,
                      data_dir: Path | None = None) -> list[FlipEvent]:
    """Seeded homogeneous Poisson process of single-bit upsets, sorted by time."""
    segments = _segments(model, plan, data_dir)
    if not segments:
        return []

    rng = np.random.default_rng(plan.seed)
    rates = np.array([seg.rate for seg in segments])
    total = float(rates.sum())

    n = int(rng.poisson(total * plan.duration_s))
    times = np.sort(rng.uniform(0.0, plan.duration_s, n))
    which = rng.choice(len(segments), size=n, p=rates / total)
    starts = np.array([seg.start for seg in segments], dtype=np.int64)[which]
    spans = np.array([seg.end - seg.start for seg in segments], dtype=np.int64)[which]
    offsets = starts + rng.integers(0, spans, size=n) if n else starts
    bits = rng.integers(0, 8, size=n)

    capacity = plan.device.capacity_bytes
    return [
        make_flip_event(plan.pattern, float(t), int(o), int(b), capacity)
        for t, o, b in zip(times, offsets, bits)
    ]


def simulate_counts(plan: ExposurePlan, model: FlipRateModel, seeds: Iterable[int],
                    data_dir: Path | None = None, progress: bool = False) -> np.ndarray:
    """Flip counts of the same plan over many seeds."""
    seeds = list(seeds)
    it = tqdm(seeds, desc="exposures", disable=not progress)
    return np.array(
        [len(simulate_exposure(replace(plan, seed=s), model, data_dir)) for s in it],
        dtype=np.int64,
    )
