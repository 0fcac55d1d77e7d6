"""
Memory device model shared by every other module.

Device presets, test patterns, the canonical FlipEvent record and the
MemoryRegion providers the scanner runs on (a numpy buffer for simulated
sessions, a locked anonymous mapping for live scans).
"""

import ctypes
import ctypes.util
import errno
import logging
import mmap
import os
from abc import ABC, abstractmethod
from dataclasses import dataclass, fields, replace
from enum import Enum
from functools import lru_cache
from pathlib import Path

import numpy as np
import pandas as pd

import config
from errors import FalloutError
from physics import EmissionLine, Particle

log = logging.getLogger("MEMMODEL")

DEVICES_FILE = "devices.csv"

LEGACY_MAX_THRESHOLD_MEV = 1.4
MODERN_MIN_THRESHOLD_MEV = 5.0
MODERN_PARTICLES = frozenset({Particle.NEUTRON, Particle.PROTON})


class DeviceError(FalloutError):
    pass


class FlipEventError(FalloutError):
    pass


class RegionError(FalloutError):
    """Allocation or page-lock failure; ``hint`` says what privilege is missing."""

    def __init__(self, message: str, hint: str = ""):
        super().__init__(message)
        self.hint = hint


class Era(str, Enum):
    LEGACY = "legacy"   # ~2003 DRAM
    MODERN = "modern"   # 2018 and later


class Direction(str, Enum):
    ONE_TO_ZERO = "one_to_zero"
    ZERO_TO_ONE = "zero_to_one"


class Detection(str, Enum):
    PENDING = "pending"
    DETECTED = "detected"
    MISSED = "missed"


# ─────────────────────────────────────────────
# Devices
# ─────────────────────────────────────────────

@dataclass(frozen=True)
class MemoryDevice:
    capacity_bytes: int
    era: Era
    susceptibility_threshold_mev: float
    refresh_interval_ms: float
    label: str = ""
    test_region_bytes: int | None = None

    def __post_init__(self):
        try:
            object.__setattr__(self, "era", Era(self.era))
        except ValueError:
            raise DeviceError(f"unknown era {self.era!r}") from None
        if self.capacity_bytes <= 0:
            raise DeviceError(f"capacity must be positive, got {self.capacity_bytes}")
        if not self.susceptibility_threshold_mev > 0:
            raise DeviceError("susceptibility threshold must be positive")
        if not self.refresh_interval_ms > 0:
            raise DeviceError("refresh interval must be positive")
        if self.era is Era.LEGACY and self.susceptibility_threshold_mev > LEGACY_MAX_THRESHOLD_MEV:
            raise DeviceError(
                f"legacy threshold {self.susceptibility_threshold_mev} MeV exceeds "
                f"{LEGACY_MAX_THRESHOLD_MEV} MeV"
            )
        if self.era is Era.MODERN and self.susceptibility_threshold_mev < MODERN_MIN_THRESHOLD_MEV:
            raise DeviceError(
                f"modern threshold {self.susceptibility_threshold_mev} MeV is below "
                f"{MODERN_MIN_THRESHOLD_MEV} MeV"
            )
        if self.test_region_bytes is None:
            object.__setattr__(self, "test_region_bytes", self.capacity_bytes)
        if not 0 < self.test_region_bytes <= self.capacity_bytes:
            raise DeviceError(
                f"test region {self.test_region_bytes} must be in (0, {self.capacity_bytes}]"
            )

    @property
    def susceptible_particles(self) -> frozenset[Particle]:
        if self.era is Era.MODERN:
            return MODERN_PARTICLES
        return frozenset(Particle)

    def is_susceptible(self, line: EmissionLine) -> bool:
        """Step threshold: the line flips bits iff its particle class and energy qualify."""
        return (line.particle in self.susceptible_particles
                and line.energy_mev >= self.susceptibility_threshold_mev)


@lru_cache(maxsize=8)
def _load_presets(path: str) -> dict[str, dict]:
    try:
        df = pd.read_csv(path)
    except FileNotFoundError:
        raise DeviceError(f"device preset file missing: {path}") from None
    df.columns = df.columns.str.strip()
    return {
        r["preset"]: {
            "label": r["label"],
            "capacity_bytes": int(r["capacity_bytes"]),
            "test_region_bytes": int(r["test_region_bytes"]),
            "era": r["era"],
            "susceptibility_threshold_mev": float(r["susceptibility_threshold_mev"]),
            "refresh_interval_ms": float(r["refresh_interval_ms"]),
        }
        for r in df.to_dict("records")
    }


def list_presets(data_dir: Path | None = None) -> list[str]:
    return sorted(_load_presets(str(Path(data_dir or config.DATA_DIR) / DEVICES_FILE)))


def make_device(preset: str | None = None, data_dir: Path | None = None, **custom) -> MemoryDevice:
    """Build a device from a named preset, custom fields, or a preset with overrides."""
    allowed = {f.name for f in fields(MemoryDevice)}
    unknown = set(custom) - allowed
    if unknown:
        raise DeviceError(f"unknown device fields: {', '.join(sorted(unknown))}")

    params: dict = {}
    if preset is not None:
        presets = _load_presets(str(Path(data_dir or config.DATA_DIR) / DEVICES_FILE))
        if preset not in presets:
            raise DeviceError(f"unknown device preset {preset!r}; known: {', '.join(sorted(presets))}")
        params.update(presets[preset])
    params.update(custom)

    missing = {"capacity_bytes", "era", "susceptibility_threshold_mev", "refresh_interval_ms"} - set(params)
    if missing:
        raise DeviceError(f"custom device is missing: {', '.join(sorted(missing))}")
    try:
        return MemoryDevice(**params)
    except TypeError as e:
        raise DeviceError(str(e)) from None


# ─────────────────────────────────────────────
# Patterns and flip events
# ─────────────────────────────────────────────

@dataclass(frozen=True)
class TestPattern:
    fill_byte: int

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if not 0 <= self.fill_byte <= 0xFF:
            raise FlipEventError(f"fill byte must be 0..255, got {self.fill_byte}")

    @classmethod
    def parse(cls, text: "str | int") -> "TestPattern":
        if isinstance(text, int):
            return cls(text)
        try:
            return cls(int(str(text).strip(), 0))
        except ValueError:
            raise FlipEventError(f"cannot parse pattern {text!r}") from None

    def bit(self, bit_index: int) -> int:
        return (self.fill_byte >> bit_index) & 1

    def __str__(self):
        return f"0x{self.fill_byte:02X}"


ALL_ONES = TestPattern(0xFF)
ALL_ZEROS = TestPattern(0x00)
ASCII_A = TestPattern(0x41)
CANONICAL_PATTERNS = (ALL_ONES, ALL_ZEROS, ASCII_A)


def expected_direction(pattern: TestPattern, bit_index: int) -> Direction:
    if not 0 <= bit_index <= 7:
        raise FlipEventError(f"bit index must be 0..7, got {bit_index}")
    return Direction.ONE_TO_ZERO if pattern.bit(bit_index) else Direction.ZERO_TO_ONE


@dataclass(frozen=True)
class FlipEvent:
    t_s: float
    byte_offset: int
    bit_index: int
    direction: Direction
    detected: Detection = Detection.PENDING
    detected_at_s: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "direction", Direction(self.direction))
        object.__setattr__(self, "detected", Detection(self.detected))
        if not self.t_s >= 0:
            raise FlipEventError(f"event time must be >= 0, got {self.t_s}")
        if self.byte_offset < 0:
            raise FlipEventError(f"byte offset must be >= 0, got {self.byte_offset}")
        if not 0 <= self.bit_index <= 7:
            raise FlipEventError(f"bit index must be 0..7, got {self.bit_index}")

    def with_status(self, detected: Detection, at_s: float | None = None) -> "FlipEvent":
        return replace(self, detected=detected, detected_at_s=at_s)

    def to_record(self) -> dict:
        rec = {
            "t_s": self.t_s,
            "byte_offset": self.byte_offset,
            "bit_index": self.bit_index,
            "direction": self.direction.value,
            "detected": self.detected.value,
        }
        if self.detected_at_s is not None:
            rec["detected_at_s"] = self.detected_at_s
        return rec


def make_flip_event(pattern: TestPattern, t_s: float, byte_offset: int, bit_index: int,
                    capacity_bytes: int, direction: Direction | str | None = None,
                    detected: Detection | str = Detection.PENDING,
                    detected_at_s: float | None = None) -> FlipEvent:
    """Public constructor: checks the offset against the device and the
    direction against the pattern bit."""
    if not 0 <= byte_offset < capacity_bytes:
        raise FlipEventError(f"byte offset {byte_offset} outside device of {capacity_bytes} bytes")
    expected = expected_direction(pattern, bit_index)
    if direction is not None and Direction(direction) is not expected:
        raise FlipEventError(
            f"{Direction(direction).value} is impossible for bit {bit_index} of pattern {pattern}"
        )
    return FlipEvent(t_s, byte_offset, bit_index, expected, Detection(detected), detected_at_s)


def flip_event_from_record(rec: dict, pattern: TestPattern, capacity_bytes: int) -> FlipEvent:
    try:
        return make_flip_event(
            pattern,
            float(rec["t_s"]),
            int(rec["byte_offset"]),
            int(rec["bit_index"]),
            capacity_bytes,
            direction=rec.get("direction"),
            detected=rec.get("detected", Detection.PENDING.value),
            detected_at_s=rec.get("detected_at_s"),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise FlipEventError(f"malformed flip record: {e}") from None


# ─────────────────────────────────────────────
# Memory regions
# ─────────────────────────────────────────────

class Backing(str, Enum):
    REAL_BUFFER = "real_buffer"
    SIMULATED = "simulated"


class MemoryRegion(ABC):
    """Byte-addressable region. Single writer; readers only between writes."""

    backing: Backing

    @property
    @abstractmethod
    def length_bytes(self) -> int: ...

    @abstractmethod
    def view(self) -> np.ndarray:
        """Writable uint8 view of the whole region."""

    def _check(self, offset: int):
        if not 0 <= offset < self.length_bytes:
            raise RegionError(f"offset {offset} outside region of {self.length_bytes} bytes")

    def read(self, offset: int) -> int:
        self._check(offset)
        return int(self.view()[offset])

    def write(self, offset: int, value: int):
        self._check(offset)
        self.view()[offset] = value & 0xFF

    def flip_bit(self, offset: int, bit_index: int):
        self._check(offset)
        self.view()[offset] ^= np.uint8(1 << bit_index)

    def close(self):
        pass

    def __len__(self):
        return self.length_bytes

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class SimulatedRegion(MemoryRegion):
    backing = Backing.SIMULATED

    def __init__(self, length_bytes: int):
        if length_bytes < 0:
            raise RegionError(f"region length must be >= 0, got {length_bytes}")
        self._buf = np.zeros(length_bytes, dtype=np.uint8)

    @property
    def length_bytes(self) -> int:
        return len(self._buf)

    def view(self) -> np.ndarray:
        return self._buf


_LOCK_HINT = (
    "page locking needs a larger RLIMIT_MEMLOCK (`ulimit -l`) or CAP_IPC_LOCK; "
    "run with lock_pages: false to scan unlocked memory"
)


def _physical_memory_bytes() -> int | None:
    try:
        return os.sysconf("SC_PHYS_PAGES") * os.sysconf("SC_PAGE_SIZE")
    except (ValueError, OSError, AttributeError):
        return None


class BufferRegion(MemoryRegion):
    """Anonymous private mapping of real RAM, optionally mlock'ed."""

    backing = Backing.REAL_BUFFER

    def __init__(self, length_bytes: int, lock_pages: bool = True):
        if length_bytes < 0:
            raise RegionError(f"region length must be >= 0, got {length_bytes}")
        phys = _physical_memory_bytes()
        if phys is not None and length_bytes > phys:
            raise RegionError(
                f"cannot allocate {length_bytes} bytes: host has {phys} bytes of RAM",
                hint="use a smaller region_bytes",
            )
        self._length = length_bytes
        self._locked = False
        self._mm = None
        if length_bytes == 0:
            self._view = np.zeros(0, dtype=np.uint8)
            return
        try:
            self._mm = mmap.mmap(-1, length_bytes)
        except (OSError, MemoryError, ValueError) as e:
            raise RegionError(f"cannot allocate {length_bytes} bytes: {e}",
                              hint="free memory or use a smaller region_bytes") from None
        self._view = np.frombuffer(self._mm, dtype=np.uint8)
        if lock_pages:
            self._lock()

    def _libc(self):
        name = ctypes.util.find_library("c")
        if name is None:
            raise RegionError("libc not found, cannot lock pages", hint=_LOCK_HINT)
        return ctypes.CDLL(name, use_errno=True)

    def _lock(self):
        libc = self._libc()
        addr = ctypes.c_void_p(self._view.ctypes.data)
        if libc.mlock(addr, ctypes.c_size_t(self._length)) != 0:
            err = ctypes.get_errno()
            self.close()
            raise RegionError(f"mlock of {self._length} bytes failed: {errno.errorcode.get(err, err)}",
                              hint=_LOCK_HINT)
        self._locked = True
        log.info("Locked %d bytes of RAM", self._length)

    @property
    def length_bytes(self) -> int:
        return self._length

    def view(self) -> np.ndarray:
        if self._view is None:
            raise RegionError("region already closed")
        return self._view

    def close(self):
        if self._view is None:
            return
        if self._locked:
            self._libc().munlock(ctypes.c_void_p(self._view.ctypes.data), ctypes.c_size_t(self._length))
            self._locked = False
        self._view = None
        if self._mm is not None:
            self._mm.close()
            self._mm = None
