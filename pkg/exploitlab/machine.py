# =========================================================
# exploitlab/machine.py - toy physical memory + page tables
# ---------------------------------------------------------
# 16 MiB of 4 KiB frames, 8-byte little-endian PTEs:
#
#   bit 0        present
#   bit 1        writable
#   bit 2        user_accessible
#   bits 12..51  frame number
#
# A ToyMachine is a value: one shared base image plus the set of
# (byte, bit) positions currently inverted. inject_flip() returns a new
# machine; nothing mutates.
# =========================================================

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum, IntFlag

import numpy as np

from errors import FalloutError

log = logging.getLogger("EXPLOIT")

PAGE_SIZE = 4096
PTE_SIZE = 8
PTES_PER_PAGE = PAGE_SIZE // PTE_SIZE
PHYS_BYTES = 16 << 20
N_FRAMES = PHYS_BYTES // PAGE_SIZE

FRAME_SHIFT = 12
FRAME_BITS = 40
FRAME_MASK = (1 << FRAME_BITS) - 1

# Only the permission bits and the low frame bits can turn a valid entry into
# a mapping of another valid frame; any higher frame bit leaves physical memory.
ESCALATION_BITS = (0, 1, 2, *range(FRAME_SHIFT, FRAME_SHIFT + (N_FRAMES - 1).bit_length()))


class FixtureError(FalloutError):
    pass


class AddressError(FalloutError):
    pass


class PteFlag(IntFlag):
    PRESENT = 1 << 0
    WRITABLE = 1 << 1
    USER = 1 << 2


class PageTag(IntEnum):
    UNALLOCATED = 0
    PT_PAGE = 1
    CODE_PAGE = 2
    DATA_PAGE = 3
    FLAG_PAGE = 4


class Outcome(str, Enum):
    NO_EFFECT = "no_effect"
    CRASH_SEGFAULT = "crash_segfault"
    PRIVILEGE_ESCALATION = "privilege_escalation"
    SILENT_CORRUPTION = "silent_corruption"


# strongest first
OUTCOME_PRIORITY = (
    Outcome.PRIVILEGE_ESCALATION,
    Outcome.CRASH_SEGFAULT,
    Outcome.SILENT_CORRUPTION,
    Outcome.NO_EFFECT,
)


class Fixture(str, Enum):
    SUID_PING = "suid_ping"
    BARE_METAL_FIRMWARE = "bare_metal_firmware"


# ─────────────────────────────────────────────
# PTE codec
# ─────────────────────────────────────────────

@dataclass(frozen=True)
class Pte:
    frame_number: int
    present: bool
    writable: bool
    user_accessible: bool

    @property
    def valid_frame(self) -> bool:
        return 0 <= self.frame_number < N_FRAMES


def encode_pte(frame_number: int, present: bool = True, writable: bool = False,
               user_accessible: bool = False) -> int:
    if not 0 <= frame_number <= FRAME_MASK:
        raise FixtureError(f"frame number {frame_number} does not fit in {FRAME_BITS} bits")
    flags = PteFlag(0)
    if present:
        flags |= PteFlag.PRESENT
    if writable:
        flags |= PteFlag.WRITABLE
    if user_accessible:
        flags |= PteFlag.USER
    return (frame_number << FRAME_SHIFT) | int(flags)


def decode_pte(value: int) -> Pte:
    return Pte(
        frame_number=(value >> FRAME_SHIFT) & FRAME_MASK,
        present=bool(value & PteFlag.PRESENT),
        writable=bool(value & PteFlag.WRITABLE),
        user_accessible=bool(value & PteFlag.USER),
    )


# ─────────────────────────────────────────────
# Machine
# ─────────────────────────────────────────────

@dataclass(frozen=True)
class Process:
    pid: int
    name: str
    privileged: bool
    page_table_frames: tuple[int, ...] = ()


@dataclass(frozen=True, eq=False)
class ToyMachine:
    fixture: Fixture
    image: np.ndarray                 # base bytes, read-only, shared between copies
    phys_pages: np.ndarray            # PageTag per frame
    processes: tuple[Process, ...]
    spray_fraction: float = 0.0
    flag_offset: int | None = None
    flips: frozenset[tuple[int, int]] = field(default=frozenset())

    @property
    def size_bytes(self) -> int:
        return int(self.image.size)

    @property
    def target(self) -> Process:
        return next(p for p in self.processes if p.privileged)

    def tag(self, byte_offset: int) -> PageTag:
        return PageTag(int(self.phys_pages[byte_offset // PAGE_SIZE]))

    def base_byte(self, byte_offset: int) -> int:
        return int(self.image[byte_offset])

    def byte(self, byte_offset: int) -> int:
        value = int(self.image[byte_offset])
        for b, bit in self.flips:
            if b == byte_offset:
                value ^= 1 << bit
        return value

    def _word(self, offset: int, size: int, flipped: bool) -> int:
        raw = bytearray(self.image[offset:offset + size].tobytes())
        if flipped:
            for b, bit in self.flips:
                if offset <= b < offset + size:
                    raw[b - offset] ^= 1 << bit
        return int.from_bytes(raw, "little")

    def read_pte(self, frame: int, index: int, flipped: bool = True) -> Pte:
        return decode_pte(self._word(frame * PAGE_SIZE + index * PTE_SIZE, PTE_SIZE, flipped))

    def page_table(self, pid: int) -> list[Pte]:
        """Every present entry of the process's page-table pages."""
        proc = next((p for p in self.processes if p.pid == pid), None)
        if proc is None:
            raise FixtureError(f"no process with pid {pid}")
        return [pte for frame in proc.page_table_frames for i in range(PTES_PER_PAGE)
                if (pte := self.read_pte(frame, i)).present]

    def to_bytes(self) -> bytes:
        out = self.image.copy()
        for b, bit in self.flips:
            out[b] ^= np.uint8(1 << bit)
        return out.tobytes()

    def __eq__(self, other):
        if not isinstance(other, ToyMachine):
            return NotImplemented
        return (self.fixture == other.fixture and self.flips == other.flips
                and (self.image is other.image or np.array_equal(self.image, other.image)))

    def __hash__(self):
        return hash((self.fixture, self.flips, self.size_bytes))


# ═════════════════════════════════════════════
# Fixtures
# ═════════════════════════════════════════════

# suid_ping layout (frame numbers)
PING_PT_FRAME = 1
ATTACKER_PT_FRAME = 2
PING_CODE_FRAMES = range(16, 32)
PING_DATA_FRAMES = range(32, 48)
SHARED_DATA_FRAME = 2048
SPRAY_START_FRAME = SHARED_DATA_FRAME + 1
RESERVED_FRAMES = frozenset({0})

# bare_metal_firmware layout
FIRMWARE_CODE_FRAMES = range(0, 256)
FIRMWARE_DATA_FRAMES = range(256, 512)
FLAG_FRAME = 512
FLAG_WORD_OFFSET = FLAG_FRAME * PAGE_SIZE + 0x40
UNLOCK_BIT = 0


def _code_bytes(frames: range) -> np.ndarray:
    # deterministic stand-in for an instruction stream
    n = len(frames) * PAGE_SIZE
    return ((np.arange(n, dtype=np.uint32) * 37 + 0x90) & 0xFF).astype(np.uint8)


def _write_ptes(image: np.ndarray, frame: int, entries: list[tuple[int, int]]):
    words = image[frame * PAGE_SIZE:(frame + 1) * PAGE_SIZE].view("<u8")
    for index, value in entries:
        words[index] = value


def _spray_frames(base: set[int], fraction: float) -> list[int]:
    """Frames sprayed with page tables: upward from the shared frame, then wrapping low."""
    allocatable = [f for f in range(N_FRAMES) if f not in base]
    count = math.ceil(fraction * len(allocatable))
    order = [f for f in allocatable if f >= SPRAY_START_FRAME] + \
            [f for f in allocatable if f < SPRAY_START_FRAME]
    return order[:count]


def _suid_ping(spray_fraction: float) -> ToyMachine:
    image = np.zeros(PHYS_BYTES, dtype=np.uint8)
    tags = np.full(N_FRAMES, PageTag.UNALLOCATED, dtype=np.uint8)

    tags[[PING_PT_FRAME, ATTACKER_PT_FRAME]] = PageTag.PT_PAGE
    tags[list(PING_CODE_FRAMES)] = PageTag.CODE_PAGE
    tags[list(PING_DATA_FRAMES)] = PageTag.DATA_PAGE
    tags[SHARED_DATA_FRAME] = PageTag.DATA_PAGE

    code_lo = PING_CODE_FRAMES.start * PAGE_SIZE
    image[code_lo:code_lo + len(PING_CODE_FRAMES) * PAGE_SIZE] = _code_bytes(PING_CODE_FRAMES)

    ping_entries = [(i, encode_pte(f, user_accessible=True))
                    for i, f in enumerate(PING_CODE_FRAMES)]
    ping_entries += [(len(PING_CODE_FRAMES) + i, encode_pte(f, writable=True, user_accessible=True))
                     for i, f in enumerate(PING_DATA_FRAMES)]
    _write_ptes(image, PING_PT_FRAME, ping_entries)

    shared = encode_pte(SHARED_DATA_FRAME, writable=True, user_accessible=True)
    _write_ptes(image, ATTACKER_PT_FRAME, [(0, shared)])

    base = {PING_PT_FRAME, ATTACKER_PT_FRAME, SHARED_DATA_FRAME,
            *PING_CODE_FRAMES, *PING_DATA_FRAMES, *RESERVED_FRAMES}
    sprayed = _spray_frames(base, spray_fraction)
    if sprayed:
        tags[sprayed] = PageTag.PT_PAGE
        # every sprayed entry maps the one shared page
        words = image.view("<u8").reshape(N_FRAMES, PTES_PER_PAGE)
        words[sprayed] = np.uint64(shared)

    image.flags.writeable = False
    tags.flags.writeable = False
    processes = (
        Process(pid=1, name="ping", privileged=True, page_table_frames=(PING_PT_FRAME,)),
        Process(pid=1000, name="attacker", privileged=False,
                page_table_frames=(ATTACKER_PT_FRAME, *sprayed)),
    )
    log.debug("suid_ping fixture: %d sprayed page-table frames (fraction %.4f)",
              len(sprayed), spray_fraction)
    return ToyMachine(Fixture.SUID_PING, image, tags, processes, spray_fraction=spray_fraction)


def _bare_metal() -> ToyMachine:
    image = np.zeros(PHYS_BYTES, dtype=np.uint8)
    tags = np.full(N_FRAMES, PageTag.UNALLOCATED, dtype=np.uint8)
    tags[list(FIRMWARE_CODE_FRAMES)] = PageTag.CODE_PAGE
    tags[list(FIRMWARE_DATA_FRAMES)] = PageTag.DATA_PAGE
    tags[FLAG_FRAME] = PageTag.FLAG_PAGE
    image[:len(FIRMWARE_CODE_FRAMES) * PAGE_SIZE] = _code_bytes(FIRMWARE_CODE_FRAMES)
    # flag word: locked (unlock bit clear), other bits set
    image[FLAG_WORD_OFFSET:FLAG_WORD_OFFSET + 4] = np.frombuffer(
        (0xA5A5A5A4).to_bytes(4, "little"), dtype=np.uint8)

    image.flags.writeable = False
    tags.flags.writeable = False
    processes = (Process(pid=0, name="firmware", privileged=True),)
    return ToyMachine(Fixture.BARE_METAL_FIRMWARE, image, tags, processes,
                      flag_offset=FLAG_WORD_OFFSET)


def build_fixture(name: Fixture | str, spray_fraction: float = 0.0) -> ToyMachine:
    try:
        fixture = Fixture(name)
    except ValueError:
        raise FixtureError(
            f"unknown fixture {name!r}; expected one of {[f.value for f in Fixture]}"
        ) from None
    if not 0.0 <= spray_fraction <= 1.0:
        raise FixtureError(f"spray fraction must be in [0, 1], got {spray_fraction}")

    if fixture is Fixture.SUID_PING:
        return _suid_ping(spray_fraction)
    if spray_fraction:
        log.warning("bare_metal_firmware has no page tables; ignoring spray fraction %.3f",
                    spray_fraction)
    return _bare_metal()


# ═════════════════════════════════════════════
# 주입 & 판정
# ═════════════════════════════════════════════

def inject_flip(m: ToyMachine, phys_byte: int, bit: int) -> ToyMachine:
    if not 0 <= phys_byte < m.size_bytes:
        raise AddressError(f"byte {phys_byte} outside physical memory of {m.size_bytes} bytes")
    if not 0 <= bit <= 7:
        raise AddressError(f"bit must be 0..7, got {bit}")
    return replace(m, flips=m.flips ^ {(phys_byte, bit)})


def _escalates(m: ToyMachine, pte: Pte) -> bool:
    """User-writable mapping of any page-table page."""
    return (pte.present and pte.writable and pte.user_accessible and pte.valid_frame
            and m.phys_pages[pte.frame_number] == PageTag.PT_PAGE)


def _translation(pte: Pte) -> tuple:
    return pte.present, pte.writable, pte.user_accessible, pte.frame_number


def _target_entry_broken(base: Pte, now: Pte) -> bool:
    if not (now.present and now.user_accessible and now.valid_frame):
        return True
    if now.frame_number != base.frame_number:
        return True
    return base.writable and not now.writable


def _classify_paged(m: ToyMachine) -> set[Outcome]:
    found: set[Outcome] = set()
    target_tables = set(m.target.page_table_frames)

    words = set()
    for b, _bit in m.flips:
        tag = m.tag(b)
        if tag is PageTag.PT_PAGE:
            words.add(b - b % PTE_SIZE)
        elif tag is PageTag.CODE_PAGE:
            found.add(Outcome.CRASH_SEGFAULT)   # corrupted instruction stream
        elif tag is PageTag.DATA_PAGE:
            found.add(Outcome.SILENT_CORRUPTION)

    for offset in words:
        frame, index = divmod(offset, PAGE_SIZE)
        index //= PTE_SIZE
        base, now = m.read_pte(frame, index, flipped=False), m.read_pte(frame, index)
        if _escalates(m, now):
            found.add(Outcome.PRIVILEGE_ESCALATION)
        elif frame in target_tables and base.present and _target_entry_broken(base, now):
            found.add(Outcome.CRASH_SEGFAULT)
        elif _translation(base) != _translation(now):
            found.add(Outcome.SILENT_CORRUPTION)
    return found


def _classify_flat(m: ToyMachine) -> set[Outcome]:
    found: set[Outcome] = set()
    for b, bit in m.flips:
        tag = m.tag(b)
        if tag is PageTag.FLAG_PAGE:
            if b == m.flag_offset and bit == UNLOCK_BIT and m.byte(b) >> UNLOCK_BIT & 1:
                found.add(Outcome.PRIVILEGE_ESCALATION)
            else:
                found.add(Outcome.SILENT_CORRUPTION)
        elif tag is PageTag.CODE_PAGE:
            found.add(Outcome.CRASH_SEGFAULT)
        elif tag is PageTag.DATA_PAGE:
            found.add(Outcome.SILENT_CORRUPTION)
    return found


def classify_outcome(m: ToyMachine) -> Outcome:
    """Strongest effect of every flip currently applied to the machine."""
    if not m.flips:
        return Outcome.NO_EFFECT
    found = _classify_paged(m) if m.fixture is Fixture.SUID_PING else _classify_flat(m)
    return next((o for o in OUTCOME_PRIORITY if o in found), Outcome.NO_EFFECT)


# ─────────────────────────────────────────────
# Sensitive-bit census
# ─────────────────────────────────────────────

def _escalating_mask(words: np.ndarray, is_pt: np.ndarray) -> np.ndarray:
    flags = np.uint64(PteFlag.PRESENT | PteFlag.WRITABLE | PteFlag.USER)
    frames = (words >> np.uint64(FRAME_SHIFT)) & np.uint64(FRAME_MASK)
    valid = frames < np.uint64(N_FRAMES)
    ok = ((words & flags) == flags) & valid
    ok[valid] &= is_pt[frames[valid].astype(np.int64)]
    return ok


def sensitive_bit_count(m: ToyMachine) -> int:
    """Number of single-bit flips that turn the machine into an escalation.

    Exact: every escalation-relevant bit of every PTE in a page-table page
    is tried. Flat fixtures have the unlock bit only.
    """
    if m.fixture is Fixture.BARE_METAL_FIRMWARE:
        return 1
    is_pt = m.phys_pages == PageTag.PT_PAGE
    words = m.image.view("<u8").reshape(N_FRAMES, PTES_PER_PAGE)[is_pt].ravel()
    already = _escalating_mask(words, is_pt)
    total = 0
    for bit in ESCALATION_BITS:
        flipped = words ^ np.uint64(1 << bit)
        total += int(np.count_nonzero(_escalating_mask(flipped, is_pt) & ~already))
    return total


def sensitive_bits_per_sprayed_pte(m: ToyMachine) -> int:
    """Escalating bits of one sprayed entry (all sprayed entries are identical)."""
    if m.fixture is not Fixture.SUID_PING:
        return 0
    shared = np.array([encode_pte(SHARED_DATA_FRAME, writable=True, user_accessible=True)],
                      dtype=np.uint64)
    is_pt = m.phys_pages == PageTag.PT_PAGE
    return sum(int(_escalating_mask(shared ^ np.uint64(1 << bit), is_pt)[0]) for bit in ESCALATION_BITS)


def sprayed_frame_count(m: ToyMachine) -> int:
    attacker = [p for p in m.processes if not p.privileged]
    return sum(len(p.page_table_frames) - 1 for p in attacker)
