"""
Memory integrity scanner: fill a region with a pattern, re-read it
sequentially in a loop and report bytes that no longer match.

Two modes share the same contract:
  - run_session(): virtual-clock replay of a FlipEvent stream against a
    scan head moving at ``read_rate`` bytes/s. Deterministic, and it knows
    which events the loop missed.
  - live_scan(): the same loop on a real allocation. Misses are unknowable
    there, so the missed list is always empty.
"""

import logging
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

import config
from errors import FalloutError
from memmodel import (
    BufferRegion,
    Detection,
    FlipEvent,
    MemoryRegion,
    TestPattern,
    make_flip_event,
)

log = logging.getLogger("SCANNER")


class ScanInputError(FalloutError):
    pass


@dataclass(frozen=True)
class SelfTest:
    """Background writer that toggles one pre-agreed bit after ``delay_s``."""

    byte_offset: int
    bit_index: int
    delay_s: float = 0.0


@dataclass(frozen=True)
class ScanConfig:
    region_bytes: int
    pattern: TestPattern
    total_duration_s: float
    read_rate_bytes_per_s: float = config.SCAN_READ_RATE_BYTES_PER_S
    rewrite_on_detect: bool = False
    lock_pages: bool = True
    self_test: SelfTest | None = None

    def __post_init__(self):
        if self.region_bytes <= 0:
            raise ScanInputError(f"region must be positive, got {self.region_bytes}")
        if not self.read_rate_bytes_per_s > 0:
            raise ScanInputError(f"read rate must be positive, got {self.read_rate_bytes_per_s}")
        if not self.total_duration_s > 0:
            raise ScanInputError(f"duration must be positive, got {self.total_duration_s}")
        if self.self_test is not None:
            if not 0 <= self.self_test.byte_offset < self.region_bytes:
                raise ScanInputError("self-test offset outside the region")
            if not 0 <= self.self_test.bit_index <= 7:
                raise ScanInputError("self-test bit must be 0..7")

    @property
    def pass_duration_s(self) -> float:
        return self.region_bytes / self.read_rate_bytes_per_s


@dataclass
class ScanReport:
    detected: list[FlipEvent] = field(default_factory=list)
    missed: list[FlipEvent] = field(default_factory=list)
    passes_completed: int = 0
    pass_duration_s: float = 0.0
    masked_pairs: int = 0

    def summary(self) -> dict:
        return {
            "record": "summary",
            "detected": len(self.detected),
            "missed": len(self.missed),
            "passes_completed": self.passes_completed,
            "pass_duration_s": self.pass_duration_s,
            "masked_pairs": self.masked_pairs,
        }

    def to_records(self) -> list[dict]:
        events = sorted(self.detected + self.missed, key=lambda e: (e.t_s, e.byte_offset, e.bit_index))
        return [{"record": "flip", **e.to_record()} for e in events] + [self.summary()]


# ─────────────────────────────────────────────
# Fill & compare
# ─────────────────────────────────────────────

def fill(region: MemoryRegion, pattern: TestPattern):
    if region.length_bytes == 0:
        return
    region.view()[:] = pattern.fill_byte


def scan_pass(region: MemoryRegion, pattern: TestPattern) -> list[tuple[int, int]]:
    """(byte_offset, observed_byte) for every byte differing from the pattern.

    Byte-granular comparison; reading has no side effect on the region.
    """
    data = region.view()
    bad = np.flatnonzero(data != pattern.fill_byte)
    return [(int(i), int(data[i])) for i in bad]


# ─────────────────────────────────────────────
# Virtual-clock replay
# ─────────────────────────────────────────────

def first_visit_after(offset: int, t_s: float, config_: ScanConfig) -> float:
    """Time the head next reads ``offset`` strictly after ``t_s``.

    The head sits at ``offset`` at ``offset / rate + k * period`` for k >= 0.
    """
    period = config_.pass_duration_s
    phase = offset / config_.read_rate_bytes_per_s
    if t_s < phase:
        return phase
    k = int((t_s - phase) // period) + 1
    visit = phase + k * period
    # guard against float floor landing one period short
    while visit <= t_s:
        k += 1
        visit = phase + k * period
    return visit


def run_session(config_: ScanConfig, flips: list[FlipEvent]) -> ScanReport:
    """Replay ``flips`` against a sequential scan loop and classify each event.

    Every event toggles its bit. At each visit a bit is reported when it
    deviates from the pattern and did not at the previous visit; the
    earliest pending event of that bit is the detected one. Events that
    cancel out between two visits are missed (masked pairs), as are
    restorations and anything after the last visit. With
    ``rewrite_on_detect`` the scanner restores the pattern after reporting.
    """
    for a, b in zip(flips, flips[1:]):
        if b.t_s < a.t_s:
            raise ScanInputError("flip events must be sorted by t_s")
    for ev in flips:
        if ev.byte_offset >= config_.region_bytes:
            raise ScanInputError(f"event offset {ev.byte_offset} outside the scanned region")

    end = config_.total_duration_s
    report = ScanReport(
        passes_completed=int(end // config_.pass_duration_s),
        pass_duration_s=config_.pass_duration_s,
    )

    by_bit: dict[tuple[int, int], list[FlipEvent]] = defaultdict(list)
    for ev in flips:
        by_bit[(ev.byte_offset, ev.bit_index)].append(ev)

    detected: list[tuple[float, FlipEvent]] = []
    for (offset, _bit), events in by_bit.items():
        flipped = False   # current bit deviates from the pattern
        seen = False      # deviation observed at the previous visit
        i = 0
        while i < len(events):
            visit = first_visit_after(offset, events[i].t_s, config_)
            pending = []
            while i < len(events) and events[i].t_s < visit:
                pending.append(events[i])
                i += 1
            flipped ^= len(pending) % 2 == 1

            if visit >= end:
                report.missed.extend(ev.with_status(Detection.MISSED) for ev in pending)
                continue

            if flipped and not seen:
                first, rest = pending[0], pending[1:]
                detected.append((visit, first.with_status(Detection.DETECTED, visit)))
                report.missed.extend(ev.with_status(Detection.MISSED) for ev in rest)
                report.masked_pairs += len(rest) // 2
            else:
                # pairs cancel out; an odd leftover is a restoration
                report.missed.extend(ev.with_status(Detection.MISSED) for ev in pending)
                report.masked_pairs += len(pending) // 2
            seen = flipped

            if config_.rewrite_on_detect and flipped:
                flipped = seen = False

    detected.sort(key=lambda d: (d[0], d[1].byte_offset, d[1].bit_index))
    report.detected = [ev for _, ev in detected]
    report.missed.sort(key=lambda e: (e.t_s, e.byte_offset, e.bit_index))
    log.info("Session replay: %d detected, %d missed, %d masked pairs over %d passes",
             len(report.detected), len(report.missed), report.masked_pairs, report.passes_completed)
    return report


# ─────────────────────────────────────────────
# Live scan
# ─────────────────────────────────────────────

def _self_test_writer(region: MemoryRegion, test: SelfTest, ready: threading.Event,
                      stop: threading.Event):
    ready.wait()
    if stop.wait(test.delay_s):
        return
    region.flip_bit(test.byte_offset, test.bit_index)
    log.info("Self-test writer flipped bit %d of byte %d", test.bit_index, test.byte_offset)


def live_scan(config_: ScanConfig, region: MemoryRegion | None = None,
              clock=time.monotonic) -> ScanReport:
    """Run the fill-and-compare loop on real memory for ``total_duration_s``.

    A byte found deviating is reported once per deviating bit; with
    ``rewrite_on_detect`` it is restored to the pattern afterwards.
    """
    owned = region is None
    if owned:
        region = BufferRegion(config_.region_bytes, lock_pages=config_.lock_pages)
    pattern = config_.pattern

    report = ScanReport()
    known: dict[int, int] = {}  # offset -> bits already reported as deviating
    ready, stop = threading.Event(), threading.Event()
    writer = None
    if config_.self_test is not None:
        writer = threading.Thread(target=_self_test_writer,
                                  args=(region, config_.self_test, ready, stop), daemon=True)
        writer.start()

    try:
        fill(region, pattern)
        start = clock()
        ready.set()
        log.info("Live scan of %d bytes with pattern %s for %.1f s",
                 region.length_bytes, pattern, config_.total_duration_s)

        pass_times = []
        while clock() - start < config_.total_duration_s:
            t0 = clock()
            mismatches = dict(scan_pass(region, pattern))
            now = clock() - start
            pass_times.append(clock() - t0)
            report.passes_completed += 1

            for offset, observed in mismatches.items():
                deviating = observed ^ pattern.fill_byte
                new_bits = deviating & ~known.get(offset, 0)
                for bit in range(8):
                    if new_bits >> bit & 1:
                        ev = make_flip_event(pattern, now, offset, bit, region.length_bytes,
                                             detected=Detection.DETECTED, detected_at_s=now)
                        report.detected.append(ev)
                        log.warning("Flip detected: byte %d bit %d (observed 0x%02X)",
                                    offset, bit, observed)
                if config_.rewrite_on_detect:
                    region.write(offset, pattern.fill_byte)
                else:
                    known[offset] = deviating
            # bits that came back to the pattern may deviate again later
            for offset in [o for o in known if o not in mismatches]:
                del known[offset]

            if writer is not None and writer.is_alive():
                time.sleep(0)  # let the writer run between passes
    finally:
        stop.set()
        if writer is not None:
            writer.join()
        if owned:
            region.close()

    if pass_times:
        report.pass_duration_s = float(np.mean(pass_times))
    log.info("Live scan finished: %d passes, %d detections", report.passes_completed, len(report.detected))
    return report
