# =========================================================
# exploitlab/campaign.py - Monte Carlo flip campaigns
# ---------------------------------------------------------
# trial = sample flip location(s) -> inject -> classify -> discard
#
# Trials are cut into config.CAMPAIGN_CHUNKS fixed chunks, each with its
# own SeedSequence child, so the histogram depends on the seed only and
# never on worker count or completion order.
# =========================================================

import logging
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from tqdm import tqdm

import config
from exploitlab.machine import (
    PAGE_SIZE,
    Outcome,
    PageTag,
    ToyMachine,
    classify_outcome,
    inject_flip,
)
from exploitlab.spray import ScenarioError

log = logging.getLogger("CAMPAIGN")

OUTCOME_KEYS = {
    Outcome.NO_EFFECT: "no_effect",
    Outcome.CRASH_SEGFAULT: "crash",
    Outcome.PRIVILEGE_ESCALATION: "escalation",
    Outcome.SILENT_CORRUPTION: "silent",
}


@dataclass(frozen=True)
class FlipDistribution:
    """Where and how many flips a trial gets.

    Locations are uniform over physical memory, or over the pages carrying
    one of ``tags``. Each trial gets ``flips_per_trial`` flips, or a
    Poisson(``poisson_mean``) number of them when that is set.
    """

    tags: frozenset[PageTag] | None = None
    flips_per_trial: int = 1
    poisson_mean: float | None = None

    def __post_init__(self):
        if self.tags is not None:
            object.__setattr__(self, "tags", frozenset(PageTag(t) for t in self.tags))
            if not self.tags:
                raise ScenarioError("tag restriction must name at least one page tag")
        if self.poisson_mean is None and self.flips_per_trial < 1:
            raise ScenarioError(f"flips per trial must be >= 1, got {self.flips_per_trial}")
        if self.poisson_mean is not None and self.poisson_mean < 0:
            raise ScenarioError(f"poisson mean must be >= 0, got {self.poisson_mean}")

    def to_record(self) -> dict:
        return {
            "tags": sorted(t.name.lower() for t in self.tags) if self.tags else None,
            "flips_per_trial": self.flips_per_trial,
            "poisson_mean": self.poisson_mean,
        }


UNIFORM = FlipDistribution()


@dataclass
class CampaignResult:
    trials: int
    seed: int
    histogram: dict[Outcome, int]
    fixture: str = ""
    spray_fraction: float = 0.0
    distribution: FlipDistribution = field(default=UNIFORM)
    per_trial: list[dict] | None = None
    elapsed_s: float = 0.0

    def count(self, outcome: Outcome) -> int:
        return self.histogram.get(outcome, 0)

    def fraction(self, outcome: Outcome) -> float:
        return self.count(outcome) / self.trials

    def summary(self) -> dict:
        rec = {"record": "summary", "trials": self.trials}
        rec.update({key: self.count(o) for o, key in OUTCOME_KEYS.items()})
        return rec

    def header(self) -> dict:
        return {
            "record": "header",
            "kind": "campaign",
            "fixture": self.fixture,
            "spray_fraction": self.spray_fraction,
            "seed": self.seed,
            "trials": self.trials,
            "distribution": self.distribution.to_record(),
        }

    def to_records(self) -> list[dict]:
        return [self.header(), *(self.per_trial or []), self.summary()]


# ─────────────────────────────────────────────
# Sampling
# ─────────────────────────────────────────────

def _candidate_frames(m: ToyMachine, dist: FlipDistribution) -> np.ndarray | None:
    if dist.tags is None:
        return None
    frames = np.flatnonzero(np.isin(m.phys_pages, [int(t) for t in dist.tags]))
    if frames.size == 0:
        raise ScenarioError(f"no page of {m.fixture.value} carries tags {sorted(dist.to_record()['tags'])}")
    return frames


def _sample_flips(rng: np.random.Generator, m: ToyMachine, dist: FlipDistribution,
                  frames: np.ndarray | None) -> list[tuple[int, int]]:
    n = int(rng.poisson(dist.poisson_mean)) if dist.poisson_mean is not None else dist.flips_per_trial
    if frames is None:
        offsets = rng.integers(0, m.size_bytes, size=n)
    else:
        offsets = rng.choice(frames, size=n) * PAGE_SIZE + rng.integers(0, PAGE_SIZE, size=n)
    bits = rng.integers(0, 8, size=n)
    return [(int(o), int(b)) for o, b in zip(offsets, bits)]


def _run_chunk(m: ToyMachine, dist: FlipDistribution, first_trial: int, n_trials: int,
               seed_seq: np.random.SeedSequence, keep_trials: bool) -> tuple[dict, list]:
    rng = np.random.default_rng(seed_seq)
    frames = _candidate_frames(m, dist)
    hist = {o: 0 for o in Outcome}
    records = []
    for i in range(n_trials):
        flips = _sample_flips(rng, m, dist, frames)
        machine = m
        for offset, bit in flips:
            machine = inject_flip(machine, offset, bit)
        outcome = classify_outcome(machine)
        hist[outcome] += 1
        if keep_trials:
            records.append({
                "record": "trial",
                "trial": first_trial + i,
                "flips": [list(f) for f in flips],
                "outcome": outcome.value,
            })
    return hist, records


# ═════════════════════════════════════════════
# 캠페인 실행
# ═════════════════════════════════════════════

def run_campaign(m: ToyMachine, flips: FlipDistribution = UNIFORM, trials: int = 1000,
                 seed: int = config.DEFAULT_SEED, keep_trials: bool = False,
                 workers: int | None = None, chunks: int | None = None,
                 progress: bool = False) -> CampaignResult:
    """Outcome histogram over ``trials`` independent injections into ``m``."""
    if trials <= 0:
        raise ScenarioError(f"trials must be > 0, got {trials}")
    workers = workers or config.CAMPAIGN_WORKERS
    n_chunks = min(chunks or config.CAMPAIGN_CHUNKS, trials)

    sizes = [len(c) for c in np.array_split(np.arange(trials), n_chunks)]
    starts = np.cumsum([0, *sizes[:-1]])
    children = np.random.SeedSequence(seed).spawn(n_chunks)

    t0 = time.time()
    results: dict[int, tuple[dict, list]] = {}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {
            pool.submit(_run_chunk, m, flips, int(starts[k]), sizes[k], children[k], keep_trials): k
            for k in range(n_chunks)
        }
        for f in tqdm(as_completed(futures), total=n_chunks, desc="campaign", disable=not progress):
            results[futures[f]] = f.result()

    histogram = {o: 0 for o in Outcome}
    per_trial = [] if keep_trials else None
    for k in range(n_chunks):
        hist, records = results[k]
        for o, c in hist.items():
            histogram[o] += c
        if keep_trials:
            per_trial.extend(records)

    result = CampaignResult(
        trials=trials,
        seed=seed,
        histogram=histogram,
        fixture=m.fixture.value,
        spray_fraction=m.spray_fraction,
        distribution=flips,
        per_trial=per_trial,
        elapsed_s=time.time() - t0,
    )
    log.info("Campaign %s@%g: %d trials, %s (%.1fs)", result.fixture, m.spray_fraction, trials,
             ", ".join(f"{k}={v}" for k, v in list(result.summary().items())[2:]), result.elapsed_s)
    return result


def escalation_counts(m: ToyMachine, seeds: Iterable[int], flips: FlipDistribution = UNIFORM,
                      trials: int = 100) -> np.ndarray:
    """Escalation count per seed, for paired comparisons between machines."""
    return np.array([
        run_campaign(m, flips, trials, seed=s).count(Outcome.PRIVILEGE_ESCALATION)
        for s in seeds
    ], dtype=np.int64)
