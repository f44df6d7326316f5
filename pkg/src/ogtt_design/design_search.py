"""Grid search for good designs: per-size enumeration, an incumbent ladder,
and a rule for when adding one more measurement stops paying off."""
from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .design import GRID_MINUTES, MAX_MINUTES, Design
from .design_compare import B_BETTER, ComparisonResult, compare, compare_with_growth
from .distributions import ParamSampler
from .errors import InputError
from .seeding import RngStream
from .utility import DEFAULT_T2, DesignUtilityEstimate, UtilitySetup, estimate_U, extend_estimate

log = logging.getLogger(__name__)

DEFAULT_GRID = tuple(range(GRID_MINUTES, MAX_MINUTES + 1, GRID_MINUTES))


def _check_grid(grid: Sequence[int]) -> tuple[int, ...]:
    g = tuple(sorted(int(v) for v in grid))
    if len(set(g)) != len(g):
        raise InputError(f"duplicate grid times: {grid}")
    if any(v <= 0 or v > MAX_MINUTES or v % GRID_MINUTES for v in g):
        raise InputError(f"grid times must be 15-minute multiples in (0, 120]: {grid}")
    return g


@dataclass(frozen=True)
class SearchConfig:
    grid: tuple[int, ...] = DEFAULT_GRID  # minutes; 0 is always measured
    k_range: tuple[int, ...] = (3, 4, 5, 6)
    alpha: float = 0.05
    T1_initial: int = 150
    T1_max: int = 600
    growth: float = 2.0
    T2: int = DEFAULT_T2
    seed: int = 0
    prefilter: bool = False
    prefilter_T1: int = 50
    prefilter_fraction: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "grid", _check_grid(self.grid))
        ks = tuple(sorted(int(k) for k in self.k_range))
        if not ks or ks[0] < 1 or ks[-1] - 1 > len(self.grid):
            raise InputError(f"k_range {self.k_range} incompatible with a grid of {len(self.grid)}")
        if any(b != a + 1 for a, b in zip(ks, ks[1:])):
            raise InputError("k_range must be consecutive")
        object.__setattr__(self, "k_range", ks)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["grid"] = list(self.grid)
        d["k_range"] = list(self.k_range)
        return d


def enumerate_designs(k: int, grid: Sequence[int] = DEFAULT_GRID) -> list[Design]:
    """All designs with ``k`` measurements: 0 plus ``k - 1`` grid times, lexicographically."""
    g = _check_grid(grid)
    if k < 1 or k - 1 > len(g):
        raise InputError(f"cannot place {k} measurements on a grid of {len(g)}")
    return [Design((0,) + c) for c in itertools.combinations(g, k - 1)]


@dataclass(frozen=True)
class Match:
    result: ComparisonResult
    reused: int  # champion replicates carried in from earlier matches
    computed: int  # replicates simulated for this match

    @property
    def used(self) -> int:
        return self.result.estimate_a.n_attempted + self.result.estimate_b.n_attempted


@dataclass
class TournamentResult:
    champion: Design
    estimate: DesignUtilityEstimate | None
    matches: list[Match] = field(default_factory=list)
    default_champion: bool = False  # no match was conclusive

    @property
    def log(self) -> list[ComparisonResult]:
        return [m.result for m in self.matches]

    @property
    def samples_computed(self) -> int:
        return sum(m.computed for m in self.matches)

    @property
    def samples_reused(self) -> int:
        return sum(m.reused for m in self.matches)


def tournament(designs: Sequence[Design], design_prior: ParamSampler, config: SearchConfig,
               setup: UtilitySetup = UtilitySetup(), stream: RngStream | None = None,
               workers: int = 1) -> TournamentResult:
    """Incumbent ladder: the champion meets each challenger in turn.

    A challenger takes over only on a conclusive win; draws keep the
    incumbent.  The champion's replicates are kept and extended from match
    to match, the challenger's are fresh.
    """
    designs = list(designs)
    if not designs:
        raise InputError("tournament needs at least one design")
    stream = RngStream(config.seed, "search") if stream is None else stream
    champ = designs[0]
    est = None
    res = TournamentResult(champ, None)
    for challenger in designs[1:]:
        reused = 0 if est is None else est.n_attempted
        r = compare_with_growth(champ, challenger, design_prior, config.alpha, config.T1_initial,
                                config.T1_max, config.growth, config.T2, stream, setup, workers,
                                est_a=est)
        m = Match(r, reused, r.estimate_a.n_attempted + r.estimate_b.n_attempted - reused)
        res.matches.append(m)
        log.info("%s vs %s: %s (z=%.2f, T1=%s)", champ, challenger, r.verdict, r.z, r.T1_used)
        if r.verdict == B_BETTER:
            champ, est = challenger, r.estimate_b
        else:
            est = r.estimate_a
    res.champion = champ
    res.estimate = est
    res.default_champion = bool(res.matches) and not any(m.result.conclusive for m in res.matches)
    return res


def prefilter(designs: Sequence[Design], design_prior: ParamSampler, config: SearchConfig,
              setup: UtilitySetup = UtilitySetup(), workers: int = 1):
    """Rank ``designs`` by a cheap estimate and keep the top fraction (order preserved by rank).

    Uses its own random stream so the screening replicates never enter the
    ladder (that would bias the survivors upwards).
    """
    stream = RngStream(config.seed, "prefilter")
    ests = [estimate_U(d, design_prior, config.prefilter_T1, config.T2, stream, setup, workers)
            for d in designs]
    order = sorted(range(len(designs)), key=lambda i: (-ests[i].mean, i))
    n_keep = max(1, math.ceil(config.prefilter_fraction * len(designs)))
    return [designs[i] for i in order[:n_keep]], ests


@dataclass(frozen=True)
class StopDecision:
    k: int
    result: ComparisonResult | None
    unterminated: bool


def stop_on_k(champions: dict[int, DesignUtilityEstimate], alpha: float = 0.05, T1_stop: int = 600,
              design_prior: ParamSampler | None = None, workers: int = 1):
    """Smallest ``k`` whose successor champion is not conclusively better.

    Champion estimates below ``T1_stop`` replicates are extended first (this
    needs ``design_prior``).  Returns a :class:`StopDecision` and the list of
    comparisons made; if every step up is conclusively better the largest
    ``k`` is returned flagged as unterminated.
    """
    ks = sorted(champions)
    if not ks:
        raise InputError("no champions given")
    if any(b != a + 1 for a, b in zip(ks, ks[1:])):
        raise InputError("champions must cover consecutive k")
    ests = {}
    for k in ks:
        e = champions[k]
        if e.n_attempted < T1_stop:
            if design_prior is None:
                raise InputError(f"champion for k={k} has T1={e.T1} < {T1_stop} and no prior to extend it")
            e = extend_estimate(e, T1_stop - e.n_attempted, design_prior=design_prior, workers=workers)
        ests[k] = e
    made = []
    for k in ks[:-1]:
        r = compare(ests[k + 1], ests[k], alpha)
        made.append(r)
        if r.verdict != "A-better":
            return StopDecision(k, r, False), made
    return StopDecision(ks[-1], made[-1] if made else None, True), made


@dataclass
class SearchReport:
    config: SearchConfig
    tournaments: dict[int, TournamentResult]
    stop: StopDecision
    stop_comparisons: list[ComparisonResult]
    prefilter_samples: int = 0
    config_hash: str = ""

    @property
    def champions(self) -> dict[int, Design]:
        return {k: t.champion for k, t in self.tournaments.items()}

    def accounting(self) -> dict:
        computed = sum(t.samples_computed for t in self.tournaments.values())
        reused = sum(t.samples_reused for t in self.tournaments.values())
        used = sum(m.used for t in self.tournaments.values() for m in t.matches)
        return {"ladder_samples_used": used, "ladder_samples_computed": computed,
                "ladder_samples_reused": reused, "prefilter_samples": self.prefilter_samples,
                "matches": sum(len(t.matches) for t in self.tournaments.values())}

    def to_dict(self) -> dict:
        per_k = {}
        for k, t in self.tournaments.items():
            per_k[str(k)] = {
                "champion": list(t.champion.minutes),
                "estimate": None if t.estimate is None else t.estimate.summary(),
                "default_champion": t.default_champion,
                "matches": [dict(m.result.to_dict(), reused=m.reused, computed=m.computed)
                            for m in t.matches]}
        return {"config": self.config.to_dict(), "config_hash": self.config_hash,
                "per_k": per_k,
                "stop": {"k": self.stop.k, "unterminated": self.stop.unterminated,
                         "deciding": None if self.stop.result is None else self.stop.result.to_dict()},
                "stop_comparisons": [r.to_dict() for r in self.stop_comparisons],
                "accounting": self.accounting()}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def summary_table(self) -> str:
        cols = (0,) + self.config.grid
        head = ["design".ljust(10)] + [f"{m // 60}:{m % 60:02d}" for m in cols] + ["U_hat", "se", "T1"]
        rows = [" ".join(h.rjust(5) if i else h for i, h in enumerate(head))]
        for k, t in sorted(self.tournaments.items()):
            mark = "*" if k == self.stop.k else " "
            cells = [f"k={k}{mark}".ljust(10)]
            cells += [("x" if m in t.champion.minutes else "").rjust(5) for m in cols]
            if t.estimate is not None:
                cells += [f"{t.estimate.mean:.1f}", f"{t.estimate.std_error:.1f}", str(t.estimate.T1)]
            rows.append(" ".join(cells))
        rows.append(f"* chosen number of measurements (k={self.stop.k}"
                    f"{', unterminated' if self.stop.unterminated else ''})")
        return "\n".join(rows)


def search(design_prior: ParamSampler, config: SearchConfig = SearchConfig(),
           setup: UtilitySetup = UtilitySetup(), workers: int = 1, config_hash: str = "") -> SearchReport:
    """Ladder every design size in ``config.k_range`` and apply the stopping rule."""
    stream = RngStream(config.seed, "search")
    tours = {}
    pre_samples = 0
    for k in config.k_range:
        designs = enumerate_designs(k, config.grid)
        if config.prefilter and len(designs) > 1:
            designs, ests = prefilter(designs, design_prior, config, setup, workers)
            pre_samples += sum(e.n_attempted for e in ests)
        tours[k] = tournament(designs, design_prior, config, setup, stream, workers)
    champs = {}
    for k, t in tours.items():
        est = t.estimate
        if est is None:  # a lone design never played a match
            est = estimate_U(t.champion, design_prior, config.T1_max, config.T2, stream, setup, workers)
            t.estimate = est
        champs[k] = est
    stop, made = stop_on_k(champs, config.alpha, config.T1_max, design_prior, workers)
    return SearchReport(config, tours, stop, made, pre_samples, config_hash)
