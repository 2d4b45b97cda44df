"""Whole-population exposure adjustment.

Event-free synthetic exposures are added per sex and birth cohort so that
the exposed population on the reference date matches an external age
pyramid, after rescaling the observed counts to their pre-exclusion level.
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence, TextIO

from .cohort import MAX_AGE, MIN_AGE, WINDOW, Exposure, age_at, impute_birth_date

logger = logging.getLogger(__name__)

PRE_EXCLUSION = 18_440_022
POST_EXCLUSION = 13_170_355
DEFAULT_SCALING = PRE_EXCLUSION / POST_EXCLUSION


class AdjustmentError(ValueError):
    pass


@dataclass
class AgePyramid:
    """Population counts keyed by ``(sex, birth_year, year)`` on January 1st of ``year``."""

    counts: dict[tuple[str, int, int], float]

    def __post_init__(self):
        if any(v < 0 for v in self.counts.values()):
            raise AdjustmentError("pyramid counts must be non-negative")

    def get(self, sex: str, birth_year: int, year: int = 2010) -> float | None:
        return self.counts.get((sex, birth_year, year))

    @classmethod
    def read_csv(cls, source: TextIO) -> "AgePyramid":
        reader = csv.DictReader(line for line in source if not line.startswith("#"))
        if reader.fieldnames is None or not {"sex", "birth_year", "count"} <= set(reader.fieldnames):
            raise AdjustmentError("pyramid CSV needs columns sex, birth_year, count")
        counts: dict[tuple[str, int, int], float] = {}
        for r in reader:
            key = (r["sex"].strip(), int(r["birth_year"]), int(r.get("year") or 2010))
            if key in counts:
                raise AdjustmentError(f"duplicate pyramid row {key}")
            counts[key] = float(r["count"])
        return cls(counts)

    def write_csv(self, out: TextIO) -> None:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["sex", "birth_year", "year", "count"])
        for (sex, by, year), n in sorted(self.counts.items()):
            w.writerow([sex, by, year, f"{n:g}"])


@dataclass
class AdjustmentConfig:
    reference_date: dt.date = WINDOW[0]
    window_end: dt.date = WINDOW[1]
    scaling: float = DEFAULT_SCALING
    # optional per-age-band scaling: list of (min_age_inclusive, max_age_exclusive, factor)
    scaling_by_age: Sequence[tuple[float, float, float]] = field(default_factory=tuple)
    seed: int = 0

    def __post_init__(self):
        if self.scaling < 1 or any(f < 1 for _, _, f in self.scaling_by_age):
            raise AdjustmentError("scaling factors must be >= 1")

    def factor(self, age: float) -> float:
        for lo, hi, f in self.scaling_by_age:
            if lo <= age < hi:
                return f
        return self.scaling


def cohort_counts(exposures: Sequence[Exposure]) -> Counter:
    """Observed subjects per ``(sex, birth_year)``."""
    return Counter((str(e.covariates["sex"]), int(e.covariates["birth_year"])) for e in exposures)


@dataclass
class CellReport:
    sex: str
    birth_year: int
    pyramid: float
    observed: int
    target: float
    added: int
    clamped: bool


def synthetic_targets(
    counts: Mapping[tuple[str, int], int], pyramid: AgePyramid, config: AdjustmentConfig
) -> list[CellReport]:
    """Per-cell number of synthetic subjects.

    The fractional target ``max(0, pyramid - scaling * observed)`` is rounded
    half-to-even with the rounding residual carried across cohorts of one sex.
    """
    cells = []
    for sex in sorted({s for s, _ in counts}):
        carry = 0.0
        for by in sorted(b for s, b in counts if s == sex):
            pyr = pyramid.get(sex, by, config.reference_date.year)
            if pyr is None:
                raise AdjustmentError(f"age pyramid has no cell for sex={sex}, birth_year={by}")
            observed = counts[(sex, by)]
            age = config.reference_date.year - by
            raw = pyr - config.factor(age) * observed
            clamped = raw < 0
            if clamped:
                logger.warning("cell %s/%s: scaled observed count exceeds pyramid; no additions", sex, by)
            target = max(0.0, raw)
            added = int(round(target + carry)) if target > 0 else 0
            added = max(added, 0)
            if target > 0:
                carry += target - added
            cells.append(CellReport(sex, by, pyr, observed, target, added, clamped))
    return cells


def _censor_years(n: int, sex: str, by: int, pyramid: AgePyramid, config: AdjustmentConfig) -> list[int]:
    """Calendar year at whose end each of ``n`` synthetic subjects is censored.

    At each year end the fewest subjects are censored so that the remaining
    synthetic count follows the pyramid cohort's attrition to next January;
    without later pyramid years everyone stays to the window end.
    """
    first, last = config.reference_date.year, config.window_end.year
    base = pyramid.get(sex, by, first)
    years = []
    remaining = n
    for year in range(first, last):
        nxt = pyramid.get(sex, by, year + 1)
        if nxt is None or not base:
            continue
        target = min(remaining, int(round(n * min(nxt / base, 1.0))))
        years.extend([year] * (remaining - target))
        remaining = target
    years.extend([last] * remaining)
    return years


def whole_population_adjust(
    exposures: Sequence[Exposure],
    counts: Mapping[tuple[str, int], int] | None,
    pyramid: AgePyramid,
    config: AdjustmentConfig | None = None,
) -> tuple[list[Exposure], list[CellReport]]:
    """Return observed exposures (untouched) followed by synthetic event-free ones."""
    config = config or AdjustmentConfig()
    if any(e.synthetic for e in exposures):
        raise AdjustmentError("exposures are already population-adjusted")
    counts = cohort_counts(exposures) if counts is None else counts
    cells = synthetic_targets(counts, pyramid, config)
    out = list(exposures)
    for cell in cells:
        years = _censor_years(cell.added, cell.sex, cell.birth_year, pyramid, config)
        for j, year in enumerate(years):
            sid = f"syn-{cell.sex}-{cell.birth_year}-{j}"
            birth = impute_birth_date(cell.birth_year, config.seed, sid)
            entry = max(age_at(birth, config.reference_date), MIN_AGE)
            exit_date = dt.date(year, 12, 31)
            exit_age = age_at(birth, exit_date)
            if exit_age <= entry:
                # turns 50 after the allotted year end: keep to the window end
                exit_age = age_at(birth, config.window_end)
            exit_age = min(exit_age, MAX_AGE)
            if exit_age <= entry:
                continue
            out.append(Exposure(
                sid, entry, exit_age, False,
                {"sex": cell.sex, "birth_year": cell.birth_year}, synthetic=True,
            ))
    return out, cells


def write_cells_csv(cells: Sequence[CellReport], out: TextIO, header_comment: str | None = None) -> None:
    if header_comment:
        out.write(f"# {header_comment}\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["sex", "birth_year", "pyramid", "observed", "target", "added", "clamped"])
    for c in cells:
        w.writerow([c.sex, c.birth_year, f"{c.pyramid:g}", c.observed, f"{c.target:.4f}", c.added, int(c.clamped)])
