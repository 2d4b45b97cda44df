"""Cohort construction: subject ingestion, exclusions, exposure windows and
descriptive statistics."""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np
import yaml

logger = logging.getLogger(__name__)

DAYS_PER_YEAR = 365.25
HISTORY_START = dt.date(2008, 1, 1)
HISTORY_END = dt.date(2013, 12, 31)
WINDOW = (dt.date(2010, 1, 1), dt.date(2013, 12, 31))
MIN_AGE = 50.0
MAX_AGE = 105.0

SEVERITY_CLASSES = ("severe_condition", "exclusion_condition", "death")
DEPARTMENTS = tuple(f"{i:02d}" for i in range(1, 97))
BEHAVIORS = ("alcohol", "obesity", "smoking")
QUARTILES = ("immigration", "education")
SUBJECT_COLUMNS = (
    "id", "sex", "birth_year", "department", "alcohol", "obesity", "smoking",
    "immigration", "education", "event_date", "event_code",
)


class CohortError(Exception):
    """Fatal problem with cohort input (header, configuration)."""


class ConfigError(CohortError):
    pass


@dataclass(frozen=True)
class EventEntry:
    code: str
    description: str
    severity: str


@dataclass
class EventDictionary:
    entries: dict[str, EventEntry] = field(default_factory=dict)

    def __post_init__(self):
        for code, entry in self.entries.items():
            if entry.severity not in SEVERITY_CLASSES:
                raise ConfigError(f"event {code!r}: unknown severity class {entry.severity!r}")

    def __contains__(self, code):
        return code in self.entries

    def severity(self, code: str) -> str:
        return self.entries[code].severity

    def codes_with(self, *classes: str) -> set[str]:
        return {c for c, e in self.entries.items() if e.severity in classes}

    @classmethod
    def from_rows(cls, rows: Iterable[tuple[str, str, str]]) -> "EventDictionary":
        entries: dict[str, EventEntry] = {}
        for code, description, severity in rows:
            if code in entries:
                raise ConfigError(f"duplicate event code {code!r}")
            entries[code] = EventEntry(code, description, severity)
        return cls(entries)

    @classmethod
    def read_csv(cls, source: TextIO) -> "EventDictionary":
        reader = csv.DictReader(_skip_leading_comments(source)[0])
        expected = {"event_code", "description", "severity_class"}
        if reader.fieldnames is None or not expected <= set(reader.fieldnames):
            raise CohortError(f"event dictionary header must contain {sorted(expected)}")
        return cls.from_rows(
            (r["event_code"].strip(), r["description"], r["severity_class"].strip()) for r in reader
        )

    def write_csv(self, out: TextIO) -> None:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["event_code", "description", "severity_class"])
        for e in self.entries.values():
            w.writerow([e.code, e.description, e.severity])


@dataclass
class Subject:
    id: str
    sex: str
    birth_year: int
    birth_date: dt.date
    department: str
    alcohol: int
    obesity: int
    smoking: int
    immigration: int
    education: int
    event_history: list[tuple[dt.date, str]] = field(default_factory=list)
    death_date: dt.date | None = None
    censor_date: dt.date | None = None

    def covariates(self) -> dict[str, object]:
        return {
            "sex": self.sex,
            "birth_year": self.birth_year,
            "department": self.department,
            "alcohol": self.alcohol,
            "obesity": self.obesity,
            "smoking": self.smoking,
            "immigration": self.immigration,
            "education": self.education,
        }


@dataclass
class Exposure:
    """Disease-free observation of one subject on the age scale, (entry, exit]."""

    subject_id: str
    entry_age: float
    exit_age: float
    event: bool
    covariates: Mapping[str, object] = field(default_factory=dict)
    synthetic: bool = False


@dataclass
class RowError:
    line: int
    message: str


@dataclass
class ExclusionRow:
    criterion: str
    before: int
    removed: int
    remaining: int


@dataclass
class ExclusionReport:
    rows: list[ExclusionRow] = field(default_factory=list)

    @property
    def removed_by(self) -> dict[str, int]:
        return {r.criterion: r.removed for r in self.rows}

    def write_csv(self, out: TextIO) -> None:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["criterion", "before", "removed", "remaining"])
        for r in self.rows:
            w.writerow([r.criterion, r.before, r.removed, r.remaining])


# --------------------------------------------------------------------------- dates

def impute_birth_date(birth_year: int, seed: int, salt: str | int = "") -> dt.date:
    """Deterministic pseudo-random day within ``birth_year``.

    The draw is a hash of ``(seed, salt, birth_year)`` so that the date of a
    subject does not depend on the order in which subjects are processed.
    """
    digest = hashlib.sha256(f"{seed}:{salt}:{birth_year}".encode()).digest()
    n_days = (dt.date(birth_year + 1, 1, 1) - dt.date(birth_year, 1, 1)).days
    offset = int.from_bytes(digest[:8], "big") % n_days
    return dt.date(birth_year, 1, 1) + dt.timedelta(days=offset)


def age_at(birth_date: dt.date, when: dt.date) -> float:
    return (when - birth_date).days / DAYS_PER_YEAR


def date_at_age(birth_date: dt.date, age: float) -> dt.date:
    return birth_date + dt.timedelta(days=int(round(age * DAYS_PER_YEAR)))


def _parse_date(text: str) -> dt.date:
    return dt.date.fromisoformat(text.strip())


# --------------------------------------------------------------------------- parsing

def _category(row, name, upper):
    value = int(row[name])
    if not 0 <= value <= upper:
        raise ValueError(f"{name}={value} outside 0..{upper}")
    return value


def _skip_leading_comments(source: TextIO) -> tuple[list[str], int]:
    """Lines of ``source`` after any leading ``#`` lines, and how many were skipped."""
    lines = source.readlines() if hasattr(source, "readlines") else list(source)
    k = 0
    while k < len(lines) and lines[k].startswith("#"):
        k += 1
    return lines[k:], k


def parse_subjects(
    source: TextIO, dictionary: EventDictionary, seed: int = 0
) -> tuple[list[Subject], list[RowError]]:
    """Read one-row-per-discharge CSV into subjects.

    Attributes are taken from the first valid row of each id; later rows only
    contribute events. Invalid rows are skipped and reported by line number.
    """
    lines, skipped = _skip_leading_comments(source)
    reader = csv.reader(lines)
    header = next(reader, None)
    if header is None:
        return [], []
    header = [h.strip() for h in header]
    missing = [c for c in SUBJECT_COLUMNS if c not in header]
    if missing:
        raise CohortError(f"malformed header: missing columns {missing}")
    col = {name: header.index(name) for name in header}
    has_censor = "censor_date" in col

    subjects: dict[str, Subject] = {}
    errors: list[RowError] = []
    for lineno, raw in enumerate(reader, start=skipped + 2):
        if not raw or all(not cell.strip() for cell in raw):
            continue
        try:
            if len(raw) != len(header):
                raise ValueError(f"expected {len(header)} fields, got {len(raw)}")
            row = {name: raw[i].strip() for name, i in col.items()}
            sid = row["id"]
            if not sid:
                raise ValueError("empty id")
            sex = row["sex"]
            if sex not in ("F", "M"):
                raise ValueError(f"sex={sex!r} not in F/M")
            birth_year = int(row["birth_year"])
            if not 1900 <= birth_year <= 1963:
                raise ValueError(f"birth_year={birth_year} outside 1900..1963")
            department = row["department"].zfill(2)
            if department not in DEPARTMENTS:
                raise ValueError(f"department={department!r} not in 01..96")
            cats = {b: _category(row, b, 2) for b in BEHAVIORS}
            cats.update({q: _category(row, q, 3) for q in QUARTILES})
            event = None
            if row["event_date"] or row["event_code"]:
                when = _parse_date(row["event_date"])
                code = row["event_code"]
                if code not in dictionary:
                    raise ValueError(f"unknown event code {code!r}")
                if not HISTORY_START <= when <= HISTORY_END:
                    raise ValueError(f"event date {when} outside the history window")
                event = (when, code)
            censor = _parse_date(row["censor_date"]) if has_censor and row["censor_date"] else None
        except (ValueError, KeyError) as exc:
            errors.append(RowError(lineno, str(exc)))
            continue

        subject = subjects.get(sid)
        if subject is None:
            subject = Subject(
                id=sid, sex=sex, birth_year=birth_year,
                birth_date=impute_birth_date(birth_year, seed, sid),
                department=department, **cats,
            )
            subjects[sid] = subject
        if event is not None:
            subject.event_history.append(event)
            if dictionary.severity(event[1]) == "death":
                if subject.death_date is None or event[0] < subject.death_date:
                    subject.death_date = event[0]
        if censor is not None and (subject.censor_date is None or censor < subject.censor_date):
            subject.censor_date = censor

    for s in subjects.values():
        s.event_history.sort()
    return list(subjects.values()), errors


def write_subjects_csv(subjects: Sequence[Subject], out: TextIO) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(list(SUBJECT_COLUMNS) + ["censor_date"])
    for s in subjects:
        base = [s.id, s.sex, s.birth_year, s.department, s.alcohol, s.obesity,
                s.smoking, s.immigration, s.education]
        censor = s.censor_date.isoformat() if s.censor_date else ""
        if not s.event_history:
            w.writerow(base + ["", "", censor])
        for when, code in s.event_history:
            w.writerow(base + [when.isoformat(), code, censor])


# --------------------------------------------------------------------------- exclusions

@dataclass
class ExclusionRule:
    """One exclusion criterion.

    ``kind`` is ``"events"`` (any listed code dated inside ``window``),
    ``"censored_before"`` (censoring or death strictly before ``date``) or
    ``"ends_before_age"`` (observation ends before ``age``).
    """

    name: str
    kind: str = "events"
    codes: frozenset[str] = frozenset()
    window: tuple[dt.date, dt.date] | None = None
    date: dt.date | None = None
    age: float | None = None

    def matches(self, s: Subject) -> bool:
        if self.kind == "events":
            lo, hi = self.window
            return any(lo <= when <= hi and code in self.codes for when, code in s.event_history)
        if self.kind == "censored_before":
            ends = [d for d in (s.censor_date, s.death_date) if d is not None]
            return bool(ends) and min(ends) < self.date
        if self.kind == "ends_before_age":
            end = min(d for d in (s.censor_date, s.death_date, WINDOW[1]) if d is not None)
            return age_at(s.birth_date, end) < self.age
        raise ConfigError(f"unknown rule kind {self.kind!r}")


def load_exclusion_rules(source: TextIO | str, dictionary: EventDictionary) -> list[ExclusionRule]:
    """Parse the YAML exclusion configuration.

    Each entry of ``criteria`` has a ``name`` and either ``codes`` and/or
    ``severity`` with a two-date ``window``, or a ``kind`` of
    ``censored_before`` / ``ends_before_age``.
    """
    data = yaml.safe_load(source) or {}
    rules = []
    for item in data.get("criteria", []):
        kind = item.get("kind", "events")
        name = item.get("name", kind)
        if kind == "events":
            codes = set(map(str, item.get("codes", [])))
            unknown = codes - set(dictionary.entries)
            if unknown:
                raise ConfigError(f"rule {name!r} references unknown codes {sorted(unknown)}")
            for cls in item.get("severity", []):
                if cls not in SEVERITY_CLASSES:
                    raise ConfigError(f"rule {name!r}: unknown severity class {cls!r}")
                codes |= dictionary.codes_with(cls)
            lo, hi = (_parse_date(str(d)) for d in item["window"])
            rules.append(ExclusionRule(name, kind, frozenset(codes), (lo, hi)))
        elif kind == "censored_before":
            rules.append(ExclusionRule(name, kind, date=_parse_date(str(item["date"]))))
        elif kind == "ends_before_age":
            rules.append(ExclusionRule(name, kind, age=float(item["age"])))
        else:
            raise ConfigError(f"unknown rule kind {kind!r}")
    return rules


def default_exclusion_rules(dictionary: EventDictionary) -> list[ExclusionRule]:
    return [
        ExclusionRule(
            "criterion 1: severe condition or death 2008-2009", "events",
            frozenset(dictionary.codes_with("severe_condition", "death")),
            (dt.date(2008, 1, 1), dt.date(2009, 12, 31)),
        ),
        ExclusionRule(
            "criterion 2: other conditions 2008-2013", "events",
            frozenset(dictionary.codes_with("exclusion_condition")),
            (dt.date(2008, 1, 1), dt.date(2013, 12, 31)),
        ),
        ExclusionRule("censored before 2010-01-01", "censored_before", date=WINDOW[0]),
        ExclusionRule("observation ends before age 50", "ends_before_age", age=MIN_AGE),
    ]


def apply_exclusions(
    subjects: Sequence[Subject], rules: Sequence[ExclusionRule]
) -> tuple[list[Subject], ExclusionReport]:
    """Apply rules in order; a subject hit by several rules counts under the first."""
    remaining = list(subjects)
    report = ExclusionReport()
    for rule in rules:
        kept = [s for s in remaining if not rule.matches(s)]
        report.rows.append(ExclusionRow(rule.name, len(remaining), len(remaining) - len(kept), len(kept)))
        remaining = kept
    return remaining, report


# --------------------------------------------------------------------------- exposures

def build_exposure(
    subject: Subject, window=WINDOW, ignored_codes: frozenset[str] = frozenset()
) -> Exposure | None:
    """Exposure of one subject, or None when the window is degenerate."""
    start, end = window
    entry = max(age_at(subject.birth_date, start), MIN_AGE)
    entry_date = max(start, date_at_age(subject.birth_date, MIN_AGE))
    exit_date, event = end, False
    adverse = [w for w, code in subject.event_history if w >= entry_date and code not in ignored_codes]
    if adverse and min(adverse) <= exit_date:
        exit_date, event = min(adverse), True
    if subject.death_date is not None and subject.death_date < exit_date:
        exit_date, event = subject.death_date, True
    if subject.censor_date is not None and subject.censor_date < exit_date:
        exit_date, event = subject.censor_date, False
    exit_age = age_at(subject.birth_date, exit_date)
    if exit_age > MAX_AGE:
        exit_age, event = MAX_AGE, False
    if exit_age <= entry:
        return None
    return Exposure(subject.id, entry, exit_age, event, subject.covariates())


def build_exposures(
    subjects: Iterable[Subject],
    window: tuple[dt.date, dt.date] = WINDOW,
    dictionary: EventDictionary | None = None,
) -> tuple[list[Exposure], int]:
    """Exposure per subject; returns ``(exposures, n_dropped_degenerate)``.

    With a dictionary, only ``severe_condition`` and ``death`` codes end
    exposure; without one every recorded event does.
    """
    ignored = frozenset(dictionary.codes_with("exclusion_condition")) if dictionary else frozenset()
    exposures, dropped = [], 0
    for s in sorted(subjects, key=lambda s: s.id):
        e = build_exposure(s, window, ignored)
        if e is None:
            dropped += 1
        else:
            exposures.append(e)
    return exposures, dropped


# --------------------------------------------------------------------------- statistics

@dataclass
class SummaryTable:
    """Descriptive statistics by sex in the layout of a demographics table.

    ``rows`` hold ``(block, label, female, male, total)`` with preformatted
    cells; ``values`` keeps the raw numbers keyed by ``(block, label, column)``.
    """

    rows: list[tuple[str, str, str, str, str]]
    values: dict[tuple[str, str, str], float]
    correlations: dict[tuple[str, str], float | None]

    def to_markdown(self) -> str:
        lines = ["| | Female | Male | Entire population |", "|---|---:|---:|---:|"]
        block = None
        for b, label, f, m, t in self.rows:
            if b != block:
                lines.append(f"| **{b}** | | | |")
                block = b
            lines.append(f"| {label} | {f} | {m} | {t} |")
        return "\n".join(lines) + "\n"

    def write_csv(self, out: TextIO) -> None:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["block", "label", "female", "male", "total"])
        w.writerows(self.rows)

    def write_correlations_csv(self, out: TextIO) -> None:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["factor_a", "factor_b", "correlation"])
        for (a, b), r in self.correlations.items():
            w.writerow([a, b, "" if r is None else f"{r:.4f}"])


def _median_iqr(x: np.ndarray) -> tuple[float, float, float]:
    q1, med, q3 = np.percentile(x, [25, 50, 75])
    return float(med), float(q1), float(q3)


CORRELATION_FACTORS = ("alcohol", "education", "immigration", "obesity", "smoking")


def risk_factor_correlations(subjects: Sequence[Subject]) -> dict[tuple[str, str], float | None]:
    """Pearson correlations between risk factors.

    Behaviours enter as presence indicators (category >= 1); education and
    immigration as their 0-based quartile. Zero-variance columns give None.
    """
    cols = {}
    for name in CORRELATION_FACTORS:
        v = np.array([getattr(s, name) for s in subjects], dtype=float)
        cols[name] = (v >= 1).astype(float) if name in BEHAVIORS else v
    out: dict[tuple[str, str], float | None] = {}
    for i, a in enumerate(CORRELATION_FACTORS):
        for b in CORRELATION_FACTORS[i + 1:]:
            x, y = cols[a], cols[b]
            if len(x) < 2 or x.std() == 0 or y.std() == 0:
                out[(a, b)] = None
            else:
                out[(a, b)] = float(np.corrcoef(x, y)[0, 1])
    return out


def descriptive_stats(subjects: Sequence[Subject], exposures: Sequence[Exposure]) -> SummaryTable:
    if not subjects:
        raise ValueError("descriptive statistics need a non-empty cohort")
    by_id = {e.subject_id: e for e in exposures}
    groups = {
        "Female": [s for s in subjects if s.sex == "F"],
        "Male": [s for s in subjects if s.sex == "M"],
        "Entire population": list(subjects),
    }
    columns = list(groups)
    rows: list[tuple[str, str, str, str, str]] = []
    values: dict[tuple[str, str, str], float] = {}

    def add(block, label, cells):
        rows.append((block, label, *cells))

    add("Number of individuals", "n", [f"{len(groups[c])}" for c in columns])
    for c in columns:
        values[("Number of individuals", "n", c)] = len(groups[c])

    for block, attr in (("Age at start of exposure", "entry"), ("Exposure (years)", "length")):
        cells = []
        for c in columns:
            exp = [by_id[s.id] for s in groups[c] if s.id in by_id]
            if attr == "entry":
                x = np.array([e.entry_age for e in exp])
            else:
                x = np.array([e.exit_age - e.entry_age for e in exp])
            if len(x) == 0:
                cells.append("")
                continue
            med, q1, q3 = _median_iqr(x)
            values[(block, "median", c)] = med
            values[(block, "q1", c)] = q1
            values[(block, "q3", c)] = q3
            cells.append(f"{med:.1f} ({q1:.1f}-{q3:.1f})")
        add(block, "Median (IQR)", cells)

    for name, kind, levels in (
        ("obesity", "Category", 3), ("alcohol", "Category", 3), ("smoking", "Category", 3),
        ("immigration", "Quartile", 4), ("education", "Quartile", 4),
    ):
        block = name.capitalize()
        for level in range(levels):
            label = f"{kind} {level} (% of pop.)"
            cells = []
            for c in columns:
                n = sum(1 for s in groups[c] if getattr(s, name) == level)
                total = len(groups[c])
                pct = 100.0 * n / total if total else 0.0
                values[(block, f"{kind} {level}", c)] = pct
                cells.append(f"{n} ({pct:.1f}%)")
            add(block, label, cells)

    return SummaryTable(rows, values, risk_factor_correlations(subjects))
