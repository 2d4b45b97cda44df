"""Model validation on a held-out partition: concordance and risk-group calibration."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence, TextIO

import numpy as np

from .km import StepSurvival, product_limit

DEFAULT_EDGES = (0.2, 0.7, 1.1, 1.5)
SCORE_DECIMALS = 10


class ValidationError(ValueError):
    pass


# --------------------------------------------------------------------------- split

def _unit_hash(seed: int, key: str) -> float:
    digest = hashlib.sha256(f"{seed}:{key}".encode()).digest()
    return int.from_bytes(digest[:8], "big") / 2.0 ** 64


@dataclass
class SplitAssignment:
    assignment: dict[str, str]
    fraction: float
    seed: int

    @cached_property
    def test_ids(self) -> set[str]:
        return {k for k, v in self.assignment.items() if v == "test"}

    @cached_property
    def train_ids(self) -> set[str]:
        return {k for k, v in self.assignment.items() if v == "train"}

    @property
    def test_share(self) -> float:
        return len(self.test_ids) / max(len(self.assignment), 1)


def split_train_test(subject_ids: Iterable[str], fraction: float = 0.40, seed: int = 0) -> SplitAssignment:
    """Per-subject Bernoulli(``fraction``) test membership from a seeded hash."""
    if not 0 <= fraction < 1:
        raise ValidationError("test fraction must lie in [0, 1)")
    assignment = {
        str(sid): ("test" if _unit_hash(seed, str(sid)) < fraction else "train") for sid in subject_ids
    }
    return SplitAssignment(assignment, fraction, seed)


# --------------------------------------------------------------------------- concordance

class _Fenwick:
    def __init__(self, n):
        self.n = n
        self.tree = [0] * (n + 1)

    def add(self, i, v):
        i += 1
        while i <= self.n:
            self.tree[i] += v
            i += i & -i

    def prefix(self, i):
        """Sum of positions ``< i``."""
        s = 0
        while i > 0:
            s += self.tree[i]
            i -= i & -i
        return s


@dataclass
class Concordance:
    concordant: float
    comparable: int

    @property
    def c_index(self) -> float:
        return self.concordant / self.comparable

    @property
    def percent(self) -> str:
        return f"{100 * self.c_index:.2f}%"


def concordance_counts(entry, exit, event, score) -> Concordance:
    """Harrell's C under left truncation in O(n log n).

    A pair is comparable when subject ``i`` has an event at ``T_i`` while
    subject ``j`` is at risk just after it: ``entry_j < T_i`` and
    ``exit_j > T_i`` (or ``exit_j == T_i`` with ``j`` censored). It is
    concordant when ``score_i > score_j``; equal scores count 1/2. Scores are
    compared after rounding to ``SCORE_DECIMALS`` places.
    """
    entry = np.asarray(entry, dtype=float)
    exit = np.asarray(exit, dtype=float)
    event = np.asarray(event, dtype=bool)
    score = np.round(np.asarray(score, dtype=float), SCORE_DECIMALS)
    n = len(entry)
    uniq, rank = np.unique(score, return_inverse=True)
    bit = _Fenwick(len(uniq))
    by_entry = np.argsort(entry, kind="stable")
    by_exit = np.argsort(exit, kind="stable")
    present = np.zeros(n, dtype=bool)
    ev_idx = np.flatnonzero(event)
    ev_times, ev_groups = np.unique(exit[ev_idx], return_inverse=True)
    groups = [[] for _ in ev_times]
    for k, g in zip(ev_idx, ev_groups):
        groups[g].append(k)

    pe = px = 0
    concordant2 = 0  # twice the concordant count, kept integral
    comparable = 0
    for t, members in zip(ev_times, groups):
        while pe < n and entry[by_entry[pe]] < t:
            j = by_entry[pe]
            bit.add(rank[j], 1)
            present[j] = True
            pe += 1
        while px < n and exit[by_exit[px]] < t:
            j = by_exit[px]
            if present[j]:
                bit.add(rank[j], -1)
                present[j] = False
            px += 1
        for j in members:
            if present[j]:
                bit.add(rank[j], -1)
                present[j] = False
        total = bit.prefix(len(uniq))
        for i in members:
            if not entry[i] < t:
                continue
            less = bit.prefix(rank[i])
            equal = bit.prefix(rank[i] + 1) - less
            concordant2 += 2 * less + equal
            comparable += total
    if comparable == 0:
        raise ValidationError("no comparable pairs")
    return Concordance(concordant2 / 2, comparable)


def concordance_brute_force(entry, exit, event, score) -> Concordance:
    """O(n^2) enumeration of the same pair definition."""
    score = np.round(np.asarray(score, dtype=float), SCORE_DECIMALS)
    conc = 0.0
    comp = 0
    n = len(entry)
    for i in range(n):
        if not event[i]:
            continue
        t = exit[i]
        for j in range(n):
            if j == i or not entry[j] < t:
                continue
            if exit[j] > t or (exit[j] == t and not event[j]):
                comp += 1
                if score[i] > score[j]:
                    conc += 1
                elif score[i] == score[j]:
                    conc += 0.5
    if comp == 0:
        raise ValidationError("no comparable pairs")
    return Concordance(conc, comp)


@dataclass
class SubjectScores:
    ids: np.ndarray
    entry: np.ndarray
    exit: np.ndarray
    event: np.ndarray
    score: np.ndarray


def subject_scores(design, lp: np.ndarray) -> SubjectScores:
    """Collapse episode rows to subjects; score = mean of episode linear predictors."""
    ids, inverse = np.unique(design.subject_ids.astype(str), return_inverse=True)
    k = len(ids)
    counts = np.bincount(inverse, minlength=k)
    score = np.bincount(inverse, weights=lp, minlength=k) / counts
    entry = np.full(k, np.inf)
    exit = np.full(k, -np.inf)
    np.minimum.at(entry, inverse, design.start)
    np.maximum.at(exit, inverse, design.stop)
    event = np.zeros(k, dtype=bool)
    last = design.stop == exit[inverse]
    event[inverse[last & design.event]] = True
    return SubjectScores(ids, entry, exit, event, score)


def concordance(fit, design) -> Concordance:
    from .cox import linear_predictor

    s = subject_scores(design, linear_predictor(fit, design))
    return concordance_counts(s.entry, s.exit, s.event, s.score)


# --------------------------------------------------------------------------- calibration

@dataclass
class RiskBin:
    lower: float
    upper: float
    count: int
    mean_lp: float | None = None
    observed: StepSurvival | None = None
    predicted: StepSurvival | None = None
    max_gap: float | None = None

    @property
    def label(self) -> str:
        lo = "-inf" if np.isinf(self.lower) else f"{self.lower:g}"
        hi = "inf" if np.isinf(self.upper) else f"{self.upper:g}"
        return f"({lo}, {hi}]"


@dataclass
class RiskGroupReport:
    edges: tuple[float, ...]
    bins: list[RiskBin] = field(default_factory=list)

    @property
    def max_gap(self) -> float:
        gaps = [b.max_gap for b in self.bins if b.max_gap is not None]
        return max(gaps) if gaps else 0.0

    def write_csv(self, out: TextIO, header_comment: str | None = None) -> None:
        if header_comment:
            out.write(f"# {header_comment}\n")
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["bin", "count", "mean_lp", "max_gap"])
        for b in self.bins:
            w.writerow([
                b.label, b.count, "" if b.mean_lp is None else f"{b.mean_lp:.6f}",
                "" if b.max_gap is None else f"{b.max_gap:.6f}",
            ])


def _conditional_prediction(baseline, mean_lp: float, a0: float, a1: float) -> StepSurvival:
    keep = (baseline.times > a0) & (baseline.times <= a1)
    H = np.exp(mean_lp) * np.cumsum(baseline.increments[keep])
    return StepSurvival(baseline.times[keep], np.exp(-H))


def step_sup_distance(a: StepSurvival, b: StepSurvival, lo: float, hi: float) -> float:
    """Sup of |a - b| over ``[lo, hi]`` for two right-continuous step functions."""
    pts = np.concatenate([[lo], a.times, b.times])
    pts = pts[(pts >= lo) & (pts <= hi)]
    return float(np.max(np.abs(a(pts) - b(pts)))) if pts.size else 0.0


def risk_group_calibration(fit, design, edges: Sequence[float] = DEFAULT_EDGES) -> RiskGroupReport:
    """Observed KM per linear-predictor class against ``exp(-e^{mean lp} Lambda0)``.

    Both curves are conditioned on the youngest entry age of the class; the
    gap is evaluated up to the last observed event age of the class.
    """
    from .cox import linear_predictor

    s = subject_scores(design, linear_predictor(fit, design))
    edges = tuple(sorted(float(e) for e in edges))
    bounds = (-np.inf, *edges, np.inf)
    which = np.searchsorted(np.asarray(edges), s.score, side="left")
    report = RiskGroupReport(edges)
    for k in range(len(bounds) - 1):
        m = which == k
        b = RiskBin(bounds[k], bounds[k + 1], int(m.sum()))
        if b.count:
            b.mean_lp = float(s.score[m].mean())
            obs = product_limit(s.entry[m], s.exit[m], s.event[m])
            a0 = float(s.entry[m].min())
            a1 = float(obs.times[-1]) if obs.times.size else float(s.exit[m].max())
            pred = _conditional_prediction(fit.baseline, b.mean_lp, a0, a1)
            b.observed, b.predicted = obs, pred
            b.max_gap = step_sup_distance(obs, pred, a0, a1)
        report.bins.append(b)
    return report
