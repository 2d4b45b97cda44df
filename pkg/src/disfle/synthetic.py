"""Synthetic cohorts with known hazards and planted exclusions."""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import yaml

from .cohort import (
    BEHAVIORS, DEPARTMENTS, WINDOW, EventDictionary, Subject, age_at, date_at_age,
    impute_birth_date,
)

SEVERE_CODES = ("S01", "S02", "S03")
EXCLUSION_CODE = "X01"
DEATH_CODE = "D00"


def synthetic_dictionary() -> EventDictionary:
    return EventDictionary.from_rows([
        ("S01", "Heart failure (including cardiac arrest)", "severe_condition"),
        ("S02", "Severe dementia", "severe_condition"),
        ("S03", "Stroke", "severe_condition"),
        ("X01", "Birth defect or chromosome abnormality", "exclusion_condition"),
        ("X02", "HIV infection", "exclusion_condition"),
        ("D00", "Death from any cause", "death"),
    ])


@dataclass
class SyntheticConfig:
    """Data-generating process.

    ``baseline`` is ``{"kind": "exponential", "rate": r}`` or
    ``{"kind": "piecewise", "breaks": [...], "rates": [...]}`` with one more
    rate than breaks (rate ``k`` applies on ``[breaks[k-1], breaks[k])``).
    ``effects`` maps ``"covariate[level]"`` to a log hazard ratio, either a
    number or ``{"breaks": [...], "values": [...]}`` by age; ``interactions``
    maps ``"a[la]:b[lb]"`` to a constant log hazard ratio.
    """

    n: int = 10_000
    seed: int = 0
    birth_years: tuple[int, int] = (1925, 1962)
    p_male: float = 0.45
    behaviors: Mapping[str, Sequence[float]] = field(default_factory=lambda: {
        "alcohol": (0.97, 0.005, 0.025), "obesity": (0.915, 0.072, 0.013), "smoking": (0.92, 0.004, 0.076),
    })
    correlations: Sequence[tuple[str, str, float]] = ()
    quartiles: Mapping[str, Sequence[float]] = field(default_factory=lambda: {
        "immigration": (0.25, 0.25, 0.25, 0.25), "education": (0.25, 0.25, 0.25, 0.25),
    })
    department_weights: Sequence[float] | None = None
    baseline: Mapping = field(default_factory=lambda: {"kind": "exponential", "rate": 0.05})
    effects: Mapping[str, object] = field(default_factory=dict)
    interactions: Mapping[str, float] = field(default_factory=dict)
    death_fraction: float = 0.1
    loss_rate: float = 0.0
    planted: Mapping[str, float] = field(default_factory=dict)
    window: tuple[dt.date, dt.date] = WINDOW

    def __post_init__(self):
        for name, probs in {**self.behaviors, **self.quartiles}.items():
            p = np.asarray(probs, dtype=float)
            if np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
                raise ValueError(f"{name}: probabilities must be non-negative and sum to 1")
        if not 0 <= self.p_male <= 1:
            raise ValueError("p_male must lie in [0, 1]")
        if any(r < 0 for r in _baseline_rates(self.baseline)[1]):
            raise ValueError("hazard rates must be non-negative")

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticConfig":
        d = dict(d)
        if "birth_years" in d:
            d["birth_years"] = tuple(d["birth_years"])
        if "correlations" in d:
            d["correlations"] = tuple(tuple(c) for c in d["correlations"])
        if "window" in d:
            d["window"] = tuple(dt.date.fromisoformat(str(w)) for w in d["window"])
        return cls(**d)

    @classmethod
    def load(cls, source) -> "SyntheticConfig":
        return cls.from_dict(yaml.safe_load(source) or {})


def _baseline_rates(baseline: Mapping) -> tuple[list[float], list[float]]:
    kind = baseline.get("kind", "exponential")
    if kind == "exponential":
        return [], [float(baseline["rate"])]
    if kind == "piecewise":
        breaks = [float(b) for b in baseline["breaks"]]
        rates = [float(r) for r in baseline["rates"]]
        if len(rates) != len(breaks) + 1:
            raise ValueError("piecewise baseline needs len(rates) == len(breaks) + 1")
        return breaks, rates
    raise ValueError(f"unknown baseline kind {kind!r}")


def _parse_key(key: str) -> list[tuple[str, str]]:
    out = []
    for part in key.split(":"):
        name, level = part.rstrip("]").split("[")
        out.append((name, level))
    return out


def _schedule(effect) -> tuple[list[float], list[float]]:
    if isinstance(effect, Mapping):
        return [float(b) for b in effect["breaks"]], [float(v) for v in effect["values"]]
    return [], [float(effect)]


def _piece_values(breaks, values, grid_left):
    idx = np.searchsorted(np.asarray(breaks, dtype=float), grid_left, side="right")
    return np.asarray(values, dtype=float)[idx]


def _correlated_presence(rng, n, p_a, p_b, rho):
    sd = math.sqrt(p_a * (1 - p_a) * p_b * (1 - p_b))
    p11 = p_a * p_b + rho * sd
    p10, p01 = p_a - p11, p_b - p11
    p00 = 1 - p11 - p10 - p01
    if min(p11, p10, p01, p00) < 0:
        raise ValueError(f"correlation {rho} infeasible for prevalences {p_a}, {p_b}")
    cell = rng.choice(4, size=n, p=[p00, p10, p01, p11])
    return (cell == 1) | (cell == 3), (cell == 2) | (cell == 3)


def _draw_covariates(cfg: SyntheticConfig, rng) -> dict[str, np.ndarray]:
    n = cfg.n
    cov: dict[str, np.ndarray] = {}
    cov["sex"] = np.where(rng.random(n) < cfg.p_male, "M", "F").astype(object)
    presence: dict[str, np.ndarray] = {}
    for a, b, rho in cfg.correlations:
        pa = 1 - cfg.behaviors[a][0]
        pb = 1 - cfg.behaviors[b][0]
        presence[a], presence[b] = _correlated_presence(rng, n, pa, pb, rho)
    for name in BEHAVIORS:
        probs = np.asarray(cfg.behaviors.get(name, (1.0, 0.0, 0.0)), dtype=float)
        pres = presence.get(name)
        if pres is None:
            pres = rng.random(n) < 1 - probs[0]
        p_two = probs[2] / (probs[1] + probs[2]) if probs[1] + probs[2] > 0 else 0.0
        level = np.where(rng.random(n) < p_two, 2, 1)
        cov[name] = np.where(pres, level, 0)
    for name in ("immigration", "education"):
        cov[name] = rng.choice(4, size=n, p=np.asarray(cfg.quartiles.get(name, (1, 0, 0, 0)), dtype=float))
    weights = cfg.department_weights
    p = None if weights is None else np.asarray(weights, dtype=float) / np.sum(weights)
    cov["department"] = np.asarray(DEPARTMENTS, dtype=object)[rng.choice(len(DEPARTMENTS), size=n, p=p)]
    cov["birth_year"] = rng.integers(cfg.birth_years[0], cfg.birth_years[1] + 1, size=n)
    return cov


def _log_hazard_pieces(cfg: SyntheticConfig, cov, breaks):
    """Per-subject log hazard ratio on every interval of the global age partition."""
    lefts = np.concatenate([[-np.inf], breaks])
    n = cfg.n
    lp = np.zeros((n, len(lefts)))
    for key, effect in cfg.effects.items():
        (name, level), = _parse_key(key)
        on = np.array([str(v) == level for v in cov[name]], dtype=float)
        b, v = _schedule(effect)
        lp += on[:, None] * _piece_values(b, v, lefts)[None, :]
    for key, value in cfg.interactions.items():
        (a, la), (b, lb) = _parse_key(key)
        on = np.array([str(x) == la and str(y) == lb for x, y in zip(cov[a], cov[b])], dtype=float)
        lp += on[:, None] * float(value)
    return lp


def true_cumulative_hazard(cfg: SyntheticConfig, ages, profile_lp: float = 0.0) -> np.ndarray:
    """Cumulative baseline hazard from age 0 (times ``exp(profile_lp)``)."""
    b, r = _baseline_rates(cfg.baseline)
    ages = np.atleast_1d(np.asarray(ages, dtype=float))
    bounds = np.concatenate([[0.0], b])
    out = np.zeros_like(ages)
    for k, rate in enumerate(r):
        lo = bounds[k]
        hi = b[k] if k < len(b) else np.inf
        out += rate * np.clip(np.minimum(ages, hi) - lo, 0, None)
    return out * math.exp(profile_lp)


def _first_passage(entry, target, breaks, rates):
    """Age at which the piecewise-constant cumulative hazard from ``entry``
    reaches ``target`` (inf if never)."""
    n = len(entry)
    bounds = np.concatenate([[-np.inf], breaks, [np.inf]])
    remaining = target.copy()
    out = np.full(n, np.inf)
    for k in range(len(bounds) - 1):
        lo = np.maximum(entry, bounds[k])
        length = np.clip(bounds[k + 1] - lo, 0, None)
        rate = rates[:, k]
        todo = np.isinf(out) & (length > 0) & (rate > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            need = remaining / rate
        hit = todo & (need <= length)
        out[hit] = lo[hit] + need[hit]
        used = todo & ~hit
        remaining[used] -= rate[used] * length[used]
    return out


def _random_day(rng, lo: dt.date, hi: dt.date) -> dt.date:
    return lo + dt.timedelta(days=int(rng.integers(0, (hi - lo).days + 1)))


def generate_synthetic(cfg: SyntheticConfig) -> tuple[list[Subject], dict]:
    """Draw a cohort; returns subjects and the ground truth used to make it."""
    rng = np.random.default_rng(cfg.seed)
    cov = _draw_covariates(cfg, rng)
    n = cfg.n
    ids = [f"{i + 1:07d}" for i in range(n)]
    births = [impute_birth_date(int(by), cfg.seed, sid) for by, sid in zip(cov["birth_year"], ids)]
    start, end = cfg.window
    entry = np.array([max(age_at(b, start), 50.0) for b in births])
    end_age = np.array([age_at(b, end) for b in births])

    base_breaks, base_rates = _baseline_rates(cfg.baseline)
    eff_breaks = set()
    for effect in cfg.effects.values():
        eff_breaks.update(_schedule(effect)[0])
    breaks = np.array(sorted(set(base_breaks) | eff_breaks), dtype=float)
    lefts = np.concatenate([[-np.inf], breaks])
    base = _piece_values(base_breaks, base_rates, lefts)
    rates = base[None, :] * np.exp(_log_hazard_pieces(cfg, cov, breaks))
    event_age = _first_passage(entry, rng.exponential(size=n), breaks, rates)
    if cfg.loss_rate > 0:
        loss_age = entry + rng.exponential(1 / cfg.loss_rate, size=n)
    else:
        loss_age = np.full(n, np.inf)
    is_death = rng.random(n) < cfg.death_fraction
    severe_pick = rng.integers(0, len(SEVERE_CODES), size=n)

    planted = {k: float(v) for k, v in cfg.planted.items()}
    c1 = rng.random(n) < planted.get("criterion1", 0.0)
    c2 = rng.random(n) < planted.get("criterion2", 0.0)
    cb = rng.random(n) < planted.get("censored_before", 0.0)

    subjects = []
    truth_removed = {"criterion1": 0, "criterion2": 0, "censored_before": 0, "ends_before_age": 0}
    for i, sid in enumerate(ids):
        b = births[i]
        s = Subject(
            id=sid, sex=str(cov["sex"][i]), birth_year=int(cov["birth_year"][i]), birth_date=b,
            department=str(cov["department"][i]),
            alcohol=int(cov["alcohol"][i]), obesity=int(cov["obesity"][i]), smoking=int(cov["smoking"][i]),
            immigration=int(cov["immigration"][i]), education=int(cov["education"][i]),
        )
        if c1[i]:
            s.event_history.append((_random_day(rng, dt.date(2008, 1, 1), dt.date(2009, 12, 31)), "S01"))
        if c2[i]:
            s.event_history.append((_random_day(rng, dt.date(2008, 1, 1), dt.date(2013, 12, 31)), EXCLUSION_CODE))
        if cb[i]:
            s.censor_date = _random_day(rng, dt.date(2008, 1, 1), dt.date(2009, 12, 31))
        if loss_age[i] < min(event_age[i], end_age[i]):
            s.censor_date = min(filter(None, [s.censor_date, date_at_age(b, loss_age[i])]))
        if event_age[i] <= end_age[i]:
            when = date_at_age(b, event_age[i])
            entry_date = max(start, date_at_age(b, 50.0))
            when = min(max(when, entry_date + dt.timedelta(days=1)), end)
            code = DEATH_CODE if is_death[i] else SEVERE_CODES[severe_pick[i]]
            s.event_history.append((when, code))
            if code == DEATH_CODE:
                s.death_date = when
        s.event_history.sort()
        if c1[i]:
            truth_removed["criterion1"] += 1
        elif c2[i]:
            truth_removed["criterion2"] += 1
        elif cb[i]:
            truth_removed["censored_before"] += 1
        else:
            ends = [d for d in (s.censor_date, s.death_date, end) if d is not None]
            if age_at(b, min(ends)) < 50.0:
                truth_removed["ends_before_age"] += 1
        subjects.append(s)

    truth = {
        "baseline": dict(cfg.baseline),
        "effects": dict(cfg.effects),
        "interactions": dict(cfg.interactions),
        "removed": truth_removed,
        "n": n,
    }
    return subjects, truth


def synthetic_pyramid(
    subjects: Sequence[Subject],
    factor: float = 2.0,
    mortality: float = 0.005,
    years: Sequence[int] = (2010, 2011, 2012, 2013),
):
    """Age pyramid consistent with a generated cohort.

    The January count of the first year is ``factor`` times the cohort size
    of each (sex, birth year) cell; later years apply an annual attrition of
    ``mortality * exp(0.08 * (age - 50))``.
    """
    from collections import Counter

    from .adjustment import AgePyramid

    sizes = Counter((s.sex, s.birth_year) for s in subjects)
    counts: dict[tuple[str, int, int], float] = {}
    for (sex, by), n in sorted(sizes.items()):
        level = factor * n
        for k, year in enumerate(years):
            if k:
                age = years[k - 1] - by
                level *= 1.0 - min(mortality * math.exp(0.08 * (age - 50)), 1.0)
            counts[(sex, by, year)] = float(round(level))
    return AgePyramid(counts)
