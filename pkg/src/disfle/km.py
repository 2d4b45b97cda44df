"""Kaplan-Meier estimation under left truncation and right censoring."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Mapping, Sequence, TextIO

import numpy as np
from scipy.stats import norm

from .cohort import Exposure


@dataclass
class StepSurvival:
    """Right-continuous step function, equal to 1 before ``times[0]``."""

    times: np.ndarray
    values: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    n_at_risk: np.ndarray | None = None
    n_events: np.ndarray | None = None
    greenwood: np.ndarray | None = None
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)

    def __call__(self, t) -> np.ndarray:
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right") - 1
        vals = np.concatenate([[1.0], self.values])
        return vals[idx + 1]

    def band_at(self, t) -> tuple[np.ndarray, np.ndarray]:
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right") - 1
        lo = np.concatenate([[1.0], self.lower])
        hi = np.concatenate([[1.0], self.upper])
        return lo[idx + 1], hi[idx + 1]

    def truncated(self, t_max: float) -> "StepSurvival":
        keep = self.times <= t_max
        sub = lambda a: None if a is None else a[keep]
        return replace(
            self, times=self.times[keep], values=self.values[keep], lower=sub(self.lower),
            upper=sub(self.upper), n_at_risk=sub(self.n_at_risk), n_events=sub(self.n_events),
            greenwood=sub(self.greenwood),
        )


def product_limit(entry, exit, event) -> StepSurvival:
    """Single-stratum product-limit estimate with risk sets ``entry < t <= exit``."""
    entry = np.asarray(entry, dtype=float)
    exit = np.asarray(exit, dtype=float)
    event = np.asarray(event, dtype=bool)
    times, d = np.unique(exit[event], return_counts=True)
    if times.size == 0:
        return StepSurvival(
            np.array([]), np.array([]), np.array([]), np.array([]),
            np.array([], dtype=int), np.array([], dtype=int), np.array([]), ("no_events",),
        )
    n = np.searchsorted(np.sort(entry), times, side="left") - np.searchsorted(np.sort(exit), times, side="left")
    d = d.astype(float)
    nf = n.astype(float)
    values = np.cumprod(1.0 - d / nf)
    with np.errstate(divide="ignore"):
        gw = np.cumsum(np.where(nf > d, d / (nf * (nf - d)), np.inf))
    return StepSurvival(times, values, n_at_risk=n, n_events=d.astype(int), greenwood=gw)


def _stratum_key(cov: Mapping[str, object], strata: Sequence[str]) -> tuple:
    return tuple(str(cov[s]) for s in strata)


def stratum_label(strata: Sequence[str], key: tuple) -> str:
    return ",".join(f"{s}={v}" for s, v in zip(strata, key)) or "all"


def fit_km(
    exposures: Sequence[Exposure], strata: Sequence[str] = (), level: float = 0.95
) -> dict[tuple, StepSurvival]:
    """Stratified Kaplan-Meier curves with log-log confidence bands.

    Keys are tuples of stratum values (the empty tuple without strata),
    sorted for deterministic iteration.
    """
    groups: dict[tuple, list[Exposure]] = {}
    for e in exposures:
        groups.setdefault(_stratum_key(e.covariates, strata), []).append(e)
    out = {}
    for key in sorted(groups):
        g = groups[key]
        curve = product_limit(
            [e.entry_age for e in g], [e.exit_age for e in g], [e.event for e in g]
        )
        out[key] = km_confidence(curve, level)
    return out


def km_confidence(curve: StepSurvival, level: float = 0.95) -> StepSurvival:
    """Pointwise intervals on the complementary log-log scale, clipped to [0, 1]."""
    if curve.greenwood is None:
        raise ValueError("curve carries no Greenwood accumulator")
    z = norm.ppf(0.5 + level / 2)
    s = curve.values
    lower = np.zeros_like(s)
    upper = np.zeros_like(s)
    one = s >= 1.0
    lower[one] = upper[one] = 1.0
    mid = (s > 0) & ~one
    log_s = np.log(s[mid])
    se = np.sqrt(curve.greenwood[mid]) / np.abs(log_s)
    lower[mid] = s[mid] ** np.exp(z * se)
    upper[mid] = s[mid] ** np.exp(-z * se)
    return replace(curve, lower=np.clip(lower, 0, 1), upper=np.clip(upper, 0, 1))


def write_curves_csv(
    curves: Mapping[str, StepSurvival], out: TextIO, header_comment: str | None = None
) -> None:
    if header_comment:
        out.write(f"# {header_comment}\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["stratum", "time", "survival", "lower", "upper"])
    for label, c in curves.items():
        lo = c.lower if c.lower is not None else c.values
        hi = c.upper if c.upper is not None else c.values
        for t, s, a, b in zip(c.times, c.values, lo, hi):
            w.writerow([label, f"{t:.6f}", f"{s:.8f}", f"{a:.8f}", f"{b:.8f}"])
