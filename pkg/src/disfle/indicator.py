"""Disease-free life expectancy (restricted conditional residual life) from
step survival curves, and risk-profile curve families."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import combinations
from typing import Mapping, Sequence, TextIO

import numpy as np

from .km import StepSurvival

T_MAX = 100.0
RISK_BEHAVIORS = ("alcohol", "obesity", "smoking")


class IndicatorError(ValueError):
    pass


@dataclass
class DisfleCurve:
    ages: np.ndarray
    values: np.ndarray
    t_max: float
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None


def _residual_integrals(times, values, ages, t_max):
    """``int_a^t_max S(u) du`` for every age in ``ages`` (S right-continuous)."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    keep = times < t_max
    times, values = times[keep], values[keep]
    # pieces [b_j, b_{j+1}) with constant value v_j; b_0 = -inf handled by S = 1
    bounds = np.concatenate([times, [t_max]])
    piece = values * np.diff(bounds)
    tail = np.concatenate([np.cumsum(piece[::-1])[::-1], [0.0]])
    ages = np.asarray(ages, dtype=float)
    j = np.searchsorted(times, ages, side="right")  # first step time strictly after a
    s_at = np.concatenate([[1.0], values])[j]
    nxt = bounds[np.minimum(j, len(times))]
    head = s_at * (nxt - ages)
    return head + tail[j], s_at


def disfle_at(curve: StepSurvival, t: float, t_max: float = T_MAX) -> float:
    """Restricted expected disease-free years beyond age ``t`` given survival to ``t``."""
    if t >= t_max:
        raise IndicatorError(f"age {t} is not below t_max={t_max}")
    integral, s_t = _residual_integrals(curve.times, curve.values, [t], t_max)
    if s_t[0] <= 0:
        raise IndicatorError(f"survival is zero at age {t}; conditional expectation undefined")
    return float(integral[0] / s_t[0])


def disfle_curve(curve: StepSurvival, t_max: float = T_MAX, start: float = 50.0) -> DisfleCurve:
    """Dis-FLE at ``start`` and at every step time in ``(start, t_max)`` where S > 0,
    closed by the value 0 at ``t_max``.

    When the curve has bands, an envelope is propagated: the lower value
    integrates the lower band and conditions on the upper band, and the
    reverse for the upper value (capped at ``t_max - t``).
    """
    times = np.asarray(curve.times)
    inner = times[(times > start) & (times < t_max)]
    ages = np.concatenate([[start], inner])
    integral, s_at = _residual_integrals(curve.times, curve.values, ages, t_max)
    ok = s_at > 0
    ages, integral, s_at = ages[ok], integral[ok], s_at[ok]
    values = integral / s_at
    lower = upper = None
    if curve.lower is not None and curve.upper is not None:
        int_lo, _ = _residual_integrals(curve.times, curve.lower, ages, t_max)
        int_hi, _ = _residual_integrals(curve.times, curve.upper, ages, t_max)
        _, lo_at = _residual_integrals(curve.times, curve.lower, ages, t_max)
        _, hi_at = _residual_integrals(curve.times, curve.upper, ages, t_max)
        with np.errstate(divide="ignore", invalid="ignore"):
            lower = np.where(hi_at > 0, int_lo / hi_at, 0.0)
            upper = np.where(lo_at > 0, int_hi / lo_at, t_max - ages)
        lower = np.minimum(lower, values)
        upper = np.clip(np.maximum(upper, values), None, t_max - ages)
        lower = np.concatenate([lower, [0.0]])
        upper = np.concatenate([upper, [0.0]])
    return DisfleCurve(
        np.concatenate([ages, [t_max]]), np.concatenate([values, [0.0]]), t_max, lower, upper
    )


def disfle_recursive(curve: StepSurvival, t_max: float = T_MAX, start: float = 50.0) -> np.ndarray:
    """Backward recursion over step times; cross-check for :func:`disfle_curve`."""
    times = np.asarray(curve.times)
    vals = np.asarray(curve.values)
    keep = (times > start) & (times < t_max)
    t = np.concatenate([[start], times[keep], [t_max]])
    s = np.concatenate([[curve(start)[()]], vals[keep]])
    out = np.zeros(len(t))
    for i in range(len(t) - 2, -1, -1):
        if s[i] <= 0:
            out[i] = np.nan
            continue
        if i + 1 < len(s):
            ratio = s[i + 1] / s[i]
            out[i] = (t[i + 1] - t[i]) + ratio * out[i + 1]
        else:
            out[i] = t[i + 1] - t[i]
    return out


# --------------------------------------------------------------------------- profiles

@dataclass(frozen=True)
class RiskProfile:
    label: str
    sex: str
    behaviors: tuple[str, ...]

    def __post_init__(self):
        expected = {"Lowest": 0, "Intermediate": 1, "Highest": 2}[self.label]
        if len(self.behaviors) != expected:
            raise IndicatorError(f"{self.label} profile needs {expected} behaviours")

    @property
    def name(self) -> str:
        extra = "+".join(self.behaviors) or "none"
        return f"{self.label}|{self.sex}|{extra}"

    def covariates(self, reference: Mapping[str, str], level: str = "2") -> dict[str, str]:
        prof = dict(reference)
        prof["sex"] = self.sex
        for b in self.behaviors:
            prof[b] = level
        return prof


def standard_profiles(behaviors: Sequence[str] = RISK_BEHAVIORS) -> list[RiskProfile]:
    """2 Lowest, 6 Intermediate and 6 Highest profiles (per sex)."""
    out = []
    for sex in ("F", "M"):
        out.append(RiskProfile("Lowest", sex, ()))
    for sex in ("F", "M"):
        out.extend(RiskProfile("Intermediate", sex, (b,)) for b in behaviors)
    for sex in ("F", "M"):
        out.extend(RiskProfile("Highest", sex, pair) for pair in combinations(behaviors, 2))
    return out


def profile_curves(
    fit, profiles: Sequence[RiskProfile], t_max: float = T_MAX, start: float = 50.0, workers: int = 1
) -> dict[RiskProfile, tuple[StepSurvival, DisfleCurve]]:
    from .cox import predict_survival, reference_profile

    ref = reference_profile(fit.spec)

    def one(p):
        s = predict_survival(fit, p.covariates(ref), (start, t_max))
        return p, (s, disfle_curve(s, t_max, start))

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            return dict(pool.map(one, profiles))
    return dict(map(one, profiles))


def write_disfle_csv(
    rows: Mapping[str, tuple[StepSurvival, DisfleCurve]], out: TextIO, header_comment: str | None = None
) -> None:
    if header_comment:
        out.write(f"# {header_comment}\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["stratum", "age", "survival", "disfle", "disfle_lower", "disfle_upper"])
    for label, (surv, dc) in rows.items():
        s = surv(dc.ages)
        lo = dc.lower if dc.lower is not None else dc.values
        hi = dc.upper if dc.upper is not None else dc.values
        for a, sv, v, l, u in zip(dc.ages, s, dc.values, lo, hi):
            w.writerow([label, f"{a:.6f}", f"{sv:.8f}", f"{v:.6f}", f"{l:.6f}", f"{u:.6f}"])
