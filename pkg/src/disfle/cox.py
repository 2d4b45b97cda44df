"""Cox regression over counting-process episodes.

Breslow-ties partial likelihood maximised by Newton-Raphson with step
halving, Breslow cumulative baseline hazard, covariate-conditional survival
and hazard-ratio curves for age-dependent terms.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Mapping, Sequence, TextIO

import numpy as np
from scipy import sparse
from scipy.stats import norm

from .km import StepSurvival
from .survival_core import (
    Column, DesignMatrix, ModelSpec, SplineBasis, cell_left, design_rows,
)
from .survival_core.design import build_columns


class CoxError(RuntimeError):
    pass


class MonotoneLikelihoodError(CoxError):
    pass


class SingularInformationError(CoxError):
    pass


class ConvergenceError(CoxError):
    pass


@dataclass
class StepCumHazard:
    times: np.ndarray
    increments: np.ndarray
    cumulative: np.ndarray
    n_events: np.ndarray
    risk_sum: np.ndarray
    risk_means: np.ndarray | None = None

    def __call__(self, t) -> np.ndarray:
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right") - 1
        return np.concatenate([[0.0], self.cumulative])[idx + 1]


@dataclass
class CoxFit:
    beta: np.ndarray
    covariance: np.ndarray
    columns: list[Column]
    spec: ModelSpec
    basis: SplineBasis
    convergence: dict
    baseline: StepCumHazard | None = None

    @property
    def labels(self) -> list[str]:
        return [c.label for c in self.columns]

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0, None))

    def column_index(self, label: str) -> int:
        return self.labels.index(label)


@dataclass
class HazardRatioCurve:
    label: str
    ages: np.ndarray
    ratio: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


# --------------------------------------------------------------------------- risk sets

@dataclass
class _RiskSets:
    """Index structure shared by every evaluation on one design."""

    times: np.ndarray
    d: np.ndarray
    idx_stop: np.ndarray
    idx_start: np.ndarray
    event_rows: np.ndarray

    @classmethod
    def of(cls, start, stop, event) -> "_RiskSets":
        times, d = np.unique(stop[event], return_counts=True)
        # event times t_k with t_k <= age; row i is at risk at t_k iff idx_start(i) <= k < idx_stop(i)
        idx_stop = np.searchsorted(times, stop, side="right")
        idx_start = np.searchsorted(times, start, side="right")
        return cls(times, d.astype(float), idx_stop, idx_start, np.flatnonzero(event))

    def bucket_matrix(self, w: np.ndarray) -> sparse.csr_matrix:
        n = len(w)
        U = len(self.times)
        rows = np.concatenate([self.idx_stop, self.idx_start])
        cols = np.concatenate([np.arange(n), np.arange(n)])
        data = np.concatenate([w, -w])
        return sparse.csr_matrix((data, (rows, cols)), shape=(U + 1, n))

    def at_event_times(self, buckets: np.ndarray) -> np.ndarray:
        # sum over buckets m > k, i.e. rows with idx_start <= k < idx_stop
        rev = np.cumsum(buckets[::-1], axis=0)[::-1]
        return rev[1:]


def _evaluate(X, rs: _RiskSets, beta, want_info=True):
    eta = X @ beta
    shift = eta.max() if eta.size else 0.0
    w = np.exp(eta - shift)
    M = rs.bucket_matrix(w)
    S0 = rs.at_event_times(np.asarray(M.sum(axis=1)).ravel())
    if np.any(S0 <= 0):
        raise CoxError("empty risk set at an event age (episode data corrupted)")
    S1 = rs.at_event_times(np.asarray(M @ X))
    means = S1 / S0[:, None]
    d = rs.d
    loglik = eta[rs.event_rows].sum() - np.sum(d * (np.log(S0) + shift))
    score = X[rs.event_rows].sum(axis=0) - d @ means
    if not want_info:
        return loglik, score, None, (S0, means, shift)
    A = np.concatenate([[0.0], np.cumsum(d / S0)])
    c = A[rs.idx_stop] - A[rs.idx_start]
    Z = X * np.sqrt(w * c)[:, None]
    info = Z.T @ Z - (means * d[:, None]).T @ means
    info = (info + info.T) / 2
    return loglik, score, info, (S0, means, shift)


def log_partial_likelihood(design: DesignMatrix, beta) -> float:
    rs = _RiskSets.of(design.start, design.stop, design.event)
    return _evaluate(design.X, rs, np.asarray(beta, dtype=float), want_info=False)[0]


def score_and_information(design: DesignMatrix, beta) -> tuple[float, np.ndarray, np.ndarray]:
    rs = _RiskSets.of(design.start, design.stop, design.event)
    ll, g, H, _ = _evaluate(design.X, rs, np.asarray(beta, dtype=float))
    return ll, g, H


# --------------------------------------------------------------------------- fitting

def _dependent_columns(info: np.ndarray, labels: Sequence[str]) -> list[str]:
    vals, vecs = np.linalg.eigh(info)
    v = np.abs(vecs[:, 0])
    return [labels[j] for j in np.flatnonzero(v > 0.1 * v.max())]


def _newton_direction(info, score, labels):
    scale = np.sqrt(np.clip(np.diag(info), 1e-300, None))
    scaled = info / np.outer(scale, scale)
    vals = np.linalg.eigvalsh(scaled)
    if vals[0] <= 1e-10 * max(vals[-1], 1.0):
        raise SingularInformationError(
            "information matrix is singular; dependent columns: " + ", ".join(_dependent_columns(scaled, labels))
        )
    return np.linalg.solve(info, score)


def fit_cox(
    design: DesignMatrix,
    max_iter: int = 25,
    tol_loglik: float = 1e-9,
    tol_score: float = 1e-6,
    max_abs_beta: float = 15.0,
    init: np.ndarray | None = None,
) -> CoxFit:
    """Maximise the Breslow-ties partial likelihood.

    Columns flagged as empty are removed first. A risk set at event age ``t``
    holds the episodes with ``start < t <= stop``.
    """
    design = design.drop_flagged()
    if not np.any(design.event):
        raise CoxError("design has no event rows")
    X = design.X
    labels = design.labels
    rs = _RiskSets.of(design.start, design.stop, design.event)
    beta = np.zeros(X.shape[1]) if init is None else np.asarray(init, dtype=float).copy()
    ll, g, H, _ = _evaluate(X, rs, beta)
    trace = [(0, ll, float(np.abs(g).max()) if g.size else 0.0)]
    converged = X.shape[1] == 0
    it = 0
    while not converged:
        it += 1
        if it > max_iter:
            raise ConvergenceError(f"no convergence after {max_iter} iterations; trace={trace}")
        step = _newton_direction(H, g, labels)
        new = beta + step
        ll_new, g_new, H_new, _ = _evaluate(X, rs, new)
        halvings = 0
        while not ll_new >= ll - 1e-12 * abs(ll) and halvings < 40:
            step = step / 2
            new = beta + step
            ll_new, g_new, H_new, _ = _evaluate(X, rs, new)
            halvings += 1
        big = np.flatnonzero(np.abs(new) > max_abs_beta)
        if big.size:
            raise MonotoneLikelihoodError(
                "coefficient diverging (monotone likelihood): " + ", ".join(labels[j] for j in big)
            )
        rel = abs(ll_new - ll) / max(abs(ll_new), 1e-300)
        beta, ll, g, H = new, ll_new, g_new, H_new
        gmax = float(np.abs(g).max())
        trace.append((it, ll, gmax))
        converged = rel < tol_loglik or gmax < tol_score
    if X.shape[1]:
        _newton_direction(H, g, labels)  # singularity check at the optimum
        cov = np.linalg.inv(H)
        cov = (cov + cov.T) / 2
    else:
        cov = np.zeros((0, 0))
    fit = CoxFit(
        beta=beta, covariance=cov, columns=list(design.columns), spec=design.spec,
        basis=design.basis,
        convergence={"iterations": it, "loglik": float(ll), "max_score": float(np.abs(g).max()) if g.size else 0.0,
                     "trace": [list(t) for t in trace]},
    )
    fit.baseline = breslow_baseline(fit, design)
    return fit


def breslow_baseline(fit: CoxFit, design: DesignMatrix) -> StepCumHazard:
    """Breslow estimator: events at ``t`` over the at-risk sum of ``exp(x beta)``."""
    design = _align(design, fit)
    rs = _RiskSets.of(design.start, design.stop, design.event)
    if rs.times.size == 0:
        raise CoxError("no events to anchor the baseline hazard")
    _, _, _, (S0, means, shift) = _evaluate(design.X, rs, fit.beta, want_info=False)
    risk_sum = S0 * np.exp(shift)
    inc = rs.d / risk_sum
    return StepCumHazard(rs.times, inc, np.cumsum(inc), rs.d.astype(int), risk_sum, means)


def _align(design: DesignMatrix, fit: CoxFit) -> DesignMatrix:
    labels = [c.label for c in design.columns]
    if labels == fit.labels:
        return design
    idx = [labels.index(lab) for lab in fit.labels]
    return DesignMatrix(
        design.X[:, idx], [design.columns[k] for k in idx], design.start, design.stop,
        design.event, design.subject_ids, design.spec, design.basis, [],
    )


def linear_predictor(fit: CoxFit, design: DesignMatrix) -> np.ndarray:
    return _align(design, fit).X @ fit.beta


# --------------------------------------------------------------------------- prediction

def _check_profile(fit: CoxFit, profile: Mapping[str, object]) -> dict[str, np.ndarray]:
    kept = {c.label for c in fit.columns}
    out = {}
    for t in fit.spec.terms:
        if t.covariate not in profile:
            raise CoxError(f"profile lacks covariate {t.covariate!r}")
        lv = str(profile[t.covariate])
        if lv not in t.levels:
            raise CoxError(f"profile level {t.covariate}={lv} unknown to the model")
        if lv != t.reference:
            probe = f"{t.covariate}[{lv}]" + (":ns1" if t.age_dependent else "")
            if probe not in kept:
                raise CoxError(f"profile level {t.covariate}={lv} unseen in training")
        out[t.covariate] = lv
    return out


def profile_rows(fit: CoxFit, profile: Mapping[str, object], ages) -> np.ndarray:
    """Design rows of a fixed covariate profile at event ages ``ages``."""
    prof = _check_profile(fit, profile)
    ages = np.asarray(ages, dtype=float)
    cov = {k: np.full(len(ages), v, dtype=object) for k, v in prof.items()}
    basis_ages = cell_left(np.asarray(fit.spec.grid), ages, left_open=True)
    return design_rows(fit.spec, fit.basis, fit.columns, cov, basis_ages)


def reference_profile(spec: ModelSpec) -> dict[str, str]:
    return {t.covariate: t.reference for t in spec.terms}


def predict_survival(
    fit: CoxFit,
    profile: Mapping[str, object],
    age_range: tuple[float, float] = (50.0, 100.0),
    level: float = 0.95,
) -> StepSurvival:
    """Survival of a covariate profile from ``age_range[0]`` on the baseline steps.

    Bands use the delta method for the cumulative hazard (baseline and
    coefficient uncertainty) on the log scale.
    """
    base = fit.baseline
    a0, a1 = age_range
    keep = (base.times > a0) & (base.times <= a1)
    times = base.times[keep]
    rows = profile_rows(fit, profile, times)
    eta = rows @ fit.beta
    r = np.exp(eta)
    inc = base.increments[keep]
    H = np.cumsum(r * inc)
    surv = np.exp(-H)
    var_base = np.cumsum(r ** 2 * inc ** 2 / base.n_events[keep])
    if base.risk_means is not None and rows.shape[1]:
        g = np.cumsum((rows - base.risk_means[keep]) * (r * inc)[:, None], axis=0)
        var_beta = np.einsum("ij,jk,ik->i", g, fit.covariance, g)
    else:
        var_beta = 0.0
    se = np.sqrt(var_base + var_beta)
    z = norm.ppf(0.5 + level / 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(H > 0, np.exp(z * se / H), 1.0)
    lower = np.exp(-H * f)
    upper = np.exp(-H / f)
    return StepSurvival(times, surv, lower, upper, n_events=base.n_events[keep])


# --------------------------------------------------------------------------- hazard ratios

def _main_contrast(fit: CoxFit, term: str, level: str, ages: np.ndarray) -> np.ndarray:
    level = str(level)
    C = np.zeros((len(ages), len(fit.columns)))
    basis_vals = None
    found = False
    for k, c in enumerate(fit.columns):
        if c.terms == (term,) and c.levels == (level,):
            found = True
            if c.kind == "age":
                if basis_vals is None:
                    basis_vals = fit.basis(cell_left(np.asarray(fit.spec.grid), ages, left_open=True))
                C[:, k] = basis_vals[:, c.basis_index]
            else:
                C[:, k] = 1.0
    if not found:
        raise CoxError(f"no fitted columns for {term}={level}")
    return C


def _interaction_contrast(fit, a, la, b, lb, n) -> np.ndarray:
    C = np.zeros((n, len(fit.columns)))
    for k, c in enumerate(fit.columns):
        if c.kind != "interaction":
            continue
        if (c.terms, c.levels) in (((a, b), (str(la), str(lb))), ((b, a), (str(lb), str(la)))):
            C[:, k] = 1.0
            return C
    raise CoxError(f"model has no interaction column for {a}={la} x {b}={lb}")


def _curve(fit: CoxFit, label: str, ages: np.ndarray, C: np.ndarray, level: float) -> HazardRatioCurve:
    lp = C @ fit.beta
    se = np.sqrt(np.clip(np.einsum("ij,jk,ik->i", C, fit.covariance, C), 0, None))
    z = norm.ppf(0.5 + level / 2)
    return HazardRatioCurve(label, ages, np.exp(lp), np.exp(lp - z * se), np.exp(lp + z * se))


def hazard_ratio_curve(fit: CoxFit, term: str, level, ages, conf: float = 0.95) -> HazardRatioCurve:
    ages = np.asarray(ages, dtype=float)
    C = _main_contrast(fit, term, str(level), ages)
    return _curve(fit, f"{term}[{level}]", ages, C, conf)


def combined_effect(
    fit: CoxFit, term_a: str, level_a, term_b: str, level_b, ages,
    with_interaction: bool = True, conf: float = 0.95,
) -> HazardRatioCurve:
    """Product of two main-effect curves, times the interaction ratio when asked."""
    ages = np.asarray(ages, dtype=float)
    C = _main_contrast(fit, term_a, str(level_a), ages) + _main_contrast(fit, term_b, str(level_b), ages)
    label = f"{term_a}[{level_a}]+{term_b}[{level_b}]"
    if with_interaction:
        C = C + _interaction_contrast(fit, term_a, level_a, term_b, level_b, len(ages))
        label += " with interaction"
    return _curve(fit, label, ages, C, conf)


# --------------------------------------------------------------------------- export

def coefficient_rows(fit: CoxFit) -> list[dict]:
    se = fit.std_errors
    out = []
    for c, b, s in zip(fit.columns, fit.beta, se):
        p = 2 * norm.sf(abs(b) / s) if s > 0 else float("nan")
        out.append({
            "term": "*".join(c.terms), "level": "*".join(c.levels),
            "basis_index": "" if c.basis_index is None else c.basis_index + 1,
            "beta": b, "std_error": s, "hazard_ratio": np.exp(b), "p_value": p,
        })
    return out


def write_coefficients_csv(fit: CoxFit, out: TextIO, header_comment: str | None = None) -> None:
    if header_comment:
        out.write(f"# {header_comment}\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["term", "level", "basis_index", "beta", "std_error", "hazard_ratio", "p_value"])
    for r in coefficient_rows(fit):
        w.writerow([r["term"], r["level"], r["basis_index"], f"{r['beta']:.10g}", f"{r['std_error']:.10g}",
                    f"{r['hazard_ratio']:.10g}", f"{r['p_value']:.6g}"])


def save_fit(fit: CoxFit, path, extra: Mapping | None = None) -> None:
    meta = {
        "format": "disfle-coxfit", "version": 1,
        "labels": fit.labels, "spec": fit.spec.to_dict(), "basis": fit.basis.to_dict(),
        "convergence": fit.convergence, "extra": dict(extra or {}),
    }
    b = fit.baseline
    arrays = {
        "beta": fit.beta, "covariance": fit.covariance,
        "base_times": b.times, "base_increments": b.increments, "base_n_events": b.n_events,
        "base_risk_sum": b.risk_sum,
        "base_risk_means": b.risk_means if b.risk_means is not None else np.zeros((len(b.times), 0)),
    }
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_fit(path) -> tuple[CoxFit, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != "disfle-coxfit":
            raise CoxError(f"{path} is not a fit artifact")
        spec = ModelSpec.from_dict(meta["spec"])
        by_label = {c.label: c for c in build_columns(spec)}
        columns = [by_label[lab] for lab in meta["labels"]]
        inc = z["base_increments"]
        baseline = StepCumHazard(
            z["base_times"], inc, np.cumsum(inc), z["base_n_events"], z["base_risk_sum"],
            z["base_risk_means"] if z["base_risk_means"].shape[1] else None,
        )
        fit = CoxFit(z["beta"], z["covariance"], columns, spec, SplineBasis.from_dict(meta["basis"]),
                     meta["convergence"], baseline)
    return fit, meta.get("extra", {})
