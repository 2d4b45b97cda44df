"""Independent reference implementations used as test oracles.

Everything here is written as directly as possible from the textbook
definitions, with explicit loops and no shared code with the package.
"""

from __future__ import annotations

import numpy as np


def km_hand(entry, exit, event):
    """Product-limit estimate; returns (times, survival) at distinct event times."""
    times = sorted(set(float(t) for t, d in zip(exit, event) if d))
    s = 1.0
    out_t, out_s = [], []
    for t in times:
        at_risk = sum(1 for a, b in zip(entry, exit) if a < t <= b)
        deaths = sum(1 for b, d in zip(exit, event) if d and b == t)
        s *= 1.0 - deaths / at_risk
        out_t.append(t)
        out_s.append(s)
    return np.array(out_t), np.array(out_s)


def nelson_aalen_hand(entry, exit, event):
    """Cumulative hazard increments d/n at distinct event times."""
    times = sorted(set(float(t) for t, d in zip(exit, event) if d))
    H = 0.0
    out_t, out_h = [], []
    for t in times:
        n = sum(1 for a, b in zip(entry, exit) if a < t <= b)
        d = sum(1 for b, e in zip(exit, event) if e and b == t)
        H += d / n
        out_t.append(t)
        out_h.append(H)
    return np.array(out_t), np.array(out_h)


def breslow_loglik_hand(start, stop, event, X, beta):
    """Breslow-ties log partial likelihood over (start, stop] episodes."""
    X = np.asarray(X, dtype=float)
    beta = np.asarray(beta, dtype=float)
    eta = X @ beta
    ll = 0.0
    for t in sorted(set(float(s) for s, e in zip(stop, event) if e)):
        risk = [i for i in range(len(stop)) if start[i] < t <= stop[i]]
        dead = [i for i in range(len(stop)) if event[i] and stop[i] == t]
        denom = sum(np.exp(eta[i]) for i in risk)
        ll += sum(eta[i] for i in dead) - len(dead) * np.log(denom)
    return ll


def harrell_hand(entry, exit, event, score):
    """Pairs (i, j): i has an event at T_i, j is at risk just after T_i."""
    conc = 0.0
    comp = 0
    for i in range(len(exit)):
        if not event[i]:
            continue
        t = exit[i]
        for j in range(len(exit)):
            if j == i or not entry[j] < t:
                continue
            if exit[j] > t or (exit[j] == t and not event[j]):
                comp += 1
                if score[i] > score[j]:
                    conc += 1.0
                elif score[i] == score[j]:
                    conc += 0.5
    return conc, comp


def riemann_residual(step_times, step_values, t, t_max, h):
    """Left-point Riemann sum of a right-continuous step survival on [t, t_max],
    divided by S(t). Exact when every step time is a multiple of ``h``."""
    n = int(round((t_max - t) / h))
    grid = t + h * np.arange(n)
    idx = np.searchsorted(step_times, grid + h * 1e-6, side="right") - 1
    vals = np.concatenate([[1.0], step_values])[idx + 1]
    idx0 = np.searchsorted(step_times, t + h * 1e-6, side="right") - 1
    s_t = np.concatenate([[1.0], step_values])[idx0 + 1]
    return float(np.sum(vals) * h / s_t)


def random_cohort(rng, n, censor=True, truncate=True, grid=None):
    """Entry/exit/event with mixed censoring and delayed entry; optional time grid."""
    entry = rng.uniform(0, 5, n) if truncate else np.zeros(n)
    exit = entry + rng.exponential(3.0, n) + 1e-3
    if grid is not None:
        entry = np.floor(entry / grid) * grid
        exit = np.maximum(np.ceil(exit / grid) * grid, entry + grid)
    event = rng.random(n) < (0.7 if censor else 1.0)
    return entry, exit, event
