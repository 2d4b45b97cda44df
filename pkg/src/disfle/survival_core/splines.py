"""Natural cubic spline basis.

The basis is built from the truncated-power construction of a natural cubic
spline on unit-scaled ages and then reparameterised by knot values: column
``j`` equals 1 at its knot and 0 at every other knot. With ``intercept``
(the default) every knot carries a column and constants are in the span;
without it the spline is pinned to 0 at the lower boundary knot. The
knot-value parameterisation keeps the information matrix well conditioned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _truncated_power(u: np.ndarray, knots: np.ndarray, intercept: bool) -> np.ndarray:
    # ESL eq. 5.4-5.5
    u = np.asarray(u, dtype=float)[:, None]
    last = knots[-1]

    def d(k):
        num = np.clip(u - knots[k], 0, None) ** 3 - np.clip(u - last, 0, None) ** 3
        return num / (last - knots[k])

    dk = np.hstack([d(k) for k in range(len(knots) - 1)]) if len(knots) > 2 else None
    cols = [np.ones_like(u), u] if intercept else [u]
    if dk is not None:
        cols.append(dk[:, :-1] - dk[:, -1:])
    return np.hstack(cols)


@dataclass(frozen=True)
class SplineBasis:
    boundary_knots: tuple[float, float]
    interior_knots: tuple[float, ...] = ()
    intercept: bool = True

    def __post_init__(self):
        lo, hi = self.boundary_knots
        inner = np.asarray(self.interior_knots, dtype=float)
        if not lo < hi:
            raise ValueError("boundary knots must be increasing")
        if inner.size and (np.any(np.diff(inner) <= 0) or inner[0] <= lo or inner[-1] >= hi):
            raise ValueError("interior knots must be strictly increasing and inside the boundary")

    @property
    def df(self) -> int:
        return len(self.interior_knots) + (2 if self.intercept else 1)

    @property
    def knots(self) -> np.ndarray:
        return np.array([self.boundary_knots[0], *self.interior_knots, self.boundary_knots[1]])

    def _scaled_knots(self) -> np.ndarray:
        lo, hi = self.boundary_knots
        return (self.knots - lo) / (hi - lo)

    def _raw(self, ages) -> np.ndarray:
        lo, hi = self.boundary_knots
        u = (np.atleast_1d(np.asarray(ages, dtype=float)) - lo) / (hi - lo)
        return _truncated_power(u, self._scaled_knots(), self.intercept)

    def _transform(self) -> np.ndarray:
        at_knots = self._raw(self.knots if self.intercept else self.knots[1:])
        return np.linalg.inv(at_knots)

    def __call__(self, ages) -> np.ndarray:
        """Basis matrix of shape ``(len(ages), df)``."""
        B = self._raw(ages) @ self._transform()
        # cardinal values at knots come back as round-off; keep them exact
        B[np.abs(B) < 1e-12] = 0.0
        return B

    @classmethod
    def from_event_ages(
        cls, event_ages, df: int = 8, boundary: tuple[float, float] = (50.0, 100.0),
        intercept: bool = True,
    ) -> "SplineBasis":
        """Interior knots at evenly spaced quantiles of the event ages."""
        n_inner = df - (2 if intercept else 1)
        if n_inner < 0:
            raise ValueError(f"df={df} too small")
        lo, hi = boundary
        ages = np.asarray(event_ages, dtype=float)
        ages = ages[(ages > lo) & (ages < hi)]
        probs = np.arange(1, n_inner + 1) / (n_inner + 1)
        inner = np.quantile(ages, probs) if ages.size else np.array([])
        if inner.size != n_inner or np.unique(inner).size != n_inner:
            inner = lo + (hi - lo) * probs
        return cls((float(lo), float(hi)), tuple(float(k) for k in inner), intercept)

    def to_dict(self) -> dict:
        return {"boundary_knots": list(self.boundary_knots), "interior_knots": list(self.interior_knots),
                "intercept": self.intercept}

    @classmethod
    def from_dict(cls, d) -> "SplineBasis":
        return cls(tuple(d["boundary_knots"]), tuple(d["interior_knots"]), bool(d.get("intercept", True)))
