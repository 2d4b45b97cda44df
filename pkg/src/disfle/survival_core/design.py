"""Model specification and design-matrix assembly over episodes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence, TextIO

import numpy as np
import yaml

from ..cohort import DEPARTMENTS
from .episodes import Episode, age_grid
from .splines import SplineBasis


class DesignError(ValueError):
    pass


@dataclass(frozen=True)
class Term:
    covariate: str
    levels: tuple[str, ...]
    reference: str
    age_dependent: bool = False

    def __post_init__(self):
        if self.reference not in self.levels:
            raise DesignError(f"{self.covariate}: reference {self.reference!r} not among levels")
        if len(set(self.levels)) != len(self.levels):
            raise DesignError(f"{self.covariate}: duplicate levels")

    @property
    def active_levels(self) -> tuple[str, ...]:
        return tuple(lv for lv in self.levels if lv != self.reference)


@dataclass(frozen=True)
class ModelSpec:
    terms: tuple[Term, ...]
    interactions: tuple[tuple[str, str], ...] = ()
    df: int = 8
    grid: tuple[float, ...] = tuple(age_grid().tolist())
    boundary: tuple[float, float] = (50.0, 100.0)
    interior_knots: tuple[float, ...] | None = None

    def __post_init__(self):
        names = [t.covariate for t in self.terms]
        if len(set(names)) != len(names):
            raise DesignError("duplicate terms in model spec")
        pairs = [frozenset(p) for p in self.interactions]
        if len(set(pairs)) != len(pairs):
            raise DesignError("duplicate interactions in model spec")
        for a, b in self.interactions:
            if a == b or a not in names or b not in names:
                raise DesignError(f"interaction {a}*{b} must join two distinct main terms")
        if any(t.age_dependent for t in self.terms) and self.df < 2:
            raise DesignError("age-dependent terms need df >= 2")
        if self.interior_knots is not None and self.df != len(self.interior_knots) + 2:
            raise DesignError(f"{len(self.interior_knots)} interior knots imply df={len(self.interior_knots) + 2}")

    def term(self, covariate: str) -> Term:
        for t in self.terms:
            if t.covariate == covariate:
                return t
        raise KeyError(covariate)

    @property
    def covariates(self) -> list[str]:
        return [t.covariate for t in self.terms]

    def to_dict(self) -> dict:
        return {
            "df": self.df,
            "grid": list(self.grid),
            "boundary": list(self.boundary),
            "interior_knots": None if self.interior_knots is None else list(self.interior_knots),
            "terms": [
                {"covariate": t.covariate, "levels": list(t.levels), "reference": t.reference,
                 "age_dependent": t.age_dependent}
                for t in self.terms
            ],
            "interactions": [list(p) for p in self.interactions],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        terms = []
        for t in d.get("terms", []):
            levels = t.get("levels")
            if levels is None and t["covariate"] == "department":
                levels = DEPARTMENTS
            if levels is None:
                raise DesignError(f"term {t['covariate']!r} needs levels")
            terms.append(Term(
                str(t["covariate"]), tuple(_norm(v) for v in levels), _norm(t["reference"]),
                bool(t.get("age_dependent", False)),
            ))
        grid = d.get("grid")
        if isinstance(grid, Mapping):
            grid = age_grid(grid.get("start", 50), grid.get("stop", 100), grid.get("step", 2))
        grid = tuple(float(g) for g in (grid if grid is not None else age_grid()))
        boundary = tuple(float(b) for b in d.get("boundary", (50.0, 100.0)))
        knots = d.get("interior_knots")
        if knots == "grid":
            knots = [g for g in grid if boundary[0] < g < boundary[1]]
        df = d.get("df") if knots is None or d.get("df") is not None else len(knots) + 2
        return cls(
            terms=tuple(terms),
            interactions=tuple(tuple(map(str, p)) for p in d.get("interactions", [])),
            df=int(df if df is not None else 8),
            grid=grid,
            boundary=boundary,
            interior_knots=None if knots is None else tuple(float(k) for k in knots),
        )

    @classmethod
    def load(cls, source: TextIO | str) -> "ModelSpec":
        return cls.from_dict(yaml.safe_load(source) or {})

    def with_options(self, **changes) -> "ModelSpec":
        d = self.to_dict()
        if "df" in changes and "interior_knots" not in changes:
            d["interior_knots"] = None
        d.update(changes)
        return ModelSpec.from_dict(d)


def _norm(value) -> str:
    return str(value)


def default_model_spec(df: int = 8, grid_step: float = 2.0) -> ModelSpec:
    """Full model: four age-dependent main terms plus constant geographic terms
    and six constant two-way interactions among sex and the behaviours."""
    cats = ("0", "1", "2")
    quart = ("0", "1", "2", "3")
    return ModelSpec(
        terms=(
            Term("obesity", cats, "0", True),
            Term("alcohol", cats, "0", True),
            Term("smoking", cats, "0", True),
            Term("sex", ("F", "M"), "F", True),
            Term("department", DEPARTMENTS, "78", False),
            Term("immigration", quart, "0", False),
            Term("education", quart, "0", False),
        ),
        interactions=(
            ("obesity", "alcohol"), ("obesity", "smoking"), ("alcohol", "smoking"),
            ("sex", "obesity"), ("sex", "alcohol"), ("sex", "smoking"),
        ),
        df=df,
        grid=tuple(age_grid(50, 100, grid_step).tolist()),
    )


@dataclass(frozen=True)
class Column:
    label: str
    kind: str  # "age", "constant" or "interaction"
    terms: tuple[str, ...]
    levels: tuple[str, ...]
    basis_index: int | None = None


def build_columns(spec: ModelSpec) -> list[Column]:
    cols: list[Column] = []
    for t in spec.terms:
        for lv in t.active_levels:
            if t.age_dependent:
                cols.extend(
                    Column(f"{t.covariate}[{lv}]:ns{j + 1}", "age", (t.covariate,), (lv,), j)
                    for j in range(spec.df)
                )
            else:
                cols.append(Column(f"{t.covariate}[{lv}]", "constant", (t.covariate,), (lv,)))
    for a, b in spec.interactions:
        ta, tb = spec.term(a), spec.term(b)
        for la in ta.active_levels:
            for lb in tb.active_levels:
                cols.append(Column(f"{a}[{la}]:{b}[{lb}]", "interaction", (a, b), (la, lb)))
    return cols


def cell_left(grid: np.ndarray, ages: np.ndarray, left_open: bool) -> np.ndarray:
    """Left edge of the grid cell holding each age.

    Episode starts are located with closed-left cells ``[g_k, g_k+1)``;
    event ages with left-open cells ``(g_k, g_k+1]``. Both agree for every
    age inside an episode ``(start, stop]``.
    """
    side = "left" if left_open else "right"
    idx = np.searchsorted(grid, ages, side=side) - 1
    return grid[np.clip(idx, 0, len(grid) - 1)]


def design_rows(
    spec: ModelSpec,
    basis: SplineBasis,
    columns: Sequence[Column],
    covariates: Mapping[str, np.ndarray],
    basis_ages: np.ndarray,
) -> np.ndarray:
    """Dense design rows for per-row covariate values and basis-evaluation ages."""
    n = len(basis_ages)
    X = np.zeros((n, len(columns)))
    if n == 0:
        return X
    uniq, inverse = np.unique(basis_ages, return_inverse=True)
    B = basis(uniq)[inverse]
    ind_cache: dict[tuple[str, str], np.ndarray] = {}

    def ind(cov, lv):
        key = (cov, lv)
        if key not in ind_cache:
            ind_cache[key] = (covariates[cov] == lv).astype(float)
        return ind_cache[key]

    for k, c in enumerate(columns):
        if c.kind == "age":
            X[:, k] = ind(c.terms[0], c.levels[0]) * B[:, c.basis_index]
        elif c.kind == "constant":
            X[:, k] = ind(c.terms[0], c.levels[0])
        else:
            X[:, k] = ind(c.terms[0], c.levels[0]) * ind(c.terms[1], c.levels[1])
    return X


@dataclass
class DesignMatrix:
    X: np.ndarray
    columns: list[Column]
    start: np.ndarray
    stop: np.ndarray
    event: np.ndarray
    subject_ids: np.ndarray
    spec: ModelSpec
    basis: SplineBasis
    flagged: list[int] = field(default_factory=list)

    @property
    def labels(self) -> list[str]:
        return [c.label for c in self.columns]

    @property
    def grid(self) -> np.ndarray:
        return np.asarray(self.spec.grid)

    def __len__(self):
        return len(self.event)

    def drop_flagged(self) -> "DesignMatrix":
        if not self.flagged:
            return self
        keep = [k for k in range(len(self.columns)) if k not in set(self.flagged)]
        return DesignMatrix(
            self.X[:, keep], [self.columns[k] for k in keep], self.start, self.stop,
            self.event, self.subject_ids, self.spec, self.basis, [],
        )

    def subset(self, mask: np.ndarray) -> "DesignMatrix":
        return DesignMatrix(
            self.X[mask], self.columns, self.start[mask], self.stop[mask], self.event[mask],
            self.subject_ids[mask], self.spec, self.basis, list(self.flagged),
        )


def covariate_arrays(episodes: Sequence[Episode], names: Sequence[str]) -> dict[str, np.ndarray]:
    out = {}
    for name in names:
        try:
            out[name] = np.array([_norm(ep.covariates[name]) for ep in episodes], dtype=object)
        except KeyError:
            raise DesignError(f"covariate {name!r} missing from episode data") from None
    return out


def build_design(
    episodes: Sequence[Episode], spec: ModelSpec, basis: SplineBasis | None = None
) -> DesignMatrix:
    """Assemble the design matrix, rows sorted by subject id then start age.

    Age-dependent levels contribute ``df`` columns equal to the level
    indicator times the spline basis at the left edge of the episode's grid
    cell; constant terms one indicator per non-reference level; interactions
    the product of the two level indicators.
    """
    if any(ep.synthetic for ep in episodes):
        raise DesignError("synthetic (population-adjusted) exposures cannot enter a Cox design")
    episodes = sorted(episodes, key=lambda ep: (ep.subject_id, ep.start_age))
    start = np.array([ep.start_age for ep in episodes], dtype=float)
    stop = np.array([ep.stop_age for ep in episodes], dtype=float)
    event = np.array([ep.event for ep in episodes], dtype=bool)
    has_age = any(t.age_dependent for t in spec.terms)
    if basis is None:
        if spec.interior_knots is not None:
            basis = SplineBasis(spec.boundary, spec.interior_knots)
        elif has_age:
            basis = SplineBasis.from_event_ages(stop[event], spec.df, spec.boundary)
        else:
            basis = SplineBasis(spec.boundary)  # unused
    if has_age and basis.df != spec.df:
        raise DesignError(f"basis has {basis.df} columns, spec asks for df={spec.df}")
    cov = covariate_arrays(episodes, spec.covariates)
    for t in spec.terms:
        unknown = set(cov[t.covariate].tolist()) - set(t.levels)
        if unknown:
            raise DesignError(f"covariate {t.covariate!r} has undeclared levels {sorted(unknown)}")
    columns = build_columns(spec)
    grid = np.asarray(spec.grid, dtype=float)
    X = design_rows(spec, basis, columns, cov, cell_left(grid, start, left_open=False))
    flagged = [k for k in range(X.shape[1]) if not np.any(X[:, k])] if len(episodes) else []
    ids = np.array([ep.subject_id for ep in episodes], dtype=object)
    return DesignMatrix(X, columns, start, stop, event, ids, spec, basis, flagged)
