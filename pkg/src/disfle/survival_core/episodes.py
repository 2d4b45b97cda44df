"""Counting-process episodes: exposures split at the points of an age grid."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..cohort import Exposure


@dataclass
class Episode:
    subject_id: str
    start_age: float
    stop_age: float
    event: bool
    covariates: Mapping[str, object] = field(default_factory=dict)
    synthetic: bool = False


def age_grid(start: float = 50.0, stop: float = 100.0, step: float = 2.0) -> np.ndarray:
    n = int(round((stop - start) / step))
    return start + step * np.arange(n + 1)


def split_episodes(exposures: Iterable[Exposure], grid: Sequence[float]) -> list[Episode]:
    """Partition each exposure at the interior grid points it straddles.

    Only the last child of an exposure carries its event flag; covariates are
    shared (not copied) since they are constant over time.
    """
    grid = np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    out: list[Episode] = []
    for e in exposures:
        lo = np.searchsorted(grid, e.entry_age, side="right")
        hi = np.searchsorted(grid, e.exit_age, side="left")
        cuts = [e.entry_age, *grid[lo:hi].tolist(), e.exit_age]
        last = len(cuts) - 2
        for k in range(last + 1):
            out.append(Episode(
                e.subject_id, cuts[k], cuts[k + 1], e.event and k == last,
                e.covariates, e.synthetic,
            ))
    return out


def merge_episodes(episodes: Iterable[Episode]) -> list[Exposure]:
    """Inverse of :func:`split_episodes` for contiguous children of each id."""
    merged: dict[str, Exposure] = {}
    for ep in episodes:
        cur = merged.get(ep.subject_id)
        if cur is None:
            merged[ep.subject_id] = Exposure(
                ep.subject_id, ep.start_age, ep.stop_age, ep.event, ep.covariates, ep.synthetic
            )
        else:
            cur.entry_age = min(cur.entry_age, ep.start_age)
            if ep.stop_age >= cur.exit_age:
                cur.exit_age, cur.event = ep.stop_age, ep.event
    return list(merged.values())
