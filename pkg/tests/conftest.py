import datetime as dt

import numpy as np
import pytest

from disfle.cohort import Exposure, Subject


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def make_subject(sid="1", sex="F", birth=dt.date(1950, 7, 1), events=(), death=None, censor=None, **cats):
    base = dict(department="75", alcohol=0, obesity=0, smoking=0, immigration=0, education=0)
    base.update(cats)
    return Subject(
        id=sid, sex=sex, birth_year=birth.year, birth_date=birth,
        event_history=sorted(events), death_date=death, censor_date=censor, **base,
    )


def make_exposure(sid, entry, exit, event, **cov):
    base = dict(sex="F", birth_year=1950, department="75", alcohol=0, obesity=0, smoking=0,
                immigration=0, education=0)
    base.update(cov)
    return Exposure(str(sid), float(entry), float(exit), bool(event), base)


@pytest.fixture
def run_root(tmp_path, monkeypatch):
    root = tmp_path / "runs"
    monkeypatch.setenv("DISFLE_RUN_ROOT", str(root))
    return root


def raw_design(start, stop, event, X, ids=None):
    """Design over anonymous constant columns ``x0, x1, ...`` for likelihood-level tests."""
    from disfle.survival_core import Column, DesignMatrix, ModelSpec, SplineBasis

    X = np.asarray(X, dtype=float).reshape(len(start), -1)
    cols = [Column(f"x{j}", "constant", (f"x{j}",), ("1",)) for j in range(X.shape[1])]
    ids = np.arange(len(start)).astype(str).astype(object) if ids is None else np.asarray(ids, dtype=object)
    return DesignMatrix(X, cols, np.asarray(start, float), np.asarray(stop, float),
                        np.asarray(event, bool), ids, ModelSpec(()), SplineBasis((50.0, 100.0)))


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance verdict; the verdicts are printed after the run."""

    def record(number: int, ok: bool, detail: str = "") -> None:
        ACCEPTANCE[number] = (bool(ok), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
