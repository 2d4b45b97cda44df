import io
import logging
from collections import Counter

import numpy as np
import pytest

from conftest import make_exposure
from disfle.adjustment import (
    DEFAULT_SCALING, AdjustmentConfig, AdjustmentError, AgePyramid, cohort_counts, synthetic_targets,
    whole_population_adjust, write_cells_csv,
)
from disfle.cohort import build_exposures
from disfle.km import fit_km
from disfle.synthetic import SyntheticConfig, generate_synthetic, synthetic_pyramid


def pyramid(cells, years=(2010,)):
    return AgePyramid({(s, b, y): float(v) for (s, b), v in cells.items() for y in years})


def test_default_scaling_is_pre_over_post_exclusion():
    assert DEFAULT_SCALING == pytest.approx(1.4001, abs=1e-4)


def test_target_formula_and_half_even_carry():
    counts = {("F", 1950): 10, ("F", 1951): 10, ("F", 1952): 10, ("M", 1950): 100}
    pyr = pyramid({("F", 1950): 14.5, ("F", 1951): 14.5, ("F", 1952): 14.5, ("M", 1950): 50})
    cells = synthetic_targets(counts, pyr, AdjustmentConfig(scaling=1.4))
    f = [c for c in cells if c.sex == "F"]
    np.testing.assert_allclose([c.target for c in f], [0.5, 0.5, 0.5])
    # 0.5 -> 0 (half-even), carry 0.5 + 0.5 -> 1, carry 0 + 0.5 -> 0
    assert [c.added for c in f] == [0, 1, 0]
    m = [c for c in cells if c.sex == "M"][0]
    assert m.clamped and m.added == 0 and m.target == 0.0


def test_carried_total_stays_within_one_of_fractional_total(rng):
    by = range(1920, 1961)
    counts = {("F", b): int(rng.integers(0, 200)) for b in by}
    pyr = pyramid({("F", b): float(rng.uniform(0, 600)) for b in by})
    cells = synthetic_targets(counts, pyr, AdjustmentConfig())
    assert abs(sum(c.added for c in cells) - sum(c.target for c in cells)) <= 0.5 + 1e-9
    for c in cells:
        assert abs(c.added - c.target) < 1 + 1e-9


def test_clamp_is_logged(caplog):
    with caplog.at_level(logging.WARNING):
        synthetic_targets({("F", 1950): 10}, pyramid({("F", 1950): 5}), AdjustmentConfig())
    assert "no additions" in caplog.text


def test_missing_pyramid_cell_is_error():
    with pytest.raises(AdjustmentError, match="1951"):
        synthetic_targets({("F", 1951): 3}, pyramid({("F", 1950): 5}), AdjustmentConfig())


def test_invalid_scaling_and_negative_counts():
    with pytest.raises(AdjustmentError):
        AdjustmentConfig(scaling=0.9)
    with pytest.raises(AdjustmentError):
        AgePyramid({("F", 1950, 2010): -1.0})


def test_age_band_scaling_overrides_scalar():
    cfg = AdjustmentConfig(scaling=1.0, scaling_by_age=((55, 65, 2.0),))
    cells = synthetic_targets({("F", 1950): 10, ("F", 1940): 10}, pyramid({("F", 1950): 30, ("F", 1940): 30}), cfg)
    assert {c.birth_year: c.added for c in cells} == {1950: 10, 1940: 20}


def _cohort():
    cfg = SyntheticConfig(n=3000, seed=11, birth_years=(1940, 1960), baseline={"kind": "exponential", "rate": 0.08})
    subjects, _ = generate_synthetic(cfg)
    return subjects, build_exposures(subjects)[0]


def test_adjusted_km_dominates_unadjusted():
    subjects, exps = _cohort()
    pyr = synthetic_pyramid(subjects, factor=3.0)
    adjusted, cells = whole_population_adjust(exps, None, pyr)
    assert sum(c.added for c in cells) > 0
    assert adjusted[: len(exps)] == exps
    assert all(e.synthetic and not e.event for e in adjusted[len(exps):])
    before = fit_km(exps, ("sex",))
    after = fit_km(adjusted, ("sex",))
    for key, curve in before.items():
        np.testing.assert_array_equal(after[key].times, curve.times)
        assert np.all(after[key].values >= curve.values - 1e-15)


def test_saturated_pyramid_changes_nothing():
    _, exps = _cohort()
    counts = cohort_counts(exps)
    pyr = pyramid({k: v for k, v in counts.items()})
    adjusted, cells = whole_population_adjust(exps, None, pyr)
    assert adjusted == exps and all(c.added == 0 for c in cells)


def test_already_adjusted_input_rejected():
    e = make_exposure(1, 50, 52, False)
    e.synthetic = True
    with pytest.raises(AdjustmentError):
        whole_population_adjust([e], {("F", 1950): 1}, pyramid({("F", 1950): 9}))


def test_synthetic_exposures_follow_pyramid_attrition():
    exps = [make_exposure(k, 59.5, 63.5, False, birth_year=1950) for k in range(10)]
    pyr = AgePyramid({("F", 1950, 2010): 1014.0, ("F", 1950, 2011): 900.0,
                      ("F", 1950, 2012): 810.0, ("F", 1950, 2013): 810.0})
    adjusted, cells = whole_population_adjust(exps, None, pyr, AdjustmentConfig(scaling=1.4))
    syn = adjusted[10:]
    assert len(syn) == cells[0].added == 1000
    exit_years = Counter(int(np.floor(1950 + e.exit_age)) for e in syn)
    # censored on Dec 31 of 2010, 2011 or the window end; counts follow 1000 -> 888 -> 799
    ends = sorted(exit_years.items())
    survivors = np.cumsum([n for _, n in ends][::-1])[::-1]
    assert list(survivors[:3]) == [1000, 888, 799]
    assert all(50 <= e.entry_age < e.exit_age <= 105 for e in syn)
    assert len({e.subject_id for e in adjusted}) == len(adjusted)


def test_pyramid_csv_roundtrip_and_cell_report():
    pyr = pyramid({("F", 1950): 12, ("M", 1951): 3}, years=(2010, 2011))
    buf = io.StringIO()
    pyr.write_csv(buf)
    assert AgePyramid.read_csv(io.StringIO("# c\n" + buf.getvalue())) == pyr
    with pytest.raises(AdjustmentError):
        AgePyramid.read_csv(io.StringIO("sex,count\nF,1\n"))
    out = io.StringIO()
    write_cells_csv(synthetic_targets({("F", 1950): 2}, pyr, AdjustmentConfig()), out)
    assert out.getvalue().splitlines()[1].startswith("F,1950,12,2,")


def test_worked_example_thousand_minus_seven_hundred():
    cells = synthetic_targets({("F", 1950): 500}, pyramid({("F", 1950): 1000}), AdjustmentConfig(scaling=1.40))
    assert cells[0].added == 300
