import numpy as np
import pytest

from conftest import raw_design
from disfle.cohort import build_exposures
from disfle.cox import (
    MonotoneLikelihoodError, SingularInformationError, CoxError, breslow_baseline, combined_effect,
    fit_cox, hazard_ratio_curve, linear_predictor, load_fit, log_partial_likelihood, predict_survival,
    reference_profile, save_fit, score_and_information, write_coefficients_csv,
)
from disfle.survival_core import ModelSpec, build_design, split_episodes
from disfle.synthetic import SyntheticConfig, generate_synthetic
from oracles import breslow_loglik_hand, nelson_aalen_hand, random_cohort

SEX_ALC = [
    {"covariate": "sex", "levels": ["F", "M"], "reference": "F"},
    {"covariate": "alcohol", "levels": ["0", "1", "2"], "reference": "0"},
]


def random_design(rng, n=120, p=4, grid=None):
    entry, exit, event = random_cohort(rng, n, grid=grid)
    return raw_design(entry, exit, event, rng.normal(size=(n, p)))


# --------------------------------------------------------------------------- likelihood

@pytest.mark.parametrize("seed", range(5))
def test_loglik_matches_hand_oracle(seed):
    rng = np.random.default_rng(seed)
    d = random_design(rng, n=60, p=3, grid=0.5)  # grid forces ties
    beta = rng.normal(scale=0.5, size=3)
    assert log_partial_likelihood(d, beta) == pytest.approx(
        breslow_loglik_hand(d.start, d.stop, d.event, d.X, beta), rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_score_and_information_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    d = random_design(rng, n=150, p=5, grid=0.25 if seed % 2 else None)
    beta = rng.normal(scale=0.3, size=5)
    _, g, H = score_and_information(d, beta)
    h = 1e-5
    eye = np.eye(5)
    g_fd = np.array([(log_partial_likelihood(d, beta + h * e) - log_partial_likelihood(d, beta - h * e)) / (2 * h)
                     for e in eye])
    H_fd = -np.array([(score_and_information(d, beta + h * e)[1] - score_and_information(d, beta - h * e)[1])
                      / (2 * h) for e in eye])
    np.testing.assert_allclose(g, g_fd, rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(H, H_fd, rtol=1e-5, atol=1e-7)


def test_fit_reaches_stationary_point(rng):
    d = random_design(rng, n=300, p=3)
    fit = fit_cox(d)
    _, g, _ = score_and_information(d, fit.beta)
    assert np.abs(g).max() < 1e-4
    lls = [t[1] for t in fit.convergence["trace"]]
    assert all(b >= a - 1e-9 for a, b in zip(lls, lls[1:]))


# --------------------------------------------------------------------------- failure modes

def test_monotone_likelihood_names_column():
    n = 40
    x = np.r_[np.ones(n // 2), np.zeros(n // 2)]
    stop = np.r_[np.arange(1, n // 2 + 1), np.arange(1, n // 2 + 1) + 0.5].astype(float)
    event = x.astype(bool)  # every event carries x = 1, every censoring x = 0
    with pytest.raises(MonotoneLikelihoodError, match="x0"):
        fit_cox(raw_design(np.zeros(n), stop, event, x))


def test_singular_information_names_dependent_columns(rng):
    entry, exit, event = random_cohort(rng, 100)
    a = rng.normal(size=100)
    X = np.c_[a, rng.normal(size=100), 2 * a]
    with pytest.raises(SingularInformationError) as err:
        fit_cox(raw_design(entry, exit, event, X))
    assert "x0" in str(err.value) and "x2" in str(err.value) and "x1" not in str(err.value)


def test_no_events_rejected():
    with pytest.raises(CoxError):
        fit_cox(raw_design([0.0, 0.0], [1.0, 2.0], [False, False], [[1.0], [0.0]]))


# --------------------------------------------------------------------------- baseline

@pytest.mark.parametrize("seed", range(5))
def test_null_breslow_equals_nelson_aalen(seed):
    rng = np.random.default_rng(seed)
    entry, exit, event = random_cohort(rng, 200, grid=0.5 if seed % 2 else None)
    d = raw_design(entry, exit, event, np.zeros((200, 0)))
    fit = fit_cox(d)
    t, H = nelson_aalen_hand(entry, exit, event)
    np.testing.assert_array_equal(fit.baseline.times, t)
    np.testing.assert_allclose(fit.baseline.cumulative, H, rtol=1e-13)


def _small_cohort(n=3000, seed=4, effects=None):
    cfg = SyntheticConfig(
        n=n, seed=seed, birth_years=(1940, 1960), p_male=0.5,
        behaviors={"alcohol": (0.5, 0.2, 0.3), "obesity": (1, 0, 0), "smoking": (1, 0, 0)},
        baseline={"kind": "exponential", "rate": 0.1},
        effects=effects or {"sex[M]": 0.5, "alcohol[2]": 0.7}, death_fraction=0.0,
    )
    return build_exposures(generate_synthetic(cfg)[0])[0]


def test_split_episodes_leave_constant_fit_unchanged():
    exps = _small_cohort()
    spec = ModelSpec.from_dict({"terms": SEX_ALC})
    split = fit_cox(build_design(split_episodes(exps, spec.grid), spec))
    whole = fit_cox(build_design(split_episodes(exps, (50.0, 200.0)), spec))
    np.testing.assert_allclose(split.beta, whole.beta, atol=1e-10)
    np.testing.assert_allclose(split.baseline.cumulative, whole.baseline.cumulative, rtol=1e-10)


def test_reference_profile_survival_is_baseline():
    exps = _small_cohort()
    spec = ModelSpec.from_dict({"terms": SEX_ALC})
    fit = fit_cox(build_design(split_episodes(exps, spec.grid), spec))
    s = predict_survival(fit, reference_profile(spec), (55.0, 100.0))
    H = fit.baseline(s.times) - fit.baseline(55.0)
    np.testing.assert_allclose(s.values, np.exp(-H), rtol=1e-12)
    assert np.all(s.lower <= s.values) and np.all(s.values <= s.upper)
    male = predict_survival(fit, {**reference_profile(spec), "sex": "M"}, (55.0, 100.0))
    np.testing.assert_allclose(-np.log(male.values), np.exp(fit.beta[0]) * H, rtol=1e-10)


def test_profile_with_unknown_level_rejected():
    exps = _small_cohort(800)
    spec = ModelSpec.from_dict({"terms": SEX_ALC})
    fit = fit_cox(build_design(split_episodes(exps, spec.grid), spec))
    with pytest.raises(CoxError):
        predict_survival(fit, {"sex": "X", "alcohol": "0"})
    with pytest.raises(CoxError):
        predict_survival(fit, {"sex": "F"})


# --------------------------------------------------------------------------- hazard ratios

def test_constant_term_curve_is_flat_and_band_from_se():
    exps = _small_cohort()
    spec = ModelSpec.from_dict({"terms": SEX_ALC})
    fit = fit_cox(build_design(split_episodes(exps, spec.grid), spec))
    c = hazard_ratio_curve(fit, "sex", "M", np.arange(51, 70, 2.0))
    k = fit.column_index("sex[M]")
    np.testing.assert_allclose(c.ratio, np.exp(fit.beta[k]))
    np.testing.assert_allclose(c.upper, np.exp(fit.beta[k] + 1.959963984540054 * fit.std_errors[k]))
    assert abs(fit.beta[k] - 0.5) < 0.15


def test_combined_effect_is_product_of_curves():
    exps = _small_cohort(effects={"alcohol[2]": 0.7, "sex[M]": 0.3})
    terms = [dict(SEX_ALC[0], age_dependent=True), SEX_ALC[1]]
    spec = ModelSpec.from_dict({"terms": terms, "interactions": [["sex", "alcohol"]], "df": 3})
    fit = fit_cox(build_design(split_episodes(exps, spec.grid), spec))
    ages = np.arange(51, 74, 2.0)
    a = hazard_ratio_curve(fit, "sex", "M", ages)
    b = hazard_ratio_curve(fit, "alcohol", "2", ages)
    inter = np.exp(fit.beta[fit.column_index("sex[M]:alcohol[2]")])
    np.testing.assert_allclose(combined_effect(fit, "sex", "M", "alcohol", "2", ages, False).ratio,
                               a.ratio * b.ratio, rtol=1e-12)
    np.testing.assert_allclose(combined_effect(fit, "sex", "M", "alcohol", "2", ages).ratio,
                               a.ratio * b.ratio * inter, rtol=1e-12)
    with pytest.raises(CoxError):
        combined_effect(fit, "sex", "M", "alcohol", "9", ages)


def test_age_dependent_curve_uses_left_open_cells():
    exps = _small_cohort()
    terms = [dict(SEX_ALC[0], age_dependent=True)]
    spec = ModelSpec.from_dict({"terms": terms, "df": 4})
    fit = fit_cox(build_design(split_episodes(exps, spec.grid), spec))
    c = hazard_ratio_curve(fit, "sex", "M", [51.0, 52.0, 52.0001, 53.9])
    assert c.ratio[0] == c.ratio[1]
    assert c.ratio[2] == c.ratio[3]


# --------------------------------------------------------------------------- persistence

def test_save_load_roundtrip(tmp_path):
    exps = _small_cohort(1500)
    spec = ModelSpec.from_dict({"terms": [dict(SEX_ALC[0], age_dependent=True), SEX_ALC[1]], "df": 3})
    design = build_design(split_episodes(exps, spec.grid), spec)
    fit = fit_cox(design)
    path = tmp_path / "fit.npz"
    save_fit(fit, path, {"note": "x"})
    back, extra = load_fit(path)
    assert extra == {"note": "x"}
    assert back.labels == fit.labels and back.spec == fit.spec and back.basis == fit.basis
    np.testing.assert_array_equal(back.beta, fit.beta)
    np.testing.assert_array_equal(back.baseline.cumulative, fit.baseline.cumulative)
    np.testing.assert_array_equal(linear_predictor(back, design), linear_predictor(fit, design))
    prof = {"sex": "M", "alcohol": "2"}
    np.testing.assert_array_equal(predict_survival(back, prof).values, predict_survival(fit, prof).values)
    np.savez(tmp_path / "other.npz", meta=np.array('{"format": "nope"}'))
    with pytest.raises(CoxError):
        load_fit(tmp_path / "other.npz")


def test_coefficient_csv_layout(tmp_path):
    import io

    fit = fit_cox(build_design(split_episodes(_small_cohort(800), (50.0, 200.0)),
                               ModelSpec.from_dict({"terms": SEX_ALC})))
    buf = io.StringIO()
    write_coefficients_csv(fit, buf, "manifest=abc")
    lines = buf.getvalue().splitlines()
    assert lines[0] == "# manifest=abc"
    assert lines[1] == "term,level,basis_index,beta,std_error,hazard_ratio,p_value"
    assert len(lines) == 2 + len(fit.beta)


def test_baseline_recomputed_on_other_design_aligns_columns(rng):
    exps = _small_cohort(1000)
    spec = ModelSpec.from_dict({"terms": SEX_ALC})
    design = build_design(split_episodes(exps, spec.grid), spec)
    fit = fit_cox(design)
    again = breslow_baseline(fit, design)
    np.testing.assert_allclose(again.cumulative, fit.baseline.cumulative)
