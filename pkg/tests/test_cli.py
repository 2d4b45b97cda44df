import csv
import json
import math
from pathlib import Path

import pytest
import yaml

from disfle.cli import main
from disfle.synthetic import synthetic_dictionary

HEADER = "id,sex,birth_year,department,alcohol,obesity,smoking,immigration,education,event_date,event_code\n"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    lines = out.strip().splitlines()
    return code, (Path(lines[-1]) if code == 0 and lines else None), err


def rows(path):
    """CSV records of an output file, skipping ``#`` lines."""
    with open(path, encoding="utf-8") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    out = {}

    def step(*argv):
        assert main([*map(str, argv), "--run-root", str(root)]) == 0
        return max(root.iterdir(), key=lambda p: p.stat().st_mtime_ns)

    out["synth"] = step("synth", "--n", "4000", "--seed", "3")
    out["ingest"] = step("ingest", out["synth"] / "subjects.csv", out["synth"] / "dictionary.csv")
    store = out["ingest"] / "store.csv"
    out["fit"] = step("fit", store, "--df", "3")
    out["km"] = step("indicators", store, "--adjust", out["synth"] / "pyramid.csv")
    out["validate"] = step("validate", out["fit"] / "fit.npz", store)
    return out


@pytest.fixture
def dictionary(tmp_path):
    path = tmp_path / "dictionary.csv"
    with open(path, "w", encoding="utf-8") as fh:
        synthetic_dictionary().write_csv(fh)
    return path


def test_outputs_carry_manifest_hash(pipeline):
    for d in pipeline.values():
        manifest = json.loads((d / "manifest.json").read_text())
        assert d.name == f"{manifest['command']}-{manifest['hash']}"
        for name in manifest["outputs"]:
            if name.endswith(".npz"):
                continue
            text = (d / name).read_text()
            if name.endswith(".json"):
                assert json.loads(text)["manifest"] == manifest["hash"]
            else:
                assert manifest["hash"] in "".join(text.splitlines()[:2]), name


def test_pipeline_artifacts(pipeline):
    assert {"store.csv", "exclusions.csv", "summary.md"} <= {p.name for p in pipeline["ingest"].iterdir()}
    assert (pipeline["fit"] / "hr_sex.svg").exists()
    assert rows(pipeline["fit"] / "department_effects.csv")[0]["department"] == "78"
    assert (pipeline["km"] / "adjustment_cells.csv").exists()
    md = (pipeline["km"] / "summary.md").read_text()
    assert "| 50 | Women |" in md and "17.6" in md
    bins = rows(pipeline["validate"] / "risk_groups.csv")
    assert [b["bin"] for b in bins] == ["(-inf, 0.2]", "(0.2, 0.7]", "(0.7, 1.1]", "(1.1, 1.5]", "(1.5, inf]"]
    c = float(rows(pipeline["validate"] / "concordance.csv")[0]["c_index"])
    assert 0.5 < c < 1.0


def test_cox_indicators_from_fit(pipeline, tmp_path, capsys):
    code, d, _ = run(capsys, "indicators", pipeline["fit"] / "fit.npz", "--profiles", "Lowest",
                     "--run-root", tmp_path)
    assert code == 0
    labels = {r["stratum"] for r in rows(d / "disfle_summary.csv")}
    assert labels == {"Lowest|F|none", "Lowest|M|none"}


def test_adjust_with_fit_is_usage_error(pipeline, tmp_path, capsys):
    code, _, err = run(capsys, "indicators", pipeline["fit"] / "fit.npz",
                       "--adjust", pipeline["synth"] / "pyramid.csv", "--run-root", tmp_path)
    assert code == 2
    assert "Kaplan-Meier" in err


def test_empty_input_gives_empty_store(tmp_path, dictionary, capsys):
    subjects = tmp_path / "subjects.csv"
    subjects.write_text(HEADER)
    code, d, _ = run(capsys, "ingest", subjects, dictionary, "--run-root", tmp_path / "runs")
    assert code == 0
    assert rows(d / "store.csv") == []
    assert [r["removed"] for r in rows(d / "exclusions.csv")] == ["0"] * 4


def test_malformed_rows_exit_1_with_line_numbers(tmp_path, dictionary, capsys):
    subjects = tmp_path / "subjects.csv"
    subjects.write_text(HEADER + "1,F,1950,75,0,0,0,0,0,,\n2,Q,1950,75,0,0,0,0,0,,\n3,F,19x0,75,0,0,0,0,0,,\n")
    code, _, err = run(capsys, "ingest", subjects, dictionary, "--run-root", tmp_path / "runs")
    assert code == 1
    assert f"{subjects}:3:" in err and f"{subjects}:4:" in err
    code, d, _ = run(capsys, "ingest", subjects, dictionary, "--allow-row-errors", "--run-root", tmp_path / "r2")
    assert code == 0 and len(rows(d / "store.csv")) == 1


def test_missing_input_and_unknown_covariate_exit_2(pipeline, tmp_path, capsys):
    code, _, _ = run(capsys, "fit", tmp_path / "nope.csv", "--run-root", tmp_path)
    assert code == 2
    model = tmp_path / "model.yaml"
    model.write_text(yaml.safe_dump({"terms": [{"covariate": "income", "levels": ["0", "1"], "reference": "0"}]}))
    code, _, err = run(capsys, "fit", pipeline["ingest"] / "store.csv", "--model", model, "--run-root", tmp_path)
    assert code == 2 and "income" in err


def _synth_config(tmp_path, **over):
    cfg = {"n": 5000, "birth_years": [1940, 1960], "p_male": 0.5, "death_fraction": 0.0,
           "behaviors": {"alcohol": [0.5, 0.0, 0.5], "obesity": [1, 0, 0], "smoking": [1, 0, 0]},
           "baseline": {"kind": "exponential", "rate": 0.3}, "effects": {"alcohol[2]": math.log(2)}}
    cfg.update(over)
    path = tmp_path / "synthetic.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_planted_hazard_ratio_in_coefficient_csv(tmp_path, capsys):
    root = tmp_path / "runs"
    _, synth, _ = run(capsys, "synth", "--config", _synth_config(tmp_path), "--seed", "1", "--run-root", root)
    _, ingest, _ = run(capsys, "ingest", synth / "subjects.csv", synth / "dictionary.csv", "--run-root", root)
    model = tmp_path / "model.yaml"
    model.write_text(yaml.safe_dump({"terms": [{"covariate": "alcohol", "levels": ["0", "1", "2"], "reference": "0"}]}))
    code, fit, _ = run(capsys, "fit", ingest / "store.csv", "--model", model, "--train-frac", "1",
                       "--run-root", root)
    assert code == 0
    coef = {r["term"] + r["level"]: r for r in rows(fit / "coefficients.csv")}
    assert abs(float(coef["alcohol2"]["hazard_ratio"]) - 2.0) < 0.2


def test_event_free_cohort_gives_full_horizon(tmp_path, capsys):
    root = tmp_path / "runs"
    cfg = _synth_config(tmp_path, n=300, baseline={"kind": "exponential", "rate": 0.0})
    _, synth, _ = run(capsys, "synth", "--config", cfg, "--run-root", root)
    _, ingest, _ = run(capsys, "ingest", synth / "subjects.csv", synth / "dictionary.csv", "--run-root", root)
    code, ind, _ = run(capsys, "indicators", ingest / "store.csv", "--run-root", root)
    assert code == 0
    for r in rows(ind / "disfle_summary.csv"):
        assert float(r["disfle"]) == 100.0 - float(r["age"])


def test_saturated_pyramid_matches_unadjusted(pipeline, tmp_path, capsys):
    store = pipeline["ingest"] / "store.csv"
    counts = {}
    for r in rows(store):
        key = (r["sex"], r["birth_year"])
        counts[key] = counts.get(key, 0) + 1
    pyr = tmp_path / "pyramid.csv"
    pyr.write_text("sex,birth_year,count\n" + "".join(f"{s},{b},{n}\n" for (s, b), n in sorted(counts.items())))
    _, plain, _ = run(capsys, "indicators", store, "--run-root", tmp_path / "a")
    _, adj, _ = run(capsys, "indicators", store, "--adjust", pyr, "--run-root", tmp_path / "b")
    for name in ("survival.csv", "disfle.csv", "disfle_summary.csv"):
        assert rows(plain / name) == rows(adj / name)
    assert {r["added"] for r in rows(adj / "adjustment_cells.csv")} == {"0"}


def test_rerun_is_byte_identical(pipeline, tmp_path, capsys):
    store = pipeline["ingest"] / "store.csv"
    code, again, _ = run(capsys, "fit", store, "--df", "3", "--run-root", tmp_path)
    assert code == 0 and again.name == pipeline["fit"].name
    for f in pipeline["fit"].iterdir():
        if f.name != "manifest.json":
            assert (again / f.name).read_bytes() == f.read_bytes(), f.name


def test_manifest_hash_depends_on_options(pipeline, tmp_path, capsys):
    _, other, _ = run(capsys, "fit", pipeline["ingest"] / "store.csv", "--df", "4", "--run-root", tmp_path)
    assert other.name != pipeline["fit"].name
