"""Command-line pipeline: ingest, fit, indicators, validate, synth.

Every command writes into ``<run root>/<command>-<manifest hash>``; the run
root comes from ``--run-root``, else ``$DISFLE_RUN_ROOT``, else ``./runs``.
The manifest hash covers the command, the option values, the seed, the tool
version and the content of every input file, so reruns land in the same
directory and rewrite byte-identical text outputs. Each of
those files starts with a comment carrying the hash.

Exit codes: 0 success, 1 runtime or data error, 2 configuration or usage
error.
"""

from __future__ import annotations

import argparse
import contextlib
import datetime as dt
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import __version__
from .adjustment import (
    DEFAULT_SCALING, AdjustmentConfig, AdjustmentError, AgePyramid, whole_population_adjust,
    write_cells_csv,
)
from .cohort import (
    CohortError, ConfigError, EventDictionary, apply_exclusions, build_exposures,
    default_exclusion_rules, descriptive_stats, load_exclusion_rules, parse_subjects,
    write_subjects_csv,
)
from .cox import (
    CoxError, fit_cox, hazard_ratio_curve, load_fit, save_fit,
    write_coefficients_csv,
)
from .indicator import (
    IndicatorError, disfle_at, disfle_curve, profile_curves, standard_profiles, write_disfle_csv,
)
from .km import fit_km, stratum_label, write_curves_csv
from .report import Series, disfle_summary_markdown, line_plot_svg, markdown_table
from .store import StoreError, read_store, write_store
from .survival_core import DesignError, ModelSpec, build_design, split_episodes
from .synthetic import SyntheticConfig, generate_synthetic, synthetic_dictionary, synthetic_pyramid
from .validation import (
    DEFAULT_EDGES, ValidationError, concordance, risk_group_calibration, split_train_test,
)

logger = logging.getLogger("disfle")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
RUN_ROOT_ENV = "DISFLE_RUN_ROOT"
SUMMARY_AGES = (50, 65)


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- manifest

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    inputs: dict[str, str] = field(default_factory=dict)  # name -> path
    input_hashes: dict[str, str] = field(default_factory=dict)
    options: dict[str, object] = field(default_factory=dict)
    seed: int = 0
    tool_version: str = __version__
    started: str = ""
    finished: str = ""

    def add_input(self, name: str, path: Path | str | None) -> None:
        if path is None:
            return
        path = Path(path)
        if not path.is_file():
            raise UsageError(f"{name}: no such file {path}")
        self.inputs[name] = str(path)
        self.input_hashes[name] = _sha256(path)

    @property
    def digest(self) -> str:
        # paths and timestamps are informative only; content drives the hash
        key = {
            "command": self.command, "inputs": self.input_hashes, "options": self.options,
            "seed": self.seed, "tool_version": self.tool_version,
        }
        blob = json.dumps(key, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class Run:
    """Output directory of one command invocation."""

    def __init__(self, manifest: RunManifest, root: Path):
        self.manifest = manifest
        self.hash = manifest.digest
        self.dir = root / f"{manifest.command}-{self.hash}"
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []
        manifest.started = dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")

    @contextlib.contextmanager
    def text(self, name: str, comment: str = "#"):
        path = self.dir / name
        with open(path, "w", encoding="utf-8", newline="") as fh:
            if comment == "#":
                fh.write(f"# manifest={self.hash}\n")
            elif comment == "<!--":
                fh.write(f"<!-- manifest={self.hash} -->\n")
            yield fh
        self.files.append(name)

    def write(self, name: str, content: str) -> None:
        comment = "<!--" if name.endswith((".svg", ".md")) else "#"
        with self.text(name, comment) as fh:
            fh.write(content)

    def close(self) -> None:
        self.manifest.finished = dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")
        doc = asdict(self.manifest)
        doc["hash"] = self.hash
        doc["outputs"] = sorted(self.files)
        with open(self.dir / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")


def _run_root(args) -> Path:
    return Path(args.run_root or os.environ.get(RUN_ROOT_ENV) or "runs")


def _bundled(name: str) -> Path:
    return Path(str(resources.files("disfle") / "data" / name))


def _open_run(args, command: str, inputs: dict, options: dict) -> Run:
    m = RunManifest(command, seed=args.seed, options=options)
    for name, path in inputs.items():
        m.add_input(name, path)
    return Run(m, _run_root(args))


# --------------------------------------------------------------------------- helpers

def _load_dictionary(path) -> EventDictionary:
    with open(path, encoding="utf-8") as fh:
        return EventDictionary.read_csv(fh)


def _load_store(path):
    with open(path, encoding="utf-8") as fh:
        return read_store(fh)


def _is_fit_artifact(path: Path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(2) == b"PK"


def _model_spec(args) -> ModelSpec:
    try:
        with open(args.model, encoding="utf-8") as fh:
            d = yaml.safe_load(fh) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"model config: {exc}") from None
    if args.df is not None:
        d["df"] = args.df
        if d.get("interior_knots") not in (None, "grid"):
            raise UsageError("--df conflicts with explicit interior_knots in the model config")
    if args.grid_step is not None:
        d["grid"] = {"start": 50, "stop": 100, "step": args.grid_step}
    try:
        return ModelSpec.from_dict(d)
    except (KeyError, TypeError, AttributeError) as exc:
        raise ConfigError(f"model config: malformed entry ({exc})") from None


def _curves_svg(curves: dict, title: str, ylabel: str, t_max: float, y_key: str = "survival") -> str:
    series = []
    for label, c in curves.items():
        if y_key == "survival":
            x = np.concatenate([[50.0], c.times])
            y = np.concatenate([[1.0], c.values])
            lo = None if c.lower is None else np.concatenate([[1.0], c.lower])
            hi = None if c.upper is None else np.concatenate([[1.0], c.upper])
            series.append(Series(label, x, y, lo, hi))
        else:
            series.append(Series(label, c.ages, c.values, c.lower, c.upper))
    return line_plot_svg(series, title, "Age (years)", ylabel, xlim=(50.0, t_max))


# --------------------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    cfg_path = Path(args.config) if args.config else _bundled("synthetic.yaml")
    with open(cfg_path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    pyr = raw.pop("pyramid", {}) or {}
    if args.n is not None:
        raw["n"] = args.n
    raw["seed"] = args.seed
    try:
        cfg = SyntheticConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synthetic config: {exc}") from None
    run = _open_run(args, "synth", {"config": cfg_path}, {"n": cfg.n})
    subjects, truth = generate_synthetic(cfg)
    with run.text("subjects.csv") as fh:
        write_subjects_csv(subjects, fh)
    with run.text("dictionary.csv") as fh:
        synthetic_dictionary().write_csv(fh)
    with run.text("pyramid.csv") as fh:
        synthetic_pyramid(subjects, **pyr).write_csv(fh)
    with run.text("truth.json", comment="") as fh:
        json.dump({"manifest": run.hash, **truth}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    run.close()
    print(run.dir)
    return EXIT_OK


def cmd_ingest(args) -> int:
    exclusions = Path(args.exclusions) if args.exclusions else _bundled("exclusions.yaml")
    run = _open_run(
        args, "ingest",
        {"subjects": args.subjects, "dictionary": args.dictionary, "exclusions": exclusions},
        {"allow_row_errors": args.allow_row_errors},
    )
    dictionary = _load_dictionary(args.dictionary)
    with open(exclusions, encoding="utf-8") as fh:
        try:
            rules = load_exclusion_rules(fh, dictionary)
        except (yaml.YAMLError, KeyError) as exc:
            raise ConfigError(f"exclusion config: {exc}") from None
    if not rules:
        rules = default_exclusion_rules(dictionary)
    with open(args.subjects, encoding="utf-8", newline="") as fh:
        subjects, errors = parse_subjects(fh, dictionary, seed=args.seed)
    if errors:
        for e in errors[:50]:
            print(f"{args.subjects}:{e.line}: {e.message}", file=sys.stderr)
        if len(errors) > 50:
            print(f"... {len(errors) - 50} more row errors", file=sys.stderr)
        with run.text("row_errors.csv") as fh:
            fh.write("line,message\n")
            for e in errors:
                fh.write(f"{e.line},\"{e.message.replace(chr(34), chr(39))}\"\n")
        if not args.allow_row_errors:
            run.close()
            print(f"{len(errors)} malformed rows; rerun with --allow-row-errors to skip them",
                  file=sys.stderr)
            return EXIT_RUNTIME
    kept, report = apply_exclusions(subjects, rules)
    exposures, dropped = build_exposures(kept, dictionary=dictionary)
    with run.text("store.csv", comment="") as fh:
        write_store(exposures, fh, {"manifest": run.hash, "dropped_degenerate": str(dropped)})
    with run.text("exclusions.csv") as fh:
        report.write_csv(fh)
    if kept:
        table = descriptive_stats(kept, exposures)
        with run.text("summary.csv") as fh:
            table.write_csv(fh)
        with run.text("correlations.csv") as fh:
            table.write_correlations_csv(fh)
        run.write("summary.md", table.to_markdown())
    run.close()
    logger.info("%d subjects parsed, %d kept, %d exposures", len(subjects), len(kept), len(exposures))
    print(run.dir)
    return EXIT_OK


def cmd_fit(args) -> int:
    model = Path(args.model) if args.model else _bundled("model.yaml")
    args.model = model
    spec = _model_spec(args)
    split_seed = args.seed if args.split_seed is None else args.split_seed
    run = _open_run(
        args, "fit", {"store": args.store, "model": model},
        {"train_frac": args.train_frac, "split_seed": split_seed, "df": args.df, "grid_step": args.grid_step},
    )
    exposures, meta = _load_store(args.store)
    if not 0 < args.train_frac <= 1:
        raise UsageError("--train-frac must lie in (0, 1]")
    split = split_train_test([e.subject_id for e in exposures], 1 - args.train_frac, split_seed)
    train_ids = split.train_ids
    train = [e for e in exposures if e.subject_id in train_ids]
    design = build_design(split_episodes(train, spec.grid), spec)
    fit = fit_cox(design)
    extra = {
        "manifest": run.hash, "train_frac": args.train_frac, "split_seed": split_seed,
        "store_manifest": meta.get("manifest", ""), "n_train": len(train),
    }
    save_fit(fit, run.dir / "fit.npz", extra)
    run.files.append("fit.npz")
    with run.text("coefficients.csv") as fh:
        write_coefficients_csv(fit, fh)
    with run.text("split.csv") as fh:
        fh.write("subject_id,partition\n")
        for sid in sorted(split.assignment):
            fh.write(f"{sid},{split.assignment[sid]}\n")
    grid = np.asarray(spec.grid)
    mids = (grid[:-1] + grid[1:]) / 2
    with run.text("hazard_ratios.csv") as fh:
        fh.write("term,level,age,hazard_ratio,lower,upper\n")
        for t in spec.terms:
            if not t.age_dependent:
                continue
            series = []
            for lv in t.active_levels:
                if f"{t.covariate}[{lv}]:ns1" not in fit.labels:
                    continue
                c = hazard_ratio_curve(fit, t.covariate, lv, mids)
                for a, r, lo, hi in zip(mids, c.ratio, c.lower, c.upper):
                    fh.write(f"{t.covariate},{lv},{a:.2f},{r:.6f},{lo:.6f},{hi:.6f}\n")
                series.append(Series(f"{t.covariate}={lv}", mids, c.ratio, c.lower, c.upper, step=False))
            if series:
                run.write(f"hr_{t.covariate}.svg", line_plot_svg(
                    series, f"Hazard ratio by age: {t.covariate}", "Age (years)", "Hazard ratio"))
    if "department" in spec.covariates:
        with run.text("department_effects.csv") as fh:
            fh.write("department,hazard_ratio,lower,upper\n")
            ref = spec.term("department").reference
            fh.write(f"{ref},1.000000,1.000000,1.000000\n")
            for lv in spec.term("department").active_levels:
                if f"department[{lv}]" in fit.labels:
                    c = hazard_ratio_curve(fit, "department", lv, [50.0])
                    fh.write(f"{lv},{c.ratio[0]:.6f},{c.lower[0]:.6f},{c.upper[0]:.6f}\n")
    run.close()
    print(run.dir)
    return EXIT_OK


def _summary_values(curves: dict, t_max: float) -> dict:
    values = {}
    for (age, sex), curve in curves.items():
        values[(age, sex)] = disfle_at(curve, age, t_max)
    return values


def cmd_indicators(args) -> int:
    source = Path(args.source)
    if not source.is_file():
        raise UsageError(f"no such file {source}")
    cox_path = _is_fit_artifact(source)
    if cox_path and args.adjust:
        raise UsageError(
            "--adjust needs a cohort store: whole-population adjustment adds event-free synthetic "
            "records that only the Kaplan-Meier path may use, never a Cox fit"
        )
    scaling = DEFAULT_SCALING if args.scaling is None else args.scaling
    run = _open_run(
        args, "indicators", {"source": source, "pyramid": args.adjust},
        {"tmax": args.tmax, "strata": args.strata, "scaling": scaling if args.adjust else None,
         "profiles": args.profiles},
    )
    t_max = args.tmax
    surv_curves: dict = {}
    disfle_rows: dict = {}
    sex_curves: dict = {}
    if cox_path:
        fit, _ = load_fit(source)
        profiles = standard_profiles()
        if args.profiles != "standard":
            wanted = set(args.profiles.split(","))
            profiles = [p for p in profiles if p.label in wanted or p.name in wanted]
            if not profiles:
                raise UsageError(f"--profiles {args.profiles!r} selects no profile")
        results = profile_curves(fit, profiles, t_max=t_max, workers=args.workers)
        for p, (s, d) in results.items():
            surv_curves[p.name] = s
            disfle_rows[p.name] = (s, d)
            if p.label == "Lowest":
                for age in SUMMARY_AGES:
                    sex_curves[(age, "Men" if p.sex == "M" else "Women")] = s
    else:
        exposures, _ = _load_store(source)
        if args.adjust:
            with open(args.adjust, encoding="utf-8") as fh:
                pyramid = AgePyramid.read_csv(fh)
            exposures, cells = whole_population_adjust(
                exposures, None, pyramid, AdjustmentConfig(scaling=scaling, seed=args.seed)
            )
            with run.text("adjustment_cells.csv") as fh:
                write_cells_csv(cells, fh)
        strata = tuple(s for s in args.strata.split(",") if s)
        for key, curve in fit_km(exposures, strata).items():
            label = stratum_label(strata, key)
            curve = curve.truncated(t_max)
            surv_curves[label] = curve
            disfle_rows[label] = (curve, disfle_curve(curve, t_max))
            if strata == ("sex",):
                for age in SUMMARY_AGES:
                    sex_curves[(age, "Men" if key[0] == "M" else "Women")] = curve
    with run.text("survival.csv") as fh:
        write_curves_csv(surv_curves, fh)
    with run.text("disfle.csv") as fh:
        write_disfle_csv(disfle_rows, fh)
    with run.text("disfle_summary.csv") as fh:
        fh.write("stratum,age,disfle\n")
        for label, (curve, _) in disfle_rows.items():
            for age in SUMMARY_AGES:
                try:
                    fh.write(f"{label},{age},{disfle_at(curve, age, t_max):.6f}\n")
                except IndicatorError:
                    fh.write(f"{label},{age},\n")
    if sex_curves:
        run.write("summary.md", disfle_summary_markdown(_summary_values(sex_curves, t_max)))
    kind = "Cox profile" if cox_path else "Kaplan-Meier"
    run.write("survival.svg", _curves_svg(surv_curves, f"Disease-free survival ({kind})", "Survival", t_max))
    run.write("disfle.svg", _curves_svg(
        {k: d for k, (_, d) in disfle_rows.items()}, f"Dis-FLE ({kind})", "Years", t_max, y_key="disfle"))
    run.close()
    print(run.dir)
    return EXIT_OK


def cmd_validate(args) -> int:
    run = _open_run(args, "validate", {"fit": args.fit, "store": args.store}, {"edges": args.edges})
    fit, extra = load_fit(args.fit)
    exposures, _ = _load_store(args.store)
    test_frac = 1 - float(extra.get("train_frac", 0.6))
    split = split_train_test([e.subject_id for e in exposures], test_frac, int(extra.get("split_seed", 0)))
    test_ids = split.test_ids
    test = [e for e in exposures if e.subject_id in test_ids]
    if not test:
        raise ValidationError("test partition is empty")
    design = build_design(split_episodes(test, fit.spec.grid), fit.spec, fit.basis)
    c = concordance(fit, design)
    edges = tuple(float(e) for e in args.edges.split(",")) if args.edges else DEFAULT_EDGES
    report = risk_group_calibration(fit, design, edges)
    with run.text("risk_groups.csv") as fh:
        report.write_csv(fh)
    with run.text("concordance.csv") as fh:
        fh.write("concordant,comparable,c_index\n")
        fh.write(f"{c.concordant:.1f},{c.comparable},{c.c_index:.8f}\n")
    rows = [(b.label, b.count, "" if b.mean_lp is None else f"{b.mean_lp:.3f}",
             "" if b.max_gap is None else f"{b.max_gap:.4f}") for b in report.bins]
    md = (
        f"# Validation\n\nTest subjects: {len(test)}\n\nC-statistic: {c.percent}"
        f" ({c.concordant:g} concordant of {c.comparable} comparable pairs)\n\n"
        + markdown_table(("Linear predictor", "Subjects", "Mean lp", "Max gap"), rows)
    )
    run.write("validation.md", md)
    for k, b in enumerate(report.bins):
        if b.observed is None:
            continue
        a0 = float(min(b.predicted.times.min(initial=np.inf), b.observed.times.min(initial=np.inf)))
        series = [
            Series("observed (KM)", np.concatenate([[a0], b.observed.times]),
                   np.concatenate([[1.0], b.observed.values])),
            Series("predicted", np.concatenate([[a0], b.predicted.times]),
                   np.concatenate([[1.0], b.predicted.values]), dashed=True),
        ]
        run.write(f"calibration_bin{k + 1}.svg", line_plot_svg(
            series, f"Linear predictor {b.label}", "Age (years)", "Survival"))
    run.close()
    print(run.dir)
    return EXIT_OK


# --------------------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for birth-date imputation and the train/test split")
    common.add_argument("--run-root", default=None, help=f"output root (default ${RUN_ROOT_ENV} or ./runs)")
    common.add_argument("--workers", type=int, default=1, help="cap on internal parallelism")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="disfle", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"disfle {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic cohort")
    s.add_argument("--config", help="synthetic generator YAML (default: bundled)")
    s.add_argument("--n", type=int, help="override the number of subjects")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", parents=[common], help="parse subjects and build exposures")
    s.add_argument("subjects")
    s.add_argument("dictionary")
    s.add_argument("--exclusions", help="exclusion rules YAML (default: bundled)")
    s.add_argument("--allow-row-errors", action="store_true", help="skip malformed rows instead of failing")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("fit", parents=[common], help="fit the Cox model on the training partition")
    s.add_argument("store")
    s.add_argument("--model", help="model specification YAML (default: bundled)")
    s.add_argument("--train-frac", type=float, default=0.6)
    s.add_argument("--split-seed", type=int, default=None, help="defaults to --seed")
    s.add_argument("--df", type=int, default=None, help="spline columns per age-dependent level (default 8)")
    s.add_argument("--grid-step", type=float, default=None, help="age grid step in years (default 2)")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("indicators", parents=[common], help="survival and Dis-FLE curves")
    s.add_argument("source", help="cohort store (Kaplan-Meier) or fit artifact (Cox profiles)")
    s.add_argument("--adjust", metavar="PYRAMID_CSV", help="whole-population adjustment (store only)")
    s.add_argument("--scaling", type=float, default=None,
                   help="observed-count scaling (default 18440022/13170355, about 1.4001)")
    s.add_argument("--strata", default="sex", help="comma-separated KM strata")
    s.add_argument("--profiles", default="standard", help="Cox profiles: standard, or labels/names")
    s.add_argument("--tmax", type=float, default=100.0)
    s.set_defaults(func=cmd_indicators)

    s = sub.add_parser("validate", parents=[common], help="concordance and risk-group calibration")
    s.add_argument("fit")
    s.add_argument("store")
    s.add_argument("--edges", default=None, help="comma-separated linear-predictor bin edges")
    s.set_defaults(func=cmd_validate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s"
    )
    try:
        return args.func(args)
    except (UsageError, ConfigError, DesignError) as exc:
        print(f"disfle {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CohortError, CoxError, AdjustmentError, IndicatorError, ValidationError, StoreError,
            OSError, ValueError) as exc:
        print(f"disfle {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
