"""Flat columnar cohort store shared between CLI commands.

A store is a UTF-8 CSV of exposures preceded by ``#`` header lines: a format
line carrying the version, then free ``key=value`` metadata such as the
manifest hash of the run that wrote it. Floats are written with ``repr`` so a
round trip is exact.
"""

from __future__ import annotations

import csv
from typing import Mapping, Sequence, TextIO

from .cohort import BEHAVIORS, QUARTILES, Exposure

FORMAT = "disfle-store"
VERSION = 1
COVARIATES = ("sex", "birth_year", "department", *BEHAVIORS, *QUARTILES)
COLUMNS = ("subject_id", "entry_age", "exit_age", "event", *COVARIATES)


class StoreError(ValueError):
    pass


def write_store(exposures: Sequence[Exposure], out: TextIO, meta: Mapping[str, str] | None = None) -> None:
    out.write(f"# {FORMAT} {VERSION}\n")
    for k, v in (meta or {}).items():
        out.write(f"# {k}={v}\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(COLUMNS)
    for e in exposures:
        if e.synthetic:
            raise StoreError("synthetic exposures are not stored; adjustment is applied on read")
        cov = [e.covariates.get(c, "") for c in COVARIATES]
        w.writerow([e.subject_id, repr(float(e.entry_age)), repr(float(e.exit_age)), int(e.event), *cov])


def read_store(source: TextIO) -> tuple[list[Exposure], dict[str, str]]:
    """Exposures and header metadata; rejects unknown formats and versions."""
    first = source.readline().strip()
    parts = first.lstrip("# ").split()
    if len(parts) != 2 or parts[0] != FORMAT:
        raise StoreError("not a cohort store (missing format line)")
    if int(parts[1]) != VERSION:
        raise StoreError(f"store version {parts[1]} unsupported (expected {VERSION})")
    meta: dict[str, str] = {}
    lines = []
    for line in source:
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key] = value
        else:
            lines.append(line)
    reader = csv.reader(lines)
    header = next(reader, None)
    if header is None or tuple(header) != COLUMNS:
        raise StoreError("store header does not match the expected columns")
    out = []
    for row in reader:
        rec = dict(zip(COLUMNS, row))
        cov: dict[str, object] = {c: rec[c] for c in COVARIATES}
        cov["birth_year"] = int(rec["birth_year"])
        for c in (*BEHAVIORS, *QUARTILES):
            cov[c] = int(rec[c])
        out.append(Exposure(
            rec["subject_id"], float(rec["entry_age"]), float(rec["exit_age"]), rec["event"] == "1", cov,
        ))
    return out, meta
