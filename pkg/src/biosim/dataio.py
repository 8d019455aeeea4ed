"""CSV datasets and flat key-value config files.

Dataset schema, one row per (arm, time)::

    arm,time,responders,n

An optional leading ``study_id`` column turns the file into a multi-study
dataset for the random-effects command. Times are reals (study weeks).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

from .fit import TrialSeries

BASE_COLUMNS = ("arm", "time", "responders", "n")
STUDY_COLUMN = "study_id"


class SchemaError(ValueError):
    """Malformed dataset or config; carries the offending location."""

    def __init__(self, message, line=None, column=None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if column is not None:
            loc.append(f"column {column!r}")
        super().__init__(f"{', '.join(loc)}: {message}" if loc else message)
        self.line = line
        self.column = column


@dataclass(frozen=True)
class Row:
    arm: str
    time: float
    responders: int
    n: int
    study_id: str | None = None
    line: int = 0


@dataclass
class InputDataset:
    rows: list
    source: str = "<memory>"
    warnings: list = field(default_factory=list)

    @property
    def has_studies(self) -> bool:
        return any(r.study_id is not None for r in self.rows)

    def arms(self) -> list[str]:
        return list(dict.fromkeys(r.arm for r in self.rows))

    def studies(self, arm: str) -> list[TrialSeries]:
        """One series per study for ``arm`` (study order as first seen)."""
        groups: dict[str, list[Row]] = {}
        for r in self.rows:
            if r.arm == arm:
                groups.setdefault(r.study_id or "", []).append(r)
        if not groups:
            raise KeyError(f"arm {arm!r} not in dataset")
        return [_series(f"{arm}/{sid}" if sid else arm, rows) for sid, rows in groups.items()]

    def series(self, arm: str) -> TrialSeries:
        found = self.studies(arm)
        if len(found) > 1:
            raise SchemaError(f"arm {arm!r} spans {len(found)} studies; pick one study")
        return found[0]

    def key(self):
        return sorted((r.study_id or "", r.arm, r.time, r.responders, r.n) for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ((STUDY_COLUMN,) if self.has_studies else ()) + BASE_COLUMNS
        w.writerow(cols)
        for r in sorted(self.rows, key=lambda r: (r.study_id or "", r.arm, r.time)):
            vals = [r.arm, repr(r.time), r.responders, r.n]
            w.writerow(([r.study_id] if self.has_studies else []) + vals)
        return buf.getvalue()


def _series(arm_id, rows):
    rows = sorted(rows, key=lambda r: r.time)
    return TrialSeries(arm_id, rows[0].n, tuple(r.time for r in rows),
                       tuple(r.responders for r in rows))


def _parse_number(text, kind, line, column):
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise SchemaError(f"expected a number, got {text!r}", line, column) from None
    if not math.isfinite(value):
        raise SchemaError(f"non-finite value {text!r}", line, column)
    if kind is int:
        if value != int(value):
            raise SchemaError(f"expected an integer, got {text!r}", line, column)
        return int(value)
    return value


def parse_text(text: str, source: str = "<memory>") -> InputDataset:
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise SchemaError("empty file", 1) from None
    with_study = bool(header) and header[0] == STUDY_COLUMN
    expected = ((STUDY_COLUMN,) if with_study else ()) + BASE_COLUMNS
    if tuple(header) != expected:
        raise SchemaError(f"header must be {','.join(expected)}, got {','.join(header)}", 1)

    rows: list[Row] = []
    seen: dict[tuple, int] = {}
    arm_n: dict[tuple, tuple[int, int]] = {}
    for line, rec in enumerate(reader, start=2):
        if not rec or all(not c.strip() for c in rec):
            continue
        if len(rec) != len(expected):
            raise SchemaError(f"expected {len(expected)} fields, got {len(rec)}", line)
        rec = [c.strip() for c in rec]
        study = rec[0] if with_study else None
        arm, t_s, y_s, n_s = rec[-4:]
        if not arm:
            raise SchemaError("empty arm label", line, "arm")
        t = _parse_number(t_s, float, line, "time")
        y = _parse_number(y_s, int, line, "responders")
        n = _parse_number(n_s, int, line, "n")
        if t < 0:
            raise SchemaError("time must be non-negative", line, "time")
        if n < 1:
            raise SchemaError("n must be a positive integer", line, "n")
        if not 0 <= y <= n:
            raise SchemaError(f"responders {y} outside [0, n={n}]", line, "responders")
        group = (study, arm)
        if (group, t) in seen:
            raise SchemaError(
                f"duplicate time {t:g} for arm {arm!r} (first on line {seen[(group, t)]})",
                line, "time",
            )
        seen[(group, t)] = line
        if group in arm_n and arm_n[group][0] != n:
            raise SchemaError(
                f"arm {arm!r} changes n from {arm_n[group][0]} (line {arm_n[group][1]}) to {n}",
                line, "n",
            )
        arm_n.setdefault(group, (n, line))
        rows.append(Row(arm, t, y, n, study, line))
    if not rows:
        raise SchemaError("no data rows", 2)
    return InputDataset(rows, source)


def parse_dataset(path, encoding: str = "utf-8") -> InputDataset:
    path = Path(path)
    try:
        text = path.read_text(encoding=encoding)
    except OSError as exc:
        raise OSError(f"cannot read dataset {path}: {exc.strerror or exc}") from exc
    return parse_text(text, str(path))


def parse_config(path) -> dict[str, str]:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for line_no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SchemaError("expected key = value", line_no)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise SchemaError("empty key", line_no)
        out[key.replace("-", "_")] = value
    return out
