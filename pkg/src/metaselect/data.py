"""Dataset containers, model specifications, and design matrix assembly.

A dataset holds one row per study: an observed effect ``y``, its sampling
variance ``v``, an optional within-study sample size ``n``, and ``p``
study-level covariates.  Covariates are either metric or binary; binary
columns are coded 0/1 with the reference level at 0.

Model specifications list main effects by covariate index and two-way
interactions as index pairs.  Every interaction must be accompanied by
both of its main effects before a design matrix can be built.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    AllMissingColumn,
    DataError,
    IndexOutOfRange,
    MarginalityViolation,
    MissingColumn,
    MissingValue,
    NonNumericValue,
    NonPositiveVariance,
    SchemaError,
    ZeroVariance,
)

_MISSING_TOKENS = {"", "na", "nan", "n/a", "null"}

# Largest covariate count for which admissible-model counting is allowed.
# Beyond this the count dwarfs anything enumerable and is refused outright.
_MAX_COUNT_P = 20


@dataclass
class CovariateMeta:
    """Name and measurement scale of one covariate.

    ``reference`` records which original level was coded 0 for a binary
    covariate read from text labels.  ``mean`` and ``sd`` are filled in by
    :func:`standardize` so that fitted coefficients can be mapped back to
    the original scale.
    """

    name: str
    scale: str  # "metric" or "binary"
    reference: str | None = None
    mean: float | None = None
    sd: float | None = None

    def __post_init__(self) -> None:
        if self.scale not in ("metric", "binary"):
            raise SchemaError(
                f"covariate {self.name!r}: scale must be 'metric' or 'binary', "
                f"got {self.scale!r}"
            )


@dataclass
class StudyRecord:
    """One study: effect estimate, sampling variance, size, covariates."""

    y: float
    v: float
    n: float | None
    x: np.ndarray


@dataclass(eq=False)
class MetaDataset:
    """Array-backed study table. Treat instances as read-only.

    ``x`` may contain NaN for missing covariate values when the dataset was
    loaded with ``missing="keep"``.  ``y`` and ``v`` are always complete.
    """

    y: np.ndarray
    v: np.ndarray
    x: np.ndarray
    covariates: tuple[CovariateMeta, ...]
    n: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.y = np.asarray(self.y, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        self.x = np.asarray(self.x, dtype=float)
        if self.n is not None:
            self.n = np.asarray(self.n, dtype=float)
        self.covariates = tuple(self.covariates)
        if self.y.ndim != 1:
            raise DataError("y must be one dimensional")
        k = self.y.shape[0]
        if self.v.shape != (k,):
            raise DataError("v must have one entry per study")
        if self.x.ndim != 2 or self.x.shape[0] != k:
            raise DataError("x must have one row per study")
        if len(self.covariates) != self.x.shape[1]:
            raise DataError(
                f"{self.x.shape[1]} covariate columns but "
                f"{len(self.covariates)} schema entries"
            )
        if self.n is not None and self.n.shape != (k,):
            raise DataError("n must have one entry per study")
        if not np.all(np.isfinite(self.y)):
            raise DataError("y contains missing or non finite values")
        if not np.all(np.isfinite(self.v)):
            raise DataError("v contains missing or non finite values")
        if np.any(self.v <= 0.0):
            raise NonPositiveVariance("every sampling variance must be positive")
        if np.any(np.isinf(self.x)):
            raise DataError("x contains non finite values")
        if self.n is not None:
            bad = np.isfinite(self.n) & (self.n < 1.0)
            if np.any(bad):
                raise DataError("sample sizes must be at least 1")
        seen: set[str] = set()
        for j, meta in enumerate(self.covariates):
            if meta.name in seen:
                raise SchemaError(f"duplicate covariate name {meta.name!r}")
            seen.add(meta.name)
            if meta.scale == "binary":
                col = self.x[:, j]
                obs = col[np.isfinite(col)]
                if obs.size and not np.all(np.isin(obs, (0.0, 1.0))):
                    raise SchemaError(
                        f"binary covariate {meta.name!r} has values outside 0/1"
                    )

    # -- basic shape -------------------------------------------------

    @property
    def k(self) -> int:
        """Number of studies."""
        return self.y.shape[0]

    @property
    def p(self) -> int:
        """Number of covariates."""
        return self.x.shape[1]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(meta.name for meta in self.covariates)

    def index(self, name: str) -> int:
        """Column index of a covariate by name."""
        for j, meta in enumerate(self.covariates):
            if meta.name == name:
                return j
        raise MissingColumn(f"no covariate named {name!r}")

    def records(self) -> Iterator[StudyRecord]:
        for i in range(self.k):
            n_i = None if self.n is None else float(self.n[i])
            yield StudyRecord(float(self.y[i]), float(self.v[i]), n_i, self.x[i].copy())

    # -- missingness -------------------------------------------------

    @property
    def complete_mask(self) -> np.ndarray:
        """Boolean mask of rows with no missing covariate values."""
        if self.p == 0:
            return np.ones(self.k, dtype=bool)
        return np.all(np.isfinite(self.x), axis=1)

    @property
    def has_missing(self) -> bool:
        return not bool(np.all(self.complete_mask))

    def complete_cases(self) -> "MetaDataset":
        """Drop every row with a missing covariate value."""
        return self.subset(np.flatnonzero(self.complete_mask))

    def require_complete(self, context: str) -> None:
        if self.has_missing:
            raise MissingValue(
                f"{context} needs complete covariates; "
                "load with missing='drop' or impute first"
            )

    def subset(self, indices: Sequence[int] | np.ndarray) -> "MetaDataset":
        """New dataset holding the given rows, in the given order."""
        idx = np.asarray(indices, dtype=int)
        n = None if self.n is None else self.n[idx].copy()
        metas = tuple(replace(meta) for meta in self.covariates)
        return MetaDataset(self.y[idx].copy(), self.v[idx].copy(),
                           self.x[idx].copy(), metas, n)

    # -- serialization -----------------------------------------------

    def to_csv(self, path_or_buffer) -> None:
        """Write the dataset back out as CSV (same layout load expects)."""
        own = isinstance(path_or_buffer, (str, bytes)) or hasattr(path_or_buffer, "__fspath__")
        handle = open(path_or_buffer, "w", newline="") if own else path_or_buffer
        try:
            writer = csv.writer(handle)
            header = ["y", "v"]
            if self.n is not None:
                header.append("n")
            header.extend(self.names)
            writer.writerow(header)
            for i in range(self.k):
                row = [repr(float(self.y[i])), repr(float(self.v[i]))]
                if self.n is not None:
                    row.append(_format_n(self.n[i]))
                for j, meta in enumerate(self.covariates):
                    row.append(_format_cell(self.x[i, j], meta))
                writer.writerow(row)
        finally:
            if own:
                handle.close()


def _format_n(value: float) -> str:
    if not np.isfinite(value):
        return ""
    return str(int(value)) if float(value).is_integer() else repr(float(value))


def _format_cell(value: float, meta: CovariateMeta) -> str:
    if not np.isfinite(value):
        return ""
    if meta.scale == "binary":
        return str(int(value))
    return repr(float(value))


# ---------------------------------------------------------------------
# Model specification


@dataclass(frozen=True)
class ModelSpec:
    """Set of main effects plus marginality-respecting interaction pairs.

    Stored in canonical form: mains sorted ascending, each interaction as
    an ordered pair ``(low, high)``, pairs sorted lexicographically.
    """

    mains: tuple[int, ...] = ()
    interactions: tuple[tuple[int, int], ...] = ()

    def __post_init__(self) -> None:
        mains = tuple(sorted({int(j) for j in self.mains}))
        pairs = set()
        for pair in self.interactions:
            a, b = int(pair[0]), int(pair[1])
            if a == b:
                raise ValueError(f"interaction ({a}, {b}) repeats one covariate")
            pairs.add((min(a, b), max(a, b)))
        inter = tuple(sorted(pairs))
        for j in mains:
            if j < 0:
                raise IndexOutOfRange(f"negative covariate index {j}")
        for a, b in inter:
            if a < 0:
                raise IndexOutOfRange(f"negative covariate index {a}")
        object.__setattr__(self, "mains", mains)
        object.__setattr__(self, "interactions", inter)

    @classmethod
    def empty(cls) -> "ModelSpec":
        return cls((), ())

    @property
    def m(self) -> int:
        """Number of regression coefficients, intercept included."""
        return 1 + len(self.mains) + len(self.interactions)

    @property
    def is_closed(self) -> bool:
        """True when both parents of every interaction are present."""
        mains = set(self.mains)
        return all(a in mains and b in mains for a, b in self.interactions)

    def closure(self) -> "ModelSpec":
        """Smallest superset spec that respects marginality."""
        mains = set(self.mains)
        for a, b in self.interactions:
            mains.add(a)
            mains.add(b)
        return ModelSpec(tuple(mains), self.interactions)

    def with_main(self, j: int) -> "ModelSpec":
        return ModelSpec(self.mains + (j,), self.interactions)

    def with_interaction(self, pair: tuple[int, int]) -> "ModelSpec":
        return ModelSpec(self.mains, self.interactions + (tuple(pair),)).closure()

    def union(self, other: "ModelSpec") -> "ModelSpec":
        return ModelSpec(self.mains + other.mains,
                         self.interactions + other.interactions)

    def describe(self, names: Sequence[str] | None = None) -> str:
        """Human readable one-liner, for traces and reports."""
        def label(j: int) -> str:
            return names[j] if names is not None else str(j)

        parts = [label(j) for j in self.mains]
        parts.extend(f"{label(a)}:{label(b)}" for a, b in self.interactions)
        return "{" + ", ".join(parts) + "}"


@dataclass
class DesignMatrix:
    """Dense design matrix with its column names and originating spec."""

    values: np.ndarray
    names: tuple[str, ...]
    spec: ModelSpec

    @property
    def m(self) -> int:
        return self.values.shape[1]

    @property
    def k(self) -> int:
        return self.values.shape[0]


def build_design(ds: MetaDataset, spec: ModelSpec) -> DesignMatrix:
    """Assemble intercept, main effect, and product columns for a spec.

    Column order is fixed: intercept first, then mains by ascending
    covariate index, then interactions in lexicographic pair order.

    Raises MarginalityViolation when an interaction lacks a parent,
    IndexOutOfRange for indices outside ``0..p-1``, and MissingValue when
    a required covariate cell is missing.
    """
    for j in spec.mains:
        if j >= ds.p:
            raise IndexOutOfRange(f"covariate index {j} but only {ds.p} covariates")
    for a, b in spec.interactions:
        if b >= ds.p:
            raise IndexOutOfRange(f"covariate index {b} but only {ds.p} covariates")
    if not spec.is_closed:
        missing = sorted(
            {j for pair in spec.interactions for j in pair} - set(spec.mains)
        )
        raise MarginalityViolation(
            f"interactions reference covariates {missing} without main effects"
        )
    cols = [np.ones(ds.k)]
    names = ["intercept"]
    for j in spec.mains:
        col = ds.x[:, j]
        if not np.all(np.isfinite(col)):
            raise MissingValue(
                f"covariate {ds.covariates[j].name!r} has missing values"
            )
        cols.append(col)
        names.append(ds.covariates[j].name)
    for a, b in spec.interactions:
        cols.append(ds.x[:, a] * ds.x[:, b])
        names.append(f"{ds.covariates[a].name}:{ds.covariates[b].name}")
    values = np.column_stack(cols) if cols else np.empty((ds.k, 0))
    return DesignMatrix(values, tuple(names), spec)


def count_admissible_models(p: int) -> int:
    """Number of marginality-respecting models with p candidate covariates.

    Sums over every main effect subset of size s the number of interaction
    subsets drawn from the s*(s-1)/2 pairs available inside it.
    """
    if p < 0:
        raise IndexOutOfRange("p must be non negative")
    if p > _MAX_COUNT_P:
        raise OverflowError(
            f"admissible model count requested for p={p}; refusing beyond "
            f"p={_MAX_COUNT_P}"
        )
    total = 0
    for s in range(p + 1):
        total += math.comb(p, s) * (1 << math.comb(s, 2))
    return total


# ---------------------------------------------------------------------
# Loading


def load_schema(source) -> tuple[CovariateMeta, ...]:
    """Read covariate metadata from JSON (path, file object, or parsed).

    Accepts either a bare list of entries or an object with a
    ``covariates`` key.  Each entry needs ``name`` and ``scale``;
    ``reference`` is optional and only meaningful for binary covariates.
    """
    if isinstance(source, (list, dict)):
        obj = source
    elif hasattr(source, "read"):
        obj = json.load(source)
    else:
        with open(source) as handle:
            obj = json.load(handle)
    if isinstance(obj, dict):
        if "covariates" not in obj:
            raise SchemaError("schema object lacks a 'covariates' list")
        obj = obj["covariates"]
    if not isinstance(obj, list):
        raise SchemaError("schema must be a list of covariate entries")
    metas = []
    for entry in obj:
        if not isinstance(entry, dict) or "name" not in entry or "scale" not in entry:
            raise SchemaError("each schema entry needs 'name' and 'scale'")
        metas.append(
            CovariateMeta(
                name=str(entry["name"]),
                scale=str(entry["scale"]),
                reference=None if entry.get("reference") is None
                else str(entry["reference"]),
            )
        )
    return tuple(metas)


def schema_to_json(covariates: Iterable[CovariateMeta]) -> str:
    entries = []
    for meta in covariates:
        entry: dict = {"name": meta.name, "scale": meta.scale}
        if meta.reference is not None:
            entry["reference"] = meta.reference
        entries.append(entry)
    return json.dumps({"covariates": entries}, indent=2)


def _is_missing(token: str) -> bool:
    return token.strip().lower() in _MISSING_TOKENS


def _parse_float(token: str, column: str, row: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise NonNumericValue(
            f"column {column!r}, row {row}: cannot parse {token.strip()!r}"
        ) from None


def load_dataset(source, schema, missing: str = "error") -> MetaDataset:
    """Read a study table from CSV.

    The table must have columns ``y`` and ``v`` plus one column per schema
    covariate (matched by name); a column ``n`` of within-study sample
    sizes is picked up when present.  Extra columns are ignored.

    ``missing`` controls rows with missing covariate cells: ``"error"``
    rejects the file, ``"drop"`` keeps complete cases only, ``"keep"``
    retains the rows with NaN markers.  Missing ``y`` or ``v`` is always
    an error.  Binary covariates may be coded 0/1 or as two text labels;
    with text labels the schema ``reference`` level (or the
    lexicographically smaller label) is coded 0.
    """
    if missing not in ("error", "drop", "keep"):
        raise DataError(f"unknown missing policy {missing!r}")
    metas = load_schema(schema) if not isinstance(schema, tuple) else schema
    metas = tuple(
        CovariateMeta(m.name, m.scale, m.reference) for m in metas
    )

    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source, newline="") as handle:
            text = handle.read()
    reader = csv.reader(io.StringIO(text))
    rows = [row for row in reader if row and any(cell.strip() for cell in row)]
    if not rows:
        raise DataError("empty input table")
    header = [cell.strip() for cell in rows[0]]
    body = rows[1:]
    if not body:
        raise DataError("input table has a header but no studies")

    def column(name: str) -> int:
        try:
            return header.index(name)
        except ValueError:
            raise MissingColumn(f"required column {name!r} not found") from None

    y_col = column("y")
    v_col = column("v")
    n_col = header.index("n") if "n" in header else None
    cov_cols = [column(meta.name) for meta in metas]

    k = len(body)
    y = np.empty(k)
    v = np.empty(k)
    n = np.full(k, np.nan) if n_col is not None else None
    raw: list[list[str]] = []
    for i, row in enumerate(body, start=1):
        if len(row) < len(header):
            row = row + [""] * (len(header) - len(row))
        y_tok, v_tok = row[y_col], row[v_col]
        if _is_missing(y_tok):
            raise MissingValue(f"row {i}: effect estimate y is missing")
        if _is_missing(v_tok):
            raise MissingValue(f"row {i}: sampling variance v is missing")
        y[i - 1] = _parse_float(y_tok, "y", i)
        v[i - 1] = _parse_float(v_tok, "v", i)
        if n is not None and not _is_missing(row[n_col]):
            n[i - 1] = _parse_float(row[n_col], "n", i)
        raw.append([row[c] for c in cov_cols])

    x = np.full((k, len(metas)), np.nan)
    for j, meta in enumerate(metas):
        tokens = [raw[i][j] for i in range(k)]
        present = [i for i, tok in enumerate(tokens) if not _is_missing(tok)]
        if not present:
            raise AllMissingColumn(
                f"covariate {meta.name!r} has no observed values"
            )
        if meta.scale == "metric":
            for i in present:
                x[i, j] = _parse_float(tokens[i], meta.name, i + 1)
        else:
            x[:, j] = _parse_binary(tokens, present, meta)

    if missing == "error":
        incomplete = np.flatnonzero(~np.all(np.isfinite(x), axis=1))
        if incomplete.size:
            raise MissingValue(
                f"{incomplete.size} row(s) have missing covariates "
                f"(first at row {incomplete[0] + 1}); use missing='drop' "
                "or missing='keep'"
            )
    ds = MetaDataset(y, v, x, metas, n)
    if missing == "drop":
        ds = ds.complete_cases()
        if ds.k == 0:
            raise DataError("no complete cases remain after dropping")
    return ds


def _parse_binary(tokens: list[str], present: list[int],
                  meta: CovariateMeta) -> np.ndarray:
    """Code a binary column to 0/1, filling NaN for missing cells."""
    out = np.full(len(tokens), np.nan)
    stripped = {i: tokens[i].strip() for i in present}
    numeric = True
    for i in present:
        try:
            val = float(stripped[i])
        except ValueError:
            numeric = False
            break
        if val not in (0.0, 1.0):
            numeric = False
            break
    if numeric and meta.reference is None:
        for i in present:
            out[i] = float(stripped[i])
        return out
    levels = sorted({stripped[i] for i in present})
    if len(levels) > 2:
        raise SchemaError(
            f"binary covariate {meta.name!r} has {len(levels)} levels: {levels}"
        )
    if meta.reference is not None:
        if meta.reference not in levels and len(levels) == 2:
            raise SchemaError(
                f"reference level {meta.reference!r} not observed for "
                f"{meta.name!r} (levels: {levels})"
            )
        zero = meta.reference
    else:
        if len(levels) < 2:
            raise SchemaError(
                f"binary covariate {meta.name!r} has a single level "
                f"{levels[0]!r} and no reference to anchor the coding"
            )
        zero = levels[0]
    meta.reference = zero
    for i in present:
        out[i] = 0.0 if stripped[i] == zero else 1.0
    return out


def standardize(ds: MetaDataset) -> MetaDataset:
    """Center and scale metric covariates to mean 0, unit variance.

    Binary covariates pass through untouched.  Sample statistics use the
    ``ddof=1`` convention and ignore missing cells.  The applied mean and
    sd are recorded on each covariate's metadata.  A constant metric
    covariate raises ZeroVariance.
    """
    x = ds.x.copy()
    metas = []
    for j, meta in enumerate(ds.covariates):
        meta = replace(meta)
        if meta.scale == "metric":
            col = x[:, j]
            obs = col[np.isfinite(col)]
            if obs.size < 2:
                raise ZeroVariance(
                    f"covariate {meta.name!r} has fewer than two observed values"
                )
            mean = float(np.mean(obs))
            sd = float(np.std(obs, ddof=1))
            if sd == 0.0:
                raise ZeroVariance(f"covariate {meta.name!r} is constant")
            x[:, j] = (col - mean) / sd
            meta.mean = mean
            meta.sd = sd
        metas.append(meta)
    n = None if ds.n is None else ds.n.copy()
    return MetaDataset(ds.y.copy(), ds.v.copy(), x, tuple(metas), n)
