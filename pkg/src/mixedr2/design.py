"""CSV ingestion, the model-formula language and fixed-effects design matrices.

Grammar::

    response ~ term (+ term)* + (1|group) [+ offset(log(col))]

with ``term`` one of ``name``, ``name^2``, ``a:b`` or ``a*b`` (expands to
``a + b + a:b``). A bare ``1`` is accepted as the intercept-only fixed part.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

__all__ = [
    "FormulaError",
    "DataError",
    "RankDeficiencyError",
    "Categorical",
    "Dataset",
    "Term",
    "ModelSpec",
    "DesignData",
    "parse_formula",
    "load_csv",
    "build_design",
    "residualize",
]


class FormulaError(ValueError):
    def __init__(self, message, position=None):
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)
        self.position = position


class DataError(ValueError):
    pass


class RankDeficiencyError(DataError):
    def __init__(self, term):
        super().__init__(f"design matrix is rank deficient: column {term!r} is collinear "
                         "with earlier columns")
        self.term = term


@dataclass(frozen=True)
class Categorical:
    codes: np.ndarray
    levels: tuple[str, ...]

    def __len__(self):
        return len(self.codes)

    def labels(self):
        return [self.levels[c] for c in self.codes]

    @classmethod
    def from_values(cls, values):
        values = [str(v) for v in values]
        levels = tuple(sorted(set(values)))
        lookup = {lv: i for i, lv in enumerate(levels)}
        return cls(np.array([lookup[v] for v in values], dtype=np.intp), levels)


@dataclass(frozen=True)
class Dataset:
    columns: dict

    def __post_init__(self):
        lengths = {len(c) for c in self.columns.values()}
        if len(lengths) > 1:
            raise DataError(f"columns have unequal lengths {sorted(lengths)}")

    @property
    def names(self):
        return list(self.columns)

    @property
    def n_rows(self):
        return len(next(iter(self.columns.values()))) if self.columns else 0

    def __getitem__(self, name):
        return self.columns[name]

    def __contains__(self, name):
        return name in self.columns

    def is_categorical(self, name):
        return isinstance(self.columns[name], Categorical)

    def with_column(self, name, values):
        cols = dict(self.columns)
        cols[name] = values
        return Dataset(cols)

    @classmethod
    def from_dict(cls, data, categorical=()):
        cols = {}
        for name, values in data.items():
            if isinstance(values, Categorical):
                cols[name] = values
            elif name in categorical:
                cols[name] = Categorical.from_values(values)
            else:
                arr = np.asarray(values)
                if arr.dtype.kind in "biuf":
                    cols[name] = arr.astype(float)
                else:
                    cols[name] = Categorical.from_values(arr.tolist())
        return cls(cols)


_MISSING = {"", "na", "nan", "null", "none", "."}


def _parse_float(text):
    try:
        return float(text)
    except ValueError:
        return None


def load_csv(path, type_hints=None) -> Dataset:
    """Read a header-first CSV into a :class:`Dataset`.

    Columns that parse as numbers become float columns unless ``type_hints``
    maps them to ``"categorical"``; anything else is categorical. Missing cells
    are rejected with the offending (1-based, header excluded) row reported.
    """
    type_hints = dict(type_hints or {})
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names")
    body = [r for r in rows[1:] if r != []]
    if not body:
        raise DataError(f"{path}: no data rows")
    for i, row in enumerate(body, start=1):
        if len(row) != len(header):
            raise DataError(f"{path}: row {i} has {len(row)} fields, expected {len(header)}")
        for name, cell in zip(header, row):
            if cell.strip().lower() in _MISSING:
                raise DataError(f"{path}: missing value in column {name!r} at row {i}")
    for name, kind in type_hints.items():
        if name not in header:
            raise DataError(f"type hint for unknown column {name!r}")
        if kind not in ("categorical", "numeric"):
            raise DataError(f"type hint {kind!r} must be 'categorical' or 'numeric'")

    cols = {}
    for j, name in enumerate(header):
        raw = [row[j].strip() for row in body]
        hint = type_hints.get(name)
        if hint == "categorical":
            cols[name] = Categorical.from_values(raw)
            continue
        parsed = [_parse_float(v) for v in raw]
        if all(v is not None for v in parsed):
            arr = np.array(parsed, dtype=float)
            if not np.all(np.isfinite(arr)):
                i = int(np.flatnonzero(~np.isfinite(arr))[0]) + 1
                raise DataError(f"{path}: non-finite value in column {name!r} at row {i}")
            cols[name] = arr
        elif hint == "numeric":
            i = next(k for k, v in enumerate(parsed) if v is None) + 1
            raise DataError(f"{path}: non-numeric value in column {name!r} at row {i}")
        else:
            cols[name] = Categorical.from_values(raw)
    return Dataset(cols)


@dataclass(frozen=True)
class Term:
    """A fixed-effects term: ``("x",)``, ``("x", "x")`` for a square, ``("a", "b")``."""

    factors: tuple[str, ...]

    @property
    def is_square(self):
        return len(self.factors) == 2 and self.factors[0] == self.factors[1]

    def __str__(self):
        if self.is_square:
            return f"{self.factors[0]}^2"
        return ":".join(self.factors)


@dataclass(frozen=True)
class ModelSpec:
    response: str
    fixed_terms: tuple[Term, ...]
    group: str
    offset: str | None = None
    offset_log: bool = True
    family: str = "gaussian"
    link: str | None = None

    def columns(self):
        cols = [self.response, self.group]
        for t in self.fixed_terms:
            cols.extend(t.factors)
        if self.offset:
            cols.append(self.offset)
        return list(dict.fromkeys(cols))

    def to_formula(self):
        rhs = [str(t) for t in self.fixed_terms] or ["1"]
        rhs.append(f"(1|{self.group})")
        if self.offset:
            rhs.append(f"offset(log({self.offset}))" if self.offset_log
                       else f"offset({self.offset})")
        return f"{self.response} ~ " + " + ".join(rhs)

    __str__ = to_formula

    def with_terms(self, terms):
        return ModelSpec(self.response, tuple(terms), self.group, self.offset,
                         self.offset_log, self.family, self.link)


_NAME = r"[A-Za-z_.][A-Za-z0-9_.]*"
_TOKEN = re.compile(
    rf"\s*(?:(?P<group>\(\s*1\s*\|\s*(?P<gname>{_NAME})\s*\))"
    rf"|(?P<offset>offset\s*\(\s*(?:log\s*\(\s*(?P<olog>{_NAME})\s*\)|(?P<oraw>{_NAME}))\s*\))"
    rf"|(?P<term>{_NAME}(?:\s*\^\s*2)?(?:\s*[:*]\s*{_NAME}(?:\s*\^\s*2)?)*)"
    rf"|(?P<one>1))\s*")


def _parse_factor(text, pos):
    text = text.strip()
    if "^" in text:
        name, power = [s.strip() for s in text.split("^")]
        if power != "2":
            raise FormulaError(f"only squares are supported, got {text!r}", pos)
        return [Term((name, name))]
    return [Term((text,))]


def _expand_term(text, pos):
    """Expand ``a*b`` and ``a:b`` chains into main effects and interactions."""
    if "*" in text:
        parts = [p.strip() for p in text.split("*")]
        if len(parts) != 2 or any(":" in p or "^" in p for p in parts):
            raise FormulaError(f"'*' supports exactly two plain names, got {text!r}", pos)
        a, b = parts
        return [Term((a,)), Term((b,)), Term((a, b))]
    if ":" in text:
        parts = [p.strip() for p in text.split(":")]
        if len(parts) != 2 or any("^" in p for p in parts):
            raise FormulaError(f"':' supports exactly two plain names, got {text!r}", pos)
        if parts[0] == parts[1]:
            return [Term((parts[0], parts[0]))]
        return [Term(tuple(parts))]
    return _parse_factor(text, pos)


def parse_formula(text: str, family: str = "gaussian", link: str | None = None) -> ModelSpec:
    """Parse a random-intercept model formula.

    >>> str(parse_formula("y ~ a*b + (1|g)"))
    'y ~ a + b + a:b + (1|g)'
    """
    if text.count("~") != 1:
        raise FormulaError("formula needs exactly one '~'", text.find("~") if "~" in text else 0)
    lhs, rhs = text.split("~")
    response = lhs.strip()
    if not re.fullmatch(_NAME, response):
        raise FormulaError(f"invalid response {response!r}", 0)
    base = len(lhs) + 1

    terms, group, offset, offset_log = [], None, None, True
    pos = 0
    while True:
        m = _TOKEN.match(rhs, pos)
        if not m or m.end() == pos:
            skip = len(rhs[pos:]) - len(rhs[pos:].lstrip())
            raise FormulaError("expected a term", base + pos + skip)
        if m.group("group"):
            if group is not None:
                raise FormulaError("only one (1|group) term is supported", base + m.start())
            group = m.group("gname")
        elif m.group("offset"):
            if offset is not None:
                raise FormulaError("only one offset is supported", base + m.start())
            offset = m.group("olog") or m.group("oraw")
            offset_log = m.group("olog") is not None
        elif m.group("term"):
            terms.extend(_expand_term(m.group("term"), base + m.start()))
        pos = m.end()
        if pos == len(rhs):
            break
        if rhs[pos] != "+":
            raise FormulaError(f"unexpected {rhs[pos]!r}", base + pos)
        pos += 1
    if group is None:
        raise FormulaError("formula needs a random intercept term (1|group)", len(text))
    seen, unique = set(), []
    for t in terms:
        if t.factors in seen:
            continue
        seen.add(t.factors)
        unique.append(t)
    return ModelSpec(response, tuple(unique), group, offset, offset_log, family, link)


@dataclass(frozen=True)
class DesignData:
    y: np.ndarray
    X: np.ndarray
    group_index: np.ndarray
    offset: np.ndarray
    column_names: tuple[str, ...]
    group_levels: tuple[str, ...] = field(default=())

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def m(self):
        return int(self.group_index.max()) + 1

    @property
    def n_i(self):
        return np.bincount(self.group_index, minlength=self.m)

    @classmethod
    def from_arrays(cls, y, X, groups, offset=None, column_names=None,
                    check_rank=True):
        """Assemble design data from raw arrays; ``groups`` holds any hashable labels."""
        y = np.asarray(y, dtype=float)
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        labels = [str(g) for g in np.asarray(groups).tolist()]
        cat = Categorical.from_values(labels)
        if offset is None:
            offset = np.zeros(len(y))
        names = tuple(column_names or [f"x{j}" for j in range(X.shape[1])])
        if not (len(y) == X.shape[0] == len(cat) == len(offset)):
            raise DataError("y, X, groups and offset must have equal lengths")
        if check_rank:
            _check_rank(X, names)
        return cls(y, X, cat.codes, np.asarray(offset, float), names, cat.levels)

    def without_random(self):
        """Design with group indicators appended as fixed effects (treatment coded)."""
        m = self.m
        G = np.zeros((self.n, m - 1))
        rows = np.flatnonzero(self.group_index > 0)
        G[rows, self.group_index[rows] - 1] = 1.0
        names = self.column_names + tuple(f"group[{lv}]" for lv in self.group_levels[1:])
        X = np.column_stack([self.X, G])
        _check_rank(X, names)
        return DesignData(self.y, X, self.group_index, self.offset, names, self.group_levels)


def _check_rank(X, names):
    if X.shape[0] < X.shape[1]:
        raise RankDeficiencyError(names[X.shape[0]])
    scale = np.sqrt(np.sum(X * X, axis=0))
    if np.any(scale == 0):
        raise RankDeficiencyError(names[int(np.flatnonzero(scale == 0)[0])])
    Xs = X / scale
    _, R, _ = linalg.qr(Xs, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = diag[0] * max(X.shape) * np.finfo(float).eps * 10
    if np.sum(diag > tol) == X.shape[1]:
        return
    # locate the first column that adds nothing to the span of its predecessors
    for k in range(1, X.shape[1] + 1):
        r = np.linalg.matrix_rank(Xs[:, :k], tol=tol)
        if r < k:
            raise RankDeficiencyError(names[k - 1])
    raise RankDeficiencyError(names[-1])


def _coded(dataset, name):
    col = dataset[name]
    if isinstance(col, Categorical):
        k = len(col.levels)
        mats = np.zeros((len(col), k - 1))
        rows = np.flatnonzero(col.codes > 0)
        mats[rows, col.codes[rows] - 1] = 1.0
        return mats, [f"{name}[{lv}]" for lv in col.levels[1:]]
    return np.asarray(col, float)[:, None], [name]


def _term_columns(dataset, term):
    if term.is_square:
        name = term.factors[0]
        if dataset.is_categorical(name):
            raise DataError(f"cannot square categorical column {name!r}")
        return (np.asarray(dataset[name], float) ** 2)[:, None], [f"{name}^2"]
    if len(term.factors) == 1:
        return _coded(dataset, term.factors[0])
    (A, an), (B, bn) = (_coded(dataset, f) for f in term.factors)
    cols = [A[:, i] * B[:, j] for i in range(A.shape[1]) for j in range(B.shape[1])]
    names = [f"{a}:{b}" for a in an for b in bn]
    return np.column_stack(cols), names


def build_design(dataset: Dataset, spec: ModelSpec) -> DesignData:
    for col in spec.columns():
        if col not in dataset:
            raise DataError(f"unknown column {col!r}")
    if dataset.is_categorical(spec.response):
        raise DataError(f"response {spec.response!r} must be numeric")
    y = np.asarray(dataset[spec.response], float)
    blocks, names = [np.ones((len(y), 1))], ["(Intercept)"]
    for term in spec.fixed_terms:
        M, nm = _term_columns(dataset, term)
        blocks.append(M)
        names.extend(nm)
    X = np.column_stack(blocks)
    _check_rank(X, names)

    gcol = dataset[spec.group]
    labels = gcol.labels() if isinstance(gcol, Categorical) else [
        repr(float(v)) if not float(v).is_integer() else str(int(v)) for v in gcol]
    cat = Categorical.from_values(labels)
    if len(cat.levels) < 2:
        raise DataError("the grouping factor needs at least two levels")

    if spec.offset:
        if dataset.is_categorical(spec.offset):
            raise DataError(f"offset column {spec.offset!r} must be numeric")
        raw = np.asarray(dataset[spec.offset], float)
        if spec.offset_log:
            if np.any(raw <= 0):
                raise DataError(f"offset(log({spec.offset})) needs positive values")
            offset = np.log(raw)
        else:
            offset = raw.copy()
    else:
        offset = np.zeros(len(y))
    return DesignData(y, X, cat.codes, offset, tuple(names), cat.levels)


def residualize(dataset: Dataset, column: str, on: str, name: str | None = None) -> Dataset:
    """Replace-by-residual helper: regress ``column`` on factor/column ``on`` by OLS.

    Returns a dataset with the residuals added as ``name`` (default
    ``<column>_r``). Used for removing region-level structure from a covariate
    before it enters a model.
    """
    if dataset.is_categorical(column):
        raise DataError(f"cannot residualize categorical column {column!r}")
    y = np.asarray(dataset[column], float)
    M, _ = _coded(dataset, on)
    X = np.column_stack([np.ones(len(y)), M])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return dataset.with_column(name or f"{column}_r", y - X @ coef)
