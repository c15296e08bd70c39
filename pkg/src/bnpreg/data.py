"""Delimited data tables, column roles, and data-preparation transforms.

All storage is numeric.  A table is an immutable (name, columns, values,
missing-mask) bundle; every transform appends new columns to a copy and
records an auditable lineage entry, so a fitted model can replay its own
preprocessing from the raw file.

Censoring bounds use the sentinel value -9999 (exactly) to mean "no bound",
matching the interchange convention of the .DAT-style comma-delimited files
this module reads and writes.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

__all__ = [
    "CENSOR_SENTINEL",
    "DataTable",
    "RoleAssignment",
    "CensorStatus",
    "load_csv",
    "write_csv",
    "zscore",
    "dummy_code",
    "lag",
    "interact",
    "vectorize",
    "parse_censoring",
]

CENSOR_SENTINEL = -9999.0


def _format_cell(v):
    """Format a float so it round-trips bit-exactly through ``float``."""
    v = float(v)
    if math.isnan(v):
        return ""
    if v == int(v) and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def _check_name(name):
    if not isinstance(name, str) or not name.strip():
        raise ValidationError("column names must be non-empty strings")
    if "," in name or "\n" in name or "\r" in name:
        raise ValidationError("column name %r may not contain commas or newlines" % name)
    return name


class DataTable:
    """An immutable numeric table with per-cell missingness.

    Parameters
    ----------
    name : str
        Table label (usually the source file stem).
    columns : sequence of str
        Unique, non-empty column names, in order.
    values : array_like, shape (n_rows, n_cols)
        Cell values; entries under the missing mask are ignored (stored
        as NaN).
    missing : array_like of bool, optional
        True where a cell is missing.  Defaults to ``isnan(values)``.
    lineage : tuple
        Ordered (op, inputs, params) records of the transforms that
        produced this table.
    """

    def __init__(self, name, columns, values, missing=None, lineage=()):
        self.name = str(name)
        columns = [_check_name(c) for c in columns]
        if len(set(columns)) != len(columns):
            raise ValidationError("duplicate column names: %r" % (columns,))
        values = np.asarray(values, dtype=float)
        if values.ndim != 2:
            values = values.reshape(len(values), -1)
        if values.shape[1] != len(columns):
            raise ValidationError(
                "value matrix has %d columns for %d names" % (values.shape[1], len(columns))
            )
        if missing is None:
            missing = np.isnan(values)
        missing = np.asarray(missing, dtype=bool)
        if missing.shape != values.shape:
            raise ValidationError("missing mask shape does not match values")
        values = values.copy()
        values[missing] = np.nan
        missing = missing | np.isnan(values)
        values.setflags(write=False)
        missing.setflags(write=False)
        self.columns = tuple(columns)
        self.values = values
        self.missing = missing
        self.lineage = tuple(lineage)

    # -- basic access ------------------------------------------------------

    @property
    def n_rows(self):
        return self.values.shape[0]

    @property
    def n_cols(self):
        return self.values.shape[1]

    def column_index(self, name):
        try:
            return self.columns.index(name)
        except ValueError:
            raise ValidationError("no column named %r in table %r" % (name, self.name)) from None

    def column(self, name):
        """Return (values, missing) for one column (read-only views)."""
        j = self.column_index(name)
        return self.values[:, j], self.missing[:, j]

    def observed(self, name):
        """Non-missing values of one column."""
        v, m = self.column(name)
        return v[~m]

    def __repr__(self):
        return "DataTable(%r, %d rows x %d cols)" % (self.name, self.n_rows, self.n_cols)

    # -- construction helpers ----------------------------------------------

    def _unique_name(self, name):
        if name not in self.columns:
            return name
        k = 2
        while "%s_%d" % (name, k) in self.columns:
            k += 1
        return "%s_%d" % (name, k)

    def with_columns(self, names, values, record):
        """Append columns (suffixing names on collision) plus a lineage record."""
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        out_names = list(self.columns)
        final = []
        for nm in names:
            nm2 = self._unique_name(nm)
            while nm2 in final:
                nm2 = nm2 + "_2"
            final.append(nm2)
            out_names.append(nm2)
        stacked = np.hstack([self.values, values])
        return DataTable(
            self.name,
            out_names,
            stacked,
            missing=np.isnan(stacked),
            lineage=self.lineage + (record,),
        )

    def rename(self, old, new):
        """Rename one column (explicit escape hatch for suffixed names)."""
        j = self.column_index(old)
        _check_name(new)
        if new in self.columns and new != old:
            raise ValidationError("column %r already exists" % new)
        names = list(self.columns)
        names[j] = new
        rec = ("rename", (old,), {"to": new})
        return DataTable(self.name, names, self.values, self.missing, self.lineage + (rec,))


# -- delimited input/output -------------------------------------------------


def load_csv(path, name=None):
    """Read a comma-delimited file (path or open text stream): first row =
    column names, cells numeric.

    Empty cells and the literal token NaN are missing.  Ragged rows and
    non-numeric tokens raise :class:`ValidationError` naming the spot.
    """
    if hasattr(path, "read"):
        rows = [row for row in csv.reader(path) if row]
        path = name if name is not None else "<stream>"
    else:
        try:
            with open(path, "r", newline="") as fh:
                reader = csv.reader(fh)
                rows = [row for row in reader if row]  # skip blank lines
        except OSError as exc:
            raise ValidationError("cannot read %s: %s"
                                  % (path, exc.strerror or exc)) from None
    if not rows:
        raise ValidationError("%s: file has no header row" % path)
    header = [h.strip() for h in rows[0]]
    ncol = len(header)
    data = np.empty((len(rows) - 1, ncol), dtype=float)
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != ncol:
            raise ValidationError(
                "%s: row %d has %d fields, expected %d" % (path, i, len(row), ncol)
            )
        for j, tok in enumerate(row):
            tok = tok.strip()
            if tok == "" or tok.lower() == "nan":
                data[i - 2, j] = np.nan
            else:
                try:
                    data[i - 2, j] = float(tok)
                except ValueError:
                    raise ValidationError(
                        "%s: row %d, column %r: cannot parse %r as a number"
                        % (path, i, header[j], tok)
                    ) from None
    if name is None:
        name = str(path).rsplit("/", 1)[-1]
        name = name.rsplit(".", 1)[0] or name
    return DataTable(name, header, data)


def write_csv(table, path):
    """Write a table back out (path or open text file); finite cells
    round-trip bit-exactly, missing cells empty."""
    fh = path if hasattr(path, "write") else open(path, "w", newline="")
    try:
        fh.write(",".join(table.columns) + "\n")
        for i in range(table.n_rows):
            cells = [
                "" if table.missing[i, j] else _format_cell(table.values[i, j])
                for j in range(table.n_cols)
            ]
            fh.write(",".join(cells) + "\n")
    finally:
        if fh is not path:
            fh.close()


# -- transforms --------------------------------------------------------------


def zscore(table, column):
    """Append "Z:<column>": (x - mean) / sd over non-missing cells, n-1 denominator."""
    v, m = table.column(column)
    obs = v[~m]
    if obs.size < 2:
        raise ValidationError("zscore(%r): need at least 2 non-missing values" % column)
    sd = obs.std(ddof=1)
    if not sd > 0:
        raise ValidationError("zscore(%r): column is degenerate (zero sample variance)" % column)
    out = (v - obs.mean()) / sd
    rec = ("zscore", (column,), {})
    return table.with_columns(["Z:%s" % column], out, rec)


def _format_level(g):
    return _format_cell(g) or "nan"


def dummy_code(table, column, reference):
    """Append one (0,1) indicator column per non-reference level of ``column``."""
    v, m = table.column(column)
    levels = np.unique(v[~m])
    reference = float(reference)
    if not np.any(levels == reference):
        raise ValidationError(
            "dummy_code(%r): reference level %s not observed" % (column, _format_level(reference))
        )
    names, cols = [], []
    for g in levels:
        if g == reference:
            continue
        names.append("D:%s" % _format_level(g))
        col = np.where(v == g, 1.0, 0.0)
        col[m] = np.nan
        cols.append(col)
    rec = ("dummy_code", (column,), {"reference": reference})
    if not names:  # constant column: nothing but the reference level
        return table.with_columns([], np.empty((table.n_rows, 0)), rec)
    return table.with_columns(names, np.column_stack(cols), rec)


def lag(table, column, k):
    """Append the k-step lag of a column; the first k entries are missing."""
    k = int(k)
    if k < 1:
        raise ValidationError("lag(%r): k must be a positive count" % column)
    if k >= table.n_rows:
        raise ValidationError(
            "lag(%r): k=%d leaves no data for %d rows" % (column, k, table.n_rows)
        )
    v, _ = table.column(column)
    out = np.full(table.n_rows, np.nan)
    out[k:] = v[: table.n_rows - k]
    rec = ("lag", (column,), {"k": k})
    return table.with_columns(["L%d:%s" % (k, column)], out, rec)


def interact(table, col_a, col_b):
    """Append the elementwise product of two columns; missing propagates."""
    a, _ = table.column(col_a)
    b, _ = table.column(col_b)
    rec = ("interact", (col_a, col_b), {})
    return table.with_columns(["%s*%s" % (col_a, col_b)], a * b, rec)


def recode_missing(table, column, codes):
    """Append "M:<column>" with the listed sentinel codes marked missing."""
    codes = [float(c) for c in np.atleast_1d(codes)]
    if not codes:
        raise ValidationError("recode_missing(%r): need at least one code" % column)
    v, m = table.column(column)
    out = v.copy()
    for code in codes:
        out[v == code] = np.nan
    rec = ("recode_missing", (column,), {"codes": codes})
    return table.with_columns(["M:%s" % column], out, rec)


def vectorize(table, response_columns, id_column):
    """Collapse J >= 2 response columns into long format.

    The output has n*J rows: a single response column "Y", one item
    indicator per source response using codes (0 or -1) -- indicator j
    equals -1 exactly on the rows that carry item j's response -- and
    the id plus every remaining column replicated across each item block.
    """
    response_columns = list(response_columns)
    if len(response_columns) < 2:
        raise ValidationError("vectorize: need at least 2 response columns")
    for c in response_columns + [id_column]:
        table.column_index(c)
    ids, idm = table.column(id_column)
    key = ids[~idm]
    if np.unique(key).size != key.size:
        raise ValidationError("vectorize: id column %r has duplicate values" % id_column)
    n = table.n_rows
    J = len(response_columns)
    keep = [c for c in table.columns if c not in response_columns]
    out_names = ["Y"] + ["I:%s" % c for c in response_columns] + keep
    out = np.full((n * J, len(out_names)), np.nan)
    resp = np.column_stack([table.column(c)[0] for c in response_columns])
    for i in range(n):
        for j in range(J):
            r = i * J + j
            out[r, 0] = resp[i, j]
            for jj in range(J):
                out[r, 1 + jj] = -1.0 if jj == j else 0.0
            for kk, c in enumerate(keep):
                out[r, 1 + J + kk] = table.column(c)[0][i]
    rec = ("vectorize", tuple(response_columns), {"id": id_column})
    return DataTable(table.name, out_names, out, lineage=table.lineage + (rec,))


# -- roles and censoring ------------------------------------------------------


@dataclass(frozen=True)
class RoleAssignment:
    """Which column plays which part in a regression.

    The constant term is implicit: design matrices get a leading 1 column,
    so ``covariates`` never includes it.
    """

    dependent: str
    covariates: tuple = ()
    group_level2: str | None = None
    weights: str | None = None
    censor_lb: str | None = None
    censor_ub: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))

    def validate(self, table):
        cov = set(self.covariates)
        if len(cov) != len(self.covariates):
            raise ValidationError("duplicate covariate assignment")
        if self.dependent in cov:
            raise ValidationError("dependent variable cannot also be a covariate")
        for role, col in [
            ("group_level2", self.group_level2),
            ("weights", self.weights),
            ("censor_lb", self.censor_lb),
            ("censor_ub", self.censor_ub),
        ]:
            if col is not None and col in cov:
                raise ValidationError("%s column %r cannot also be a covariate" % (role, col))
        if (self.censor_lb is None) != (self.censor_ub is None):
            raise ValidationError("censoring requires both LB and UB columns")
        for col in self.all_columns():
            table.column_index(col)
        return self

    def all_columns(self):
        cols = [self.dependent, *self.covariates]
        for c in (self.group_level2, self.weights, self.censor_lb, self.censor_ub):
            if c is not None:
                cols.append(c)
        return cols


@dataclass(frozen=True)
class CensorStatus:
    """Per-observation censoring: kind in {uncensored, left, right, interval}.

    ``lb``/``ub`` keep the raw file convention (sentinel = no bound);
    ``lower``/``upper`` give the effective interval endpoints as ±inf.
    """

    kind: str
    lb: float = CENSOR_SENTINEL
    ub: float = CENSOR_SENTINEL

    @property
    def lower(self):
        return -math.inf if self.lb == CENSOR_SENTINEL else self.lb

    @property
    def upper(self):
        return math.inf if self.ub == CENSOR_SENTINEL else self.ub


def parse_censoring(table, lb_col, ub_col, y_col=None):
    """Classify each row's censoring from its LB/UB cells.

    -9999 in a bound cell means "no bound".  Both bounds -9999 means the
    observation is exact.  Where ``y_col`` is given, recorded responses are
    checked for consistency against their finite bounds.
    """
    lb, lbm = table.column(lb_col)
    ub, ubm = table.column(ub_col)
    y = ym = None
    if y_col is not None:
        y, ym = table.column(y_col)
    out = []
    for i in range(table.n_rows):
        if lbm[i] or ubm[i] or not np.isfinite(lb[i]) or not np.isfinite(ub[i]):
            raise ValidationError(
                "row %d: censoring bounds must be numeric (use %d for 'no bound')"
                % (i + 1, int(CENSOR_SENTINEL))
            )
        has_lb = lb[i] != CENSOR_SENTINEL
        has_ub = ub[i] != CENSOR_SENTINEL
        if not has_lb and not has_ub:
            out.append(CensorStatus("uncensored"))
            continue
        if has_lb and has_ub:
            if lb[i] >= ub[i]:
                raise ValidationError(
                    "row %d: invalid interval, LB=%g >= UB=%g" % (i + 1, lb[i], ub[i])
                )
            st = CensorStatus("interval", lb[i], ub[i])
        elif has_lb:
            st = CensorStatus("right", lb=lb[i])
        else:
            st = CensorStatus("left", ub=ub[i])
        if y is not None and not ym[i]:
            if st.kind in ("right", "interval") and y[i] < st.lb:
                raise ValidationError(
                    "row %d: response %g below declared lower bound %g" % (i + 1, y[i], st.lb)
                )
            if st.kind in ("left", "interval") and y[i] > st.ub:
                raise ValidationError(
                    "row %d: response %g above declared upper bound %g" % (i + 1, y[i], st.ub)
                )
        out.append(st)
    return out
