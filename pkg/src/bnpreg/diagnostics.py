"""Posterior summaries and chain-convergence evidence.

Two tools carry the convergence story: batch-means Monte Carlo confidence
intervals (non-overlapping batches, floor(sqrt(S)) batches of floor(sqrt(S))
draws) and the cumulative-sum hairiness statistic, which counts the fraction
of interior local extrema on the centered cusum path -- 0.5 is the mark of a
well-mixing chain, values near 0 or 1 flag trending or antithetic behaviour.
"""

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import ValidationError

__all__ = [
    "HAIRINESS_BAND",
    "HAIRINESS_TARGET",
    "SummaryRow",
    "batch_means_mcci",
    "cusum_hairiness",
    "summarize",
    "summary_table_csv",
    "summary_table_text",
    "trace",
]

# A well-mixing chain's cusum path flips direction at about half its interior
# points; front-ends render this band around the statistic.
HAIRINESS_TARGET = 0.5
HAIRINESS_BAND = 0.05


@dataclass(frozen=True)
class SummaryRow:
    """Marginal posterior summary of one sampled parameter."""

    name: str
    mean: float
    median: float
    sd: float
    q025: float
    q25: float
    q75: float
    q975: float
    mcci_mean: float
    mcci_median: float
    mcci_sd: float

    def to_dict(self):
        return {
            "name": self.name, "mean": self.mean, "median": self.median,
            "sd": self.sd, "q025": self.q025, "q25": self.q25,
            "q75": self.q75, "q975": self.q975, "mcci_mean": self.mcci_mean,
            "mcci_median": self.mcci_median, "mcci_sd": self.mcci_sd,
        }


def _retained(store, burn_in, thin):
    iterations = store.column("iteration")
    keep = iterations > burn_in
    idx = np.flatnonzero(keep)[::thin]
    return idx


def batch_means_mcci(draws, estimand="mean", confidence=0.95, q=0.5):
    """Half-width of the batch-means Monte Carlo confidence interval.

    The chain is split into B = floor(sqrt(S)) non-overlapping batches of
    B draws each (trailing remainder dropped); the estimand is evaluated
    per batch and the half-width is t_{(1+confidence)/2, B-1} times the
    standard error of the batch values.  ``estimand`` is one of "mean",
    "sd", or "quantile" (level ``q``).
    """
    v = np.asarray(draws, dtype=float)
    s = v.size
    if s < 16:
        raise ValidationError(
            "batch-means interval needs at least 16 draws, got %d" % s)
    if not 0.0 < confidence < 1.0:
        raise ValidationError("confidence must lie in (0, 1)")
    b = int(math.isqrt(s))
    batches = v[: b * b].reshape(b, b)
    if estimand == "mean":
        vals = batches.mean(axis=1)
    elif estimand == "sd":
        vals = batches.std(axis=1, ddof=1)
    elif estimand == "quantile":
        if not 0.0 < q < 1.0:
            raise ValidationError("quantile level must lie in (0, 1)")
        vals = np.quantile(batches, q, axis=1)
    else:
        raise ValidationError("unknown estimand %r" % (estimand,))
    t_crit = float(stats.t.ppf(0.5 * (1.0 + confidence), b - 1))
    return t_crit * float(vals.std(ddof=1)) / math.sqrt(b)


def cusum_hairiness(draws):
    """Fraction of interior local extrema on the centered cusum path.

    The path is the running sum of mean-centered draws; an interior point
    counts when the path changes direction there (zero steps count as no
    change, which is deterministic and conservative).  Chains shorter than
    3 have no interior points and return 0.
    """
    v = np.asarray(draws, dtype=float)
    s = v.size
    if s < 3:
        return 0.0
    steps = np.sign(v - v.mean())
    # the path turns at interior point t when the step into t and the step
    # out of t have opposite signs; any zero step makes the product zero,
    # which counts as no change
    changes = np.count_nonzero(steps[1:-1] * steps[2:] < 0.0)
    return changes / (s - 2)


def summarize(store, burn_in=None, thin=1):
    """Marginal summaries of every sampled parameter over retained draws.

    Draws at iterations <= ``burn_in`` are discarded (defaulting to the
    store's own burn-in metadata) and every ``thin``-th remaining row is
    kept.  Interval half-widths are reported as NaN when fewer than 16
    draws survive.
    """
    if burn_in is None:
        burn_in = store.burn_in
    if thin < 1:
        raise ValidationError("thin must be >= 1")
    idx = _retained(store, burn_in, thin)
    rows = []
    for name in store.columns:
        if name == "iteration":
            continue
        v = store.column(name)[idx]
        if v.size == 0:
            raise ValidationError("no draws retained after burn-in/thinning")
        qs = np.quantile(v, [0.025, 0.25, 0.5, 0.75, 0.975])
        try:
            hw_mean = batch_means_mcci(v, "mean")
            hw_median = batch_means_mcci(v, "quantile", q=0.5)
            hw_sd = batch_means_mcci(v, "sd")
        except ValidationError:
            hw_mean = hw_median = hw_sd = math.nan
        rows.append(SummaryRow(
            name=name, mean=float(v.mean()), median=float(qs[2]),
            sd=float(v.std(ddof=1)) if v.size > 1 else 0.0,
            q025=float(qs[0]), q25=float(qs[1]), q75=float(qs[3]),
            q975=float(qs[4]), mcci_mean=hw_mean, mcci_median=hw_median,
            mcci_sd=hw_sd))
    return rows


def trace(store, parameter, window=None):
    """Ordered (iteration, value) series for plotting one parameter.

    ``window`` caps the number of points for UI payloads: the subsample is
    evenly spaced and always keeps the first and last retained points.  A
    window of 1 returns just the most recent point (documented policy).
    """
    iterations = store.column("iteration")
    values = store.column(parameter)
    n = values.size
    if n == 0:
        return np.empty(0), np.empty(0)
    if window is None or window >= n:
        return iterations, values
    if window < 1:
        raise ValidationError("trace window must be >= 1")
    if window == 1:
        return iterations[-1:], values[-1:]
    idx = np.unique(np.linspace(0, n - 1, window).round().astype(int))
    return iterations[idx], values[idx]


_TABLE_COLUMNS = ["parameter", "mean", "median", "sd", "2.5%", "25%", "75%",
                  "97.5%", "mcci_mean", "mcci_median", "mcci_sd"]


def _row_cells(row):
    return [row.name] + ["%.6g" % v for v in
                         (row.mean, row.median, row.sd, row.q025, row.q25,
                          row.q75, row.q975, row.mcci_mean, row.mcci_median,
                          row.mcci_sd)]


def summary_table_text(rows):
    """Aligned plain-text rendering of a summary table."""
    cells = [_TABLE_COLUMNS] + [_row_cells(r) for r in rows]
    widths = [max(len(line[i]) for line in cells)
              for i in range(len(_TABLE_COLUMNS))]
    lines = []
    for line in cells:
        lines.append("  ".join(c.rjust(w) if i else c.ljust(w)
                               for i, (c, w) in enumerate(zip(line, widths))))
    return "\n".join(lines)


def summary_table_csv(rows):
    """Comma-delimited rendering with the same columns as the text table."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_TABLE_COLUMNS)
    for r in rows:
        writer.writerow(_row_cells(r))
    return buf.getvalue()
