"""Descriptive statistics and the numeric inputs behind exploratory plots.

Bin widths and bandwidths follow the usual automatic rules (Freedman-
Diaconis bins, Scott bivariate bins, Silverman's normal-reference KDE
bandwidth, and a median-absolute-deviation bandwidth for the kernel
regression smoother).  Everything here is a pure function of its inputs;
rendering is somebody else's job -- these produce the numbers.

Quantiles interpolate linearly between closest order statistics
(position (n-1)*u on the sorted sample), the common spreadsheet rule.
"""

import numpy as np

from .errors import ValidationError

__all__ = [
    "UnivariateSummary",
    "quantile",
    "univariate_summary",
    "fd_bin_width",
    "scott_bivariate_binwidths",
    "silverman_bandwidth",
    "kde",
    "kernel_regression",
    "histogram",
]

SUMMARY_QUANTILES = (0.025, 0.25, 0.5, 0.75, 0.975)


def _observed(values):
    v = np.asarray(values, dtype=float).ravel()
    return v[~np.isnan(v)]


def quantile(values, u):
    """Order-statistic quantile with linear interpolation between closest ranks."""
    v = np.sort(_observed(values))
    if v.size == 0:
        raise ValidationError("quantile of an empty sample")
    u = np.asarray(u, dtype=float)
    if np.any(u < 0) or np.any(u > 1):
        raise ValidationError("quantile levels must lie in [0,1]")
    pos = (v.size - 1) * u
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, v.size - 1)
    frac = pos - lo
    return v[lo] * (1 - frac) + v[hi] * frac


class UnivariateSummary:
    """Container for one column's descriptives (computed over non-missing cells)."""

    def __init__(self, n_nonmissing, mean, sd, minimum, maximum, quantiles):
        self.n_nonmissing = n_nonmissing
        self.mean = mean
        self.sd = sd
        self.min = minimum
        self.max = maximum
        self.quantiles = dict(quantiles)

    def as_dict(self):
        d = {
            "n": self.n_nonmissing,
            "mean": self.mean,
            "sd": self.sd,
            "min": self.min,
            "max": self.max,
        }
        for u, q in self.quantiles.items():
            d["q%g" % u] = q
        return d


def univariate_summary(values):
    """Mean, sd (n-1 denominator), extremes, and standard quantiles.

    With a single observation the standard deviation is undefined and is
    reported as NaN; n_nonmissing tells the caller why.
    """
    obs = _observed(values)
    if obs.size == 0:
        raise ValidationError("column has no non-missing values")
    sd = float(obs.std(ddof=1)) if obs.size > 1 else float("nan")
    qs = {u: float(quantile(obs, u)) for u in SUMMARY_QUANTILES}
    return UnivariateSummary(int(obs.size), float(obs.mean()), sd, float(obs.min()),
                             float(obs.max()), qs)


def _fallback_width(obs):
    # degenerate-spread fallback: never emit a zero width
    rng = float(obs.max() - obs.min()) if obs.size else 0.0
    eps = float(np.spacing(max(1.0, float(np.max(np.abs(obs))) if obs.size else 1.0)))
    return max(eps, rng / np.sqrt(max(obs.size, 1)))


def fd_bin_width(values):
    """Freedman-Diaconis histogram bin width h = 2*IQR*n^(-1/3)."""
    obs = _observed(values)
    if obs.size == 0:
        raise ValidationError("bin width of an empty sample")
    iqr = float(quantile(obs, 0.75) - quantile(obs, 0.25))
    h = 2.0 * iqr * obs.size ** (-1.0 / 3.0)
    if h <= 0:
        return _fallback_width(obs)
    return h


def scott_bivariate_binwidths(x, y):
    """Scott's rule per axis for bivariate histograms: h_k = 3.5*sd_k*n^(-1/4)."""
    out = []
    for v in (x, y):
        obs = _observed(v)
        if obs.size == 0:
            raise ValidationError("bin width of an empty sample")
        sd = obs.std(ddof=1) if obs.size > 1 else 0.0
        h = 3.5 * float(sd) * obs.size ** (-0.25)
        out.append(h if h > 0 else _fallback_width(obs))
    return tuple(out)


def _silverman(sd, n):
    return 1.06 * sd * n ** (-0.2)


def silverman_bandwidth(values):
    """Normal-reference KDE bandwidth h = 1.06*sd*n^(-1/5)."""
    obs = _observed(values)
    if obs.size == 0:
        raise ValidationError("bandwidth of an empty sample")
    sd = float(obs.std(ddof=1)) if obs.size > 1 else 0.0
    h = _silverman(sd, obs.size)
    if h <= 0:
        return _fallback_width(obs)
    return h


def kde(values, grid, bandwidth=None):
    """Normal-kernel density estimate evaluated on ``grid``."""
    obs = _observed(values)
    if obs.size == 0:
        raise ValidationError("kde of an empty sample")
    h = silverman_bandwidth(obs) if bandwidth is None else float(bandwidth)
    if h <= 0:
        raise ValidationError("kde bandwidth must be positive")
    grid = np.asarray(grid, dtype=float)
    z = (grid[:, None] - obs[None, :]) / h
    dens = np.exp(-0.5 * z * z).sum(axis=1) / (obs.size * h * np.sqrt(2 * np.pi))
    return dens


def kernel_regression(x, y, grid):
    """Nadaraya-Watson smoother with normal kernels.

    The bandwidth is the geometric mean of per-axis spreads,
    h_v = median(|v - median(v)|) / c with c = 0.6745*(4/3/n)^0.2.
    A zero spread on one axis falls back to the degenerate-width rule
    (so a constant response still smooths to itself); a constant x axis
    is a degenerate-bandwidth error because there is nothing to smooth
    over.  Where every kernel weight underflows, the fitted value is the
    response at the nearest design point.
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    ok = ~(np.isnan(x) | np.isnan(y))
    x, y = x[ok], y[ok]
    if x.size == 0:
        raise ValidationError("kernel regression on an empty sample")
    n = x.size
    c = 0.6745 * (4.0 / 3.0 / n) ** 0.2

    def spread(v):
        return float(np.median(np.abs(v - np.median(v)))) / c

    hx, hy = spread(x), spread(y)
    if hx <= 0:
        if float(x.max() - x.min()) <= 0:
            raise ValidationError("kernel regression: x axis is degenerate")
        hx = _fallback_width(x)
    if hy <= 0:
        hy = _fallback_width(y)
    h = np.sqrt(hx * hy)
    if not h > 0:
        raise ValidationError("kernel regression: degenerate bandwidth")
    grid = np.asarray(grid, dtype=float)
    z = (grid[:, None] - x[None, :]) / h
    w = np.exp(-0.5 * z * z)
    denom = w.sum(axis=1)
    out = np.empty(grid.size)
    good = denom > 0
    out[good] = (w[good] * y[None, :]).sum(axis=1) / denom[good]
    if np.any(~good):
        nearest = np.abs(grid[~good][:, None] - x[None, :]).argmin(axis=1)
        out[~good] = y[nearest]
    return out


def histogram(values, width=None):
    """Histogram with Freedman-Diaconis default width.

    Returns (bin_left, bin_right, count) arrays; the last bin is closed
    on the right so the maximum lands inside it.
    """
    obs = _observed(values)
    if obs.size == 0:
        raise ValidationError("histogram of an empty sample")
    h = fd_bin_width(obs) if width is None else float(width)
    if h <= 0:
        raise ValidationError("histogram width must be positive")
    lo, hi = float(obs.min()), float(obs.max())
    nbins = max(1, int(np.ceil((hi - lo) / h))) if hi > lo else 1
    edges = lo + h * np.arange(nbins + 1)
    if edges[-1] < hi:  # guard against roundoff on the top edge
        edges[-1] = np.nextafter(hi, np.inf)
    counts, _ = np.histogram(obs, bins=edges)
    return edges[:-1], edges[1:], counts
