"""Posterior predictive functionals, covariate profiles, and fit statistics.

Density, distribution, mean, and variance functionals are Rao-Blackwellized:
each retained draw contributes its closed-form conditional (a finite normal
mixture for every family here), and the estimates average those exact forms.
Quantiles instead come from order statistics of composition draws -- one
simulated response per retained draw.  Survival, hazard, and cumulative
hazard are assembled from the averaged density and distribution functions.

Mixture draws are evaluated over their materialized atoms.  When every atom
shares one kernel variance the unmaterialized tail is integrated against the
baseline analytically (one extra normal component, so the density integrates
to one exactly); when atoms carry their own variances no closed form exists
and the materialized mixture is renormalized instead -- a documented
approximation of order the leftover stick mass.
"""

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import ValidationError
from .models import (
    DDPParams,
    HLM2Params,
    InfiniteProbitsParams,
    LinearNIGParams,
)

__all__ = [
    "CURVE_FUNCTIONALS",
    "FUNCTIONALS",
    "FitReport",
    "MAX_FOCAL_POINTS",
    "PdTable",
    "PosteriorSample",
    "PredictiveQuery",
    "Profile",
    "cate",
    "default_y_grid",
    "fit_report",
    "parse_grid",
    "pd_functional",
    "pp_functional",
    "profile_covariates",
]

SCALAR_FUNCTIONALS = ("mean", "variance", "quantile", "prob_y_ge_0")
CURVE_FUNCTIONALS = ("pdf", "cdf", "survival", "hazard", "cumhaz")
FUNCTIONALS = SCALAR_FUNCTIONALS + CURVE_FUNCTIONALS
PROFILE_METHODS = ("grand_mean", "zero_center", "partial_dependence",
                   "clustered_pd")
MAX_FOCAL_POINTS = 300
HAZARD_CDF_CEILING = 1.0 - 1e-12

_PARAM_CLASSES = {
    "LinearNIG": LinearNIGParams,
    "HLM2": HLM2Params,
    "DDPMixture": DDPParams,
    "InfiniteProbits": InfiniteProbitsParams,
}


def parse_grid(grid):
    """Accept an explicit value list or ``a:step:b`` range text (inclusive)."""
    if isinstance(grid, str):
        text = grid.replace("−", "-")  # tolerate typeset minus signs
        parts = text.split(":")
        if len(parts) != 3:
            raise ValidationError(
                "grid syntax is a:step:b, got %r" % (grid,))
        try:
            a, step, b = (float(p) for p in parts)
        except ValueError:
            raise ValidationError("non-numeric grid bounds in %r" % (grid,))
        step = abs(step)  # the sign of the increment never changes direction
        if step == 0 or b < a:
            raise ValidationError("grid needs step != 0 and b >= a")
        count = int(math.floor((b - a) / step + 1e-9)) + 1
        return a + step * np.arange(count)
    values = np.asarray(grid, dtype=float).ravel()
    if values.size == 0:
        raise ValidationError("empty covariate grid")
    if not np.all(np.isfinite(values)):
        raise ValidationError("covariate grid must be finite")
    return values


# ---------------------------------------------------------------------------
# retained-draw containers


class PosteriorSample:
    """Retained parameter draws decoded into family parameter records.

    For mixture families, ``allocations`` optionally carries each draw's
    per-unit component assignments (one int array per record); fit
    statistics use them to condition every observation's predictive moments
    on its own assignment sequence.
    """

    def __init__(self, spec, records, allocations=None):
        self.spec = spec
        self.records = records
        self.allocations = allocations
        if not records:
            raise ValidationError("no retained draws to predict from")
        if allocations is not None and len(allocations) != len(records):
            raise ValidationError(
                "assignment log does not line up with the parameter draws")

    @classmethod
    def from_store(cls, spec, store, burn_in=None, include_burn_in=False):
        """Decode the linear families straight from the draws matrix.

        Mixture families carry their atom state outside the draws matrix;
        build those with :meth:`from_states`.
        """
        if spec.family not in ("LinearNIG", "HLM2"):
            raise ValidationError(
                "family %s needs stored mixture states for prediction"
                % spec.family)
        if burn_in is None:
            burn_in = store.burn_in
        iters = store.column("iteration")
        keep = np.ones(iters.size, bool) if include_burn_in else \
            iters > burn_in
        beta_cols = [c for c in store.columns if c.startswith("beta.")]
        betas = np.column_stack([store.column(c) for c in beta_cols])[keep]
        if "sigma2" in store.columns:
            sig2 = store.column("sigma2")[keep]
        else:                                   # binary link: unit variance
            sig2 = np.ones(keep.sum() if keep.dtype == bool else len(keep))
        records = []
        if spec.family == "LinearNIG":
            for b, s2 in zip(betas, sig2):
                records.append(LinearNIGParams(b, float(s2)))
        else:
            t_cols = [c for c in store.columns if c.startswith("T.")]
            q = max(int(c.split(".")[1]) for c in t_cols)
            t_vals = np.column_stack([store.column(c) for c in t_cols])[keep]
            for b, s2, tv in zip(betas, sig2, t_vals):
                t = np.zeros((q, q))
                idx = 0
                for i in range(q):
                    for j in range(i + 1):
                        t[i, j] = t[j, i] = tv[idx]
                        idx += 1
                records.append(HLM2Params(b, np.zeros((1, q)), float(s2), t))
        return cls(spec, records)

    @classmethod
    def from_states(cls, spec, states, burn_in=0, include_burn_in=False):
        """Decode per-iteration parameter states (mixture families included).

        ``states`` is a sequence of ``{"iteration": i, "params": {...}}``
        entries as written by the session state log; entries may also carry
        a ``"z"`` list of per-unit component assignments.
        """
        param_cls = _PARAM_CLASSES[spec.family]
        records = []
        allocations = []
        for entry in states:
            if not include_burn_in and entry["iteration"] <= burn_in:
                continue
            records.append(param_cls.from_jsonable(entry["params"]))
            z = entry.get("z")
            allocations.append(
                None if z is None else np.asarray(z, dtype=int))
        if all(z is None for z in allocations):
            allocations = None
        return cls(spec, records, allocations)

    def mean_kernel_sd(self):
        """Average kernel scale across draws, for default y-grid sizing."""
        total = 0.0
        for p in self.records:
            if isinstance(p, (LinearNIGParams, HLM2Params)):
                total += math.sqrt(p.sigma2)
            elif isinstance(p, DDPParams):
                if p.sigma2_atoms is not None:
                    total += math.sqrt(float(np.mean(p.sigma2_atoms)))
                else:
                    total += math.sqrt(p.sigma2)
            else:
                spread = p.sigma_mu ** 2
                if p.sigma2_atoms is not None:
                    v = p.sigma2_atoms[~np.isnan(p.sigma2_atoms)]
                    base = float(np.mean(v)) if v.size else spread
                else:
                    base = p.sigma2
                total += math.sqrt(base + spread)
        return total / len(self.records)


def default_y_grid(posterior, data, points=512):
    """512 points spanning the observed response range +/- 4 mean kernel sd."""
    y = data.y[np.isfinite(data.y)]
    if y.size == 0:
        raise ValidationError("no observed responses to size a y-grid from")
    s = posterior.mean_kernel_sd()
    return np.linspace(float(y.min()) - 4.0 * s, float(y.max()) + 4.0 * s,
                       points)


# ---------------------------------------------------------------------------
# per-draw conditional mixtures


def _components(spec, params, x_mat, obs_weight):
    """Normal-mixture components of Y | x per design row.

    Returns (weights, means, variances), each (rows, n_components), with
    weights summing to one along each row -- the analytic tail component is
    appended for shared-variance families, and per-atom-variance mixtures
    are renormalized over their materialized atoms.
    """
    fam = spec.family
    r = x_mat.shape[0]
    if fam == "LinearNIG":
        m = (x_mat @ params.beta)[:, None]
        v = np.full((r, 1), params.sigma2 / obs_weight)
        return np.ones((r, 1)), m, v
    if fam == "HLM2":
        # a future observation comes from a fresh group: coefficients
        # marginalized over the between-group covariance
        m = (x_mat @ params.beta)[:, None]
        quad = np.einsum("ri,ij,rj->r", x_mat, params.t_cov, x_mat)
        v = (params.sigma2 / obs_weight + quad)[:, None]
        return np.ones((r, 1)), m, v
    if fam == "DDPMixture":
        ws = params.weights()
        if params.global_slopes is not None:
            base = (x_mat[:, 1:] @ params.global_slopes
                    if x_mat.shape[1] > 1 else np.zeros(r))
            m = params.atoms[:, 0][None, :] + base[:, None]
            t_mean = params.mu[0] + base
            t_quad = np.full(r, params.t_cov[0, 0])
        else:
            m = x_mat @ params.atoms.T
            t_mean = x_mat @ params.mu
            t_quad = np.einsum("ri,ij,rj->r", x_mat, params.t_cov, x_mat)
        if params.sigma2_atoms is None:
            kern = params.sigma2 / obs_weight
            w = np.tile(np.append(ws.weights, ws.truncation_mass), (r, 1))
            m = np.column_stack([m, t_mean])
            v = np.column_stack([np.full((r, ws.weights.size), kern),
                                 kern + t_quad])
            return w, m, v
        w_atoms = ws.weights / max(float(ws.weights.sum()), 1e-300)
        w = np.tile(w_atoms, (r, 1))
        v = np.tile(params.sigma2_atoms / obs_weight, (r, 1))
        return w, np.asarray(m, dtype=float), v
    # InfiniteProbits
    centers = x_mat @ params.beta_omega
    if params.sigma_omega is not None:
        s = np.full(r, params.sigma_omega)
    else:
        s = np.sqrt(np.exp(x_mat @ params.lam_omega))
    js = params.window().astype(float)
    hi = (js[None, :] - centers[:, None]) / s[:, None]
    lo = (js[None, :] - 1.0 - centers[:, None]) / s[:, None]
    w = special.ndtr(hi) - special.ndtr(lo)
    if spec.heteroscedastic:
        ok = ~np.isnan(params.sigma2_atoms)
        w = w[:, ok]
        total = np.maximum(w.sum(axis=1, keepdims=True), 1e-300)
        m = np.tile(params.mu_atoms[ok], (r, 1))
        v = np.tile(params.sigma2_atoms[ok] / obs_weight, (r, 1))
        return w / total, m, v
    xb = x_mat @ params.beta
    kern = params.sigma2 / obs_weight
    resid = np.clip(1.0 - w.sum(axis=1), 0.0, 1.0)
    w = np.column_stack([w, resid])
    m = np.column_stack([params.mu_atoms[None, :] + xb[:, None], xb])
    v = np.column_stack([np.full((r, js.size), kern),
                         np.full(r, kern + params.sigma_mu ** 2)])
    return w, m, v


def _allocated_moments(spec, params, x_mat, z_rows, obs_weight):
    """Kernel mean/variance of each row's assigned mixture component.

    ``z_rows`` holds one component index per design row (already mapped
    down from group-level assignments where applicable).  The moments
    mirror the kernels used by :func:`_components`, but instead of mixing
    over the weights each row reads off its own assigned component.
    """
    r = x_mat.shape[0]
    if spec.family == "DDPMixture":
        if params.global_slopes is not None:
            base = (x_mat[:, 1:] @ params.global_slopes
                    if x_mat.shape[1] > 1 else np.zeros(r))
            e = params.atoms[z_rows, 0] + base
        else:
            e = np.einsum("ij,ij->i", x_mat, params.atoms[z_rows])
        if params.sigma2_atoms is not None:
            v = params.sigma2_atoms[z_rows] / obs_weight
        else:
            v = np.full(r, params.sigma2 / obs_weight)
        return e, v
    # InfiniteProbits: assignments index the materialized atom window
    pos = np.asarray(z_rows, dtype=int) - params.j_lo
    pos = np.clip(pos, 0, params.mu_atoms.size - 1)
    if spec.heteroscedastic:
        e = params.mu_atoms[pos]
        v = params.sigma2_atoms[pos] / obs_weight
        return e, v
    e = params.mu_atoms[pos] + x_mat @ params.beta
    v = np.full(r, params.sigma2 / obs_weight)
    return e, v


def _allocation_conditioned_moments(posterior, data, obs_weight):
    """Row-wise predictive mean/variance conditioned on the assignments.

    Each draw contributes its assigned-component kernel moments for every
    row; averaging over draws gives the predictive mean, and the law of
    total variance over draws gives the predictive variance.  Group-level
    assignments are broadcast down to their member rows.
    """
    spec = posterior.spec
    grouped = spec.family == "DDPMixture" and data.groups is not None
    e_sum = np.zeros(data.n)
    m2_sum = np.zeros(data.n)
    for params, z in zip(posterior.records, posterior.allocations):
        if z is None:
            raise ValidationError(
                "a retained draw is missing its assignment record")
        z_rows = z[data.groups] if grouped else z
        e, v = _allocated_moments(spec, params, data.x, z_rows, obs_weight)
        e_sum += e
        m2_sum += e * e + v
    n_draws = len(posterior.records)
    e_n = e_sum / n_draws
    v_n = np.maximum(m2_sum / n_draws - e_n * e_n, 1e-300)
    return e_n, v_n


def _mix_pdf(w, m, v, grid):
    d = grid[None, None, :] - m[:, :, None]
    vv = v[:, :, None]
    ph = np.exp(-0.5 * d * d / vv) / np.sqrt(2.0 * np.pi * vv)
    return np.einsum("rc,rcg->rg", w, ph)


def _mix_cdf(w, m, v, grid):
    z = (grid[None, None, :] - m[:, :, None]) / np.sqrt(v)[:, :, None]
    return np.einsum("rc,rcg->rg", w, special.ndtr(z))


def _simulate_row_draws(w, m, v, rng):
    """One composition draw of Y per design row."""
    cum = np.cumsum(w, axis=1)
    u = rng.random((w.shape[0], 1))
    idx = (u > cum).sum(axis=1)
    idx = np.minimum(idx, w.shape[1] - 1)
    rows = np.arange(w.shape[0])
    return m[rows, idx] + np.sqrt(v[rows, idx]) * rng.standard_normal(
        w.shape[0])


class _RBAccumulator:
    """One pass over retained draws for a fixed design-row block."""

    def __init__(self, posterior, x_mat, obs_weight,
                 want_curves=False, y_grid=None, want_sims=False, rng=None):
        spec = posterior.spec
        n_rows = x_mat.shape[0]
        n_draws = len(posterior.records)
        self.binary = spec.link == "binary_probit"
        e_rows = np.zeros(n_rows)
        m2_rows = np.zeros(n_rows)
        p0_rows = np.zeros(n_rows)
        pdf_rows = np.zeros((n_rows, y_grid.size)) if want_curves else None
        cdf_rows = np.zeros((n_rows, y_grid.size)) if want_curves else None
        sims = np.empty((n_draws, n_rows)) if want_sims else None
        for s_idx, params in enumerate(posterior.records):
            w, m, v = _components(spec, params, x_mat, obs_weight)
            e_rows += (w * m).sum(axis=1)
            m2_rows += (w * (v + m * m)).sum(axis=1)
            p0_rows += (w * special.ndtr(m / np.sqrt(v))).sum(axis=1)
            if want_curves:
                pdf_rows += _mix_pdf(w, m, v, y_grid)
                cdf_rows += _mix_cdf(w, m, v, y_grid)
            if want_sims:
                sims[s_idx] = _simulate_row_draws(w, m, v, rng)
        self.e_rows = e_rows / n_draws
        m2 = m2_rows / n_draws
        self.p0_rows = p0_rows / n_draws      # P(Y >= 0) per row
        if self.binary:
            # observable scale: Y is the 0/1 indicator of a positive score
            self.e_rows = self.p0_rows.copy()
            self.v_rows = self.p0_rows * (1.0 - self.p0_rows)
        else:
            self.v_rows = m2 - self.e_rows ** 2
        self.pdf_rows = pdf_rows / n_draws if want_curves else None
        self.cdf_rows = cdf_rows / n_draws if want_curves else None
        self.sims = sims

    def row_quantiles(self, u):
        if self.sims is None:
            raise ValidationError("quantiles need composition draws")
        return np.quantile(self.sims, u, axis=0)


def _hazard_from(pdf, cdf):
    out = np.empty_like(pdf)
    high = cdf >= HAZARD_CDF_CEILING
    out[high] = math.inf
    out[~high] = pdf[~high] / (1.0 - cdf[~high])
    return out


def _cumhaz_from(cdf):
    out = np.empty_like(cdf)
    high = cdf >= HAZARD_CDF_CEILING
    out[high] = math.inf
    out[~high] = -np.log1p(-cdf[~high])
    return out


# ---------------------------------------------------------------------------
# single-point functionals


def pp_functional(posterior, x, functional, y_grid=None, u=0.5,
                  obs_weight=1.0, rng=None):
    """Posterior predictive functional of Y at one full covariate row.

    ``x`` includes the leading intercept.  Scalar functionals (mean,
    variance, quantile, prob_y_ge_0) return a float; curve functionals
    return an array over ``y_grid``.
    """
    if functional not in FUNCTIONALS:
        raise ValidationError("unknown functional %r" % (functional,))
    x_mat = np.asarray(x, dtype=float).reshape(1, -1)
    if not 0.0 <= u <= 1.0:
        raise ValidationError("quantile level must lie in [0, 1]")
    if not obs_weight > 0:
        raise ValidationError("observation weight must be positive")
    want_curves = functional in CURVE_FUNCTIONALS
    want_sims = functional == "quantile"
    if want_curves:
        if y_grid is None:
            raise ValidationError("curve functionals need a y-grid")
        y_grid = np.asarray(y_grid, dtype=float)
        if y_grid.size < 2 or np.any(np.diff(y_grid) <= 0):
            raise ValidationError("y-grid must be strictly increasing")
    if rng is None:
        rng = np.random.default_rng(0)
    acc = _RBAccumulator(posterior, x_mat, obs_weight,
                         want_curves=want_curves,
                         y_grid=y_grid if want_curves else np.empty(0),
                         want_sims=want_sims, rng=rng)
    if functional == "mean":
        return float(acc.e_rows[0])
    if functional == "variance":
        return float(acc.v_rows[0])
    if functional == "prob_y_ge_0":
        return float(acc.p0_rows[0])
    if functional == "quantile":
        return float(acc.row_quantiles(u)[0])
    pdf, cdf = acc.pdf_rows[0], acc.cdf_rows[0]
    if functional == "pdf":
        return pdf
    if functional == "cdf":
        return cdf
    if functional == "survival":
        return 1.0 - cdf
    if functional == "hazard":
        return _hazard_from(pdf, cdf)
    return _cumhaz_from(cdf)


# ---------------------------------------------------------------------------
# covariate profiles


@dataclass(frozen=True)
class Profile:
    """Non-focal covariate rows and their averaging weights."""

    nonfocal_names: list
    rows: np.ndarray           # (n_rows, n_nonfocal)
    weights: np.ndarray        # (n_rows,), sums to 1


def _kmeans(points, k, rng, restarts=10, max_iter=100):
    """Plain Lloyd iterations, best of ``restarts`` random starts."""
    n = points.shape[0]
    k = min(k, n)
    best_sse, best_centers = math.inf, None
    for _ in range(restarts):
        centers = points[rng.choice(n, size=k, replace=False)].copy()
        for _ in range(max_iter):
            d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            labels = d2.argmin(axis=1)
            new_centers = centers.copy()
            for j in range(k):
                members = points[labels == j]
                if members.size:
                    new_centers[j] = members.mean(axis=0)
                else:
                    new_centers[j] = points[rng.integers(n)]
            if np.allclose(new_centers, centers):
                centers = new_centers
                break
            centers = new_centers
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        sse = float(d2.min(axis=1).sum())
        if sse < best_sse:
            best_sse, best_centers = sse, centers
    return best_centers


def profile_covariates(data, focal_names, method, k=None, rng=None):
    """Rows of non-focal covariate values with their averaging weights."""
    if method not in PROFILE_METHODS:
        raise ValidationError("unknown profile method %r" % (method,))
    covariate_names = list(data.x_names[1:])
    for name in focal_names:
        if name not in covariate_names:
            raise ValidationError("unknown focal covariate %r" % (name,))
    nonfocal = [c for c in covariate_names if c not in set(focal_names)]
    if not nonfocal:
        return Profile(nonfocal_names=[], rows=np.zeros((1, 0)),
                       weights=np.ones(1))
    cols = [data.x_names.index(c) for c in nonfocal]
    values = data.x[:, cols]
    if method == "grand_mean":
        rows = values.mean(axis=0, keepdims=True)
    elif method == "zero_center":
        rows = np.zeros((1, len(nonfocal)))
    elif method == "partial_dependence":
        rows = values.copy()
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        if k is None:
            k = max(1, round(math.sqrt(data.n / 2.0)))
        rows = _kmeans(values, k, rng)
    weights = np.full(rows.shape[0], 1.0 / rows.shape[0])
    return Profile(nonfocal_names=nonfocal, rows=rows, weights=weights)


# ---------------------------------------------------------------------------
# profile-averaged prediction tables


@dataclass
class PredictiveQuery:
    """What to predict: focal grid, functionals, profile, and y-grid."""

    focal: dict                    # name -> grid (list or "a:step:b" text)
    functionals: list
    profile_method: str = "grand_mean"
    y_grid: np.ndarray = None
    u: float = 0.5
    obs_weight: float = 1.0
    k_clusters: int = None

    def __post_init__(self):
        if not self.focal:
            raise ValidationError("query needs at least one focal covariate")
        for f in self.functionals:
            if f not in FUNCTIONALS:
                raise ValidationError("unknown functional %r" % (f,))
        if not self.functionals:
            raise ValidationError("query needs at least one functional")
        if self.profile_method not in PROFILE_METHODS:
            raise ValidationError(
                "unknown profile method %r" % (self.profile_method,))
        if not 0.0 <= self.u <= 1.0:
            raise ValidationError("quantile level must lie in [0, 1]")
        if not self.obs_weight > 0:
            raise ValidationError("observation weight must be positive")
        if self.y_grid is not None:
            g = np.asarray(self.y_grid, dtype=float)
            if g.size < 2 or np.any(np.diff(g) <= 0):
                raise ValidationError("y-grid must be strictly increasing")
            self.y_grid = g

    def grid_points(self):
        """Cartesian product of the per-covariate grids, capped at 300."""
        names = list(self.focal.keys())
        axes = [parse_grid(self.focal[n]) for n in names]
        total = 1
        for a in axes:
            total *= np.unique(a).size
        if total > MAX_FOCAL_POINTS:
            raise ValidationError(
                "focal grid has %d points; the cap is %d"
                % (total, MAX_FOCAL_POINTS))
        mesh = np.meshgrid(*axes, indexing="ij")
        grid = np.column_stack([m.ravel() for m in mesh])
        return names, grid


@dataclass
class PdTable:
    """Profile-averaged predictions over the focal grid."""

    focal_names: list
    grid: np.ndarray                     # (n_points, n_focal)
    scalars: dict = field(default_factory=dict)   # name -> (n_points,)
    y_grid: np.ndarray = None
    curves: dict = field(default_factory=dict)    # name -> (n_points, n_y)

    def scalar_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        names = sorted(self.scalars)
        writer.writerow(list(self.focal_names) + names)
        for i in range(self.grid.shape[0]):
            writer.writerow(["%.10g" % v for v in self.grid[i]]
                            + ["%.10g" % self.scalars[n][i] for n in names])
        return buf.getvalue()

    def curve_csv(self, functional):
        if functional not in self.curves:
            raise ValidationError("no %r curve in this table" % (functional,))
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        labels = [",".join("%s=%.10g" % (n, v) for n, v in
                           zip(self.focal_names, self.grid[i]))
                  for i in range(self.grid.shape[0])]
        writer.writerow(["y"] + labels)
        m = self.curves[functional]
        for g_idx in range(self.y_grid.size):
            writer.writerow(["%.10g" % self.y_grid[g_idx]]
                            + ["%.10g" % m[i, g_idx]
                               for i in range(self.grid.shape[0])])
        return buf.getvalue()


def _profile_design(data, focal_names, grid_point, profile):
    """Full design rows (intercept included) for one focal grid point."""
    p_plus_1 = len(data.x_names)
    n_rows = profile.rows.shape[0]
    x = np.zeros((n_rows, p_plus_1))
    x[:, 0] = 1.0
    for name, value in zip(focal_names, grid_point):
        x[:, data.x_names.index(name)] = value
    for j, name in enumerate(profile.nonfocal_names):
        x[:, data.x_names.index(name)] = profile.rows[:, j]
    return x


def pd_functional(posterior, data, query, rng=None):
    """Profile-averaged posterior predictive functionals over a focal grid.

    Linear functionals (density, distribution, mean, variance, the
    positive-response probability) average across profile rows; quantiles
    average the per-row quantile inverses; hazard and cumulative hazard are
    assembled from the already-averaged density and distribution curves.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    focal_names, grid = query.grid_points()
    profile = profile_covariates(data, focal_names, query.profile_method,
                                 k=query.k_clusters, rng=rng)
    want_curves = any(f in CURVE_FUNCTIONALS for f in query.functionals)
    want_sims = "quantile" in query.functionals
    y_grid = query.y_grid
    if want_curves and y_grid is None:
        y_grid = default_y_grid(posterior, data)
    table = PdTable(focal_names=focal_names, grid=grid, y_grid=y_grid)
    n_points = grid.shape[0]
    for f in query.functionals:
        if f in SCALAR_FUNCTIONALS:
            table.scalars[f] = np.empty(n_points)
        else:
            table.curves[f] = np.empty((n_points, y_grid.size))
    pw = profile.weights
    for g_idx in range(n_points):
        x_mat = _profile_design(data, focal_names, grid[g_idx], profile)
        acc = _RBAccumulator(
            posterior, x_mat, query.obs_weight, want_curves=want_curves,
            y_grid=y_grid if want_curves else np.empty(0),
            want_sims=want_sims, rng=rng)
        if want_curves:
            pdf = pw @ acc.pdf_rows
            cdf = pw @ acc.cdf_rows
        for f in query.functionals:
            if f == "mean":
                table.scalars[f][g_idx] = float(pw @ acc.e_rows)
            elif f == "variance":
                table.scalars[f][g_idx] = float(pw @ acc.v_rows)
            elif f == "prob_y_ge_0":
                table.scalars[f][g_idx] = float(pw @ acc.p0_rows)
            elif f == "quantile":
                table.scalars[f][g_idx] = float(
                    pw @ acc.row_quantiles(query.u))
            elif f == "pdf":
                table.curves[f][g_idx] = pdf
            elif f == "cdf":
                table.curves[f][g_idx] = cdf
            elif f == "survival":
                table.curves[f][g_idx] = 1.0 - cdf
            elif f == "hazard":
                table.curves[f][g_idx] = _hazard_from(pdf, cdf)
            else:
                table.curves[f][g_idx] = _cumhaz_from(cdf)
    return table


def cate(posterior, data, treatment, functional="mean",
         profile_method="partial_dependence", u=0.5, rng=None):
    """Average treatment-effect contrast: functional at 1 minus at 0."""
    query = PredictiveQuery(focal={treatment: [0.0, 1.0]},
                            functionals=[functional],
                            profile_method=profile_method, u=u)
    table = pd_functional(posterior, data, query, rng=rng)
    if functional not in table.scalars:
        raise ValidationError(
            "treatment contrasts need a scalar functional")
    vals = table.scalars[functional]
    return float(vals[1] - vals[0])


# ---------------------------------------------------------------------------
# model-fit statistics


@dataclass
class FitReport:
    """Standardized residuals and global fit statistics."""

    e_n: np.ndarray
    v_n: np.ndarray
    residuals: np.ndarray       # NaN where the response is unobserved
    r_squared: float
    d_m: float
    outliers_2: np.ndarray      # |r| > 2
    outliers_3: np.ndarray      # |r| > 3

    def to_dict(self):
        return {
            "r_squared": self.r_squared, "d_m": self.d_m,
            "n_outliers_2": int(self.outliers_2.sum()),
            "n_outliers_3": int(self.outliers_3.sum()),
        }


def fit_report(posterior, data, obs_weight=1.0):
    """Per-observation predictive moments and the derived fit statistics.

    Pass a posterior built over *all* stored draws: fit statistics are
    defined over the complete sampling record rather than the burn-in
    filtered subset used for parameter summaries.  Rows whose response is
    unobserved (censored without a recorded value) have NaN residuals and
    are excluded from the aggregate statistics.

    When the posterior carries per-draw component assignments (mixture
    families fitted through the session state log), each row's moments
    condition on its own assignment sequence, so the fitted values track
    the component actually explaining that observation rather than the
    covariate-marginal mixture mean.
    """
    if posterior.allocations is not None:
        e_n, v_n = _allocation_conditioned_moments(posterior, data,
                                                   obs_weight)
    else:
        acc = _RBAccumulator(posterior, data.x, obs_weight)
        e_n, v_n = acc.e_rows, acc.v_rows
    y = data.y
    observed = np.isfinite(y)
    if not observed.any():
        raise ValidationError("fit statistics need observed responses")
    residuals = np.full(data.n, math.nan)
    residuals[observed] = (y[observed] - e_n[observed]) \
        / np.sqrt(np.maximum(v_n[observed], 1e-300))
    yo = y[observed]
    sse = float(((yo - e_n[observed]) ** 2).sum())
    sst = float(((yo - yo.mean()) ** 2).sum())
    r_squared = 1.0 - sse / sst if sst > 0 else math.nan
    d_m = sse + float(v_n[observed].sum())
    with np.errstate(invalid="ignore"):
        outliers_2 = np.abs(residuals) > 2.0
        outliers_3 = np.abs(residuals) > 3.0
    return FitReport(e_n=e_n, v_n=v_n, residuals=residuals,
                     r_squared=r_squared, d_m=d_m,
                     outliers_2=outliers_2, outliers_3=outliers_3)
