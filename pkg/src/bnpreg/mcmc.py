"""Posterior simulation: composite Gibbs / slice / Metropolis kernels.

One sampler class per model family, all driven through ``run_chain``.  A
chain is strictly sequential and bit-reproducible: the tuple (seed, spec,
data, config) determines every retained draw exactly, and resuming from a
saved ``ChainState`` continues the same stream.

Kernel cycles (fixed composition order):

LinearNIG        impute censored -> probit scores -> beta Gibbs -> sigma2 Gibbs
HLM2             impute -> probit -> beta Gibbs -> u_h ARWMH -> sigma2 Gibbs
                 -> T inverse-Wishart Gibbs
DDPMixture       impute -> probit -> sticks (conjugate beta / ARWMH) ->
                 atoms (ARWMH, Gibbs optional) -> slopes/sigma2 Gibbs ->
                 baseline (mu, T) Gibbs -> DP precision (Escobar-West) ->
                 slice step (u draw, atom extension, reallocation)
InfiniteProbits  impute -> probit -> atom means Gibbs -> sigma_mu slice ->
                 kernel coefficients/variance Gibbs -> SSVS -> weight
                 coefficients ARWMH -> slice step (u draw, window, realloc)

The slice step always runs last so the invariant u_i < w_{z_i}(x_i) holds at
the end of every full cycle.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import NumericError, ValidationError
from .models import (
    DDPParams,
    HLM2Params,
    InfiniteProbitsParams,
    LatentState,
    LinearNIGParams,
    _nig_stick_lognorm,
    _nig_stick_lograw,
    normal_logpdf,
    probit_augment_bounds,
    validate_spec_for_data,
    SSVS_SPIKE_FACTOR,
    SSVS_PRIOR_INCLUSION,
)
from .priors import sample_gig, weights_from_sticks

ATOM_HARD_CAP = 100_000
DEFAULT_TARGET_ACCEPT = 0.44
DEFAULT_ADAPT_EXPONENT = 0.6


@dataclass(frozen=True)
class SamplerConfig:
    """Chain settings.  ``total_iterations`` is the global target: a run
    advances the iteration counter to that value, so appending S more
    iterations to a finished run means raising the target by S and resuming."""
    total_iterations: int
    burn_in: int = 0
    thin: int = 1
    rng_seed: int = 0
    target_accept: float = DEFAULT_TARGET_ACCEPT
    adapt_exponent: float = DEFAULT_ADAPT_EXPONENT
    gibbs_atoms: bool = False
    # safety rails for the slice step (see _DDPSampler._slice_step): the
    # active-atom hard cap aborts a pathological extension; slice_mass_tol
    # stops extending once the residual stick mass falls below it, so
    # allocation candidates are complete down to that mass.  Stick laws with
    # slowly decaying tails (Pitman-Yor with discount near 1, normalized
    # stable, normalized inverse-Gaussian) can need millions of atoms to push
    # the residual below an occasional tiny slice level, so the default
    # tolerance trades that extreme tail — orders of magnitude below Monte
    # Carlo resolution — for guaranteed termination.  Set it to 0 for the
    # exact textbook extension.
    atom_cap: int = ATOM_HARD_CAP
    slice_mass_tol: float = 1e-4

    def __post_init__(self):
        if self.total_iterations < 1:
            raise ValidationError("total_iterations must be >= 1")
        if not 0 <= self.burn_in < self.total_iterations:
            raise ValidationError("burn_in must satisfy 0 <= burn_in < total_iterations")
        if self.thin < 1:
            raise ValidationError("thin must be >= 1")
        if not 0.0 < self.target_accept < 1.0:
            raise ValidationError("target_accept must be in (0,1)")
        if self.atom_cap < 1:
            raise ValidationError("atom_cap must be >= 1")
        if self.slice_mass_tol < 0.0:
            raise ValidationError("slice_mass_tol must be >= 0")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ChainState:
    params: object
    latent: LatentState
    iteration: int
    scales: dict
    rng: np.random.Generator

    def to_jsonable(self, family):
        return {
            "family": family,
            "params": self.params.to_jsonable(),
            "latent": self.latent.to_jsonable(),
            "iteration": self.iteration,
            "scales": {k: np.asarray(v, dtype=float).tolist()
                       for k, v in self.scales.items()},
            "rng_state": _rng_state_jsonable(self.rng),
        }

    @classmethod
    def from_jsonable(cls, d):
        family = d["family"]
        params_cls = {
            "LinearNIG": LinearNIGParams, "HLM2": HLM2Params,
            "DDPMixture": DDPParams, "InfiniteProbits": InfiniteProbitsParams,
        }[family]
        rng = np.random.default_rng()
        rng.bit_generator.state = _rng_state_from_jsonable(d["rng_state"])
        return cls(params=params_cls.from_jsonable(d["params"]),
                   latent=LatentState.from_jsonable(d["latent"]),
                   iteration=int(d["iteration"]),
                   scales={k: np.asarray(v, dtype=float)
                           for k, v in d["scales"].items()},
                   rng=rng)


def _rng_state_jsonable(rng):
    st = rng.bit_generator.state
    return {"bit_generator": st["bit_generator"],
            "state": {"state": str(st["state"]["state"]),
                      "inc": str(st["state"]["inc"])},
            "has_uint32": st["has_uint32"], "uinteger": st["uinteger"]}


def _rng_state_from_jsonable(d):
    return {"bit_generator": d["bit_generator"],
            "state": {"state": int(d["state"]["state"]),
                      "inc": int(d["state"]["inc"])},
            "has_uint32": int(d["has_uint32"]), "uinteger": int(d["uinteger"])}


class SampleStore:
    """Retained draws: stable column order, append-only rows."""

    def __init__(self, columns, thin=1, burn_in=0):
        self.columns = list(columns)
        self.thin = int(thin)
        self.burn_in = int(burn_in)
        self._rows = []

    def append(self, row):
        row = np.asarray(row, dtype=float)
        if row.size != len(self.columns):
            raise ValidationError("draw row width %d != %d columns"
                                  % (row.size, len(self.columns)))
        self._rows.append(row)

    @property
    def n_rows(self):
        return len(self._rows)

    def matrix(self):
        if not self._rows:
            return np.empty((0, len(self.columns)))
        return np.vstack(self._rows)

    def column(self, name):
        return self.matrix()[:, self.columns.index(name)]


# ---------------------------------------------------------------------------
# kernel primitives

def arwmh_step(log_target, current, scale, t, rng,
               target_accept=DEFAULT_TARGET_ACCEPT,
               adapt_exponent=DEFAULT_ADAPT_EXPONENT, current_logp=None):
    """One adaptive random-walk Metropolis step with a normal proposal.

    Returns (value, new_scale, accepted, log_target(value)).  The proposal
    scale adapts as scale * exp(t^-0.6 (accepted - 0.44)), which diminishes
    and so preserves ergodicity.
    """
    if current_logp is None:
        current_logp = log_target(current)
    prop = current + scale * rng.standard_normal()
    prop_logp = log_target(prop)
    accept = math.log(rng.random()) < prop_logp - current_logp \
        if math.isfinite(prop_logp) else False
    gamma = t ** -adapt_exponent
    new_scale = scale * math.exp(gamma * ((1.0 if accept else 0.0) - target_accept))
    if accept:
        return prop, new_scale, True, prop_logp
    return current, new_scale, False, current_logp


def stepping_out_slice(log_target, current, width, rng, lo=-math.inf, hi=math.inf,
                       max_steps=64):
    """Neal's slice sampler: stepping out then shrinkage, within (lo, hi)."""
    logy = log_target(current) + math.log(rng.random())
    left = current - width * rng.random()
    right = left + width
    left = max(left, lo)
    right = min(right, hi)
    steps = max_steps
    while steps > 0 and left > lo and log_target(left) > logy:
        left = max(left - width, lo)
        steps -= 1
    steps = max_steps
    while steps > 0 and right < hi and log_target(right) > logy:
        right = min(right + width, hi)
        steps -= 1
    while True:
        prop = rng.uniform(left, right)
        if log_target(prop) > logy:
            return prop
        if prop < current:
            left = prop
        else:
            right = prop


def sample_truncnorm(mean, sd, lb, ub, rng):
    """Exact draw from N(mean, sd^2) truncated to [lb, ub]."""
    a = (lb - mean) / sd
    b = (ub - mean) / sd
    if not a < b:
        raise ValidationError("empty truncation interval")
    return mean + sd * _truncnorm_std(a, b, rng)


def _truncnorm_std(a, b, rng):
    if a > 0.0:
        if a > 6.0:
            # Robert (1995) translated-exponential rejection in the far tail
            lam = 0.5 * (a + math.sqrt(a * a + 4.0))
            while True:
                x = a + rng.exponential(1.0 / lam)
                if x <= b and math.log(rng.random()) <= -0.5 * (x - lam) ** 2:
                    return x
        pa = special.ndtr(-b)
        pb = special.ndtr(-a)
        return -special.ndtri(rng.uniform(pa, pb))
    if b < 0.0:
        return -_truncnorm_std(-b, -a, rng)
    pa = special.ndtr(a)
    pb = special.ndtr(b)
    return special.ndtri(rng.uniform(pa, pb))


def escobar_west_alpha(alpha, k_n, n, a_alpha, b_alpha, rng):
    """Auxiliary-variable update of the DP precision given the cluster count."""
    eta = rng.beta(alpha + 1.0, n)
    rate = b_alpha - math.log(eta)
    odds = (a_alpha + k_n - 1.0) / (n * rate)
    shape = a_alpha + k_n if rng.random() < odds / (1.0 + odds) else a_alpha + k_n - 1.0
    return rng.gamma(shape, 1.0 / rate)


def _chol_mvn(mean, cov, rng):
    chol = np.linalg.cholesky(cov)
    return mean + chol @ rng.standard_normal(mean.size)


def _safe_invgamma(shape, rate, rng):
    """Inverse-gamma draw clamped to a huge-but-finite band.  Needed for
    near-improper prior draws (shape ~ 0.005) on empty mixture components,
    where the gamma variate underflows float64; the clamp only binds beyond
    ten orders of magnitude, far outside anything the data can identify."""
    g = rng.gamma(shape, 1.0)
    if not g > 0.0 or not math.isfinite(g):
        return 1e10
    return min(max(rate / g, 1e-10), 1e10)


def _invwishart_draw(df, scale_mat, rng):
    """Draw from IW(df, scale) = inverse of a Wishart(df, scale^-1) draw,
    via the Bartlett decomposition (deterministic given the generator)."""
    d = scale_mat.shape[0]
    chol_inv = np.linalg.cholesky(np.linalg.inv(scale_mat))
    a = np.zeros((d, d))
    for i in range(d):
        a[i, i] = math.sqrt(rng.chisquare(df - i))
        for j in range(i):
            a[i, j] = rng.standard_normal()
    l = chol_inv @ a
    w = l @ l.T
    return np.linalg.inv(w)


# ---------------------------------------------------------------------------
# shared helpers

def _effective_y(data, latent):
    """Response vector the kernels see: probit scores replace y entirely;
    censored rows use their current imputations."""
    if latent.ystar is not None:
        return latent.ystar
    y = data.y
    if latent.y_imputed is not None:
        cm = np.array([st.kind != "uncensored" for st in data.censoring])
        y = np.where(cm, latent.y_imputed, y)
    return y


def _impute_censored(data, latent, mean, sd, rng):
    """Redraw each censored response from its truncated normal conditional."""
    if data.censoring is None:
        return
    if latent.y_imputed is None:
        latent.y_imputed = data.y.copy()
    for i, st_i in enumerate(data.censoring):
        if st_i.kind == "uncensored":
            continue
        latent.y_imputed[i] = sample_truncnorm(
            float(mean[i]), float(sd[i]), st_i.lower, st_i.upper, rng)


def _redraw_probit(data, latent, mean, sd, rng):
    for i in range(data.n):
        lo, hi = probit_augment_bounds(data.y[i])
        latent.ystar[i] = sample_truncnorm(float(mean[i]), float(sd[i]), lo, hi, rng)


def _linear_gibbs_beta(x, y, w, sigma2, prior_prec_diag, rng):
    """beta | sigma2, y  ~  N(A^-1 X'Wy, sigma2 A^-1), A = X'WX + D^-1."""
    xtw = x.T * w
    a = xtw @ x + np.diag(prior_prec_diag)
    chol = np.linalg.cholesky(a)
    m = np.linalg.solve(chol.T, np.linalg.solve(chol, xtw @ y))
    z = np.linalg.solve(chol.T, rng.standard_normal(m.size))
    return m + math.sqrt(sigma2) * z


def _linear_gibbs_sigma2(x, y, w, beta, prior_prec_diag, a0, rng):
    resid = y - x @ beta
    ssr = float(w @ resid ** 2)
    quad_prior = float(beta @ (prior_prec_diag * beta))
    n_proper = int(np.count_nonzero(prior_prec_diag))
    shape = 0.5 * (a0 + y.size + n_proper)
    rate = 0.5 * (a0 + ssr + quad_prior)
    return rate / rng.gamma(shape, 1.0)


def _prior_prec_diag(p_plus_1, hyper, sigma2_scaled=True):
    """Diagonal of D^-1 for the (intercept, slopes) normal prior; the
    improper intercept contributes a zero entry."""
    d = np.empty(p_plus_1)
    d[0] = 0.0 if hyper.improper_intercept else 1.0 / hyper.v_beta0
    d[1:] = 1.0 / hyper.v_beta
    return d


def _ols_init(x, y, w):
    xtw = x.T * w
    a = xtw @ x
    ridge = 1e-8 * max(np.trace(a) / a.shape[0], 1.0)
    beta = np.linalg.solve(a + ridge * np.eye(a.shape[0]), xtw @ y)
    resid = y - x @ beta
    dof = max(y.size - x.shape[1], 1)
    sigma2 = max(float(w @ resid ** 2) / dof, 1e-8)
    return beta, sigma2


def _init_latent(spec, data):
    latent = LatentState()
    if spec.link == "binary_probit":
        latent.ystar = np.where(data.y > 0.5, 1.0, -1.0)
    if data.censoring is not None:
        y0 = data.y.copy()
        obs = y0[~np.isnan(y0)]
        spread = float(np.std(obs)) if obs.size > 1 else 1.0
        spread = spread if spread > 0 else 1.0
        for i, st_i in enumerate(data.censoring):
            if st_i.kind == "uncensored":
                continue
            if st_i.kind == "interval":
                y0[i] = 0.5 * (st_i.lower + st_i.upper)
            elif st_i.kind == "right":
                y0[i] = st_i.lower + spread
            else:
                y0[i] = st_i.upper - spread
        latent.y_imputed = y0
    return latent


def _init_y_for_ols(data, latent):
    if latent.ystar is not None:
        return latent.ystar
    if latent.y_imputed is not None:
        cm = np.array([st.kind != "uncensored" for st in data.censoring])
        return np.where(cm, latent.y_imputed, data.y)
    return data.y


# ---------------------------------------------------------------------------
# family samplers

class _LinearNIGSampler:
    def __init__(self, spec, data, config):
        self.spec = spec
        self.data = data
        self.config = config
        self.probit = spec.link == "binary_probit"

    def init_state(self, rng):
        latent = _init_latent(self.spec, self.data)
        y0 = _init_y_for_ols(self.data, latent)
        beta, sigma2 = _ols_init(self.data.x, y0, self.data.w)
        if self.probit:
            sigma2 = 1.0
        params = LinearNIGParams(beta=beta, sigma2=sigma2)
        return ChainState(params, latent, 0, {}, rng)

    def cycle(self, state):
        d, h = self.data, self.spec.hyper
        params, latent, rng = state.params, state.latent, state.rng
        mean = d.x @ params.beta
        sd = np.sqrt(params.sigma2 / d.w)
        if d.censoring is not None:
            _impute_censored(d, latent, mean, sd, rng)
        if self.probit:
            _redraw_probit(d, latent, mean, sd, rng)
        y = _effective_y(d, latent)
        prec = _prior_prec_diag(d.p + 1, h)
        params.beta = _linear_gibbs_beta(d.x, y, d.w, params.sigma2, prec, rng)
        if not self.probit:
            params.sigma2 = _linear_gibbs_sigma2(d.x, y, d.w, params.beta,
                                                 prec, h.a0, rng)

    def draw_names(self):
        names = ["beta.%s" % c for c in self.data.x_names]
        if not self.probit:
            names.append("sigma2")
        return names

    def draw_row(self, state):
        row = list(state.params.beta)
        if not self.probit:
            row.append(state.params.sigma2)
        return row


class _HLM2Sampler:
    def __init__(self, spec, data, config):
        self.spec = spec
        self.data = data
        self.config = config
        self.probit = spec.link == "binary_probit"
        self.n_h = data.n_groups
        self.q = data.p + 1

    def init_state(self, rng):
        latent = _init_latent(self.spec, self.data)
        y0 = _init_y_for_ols(self.data, latent)
        beta, sigma2 = _ols_init(self.data.x, y0, self.data.w)
        if self.probit:
            sigma2 = 1.0
        params = HLM2Params(beta=beta, u=np.zeros((self.n_h, self.q)),
                            sigma2=sigma2, t_cov=np.eye(self.q))
        scales = {"u": np.full((self.n_h, self.q), 0.5).ravel()}
        return ChainState(params, latent, 0, scales, rng)

    def _row_means(self, params):
        return self.data.x @ params.beta \
            + np.einsum("ij,ij->i", self.data.x, params.u[self.data.groups])

    def cycle(self, state):
        d, h = self.data, self.spec.hyper
        params, latent, rng = state.params, state.latent, state.rng
        mean = self._row_means(params)
        sd = np.sqrt(params.sigma2 / d.w)
        if d.censoring is not None:
            _impute_censored(d, latent, mean, sd, rng)
        if self.probit:
            _redraw_probit(d, latent, mean, sd, rng)
        y = _effective_y(d, latent)
        prec = _prior_prec_diag(d.p + 1, h)
        # fixed effects given the random offsets
        offset = np.einsum("ij,ij->i", d.x, params.u[d.groups])
        params.beta = _linear_gibbs_beta(d.x, y - offset, d.w, params.sigma2,
                                         prec, rng)
        self._update_u(state, y)
        if not self.probit:
            resid = y - self._row_means(params)
            ssr = float(d.w @ resid ** 2)
            quad = float(params.beta @ (prec * params.beta))
            shape = 0.5 * (h.a0 + d.n + int(np.count_nonzero(prec)))
            rate = 0.5 * (h.a0 + ssr + quad)
            params.sigma2 = rate / rng.gamma(shape, 1.0)
        scatter = params.u.T @ params.u
        params.t_cov = _invwishart_draw(self.q + 2 + self.n_h,
                                        h.s0 * np.eye(self.q) + scatter, rng)

    def _update_u(self, state, y):
        d = self.data
        params, rng = state.params, state.rng
        t = max(state.iteration, 1)
        t_inv = np.linalg.inv(params.t_cov)
        scales = state.scales["u"].reshape(self.n_h, self.q)
        for hh in range(self.n_h):
            rows = d.rows_of_group(hh)
            xh = d.x[rows]
            yh = y[rows] - xh @ params.beta
            wh = d.w[rows]
            uh = params.u[hh]
            for k in range(self.q):
                def logf(val, k=k, uh=uh, xh=xh, yh=yh, wh=wh, t_inv=t_inv):
                    u2 = uh.copy()
                    u2[k] = val
                    resid = yh - xh @ u2
                    lik = -0.5 * float(wh @ resid ** 2) / params.sigma2
                    return lik - 0.5 * float(u2 @ t_inv @ u2)
                new, sc, _, _ = arwmh_step(
                    logf, uh[k], scales[hh, k], t, rng,
                    self.config.target_accept, self.config.adapt_exponent)
                uh[k] = new
                scales[hh, k] = sc
        state.scales["u"] = scales.ravel()

    def draw_names(self):
        names = ["beta.%s" % c for c in self.data.x_names]
        if not self.probit:
            names.append("sigma2")
        for i in range(self.q):
            for j in range(i + 1):
                names.append("T.%d.%d" % (i + 1, j + 1))
        return names

    def draw_row(self, state):
        row = list(state.params.beta)
        if not self.probit:
            row.append(state.params.sigma2)
        tc = state.params.t_cov
        for i in range(self.q):
            for j in range(i + 1):
                row.append(tc[i, j])
        return row


class _DDPSampler:
    """Stick-breaking mixture of linear regressions (slice sampler)."""

    def __init__(self, spec, data, config):
        self.spec = spec
        self.data = data
        self.config = config
        self.probit = spec.link == "binary_probit"
        self.target = spec.mixing_target
        self.stick = spec.stick_prior
        self.mix_var = self.target == "coefficients_and_variance"
        self.d_atom = 1 if self.target == "intercept_only" else data.p + 1
        # allocation units: level-2 groups when assigned, else rows
        self.grouped = data.groups is not None
        self.n_units = data.n_groups if self.grouped else data.n
        self.unit_of_row = data.groups if self.grouped else np.arange(data.n)
        self._alpha_cache = 1.0

    # -- initialization ------------------------------------------------------

    def init_state(self, rng):
        latent = _init_latent(self.spec, self.data)
        y0 = _init_y_for_ols(self.data, latent)
        beta, sigma2 = _ols_init(self.data.x, y0, self.data.w)
        if self.target == "intercept_only":
            atoms = np.array([[beta[0]]])
            slopes = beta[1:].copy()
        else:
            atoms = beta[None, :].copy()
            slopes = None
        if self.stick.family == "geometric":
            v0 = _clip_unit(rng.beta(self.stick.a, self.stick.b))
        else:
            v0 = self._prior_stick(1, 0.0, rng)
        # start the baseline covariance at the residual scale of the data so
        # that freshly born atoms can land anywhere in the response range;
        # a unit-scale start can strand the chain in a one-cluster mode when
        # the clusters sit several units apart
        spread = max(float(sigma2), 1.0)
        params = DDPParams(
            atoms=atoms, sticks=np.array([v0]),
            mu=np.zeros(self.d_atom), t_cov=spread * np.eye(self.d_atom),
            sigma2=None if self.mix_var else sigma2,
            sigma2_atoms=np.array([sigma2]) if self.mix_var else None,
            global_slopes=slopes,
            alpha=1.0 if self.stick.family == "dp" else None)
        latent.z = np.zeros(self.n_units, dtype=int)
        latent.u = np.full(self.n_units, 1e-3)
        scales = {"atoms": np.full(self.d_atom, 0.3),
                  "sticks": np.full(1, 0.5)}
        return ChainState(params, latent, 0, scales, rng)

    # -- stick machinery -----------------------------------------------------

    def _prior_stick(self, j, log_remaining, rng):
        """Draw stick j from its prior conditional given the mass remaining."""
        fam = self.stick.family
        if fam == "nig":
            chi = self.stick.c ** 2 * math.exp(-log_remaining)
            g1 = sample_gig(chi, 1.0, -0.5 * j, rng)
            g0 = 1.0 / rng.gamma(0.5, 2.0 / chi)
            return _clip_unit(g1 / (g1 + g0))
        if fam == "geometric":
            raise AssertionError("geometric sticks are shared, not drawn per atom")
        a_j, b_j = self._beta_params(j)
        return _clip_unit(rng.beta(a_j, b_j))

    def _beta_params(self, j):
        if self.stick.family == "dp":
            return 1.0, self._alpha_value()
        return self.stick.beta_params(j)

    def _alpha_value(self):
        return self._alpha_cache

    def count_units(self, z, n_atoms):
        return np.bincount(z, minlength=n_atoms)

    def _update_sticks(self, state):
        params, latent, rng = state.params, state.latent, state.rng
        n_atoms = params.n_atoms
        counts = self.count_units(latent.z, n_atoms)
        above = np.concatenate([np.cumsum(counts[::-1])[::-1][1:], [0]])
        fam = self.stick.family
        if fam in ("dp", "pitman_yor", "normalized_stable", "beta_two_param"):
            self._alpha_cache = params.alpha if params.alpha is not None else 1.0
            for j in range(n_atoms):
                a_j, b_j = self._beta_params(j + 1)
                params.sticks[j] = _clip_unit(
                    rng.beta(a_j + counts[j], b_j + above[j]))
        elif fam == "geometric":
            self._update_geometric_stick(state, counts)
        else:
            self._update_nig_sticks(state, counts, above)

    def _update_geometric_stick(self, state, counts):
        params, latent, rng = state.params, state.latent, state.rng
        a, b = self.stick.a, self.stick.b
        n_units = self.n_units
        sum_idx = float(latent.z.sum())  # 0-based indices

        def logf(v):
            if not 0.0 < v < 1.0:
                return -math.inf
            return ((a - 1.0) * math.log(v) + (b - 1.0) * math.log1p(-v)
                    + n_units * math.log(v) + sum_idx * math.log1p(-v))

        t = max(state.iteration, 1)
        v0 = params.sticks[0]
        new, sc, _, _ = arwmh_step(logf, v0, state.scales["sticks"][0], t, rng,
                                   self.config.target_accept,
                                   self.config.adapt_exponent)
        state.scales["sticks"][0] = sc
        params.sticks[:] = new

    def _update_nig_sticks(self, state, counts, above):
        """Componentwise ARWMH on the logit of each stick.

        The conditional target of stick j includes its own sequential prior
        term, every downstream stick's prior term (their remaining-mass
        parameter depends on stick j), and the allocation likelihood
        counts[j] log v + above[j] log(1-v)."""
        params, rng = state.params, state.rng
        c = self.stick.c
        n_atoms = params.n_atoms
        t = max(state.iteration, 1)
        if state.scales["sticks"].size < n_atoms:
            extra = n_atoms - state.scales["sticks"].size
            state.scales["sticks"] = np.concatenate(
                [state.scales["sticks"], np.full(extra, 0.5)])
        sticks = params.sticks
        for j in range(n_atoms):
            log_rem_before = float(np.log1p(-sticks[:j]).sum())

            def logf(logit_v, j=j, log_rem_before=log_rem_before):
                v = 1.0 / (1.0 + math.exp(-logit_v))
                if not 0.0 < v < 1.0:
                    return -math.inf
                total = _nig_stick_lograw(c, j + 1, math.exp(-log_rem_before), v)
                total += counts[j] * math.log(v) + above[j] * math.log1p(-v)
                log_rem = log_rem_before + math.log1p(-v)
                for l in range(j + 1, n_atoms):
                    total += _nig_stick_cond_logpdf_cached(
                        c, l + 1, -log_rem, sticks[l])
                    log_rem += math.log1p(-sticks[l])
                # logit jacobian
                total += math.log(v) + math.log1p(-v)
                return total

            cur = math.log(sticks[j] / (1.0 - sticks[j]))
            new, sc, _, _ = arwmh_step(logf, cur, state.scales["sticks"][j], t,
                                       rng, self.config.target_accept,
                                       self.config.adapt_exponent)
            state.scales["sticks"][j] = sc
            sticks[j] = _clip_unit(1.0 / (1.0 + math.exp(-new)))

    # -- kernel pieces -------------------------------------------------------

    def _atom_means(self, params):
        """(n, J) kernel means."""
        if self.target == "intercept_only":
            base = (self.data.x[:, 1:] @ params.global_slopes
                    if self.data.p else np.zeros(self.data.n))
            return params.atoms[:, 0][None, :] + base[:, None]
        return self.data.x @ params.atoms.T

    def _atom_vars(self, params):
        if self.mix_var:
            return params.sigma2_atoms
        return np.full(params.n_atoms, params.sigma2)

    def _row_mean_sd(self, params, latent):
        zrow = latent.z[self.unit_of_row]
        means = self._atom_means(params)[np.arange(self.data.n), zrow]
        varis = self._atom_vars(params)[zrow]
        return means, np.sqrt(varis / self.data.w)

    def cycle(self, state):
        d = self.data
        params, latent, rng = state.params, state.latent, state.rng
        mean, sd = self._row_mean_sd(params, latent)
        if d.censoring is not None:
            _impute_censored(d, latent, mean, sd, rng)
        if self.probit:
            _redraw_probit(d, latent, mean, sd, rng)
        y = _effective_y(d, latent)
        self._alpha_cache = params.alpha if params.alpha is not None else 1.0
        self._update_sticks(state)
        self._update_atoms(state, y)
        if self.target == "intercept_only" and d.p:
            self._update_slopes(state, y)
        self._update_variances(state, y)
        self._update_baseline(state)
        if self.stick.family == "dp":
            k_n = np.unique(latent.z).size
            params.alpha = escobar_west_alpha(
                params.alpha, k_n, self.n_units,
                self.spec.hyper.a_alpha, self.spec.hyper.b_alpha, rng)
        self._slice_step(state, y)
        self._compact(state)
        self._truncate(state)

    def _unit_loglik(self, y, means, varis):
        """(units, J) log kernel products per allocation unit."""
        d = self.data
        logk = normal_logpdf(y[:, None], means, varis[None, :] / d.w[:, None])
        if not self.grouped:
            return logk
        out = np.zeros((self.n_units, means.shape[1]))
        np.add.at(out, d.groups, logk)
        return out

    def _update_atoms(self, state, y):
        params, latent, rng = state.params, state.latent, state.rng
        d = self.data
        t = max(state.iteration, 1)
        varis = self._atom_vars(params)
        t_inv = np.linalg.inv(params.t_cov)
        offsets = (d.x[:, 1:] @ params.global_slopes
                   if self.target == "intercept_only" and d.p else np.zeros(d.n))
        zrow = latent.z[self.unit_of_row]
        scales = state.scales["atoms"]
        for j in range(params.n_atoms):
            rows = np.nonzero(zrow == j)[0]
            if rows.size == 0:
                params.atoms[j] = _chol_mvn(params.mu, params.t_cov, rng)
                continue
            if self.config.gibbs_atoms:
                if self.target == "intercept_only":
                    self._gibbs_intercept_atom(params, j, rows, y, offsets,
                                               varis[j], t_inv, rng)
                else:
                    self._gibbs_atom(params, j, rows, y, varis[j], t_inv, rng)
                continue
            xj = d.x[rows] if self.target != "intercept_only" else None
            yj = y[rows] - (offsets[rows] if self.target == "intercept_only" else 0.0)
            wj = d.w[rows]
            atom = params.atoms[j]
            for k in range(self.d_atom):
                def logf(val, k=k):
                    a2 = atom.copy()
                    a2[k] = val
                    if self.target == "intercept_only":
                        resid = yj - a2[0]
                    else:
                        resid = yj - xj @ a2
                    lik = -0.5 * float(wj @ resid ** 2) / varis[j]
                    diff = a2 - params.mu
                    return lik - 0.5 * float(diff @ t_inv @ diff)
                new, sc, _, _ = arwmh_step(logf, atom[k], scales[k], t, rng,
                                           self.config.target_accept,
                                           self.config.adapt_exponent)
                atom[k] = new
                scales[k] = sc

    def _gibbs_intercept_atom(self, params, j, rows, y, offsets, var_j,
                              t_inv, rng):
        d = self.data
        wj = d.w[rows]
        yj = y[rows] - offsets[rows]
        prec = float(wj.sum()) / var_j + t_inv[0, 0]
        m = (float(wj @ yj) / var_j + t_inv[0, 0] * params.mu[0]) / prec
        params.atoms[j, 0] = m + math.sqrt(1.0 / prec) * rng.standard_normal()

    def _gibbs_atom(self, params, j, rows, y, var_j, t_inv, rng):
        d = self.data
        xj = d.x[rows]
        wj = d.w[rows]
        xtw = xj.T * wj
        a = xtw @ xj / var_j + t_inv
        cov = np.linalg.inv(a)
        m = cov @ (xtw @ y[rows] / var_j + t_inv @ params.mu)
        params.atoms[j] = _chol_mvn(m, cov, rng)

    def _update_slopes(self, state, y):
        d = self.data
        params, latent, rng = state.params, state.latent, state.rng
        zrow = latent.z[self.unit_of_row]
        resid = y - params.atoms[zrow, 0]
        varis = self._atom_vars(params)[zrow]
        xs = d.x[:, 1:]
        prec_rows = d.w / varis
        a = (xs.T * prec_rows) @ xs + np.eye(d.p) / self.spec.hyper.v_beta
        cov = np.linalg.inv(a)
        m = cov @ (xs.T @ (prec_rows * resid))
        params.global_slopes = _chol_mvn(m, cov, rng)

    def _update_variances(self, state, y):
        # kernel variances keep their inverse-gamma update under every link;
        # binary responses only pin the scale in the single-kernel families
        d, h = self.data, self.spec.hyper
        params, latent, rng = state.params, state.latent, state.rng
        means = self._atom_means(params)
        zrow = latent.z[self.unit_of_row]
        resid = y - means[np.arange(d.n), zrow]
        if self.mix_var:
            for j in range(params.n_atoms):
                rows = zrow == j
                nj = int(np.count_nonzero(rows))
                ssr = float(d.w[rows] @ resid[rows] ** 2) if nj else 0.0
                params.sigma2_atoms[j] = _safe_invgamma(
                    0.5 * (h.a0 + nj), 0.5 * (h.a0 + ssr), rng)
        else:
            ssr = float(d.w @ resid ** 2)
            shape = 0.5 * (h.a0 + d.n)
            rate = 0.5 * (h.a0 + ssr)
            params.sigma2 = rate / rng.gamma(shape, 1.0)

    def _update_baseline(self, state):
        params, rng = state.params, state.rng
        h = self.spec.hyper
        j_mat = params.n_atoms
        t_inv = np.linalg.inv(params.t_cov)
        v = np.linalg.inv(j_mat * t_inv + np.eye(self.d_atom) / h.r0)
        m = v @ (t_inv @ params.atoms.sum(axis=0))
        params.mu = _chol_mvn(m, v, rng)
        diffs = params.atoms - params.mu
        scatter = diffs.T @ diffs
        params.t_cov = _invwishart_draw(self.d_atom + 2 + j_mat,
                                        h.s0 * np.eye(self.d_atom) + scatter, rng)

    def _slice_step(self, state, y):
        """u draw, stick/atom extension, reallocation (runs last)."""
        params, latent, rng = state.params, state.latent, state.rng
        self._alpha_cache = params.alpha if params.alpha is not None else 1.0
        weights = weights_from_sticks(params.sticks).weights
        latent.u = np.maximum(rng.uniform(0.0, weights[latent.z]), 1e-300)
        u_min = max(float(latent.u.min()), self.config.slice_mass_tol)
        log_remaining = float(np.log1p(-params.sticks).sum())
        new_sticks, new_atoms, new_vars = [], [], []
        h = self.spec.hyper
        while math.exp(log_remaining) >= u_min:
            if params.n_atoms + len(new_sticks) >= self.config.atom_cap:
                raise NumericError(
                    "active atom count exceeded the hard cap (%d)"
                    % self.config.atom_cap)
            j_new = params.n_atoms + len(new_sticks) + 1
            if self.stick.family == "geometric":
                v = params.sticks[0]
            else:
                v = self._prior_stick(j_new, log_remaining, rng)
            new_sticks.append(v)
            new_atoms.append(_chol_mvn(params.mu, params.t_cov, rng))
            if self.mix_var:
                new_vars.append(_safe_invgamma(0.5 * h.a0, 0.5 * h.a0, rng))
            log_remaining += math.log1p(-v)
        if new_sticks:
            params.sticks = np.concatenate([params.sticks, new_sticks])
            params.atoms = np.vstack([params.atoms] + new_atoms)
            if self.mix_var:
                params.sigma2_atoms = np.concatenate(
                    [params.sigma2_atoms, new_vars])
        weights = weights_from_sticks(params.sticks).weights
        means = self._atom_means(params)
        varis = self._atom_vars(params)
        unit_logk = self._unit_loglik(y, means, varis)
        allowed = weights[None, :] > latent.u[:, None]
        logp = np.where(allowed, unit_logk, -np.inf)
        # normalize rows and sample categorically
        logp -= logp.max(axis=1, keepdims=True)
        probs = np.exp(logp)
        probs /= probs.sum(axis=1, keepdims=True)
        cum = np.cumsum(probs, axis=1)
        draws = rng.random(self.n_units)
        latent.z = (draws[:, None] > cum).sum(axis=1).astype(int)

    def _compact(self, state):
        """Swap occupied high-index atoms into unoccupied low-index slots.

        Stick values stay in place; only the atom payloads (coefficients,
        per-atom variance) and the allocations move.  In the slice-augmented
        joint density the allocation weights enter only through the
        indicators u_i < w_{z_i}, and the atom payload priors are exchangeable
        across slots, so whenever the destination weight exceeds every moved
        slice level the Metropolis ratio is exactly 1 and the move is a free
        exact transition.  Without it, a single unit allocated deep in the
        tail keeps hundreds of sticks materialized, which the slowly-decaying
        stick laws turn into a quadratic-cost stick update."""
        params, latent = state.params, state.latent
        weights = weights_from_sticks(params.sticks).weights
        occ = np.unique(latent.z)
        occ_set = set(int(j) for j in occ)
        free = [j for j in range(params.n_atoms) if j not in occ_set]
        if not free:
            return
        for t_idx in sorted(occ_set, reverse=True):
            dest = None
            for pos, l_idx in enumerate(free):
                if l_idx >= t_idx:
                    break
                moved = latent.z == t_idx
                if weights[l_idx] > float(latent.u[moved].max()):
                    dest = (pos, l_idx, moved)
                    break
            if dest is None:
                continue
            pos, l_idx, moved = dest
            params.atoms[[l_idx, t_idx]] = params.atoms[[t_idx, l_idx]]
            if params.sigma2_atoms is not None:
                params.sigma2_atoms[[l_idx, t_idx]] = \
                    params.sigma2_atoms[[t_idx, l_idx]]
            latent.z[moved] = l_idx
            free[pos] = t_idx
            free.sort()

    def _truncate(self, state):
        params, latent = state.params, state.latent
        last = int(latent.z.max())
        keep = last + 1
        if keep < params.n_atoms:
            params.atoms = params.atoms[:keep]
            params.sticks = params.sticks[:keep]
            if params.sigma2_atoms is not None:
                params.sigma2_atoms = params.sigma2_atoms[:keep]
        if state.scales["sticks"].size > keep:
            state.scales["sticks"] = state.scales["sticks"][:keep]

    # -- output --------------------------------------------------------------

    def draw_names(self):
        names = []
        if self.target == "intercept_only" and self.data.p:
            names += ["beta.%s" % c for c in self.data.x_names[1:]]
        if not self.mix_var:
            names.append("sigma2")
        if self.stick.family == "dp":
            names.append("alpha")
        for i in range(self.d_atom):
            names.append("mu.%d" % (i + 1))
        for i in range(self.d_atom):
            for j in range(i + 1):
                names.append("T.%d.%d" % (i + 1, j + 1))
        names += ["k_clusters", "n_atoms"]
        return names

    def draw_row(self, state):
        params, latent = state.params, state.latent
        row = []
        if self.target == "intercept_only" and self.data.p:
            row += list(params.global_slopes)
        if not self.mix_var:
            row.append(params.sigma2)
        if self.stick.family == "dp":
            row.append(params.alpha)
        row += list(params.mu)
        for i in range(self.d_atom):
            for j in range(i + 1):
                row.append(params.t_cov[i, j])
        row.append(float(np.unique(latent.z).size))
        row.append(float(params.n_atoms))
        return row


def _clip_unit(v):
    return min(max(v, 1e-12), 1.0 - 1e-12)


_NIG_NORM_CACHE = {}


def _nig_stick_cond_logpdf_cached(c, j, log_psi, v):
    """Normalized sequential conditional; the normalizer is cached on a
    (c, j, log_psi) key since Metropolis proposals revisit the same values."""
    psi = math.exp(log_psi)
    key = (c, j, round(log_psi, 10))
    lognorm = _NIG_NORM_CACHE.get(key)
    if lognorm is None:
        lognorm = _nig_stick_lognorm(c, j, psi)
        if len(_NIG_NORM_CACHE) > 100_000:
            _NIG_NORM_CACHE.clear()
        _NIG_NORM_CACHE[key] = lognorm
    return _nig_stick_lograw(c, j, psi, v) - lognorm


class _InfiniteProbitsSampler:
    def __init__(self, spec, data, config):
        self.spec = spec
        self.data = data
        self.config = config
        self.probit = spec.link == "binary_probit"
        self.het = spec.heteroscedastic

    def init_state(self, rng):
        d, h = self.data, self.spec.hyper
        latent = _init_latent(self.spec, self.data)
        y0 = _init_y_for_ols(self.data, latent)
        beta, sigma2 = _ols_init(d.x, y0, d.w)
        if self.probit:
            sigma2 = 1.0
        sigma_mu = 0.5 * h.b_sigma_mu
        if self.het:
            params = InfiniteProbitsParams(
                j_lo=0, mu_atoms=np.array([float(np.mean(y0))]), sigma_mu=sigma_mu,
                beta_omega=np.zeros(d.p + 1), lam_omega=np.zeros(d.p + 1),
                sigma2_atoms=np.array([sigma2]),
                gamma_weight=np.ones(d.p) if self.spec.ssvs_weight else None)
        else:
            params = InfiniteProbitsParams(
                j_lo=0, mu_atoms=np.array([0.0]), sigma_mu=sigma_mu,
                beta_omega=np.zeros(d.p + 1), beta=beta, sigma2=sigma2,
                sigma_omega=1.0,
                gamma_kernel=np.ones(d.p) if self.spec.ssvs_kernel else None,
                gamma_weight=np.ones(d.p) if self.spec.ssvs_weight else None)
        latent.z = np.zeros(d.n, dtype=int)
        latent.u = np.full(d.n, 1e-3)
        scales = {"weights": np.full(d.p + 2, 0.3)}
        return ChainState(params, latent, 0, scales, rng)

    def _kernel_mean_sd(self, params, latent):
        d = self.data
        if self.het:
            mean = params.mu_atoms[latent.z - params.j_lo]
            varis = params.sigma2_atoms[latent.z - params.j_lo]
            return mean, np.sqrt(varis / d.w)
        mean = params.mu_atoms[latent.z - params.j_lo] + d.x @ params.beta
        return mean, np.sqrt(params.sigma2 / d.w)

    def cycle(self, state):
        d = self.data
        params, latent, rng = state.params, state.latent, state.rng
        mean, sd = self._kernel_mean_sd(params, latent)
        if d.censoring is not None:
            _impute_censored(d, latent, mean, sd, rng)
        if self.probit:
            _redraw_probit(d, latent, mean, sd, rng)
        y = _effective_y(d, latent)
        self._update_atom_means(state, y)
        self._update_sigma_mu(state)
        if self.het:
            self._update_atom_variances(state, y)
        else:
            self._update_beta_sigma2(state, y)
        if self.spec.ssvs_kernel and not self.het:
            self._update_ssvs_kernel(state)
        if self.spec.ssvs_weight:
            self._update_ssvs_weight(state)
        self._update_weight_params(state)
        self._slice_step(state, y)
        self._prune_window(state)

    def _update_atom_means(self, state, y):
        d, h = self.data, self.spec.hyper
        params, latent, rng = state.params, state.latent, state.rng
        resid = y if self.het else y - d.x @ params.beta
        prec_mu = 1.0 / params.sigma_mu ** 2
        for idx, j in enumerate(params.window()):
            rows = latent.z == j
            nj = int(np.count_nonzero(rows))
            if nj == 0:
                params.mu_atoms[idx] = rng.normal(0.0, params.sigma_mu)
                continue
            var_j = params.sigma2_atoms[idx] if self.het else params.sigma2
            if self.het and np.isnan(var_j):
                var_j = _safe_invgamma(0.5 * h.a0, 0.5 * h.a0, rng)
                params.sigma2_atoms[idx] = var_j
            prec = prec_mu + float(d.w[rows].sum()) / var_j
            m = (float(d.w[rows] @ resid[rows]) / var_j) / prec
            params.mu_atoms[idx] = rng.normal(m, math.sqrt(1.0 / prec))

    def _update_sigma_mu(self, state):
        params, rng = state.params, state.rng
        h = self.spec.hyper
        mus = params.mu_atoms
        n_mat = mus.size
        ss = float(mus @ mus)

        def logf(s):
            if not 0.0 < s < h.b_sigma_mu:
                return -math.inf
            return -n_mat * math.log(s) - 0.5 * ss / (s * s)

        params.sigma_mu = stepping_out_slice(
            logf, params.sigma_mu, 0.25 * h.b_sigma_mu, rng, 0.0, h.b_sigma_mu)

    def _update_atom_variances(self, state, y):
        d, h = self.data, self.spec.hyper
        params, latent, rng = state.params, state.latent, state.rng
        for idx, j in enumerate(params.window()):
            rows = latent.z == j
            nj = int(np.count_nonzero(rows))
            if nj == 0:
                params.sigma2_atoms[idx] = _safe_invgamma(0.5 * h.a0, 0.5 * h.a0, rng)
                continue
            resid = y[rows] - params.mu_atoms[idx]
            ssr = float(d.w[rows] @ resid ** 2)
            params.sigma2_atoms[idx] = _safe_invgamma(
                0.5 * (h.a0 + nj), 0.5 * (h.a0 + ssr), rng)

    def _kernel_prec_diag(self, params):
        h = self.spec.hyper
        p1 = params.beta.size
        d = np.empty(p1)
        d[0] = 0.0 if h.improper_intercept else 1.0 / h.v_beta0
        slab = np.full(p1 - 1, h.v)
        if self.spec.ssvs_kernel:
            slab = np.where(params.gamma_kernel > 0.5, h.v, h.v * SSVS_SPIKE_FACTOR)
        d[1:] = 1.0 / slab
        return d

    def _update_beta_sigma2(self, state, y):
        d, h = self.data, self.spec.hyper
        params, latent, rng = state.params, state.latent, state.rng
        resid = y - params.mu_atoms[latent.z - params.j_lo]
        prec = self._kernel_prec_diag(params)
        params.beta = _linear_gibbs_beta(d.x, resid, d.w, params.sigma2, prec, rng)
        r2 = resid - d.x @ params.beta
        ssr = float(d.w @ r2 ** 2)
        quad = float(params.beta @ (prec * params.beta))
        shape = 0.5 * (h.a0 + d.n + int(np.count_nonzero(prec)))
        rate = 0.5 * (h.a0 + ssr + quad)
        params.sigma2 = rate / rng.gamma(shape, 1.0)

    def _update_ssvs_kernel(self, state):
        params, rng = state.params, state.rng
        h = self.spec.hyper
        for k in range(params.gamma_kernel.size):
            b = params.beta[k + 1]
            slab_v = h.v * params.sigma2
            params.gamma_kernel[k] = _ssvs_draw(b, slab_v, rng)

    def _update_ssvs_weight(self, state):
        params, rng = state.params, state.rng
        h = self.spec.hyper
        for k in range(params.gamma_weight.size):
            if self.het:
                b = params.lam_omega[k + 1]
                slab_v = h.v_omega
            else:
                b = params.beta_omega[k + 1]
                slab_v = h.v_omega * params.sigma_omega ** 2
            params.gamma_weight[k] = _ssvs_draw(b, slab_v, rng)

    def _weight_prior_prec(self, params):
        h = self.spec.hyper
        p1 = params.beta_omega.size
        slab = np.full(p1, h.v_omega)
        if self.spec.ssvs_weight:
            slab[1:] = np.where(params.gamma_weight > 0.5,
                                h.v_omega, h.v_omega * SSVS_SPIKE_FACTOR)
        return 1.0 / slab

    def _update_weight_params(self, state):
        """ARWMH on (beta_omega, log sigma_omega) or (lam_omega), using the
        allocation likelihood marginal over the slice levels."""
        d, h = self.data, self.spec.hyper
        params, latent, rng = state.params, state.latent, state.rng
        t = max(state.iteration, 1)
        z = latent.z
        prec = self._weight_prior_prec(params)
        scales = state.scales["weights"]

        if self.het:
            vec = params.lam_omega
            for k in range(vec.size):
                def logf(val, k=k):
                    v2 = vec.copy()
                    v2[k] = val
                    s = np.sqrt(np.exp(d.x @ v2))
                    lik = _ip_alloc_loglik(d.x, params.beta_omega, s, z)
                    return lik - 0.5 * prec[k] * val * val
                new, sc, _, _ = arwmh_step(logf, vec[k], scales[k], t, rng,
                                           self.config.target_accept,
                                           self.config.adapt_exponent)
                vec[k] = new
                scales[k] = sc
            return

        bo = params.beta_omega
        s_om = params.sigma_omega
        for k in range(bo.size):
            def logf(val, k=k):
                b2 = bo.copy()
                b2[k] = val
                lik = _ip_alloc_loglik(d.x, b2, np.full(d.n, s_om), z)
                return lik - 0.5 * prec[k] * val * val / (s_om * s_om)
            new, sc, _, _ = arwmh_step(logf, bo[k], scales[k], t, rng,
                                       self.config.target_accept,
                                       self.config.adapt_exponent)
            bo[k] = new
            scales[k] = sc

        def logf_s(log_s):
            s = math.exp(log_s)
            s2 = s * s
            lik = _ip_alloc_loglik(d.x, bo, np.full(d.n, s), z)
            # IG(a/2, a/2) density on s^2 plus the |d s^2 / d log s| jacobian,
            # then the scale's appearance in the coefficient prior N(0, s^2 slab)
            pri = (-(h.a_omega / 2.0 + 1.0) * 2.0 * log_s
                   - 0.5 * h.a_omega / s2 + 2.0 * log_s)
            quad = float(bo @ (prec * bo))
            pri += -bo.size * log_s - 0.5 * quad / s2
            return lik + pri

        new, sc, _, _ = arwmh_step(logf_s, math.log(s_om), scales[-1], t, rng,
                                   self.config.target_accept,
                                   self.config.adapt_exponent)
        params.sigma_omega = math.exp(new)
        scales[-1] = sc

    def _slice_step(self, state, y):
        d = self.data
        params, latent, rng = state.params, state.latent, state.rng
        centers = d.x @ params.beta_omega
        if params.sigma_omega is not None:
            s = np.full(d.n, params.sigma_omega)
        else:
            s = np.sqrt(np.exp(d.x @ params.lam_omega))
        w_cur = special.ndtr((latent.z - centers) / s) \
            - special.ndtr((latent.z - 1.0 - centers) / s)
        latent.u = rng.uniform(0.0, np.maximum(w_cur, 1e-300))
        new_z = np.empty(d.n, dtype=int)
        j_needed_lo, j_needed_hi = params.j_lo, params.j_hi
        for i in range(d.n):
            js = _ip_window_scan(centers[i], s[i], latent.u[i])
            params.ensure_window(js[0], js[-1], rng)
            if self.het:
                nan_idx = np.isnan(params.sigma2_atoms)
                if nan_idx.any():
                    h = self.spec.hyper
                    for pos in np.nonzero(nan_idx)[0]:
                        params.sigma2_atoms[pos] = _safe_invgamma(
                            0.5 * h.a0, 0.5 * h.a0, rng)
            idx = js - params.j_lo
            if self.het:
                logk = normal_logpdf(y[i], params.mu_atoms[idx],
                                     params.sigma2_atoms[idx] / d.w[i])
            else:
                logk = normal_logpdf(
                    y[i], params.mu_atoms[idx] + float(d.x[i] @ params.beta),
                    params.sigma2 / d.w[i])
            logk -= logk.max()
            probs = np.exp(logk)
            probs /= probs.sum()
            new_z[i] = js[int((rng.random() > np.cumsum(probs)).sum())]
        latent.z = new_z

    def _prune_window(self, state):
        params, latent = state.params, state.latent
        lo = int(latent.z.min()) - 1
        hi = int(latent.z.max()) + 1
        if lo > params.j_lo or hi < params.j_hi:
            lo = max(lo, params.j_lo)
            hi = min(hi, params.j_hi)
            a = lo - params.j_lo
            b = hi - params.j_lo + 1
            params.mu_atoms = params.mu_atoms[a:b]
            if params.sigma2_atoms is not None:
                params.sigma2_atoms = params.sigma2_atoms[a:b]
            params.j_lo = lo

    def draw_names(self):
        d = self.data
        names = []
        if not self.het:
            names += ["beta.%s" % c for c in d.x_names]
            names.append("sigma2")
        names.append("sigma_mu")
        names += ["beta_omega.%s" % c for c in d.x_names]
        if self.het:
            names += ["lam_omega.%s" % c for c in d.x_names]
        else:
            names.append("sigma_omega")
        if self.spec.ssvs_kernel and not self.het:
            names += ["gamma.%s" % c for c in d.x_names[1:]]
        if self.spec.ssvs_weight:
            names += ["gamma_omega.%s" % c for c in d.x_names[1:]]
        names += ["k_clusters"]
        return names

    def draw_row(self, state):
        params, latent = state.params, state.latent
        row = []
        if not self.het:
            row += list(params.beta)
            row.append(params.sigma2)
        row.append(params.sigma_mu)
        row += list(params.beta_omega)
        if self.het:
            row += list(params.lam_omega)
        else:
            row.append(params.sigma_omega)
        if self.spec.ssvs_kernel and not self.het:
            row += list(params.gamma_kernel)
        if self.spec.ssvs_weight:
            row += list(params.gamma_weight)
        row.append(float(np.unique(latent.z).size))
        return row


def ssvs_inclusion_prob(coef, spike_var, slab_var,
                        prior_inclusion=SSVS_PRIOR_INCLUSION):
    """Bernoulli full-conditional probability that a coefficient sits in the
    slab component rather than the spike, given its current value."""
    l1 = float(normal_logpdf(coef, 0.0, slab_var))
    l0 = float(normal_logpdf(coef, 0.0, spike_var))
    m = max(l1, l0)
    p1 = prior_inclusion * math.exp(l1 - m)
    p0 = (1.0 - prior_inclusion) * math.exp(l0 - m)
    return p1 / (p1 + p0)


def _ssvs_draw(coef, slab_var, rng):
    prob = ssvs_inclusion_prob(coef, slab_var * SSVS_SPIKE_FACTOR, slab_var)
    return 1.0 if rng.random() < prob else 0.0


def _ip_alloc_loglik(x, beta_omega, s, z):
    centers = x @ beta_omega
    w = special.ndtr((z - centers) / s) - special.ndtr((z - 1.0 - centers) / s)
    if np.any(w <= 0.0):
        return -math.inf
    return float(np.log(w).sum())


def _ip_window_scan(center, s, u):
    """Integer indices j with w_j(x) > u: a finite contiguous window around
    the central bin (weights are unimodal in j)."""
    j0 = int(math.floor(center)) + 1  # bin (j-1, j] containing the center
    js = []
    j = j0
    while True:
        w = special.ndtr((j - center) / s) - special.ndtr((j - 1.0 - center) / s)
        if w > u:
            js.append(j)
            j += 1
        else:
            break
    j = j0 - 1
    while True:
        w = special.ndtr((j - center) / s) - special.ndtr((j - 1.0 - center) / s)
        if w > u:
            js.append(j)
            j -= 1
        else:
            break
    if not js:
        js = [j0]
    return np.array(sorted(js), dtype=int)


_SAMPLERS = {
    "LinearNIG": _LinearNIGSampler,
    "HLM2": _HLM2Sampler,
    "DDPMixture": _DDPSampler,
    "InfiniteProbits": _InfiniteProbitsSampler,
}


def make_sampler(spec, data, config):
    validate_spec_for_data(spec, data)
    return _SAMPLERS[spec.family](spec, data, config)


def run_chain(spec, data, config, resume=None, progress=None, on_draw=None,
              cancel=None):
    """Advance the chain to ``config.total_iterations`` (a global target).

    Returns (ChainState, SampleStore delta).  ``resume`` continues a saved
    state — its rng stream and iteration counter included — so appending more
    iterations means resuming with a raised target.  Retained rows are the
    iterations divisible by the thinning interval, counted globally, so
    appended segments line up exactly.  ``progress(fraction, iteration)``
    fires about every 1% (at least every 100 iterations); ``on_draw(iteration,
    row, state)`` fires for each retained row; ``cancel()`` is polled between
    iterations and stops the run early, leaving a resumable state.
    """
    sampler = make_sampler(spec, data, config)
    if resume is None:
        rng = np.random.default_rng(config.rng_seed)
        state = sampler.init_state(rng)
    else:
        state = resume
    names = sampler.draw_names()
    store = SampleStore(["iteration"] + names, thin=config.thin,
                        burn_in=config.burn_in)
    t_start = state.iteration
    t_end = config.total_iterations
    segment = t_end - t_start
    if segment <= 0:
        return state, store
    step = max(1, min(100, segment // 100))
    while state.iteration < t_end:
        if cancel is not None and cancel():
            break
        state.iteration += 1
        sampler.cycle(state)
        if state.iteration % config.thin == 0:
            row = [float(state.iteration)] + [float(v) for v in
                                              sampler.draw_row(state)]
            _check_finite(row, state, spec)
            store.append(row)
            if on_draw is not None:
                on_draw(state.iteration, row, state)
        if progress is not None and (state.iteration - t_start) % step == 0:
            progress((state.iteration - t_start) / segment, state.iteration)
    return state, store


def _check_finite(row, state, spec):
    arr = np.asarray(row, dtype=float)
    if not np.all(np.isfinite(arr)):
        err = NumericError(
            "non-finite value in retained draw at iteration %d" % state.iteration)
        err.state_dump = state.to_jsonable(spec.family)
        raise err
