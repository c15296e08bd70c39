"""Model specifications, prior/likelihood evaluation, and mixture weights.

Four regression families share one interface:

LinearNIG        normal linear model, normal inverse-gamma prior
HLM2             2-level normal random-effects model
DDPMixture       infinite mixture of linear regressions driven by a
                 stick-breaking prior (see priors); atoms can mix the
                 intercept only, all coefficients, or coefficients and the
                 kernel variance
InfiniteProbits  doubly infinite mixture with probit-shaped, covariate
                 dependent weights and normal kernels

Each family has a hyperparameter record, a parameter record, and three
evaluation entry points: ``log_prior``, ``log_likelihood`` and
``mixture_density``.  Parameter records are value-semantic: ``copy()``
returns an independent deep copy, and ``to_jsonable``/``from_jsonable``
round-trip exactly through JSON for persistence.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from .data import DataTable, RoleAssignment, parse_censoring
from .errors import ValidationError
from .priors import StickPriorSpec, log_bessel_k, weights_from_sticks

MODEL_FAMILIES = ("LinearNIG", "HLM2", "DDPMixture", "InfiniteProbits")
LINKS = ("identity", "binary_probit")
MIXING_TARGETS = ("intercept_only", "coefficients", "coefficients_and_variance")

LOG_2PI = math.log(2.0 * math.pi)
SSVS_SPIKE_FACTOR = 1e-4
SSVS_PRIOR_INCLUSION = 0.5
INTERCEPT_NAME = "(Intercept)"


# ---------------------------------------------------------------------------
# density helpers (log scale, shape/rate conventions)

def normal_logpdf(y, mean, var):
    y = np.asarray(y, dtype=float)
    return -0.5 * (LOG_2PI + np.log(var) + (y - mean) ** 2 / var)


def invgamma_logpdf(x, shape, rate):
    """IG(shape, rate): density rate^shape/Gamma(shape) x^-(shape+1) e^(-rate/x)."""
    if x <= 0:
        return -math.inf
    return shape * math.log(rate) - special.gammaln(shape) \
        - (shape + 1.0) * math.log(x) - rate / x


def gamma_logpdf(x, shape, rate):
    if x <= 0:
        return -math.inf
    return shape * math.log(rate) - special.gammaln(shape) \
        + (shape - 1.0) * math.log(x) - rate * x


def beta_logpdf(x, a, b):
    if not 0.0 < x < 1.0:
        return -math.inf
    return (a - 1.0) * math.log(x) + (b - 1.0) * math.log1p(-x) - special.betaln(a, b)


def mvn_logpdf(x, mean, cov):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    d = x.size
    chol = np.linalg.cholesky(np.atleast_2d(cov))
    resid = np.linalg.solve(chol, x - mean)
    return -0.5 * (d * LOG_2PI + resid @ resid) - np.log(np.diag(chol)).sum()


def invwishart_logpdf(x, df, scale_mat):
    return float(stats.invwishart.logpdf(x, df=df, scale=scale_mat))


# ---------------------------------------------------------------------------
# hyperparameter records

@dataclass(frozen=True)
class LinearNIGHyper:
    """Normal linear model hyperparameters.

    The coefficient prior is beta | sigma2 ~ N(0, sigma2 * D) with
    D = diag(v_beta0, v_beta, ..., v_beta); ``improper_intercept`` drops the
    intercept from D entirely (flat prior).  sigma2 ~ IG(a0/2, a0/2)
    (shape/rate).
    """
    improper_intercept: bool = True
    v_beta0: float = 100.0
    v_beta: float = 100.0
    a0: float = 0.01

    def validate(self):
        if self.v_beta0 <= 0 or self.v_beta <= 0 or self.a0 <= 0:
            raise ValidationError("LinearNIG hyperparameters must be positive")


@dataclass(frozen=True)
class HLM2Hyper:
    improper_intercept: bool = True
    v_beta0: float = 100.0
    v_beta: float = 100.0
    a0: float = 0.01
    s0: float = 1.0

    def validate(self):
        if self.v_beta0 <= 0 or self.v_beta <= 0 or self.a0 <= 0 or self.s0 <= 0:
            raise ValidationError("HLM2 hyperparameters must be positive")


@dataclass(frozen=True)
class DDPHyper:
    """Mixture-of-regressions hyperparameters.

    Atom coefficients: beta_j ~ N(mu, T); mu ~ N(0, r0 I);
    T ~ IW(dim+2, s0 I); sigma2 (or per-atom sigma2_j) ~ IG(a0/2, a0/2);
    the DP precision gets alpha ~ Ga(a_alpha, b_alpha) (rate).  When the
    mixture only moves the intercept, the global slope coefficients get
    independent N(0, v_beta) priors.

    Defaults are the weakly informative settings used in the reference
    software's worked analysis; s0 in particular keeps the baseline
    covariance wide enough that newly born atoms can cover the response
    range of roughly unit- to ten-scale data.
    """
    a0: float = 2.0
    r0: float = 10.0
    s0: float = 10.0
    a_alpha: float = 1.0
    b_alpha: float = 1.0
    v_beta: float = 100.0

    def validate(self):
        vals = (self.a0, self.r0, self.s0, self.a_alpha, self.b_alpha, self.v_beta)
        if any(v <= 0 for v in vals):
            raise ValidationError("DDP hyperparameters must be positive")


@dataclass(frozen=True)
class InfiniteProbitsHyper:
    """Defaults follow the reference software's non-informative settings."""
    b_sigma_mu: float = 5.0
    v: float = 100.0
    a0: float = 0.01
    v_omega: float = 10.0
    a_omega: float = 0.01
    improper_intercept: bool = True
    v_beta0: float = 100.0

    def validate(self):
        vals = (self.b_sigma_mu, self.v, self.a0, self.v_omega, self.a_omega,
                self.v_beta0)
        if any(x <= 0 for x in vals):
            raise ValidationError("InfiniteProbits hyperparameters must be positive")


_HYPER_TYPES = {
    "LinearNIG": LinearNIGHyper,
    "HLM2": HLM2Hyper,
    "DDPMixture": DDPHyper,
    "InfiniteProbits": InfiniteProbitsHyper,
}


# ---------------------------------------------------------------------------
# model specification

@dataclass(frozen=True)
class ModelSpec:
    """Family + link + family-specific structure, validated on construction."""
    family: str
    link: str = "identity"
    mixing_target: str = None
    stick_prior: StickPriorSpec = None
    heteroscedastic: bool = False
    ssvs_kernel: bool = False
    ssvs_weight: bool = False
    hyper: object = None

    def __post_init__(self):
        if self.family not in MODEL_FAMILIES:
            raise ValidationError("unknown model family %r" % (self.family,))
        if self.link not in LINKS:
            raise ValidationError("unknown link %r" % (self.link,))
        if self.family == "DDPMixture":
            if self.mixing_target not in MIXING_TARGETS:
                raise ValidationError(
                    "DDPMixture needs mixing_target in %s" % (MIXING_TARGETS,))
            if self.stick_prior is None:
                object.__setattr__(self, "stick_prior", StickPriorSpec("dp", alpha=1.0))
            if not isinstance(self.stick_prior, StickPriorSpec):
                raise ValidationError("stick_prior must be a StickPriorSpec")
        else:
            if self.mixing_target is not None:
                raise ValidationError("mixing_target applies to DDPMixture only")
            if self.stick_prior is not None:
                raise ValidationError("stick_prior applies to DDPMixture only")
        if self.family != "InfiniteProbits":
            if self.heteroscedastic or self.ssvs_kernel or self.ssvs_weight:
                raise ValidationError(
                    "heteroscedastic / ssvs flags apply to InfiniteProbits only")
        if self.hyper is None:
            object.__setattr__(self, "hyper", _HYPER_TYPES[self.family]())
        if not isinstance(self.hyper, _HYPER_TYPES[self.family]):
            raise ValidationError(
                "hyper must be a %s" % _HYPER_TYPES[self.family].__name__)
        self.hyper.validate()

    def to_dict(self):
        d = {"family": self.family, "link": self.link}
        if self.family == "DDPMixture":
            d["mixing_target"] = self.mixing_target
            d["stick_prior"] = self.stick_prior.to_dict()
        if self.family == "InfiniteProbits":
            d["heteroscedastic"] = self.heteroscedastic
            d["ssvs_kernel"] = self.ssvs_kernel
            d["ssvs_weight"] = self.ssvs_weight
        d["hyper"] = {k: getattr(self.hyper, k) for k in self.hyper.__dataclass_fields__}
        return d

    @classmethod
    def from_dict(cls, d):
        family = d["family"]
        if family not in _HYPER_TYPES:
            raise ValidationError("unknown model family %r" % (family,))
        hyper = _HYPER_TYPES[family](**d.get("hyper", {}))
        kwargs = dict(family=family, link=d.get("link", "identity"), hyper=hyper)
        if family == "DDPMixture":
            kwargs["mixing_target"] = d["mixing_target"]
            kwargs["stick_prior"] = StickPriorSpec.from_dict(d["stick_prior"])
        if family == "InfiniteProbits":
            kwargs["heteroscedastic"] = d.get("heteroscedastic", False)
            kwargs["ssvs_kernel"] = d.get("ssvs_kernel", False)
            kwargs["ssvs_weight"] = d.get("ssvs_weight", False)
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# design snapshot

@dataclass
class RegressionData:
    """Numeric view of a table under a role assignment: y, X (leading
    intercept column of ones), weights, optional level-2 grouping, optional
    censoring marks."""
    y: np.ndarray
    x: np.ndarray
    x_names: list
    w: np.ndarray
    groups: np.ndarray = None          # int codes 0..n_groups-1, or None
    group_labels: np.ndarray = None
    censoring: list = None             # CensorStatus per row, or None

    @property
    def n(self):
        return self.y.size

    @property
    def p(self):
        """Number of covariates, excluding the intercept column."""
        return self.x.shape[1] - 1

    @property
    def n_groups(self):
        if self.groups is None:
            return None
        return int(self.groups.max()) + 1 if self.groups.size else 0

    def rows_of_group(self, h):
        return np.nonzero(self.groups == h)[0]


def build_design(table, roles):
    """Extract (y, X, w, groups, censoring) arrays from a table.

    X gets a leading intercept column of ones.  Missing values in any role
    column are an error, except the dependent value on a censored row.
    """
    if not isinstance(table, DataTable):
        raise ValidationError("expected a DataTable")
    roles.validate(table)
    y = table.column(roles.dependent)[0].copy()
    n = table.n_rows
    cols = [np.ones(n)]
    names = [INTERCEPT_NAME]
    for c in roles.covariates:
        v, miss = table.column(c)
        if miss.any():
            bad = int(np.nonzero(miss)[0][0]) + 1
            raise ValidationError(
                "covariate %r has a missing value at data row %d" % (c, bad))
        cols.append(v)
        names.append(c)
    x = np.column_stack(cols)

    if roles.weights is not None:
        w, miss = table.column(roles.weights)
        if miss.any() or (w <= 0).any():
            raise ValidationError("weights must be positive and observed on every row")
        w = w.copy()
    else:
        w = np.ones(n)

    groups = labels = None
    if roles.group_level2 is not None:
        g, miss = table.column(roles.group_level2)
        if miss.any():
            raise ValidationError("level-2 group column has missing values")
        labels, groups = np.unique(g, return_inverse=True)

    censoring = None
    if roles.censor_lb is not None:
        censoring = parse_censoring(table, roles.censor_lb, roles.censor_ub,
                                    y_col=roles.dependent)
        for i, st in enumerate(censoring):
            if st.kind == "uncensored" and math.isnan(y[i]):
                raise ValidationError(
                    "dependent value missing on uncensored data row %d" % (i + 1))
    else:
        if np.isnan(y).any():
            bad = int(np.nonzero(np.isnan(y))[0][0]) + 1
            raise ValidationError("dependent value missing at data row %d" % bad)

    return RegressionData(y=y, x=x, x_names=names, w=w, groups=groups,
                          group_labels=labels, censoring=censoring)


def validate_spec_for_data(spec, data):
    """Family/link/data compatibility checks shared by samplers and the CLI."""
    if spec.link == "binary_probit":
        if data.censoring is not None:
            raise ValidationError("censoring is not supported with a binary link")
        obs = data.y[~np.isnan(data.y)]
        if not np.isin(obs, (0.0, 1.0)).all():
            raise ValidationError("binary_probit requires dependent values in {0,1}")
    if spec.family == "HLM2" and data.groups is None:
        raise ValidationError("HLM2 requires a level-2 group column")
    if spec.family == "HLM2" and data.n_groups < 2:
        raise ValidationError("HLM2 needs at least two level-2 groups")


def _stick_weight_lines(stick):
    """Plain-text lines describing a stick-breaking weight prior."""
    head = "weights: w_j = v_j * prod_{l<j} (1 - v_l)"
    if stick.family == "dp":
        return [head, "  v_j ~ Beta(1, alpha), alpha ~ Gamma(a, b) learned from the data"]
    if stick.family == "pitman_yor":
        return [head, "  v_j ~ Beta(1 - %g, %g + j * %g)" % (stick.a, stick.b, stick.a)]
    if stick.family == "normalized_stable":
        return [head, "  v_j ~ Beta(1 - %g, j * %g)" % (stick.a, stick.a)]
    if stick.family == "beta_two_param":
        return [head, "  v_j ~ Beta(%g, %g), independent across j" % (stick.a, stick.b)]
    if stick.family == "geometric":
        return [head, "  v_j = v shared by every component, v ~ Beta(%g, %g)"
                % (stick.a, stick.b)]
    return [head,
            "  v_j from the normalized inverse-Gaussian construction, c = %g"
            % (stick.c,)]


def describe_spec(spec, x_names=None):
    """Structured plain-language description of a model specification.

    Returns ``{"family", "link", "title", "lines", "hyper"}`` where ``lines``
    is a list of formula strings with the hyperparameter values in effect.
    Front-ends render this instead of re-deriving the defaults client-side.
    ``x_names`` (design column names, intercept first) refines the wording
    when known.
    """
    h = spec.hyper
    p = max(len(x_names) - 1, 0) if x_names else None
    binary = spec.link == "binary_probit"
    lines = []

    def resp(mean, scale="sigma^2"):
        if binary:
            lines.append("Pr(y_i = 1 | x_i) = Phi(%s)   [latent scale fixed at 1]"
                         % mean)
        else:
            lines.append("y_i | x_i ~ Normal(%s, %s / w_i)" % (mean, scale))

    def coef_priors(slope_var, scaled=True):
        tail = " * sigma^2" if scaled and not binary else ""
        if h.improper_intercept:
            lines.append("intercept: flat (improper) prior")
        else:
            lines.append("intercept ~ Normal(0, %g%s)" % (h.v_beta0, tail))
        if p != 0:
            lines.append("each slope ~ Normal(0, %g%s)" % (slope_var, tail))

    def sigma2_line():
        if not binary:
            lines.append("sigma^2 ~ InvGamma(%g/2, %g/2)" % (h.a0, h.a0))

    if spec.family == "LinearNIG":
        title = "Linear model, conjugate normal / inverse-gamma prior"
        resp("x_i'b")
        coef_priors(h.v_beta)
        sigma2_line()
    elif spec.family == "HLM2":
        title = "Two-level hierarchical linear model"
        resp("x_i'(b + u_g[i])")
        lines.append("group offsets u_g ~ Normal(0, T) across level-2 groups")
        lines.append("T ~ InvWishart(q + 2, %g * I), q = design columns" % h.s0)
        coef_priors(h.v_beta)
        sigma2_line()
    elif spec.family == "DDPMixture":
        title = "Stick-breaking mixture of regression kernels"
        if spec.mixing_target == "intercept_only":
            resp("m_z[i] + x_i'g")
            lines.append("mixture over intercepts m_j; slopes g shared by all components")
            if p != 0:
                lines.append("shared slopes g ~ Normal(0, %g * I)" % h.v_beta)
        elif spec.mixing_target == "coefficients":
            resp("x_i'b_z[i]")
            lines.append("mixture over full coefficient vectors b_j")
        else:
            resp("x_i'b_z[i]", scale="s2_z[i]")
            lines.append("each component has its own coefficients b_j and variance s2_j")
        lines += _stick_weight_lines(spec.stick_prior)
        if spec.stick_prior.family == "dp":
            lines.append("alpha ~ Gamma(%g, %g)" % (h.a_alpha, h.b_alpha))
        lines.append("component parameters ~ Normal(mu, T); "
                     "mu ~ Normal(0, %g * I); T ~ InvWishart(dim + 2, %g * I)"
                     % (h.r0, h.s0))
        if spec.mixing_target == "coefficients_and_variance":
            lines.append("s2_j ~ InvGamma(%g/2, %g/2)" % (h.a0, h.a0))
        else:
            sigma2_line()
    else:
        title = "Mixture with probit-score component weights"
        if spec.heteroscedastic:
            resp("m_z[i]", scale="s2_z[i]")
            lines.append("each component has its own mean m_j and variance s2_j; "
                         "s2_j ~ InvGamma(%g/2, %g/2)" % (h.a0, h.a0))
        else:
            resp("m_z[i] + x_i'b")
            coef_priors(h.v, scaled=True)
            sigma2_line()
        lines.append("component means m_j ~ Normal(0, sigma_mu^2), "
                     "sigma_mu ~ Uniform(0, %g)" % h.b_sigma_mu)
        lines.append("component index: z_i = j when j-1 < s_i <= j for a "
                     "latent score s_i ~ Normal(x_i'b_w, s_w(x_i)^2)")
        if spec.heteroscedastic:
            lines.append("log s_w(x)^2 = x'lam_w; lam_w ~ Normal(0, %g * I)"
                         % h.v_omega)
        else:
            lines.append("s_w constant; s_w^2 ~ InvGamma(%g/2, %g/2); "
                         "b_w ~ Normal(0, %g * s_w^2 * I)"
                         % (h.a_omega, h.a_omega, h.v_omega))
        flags = []
        if spec.ssvs_kernel:
            flags.append("kernel slopes b")
        if spec.ssvs_weight:
            flags.append("weight slopes b_w" if not spec.heteroscedastic
                         else "weight-scale slopes lam_w")
        if flags:
            lines.append("spike-and-slab variable selection on: " + ", ".join(flags))
    if binary:
        lines.append("binary responses enter through latent Normal scores "
                     "truncated to the observed side of zero")
    return {"family": spec.family, "link": spec.link, "title": title,
            "lines": lines,
            "hyper": {k: getattr(h, k) for k in h.__dataclass_fields__}}


# ---------------------------------------------------------------------------
# parameter records

def _copy_arr(a):
    return None if a is None else np.array(a, dtype=float, copy=True)


def _jsonable(a):
    return None if a is None else np.asarray(a, dtype=float).tolist()


@dataclass
class LinearNIGParams:
    beta: np.ndarray
    sigma2: float

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        if not self.sigma2 > 0:
            raise ValidationError("sigma2 must be positive")

    def copy(self):
        return LinearNIGParams(self.beta.copy(), self.sigma2)

    def to_jsonable(self):
        return {"beta": _jsonable(self.beta), "sigma2": self.sigma2}

    @classmethod
    def from_jsonable(cls, d):
        return cls(np.asarray(d["beta"]), d["sigma2"])


@dataclass
class HLM2Params:
    beta: np.ndarray
    u: np.ndarray                      # (n_groups, p+1) random coefficients
    sigma2: float
    t_cov: np.ndarray                  # (p+1, p+1) SPD

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.u = np.atleast_2d(np.asarray(self.u, dtype=float))
        self.t_cov = np.atleast_2d(np.asarray(self.t_cov, dtype=float))
        if not self.sigma2 > 0:
            raise ValidationError("sigma2 must be positive")
        if not np.allclose(self.t_cov, self.t_cov.T):
            raise ValidationError("T must be symmetric")
        if np.linalg.eigvalsh(self.t_cov).min() <= 0:
            raise ValidationError("T must be positive definite")

    def copy(self):
        return HLM2Params(self.beta.copy(), self.u.copy(), self.sigma2,
                          self.t_cov.copy())

    def to_jsonable(self):
        return {"beta": _jsonable(self.beta), "u": _jsonable(self.u),
                "sigma2": self.sigma2, "t_cov": _jsonable(self.t_cov)}

    @classmethod
    def from_jsonable(cls, d):
        return cls(np.asarray(d["beta"]), np.asarray(d["u"]), d["sigma2"],
                   np.asarray(d["t_cov"]))


@dataclass
class DDPParams:
    """State of the stick-breaking mixture of linear models.

    ``atoms`` is (J, d): d = 1 when only the intercept mixes (then
    ``global_slopes`` carries the remaining coefficients), else d = p+1.
    ``sigma2_atoms`` is set exactly when the kernel variance mixes.
    """
    atoms: np.ndarray
    sticks: np.ndarray
    mu: np.ndarray
    t_cov: np.ndarray
    sigma2: float = None
    sigma2_atoms: np.ndarray = None
    global_slopes: np.ndarray = None
    alpha: float = None               # DP precision (hyperprior-equipped)

    def __post_init__(self):
        self.atoms = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        self.sticks = np.asarray(self.sticks, dtype=float)
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        self.t_cov = np.atleast_2d(np.asarray(self.t_cov, dtype=float))
        if self.sigma2_atoms is not None:
            self.sigma2_atoms = np.asarray(self.sigma2_atoms, dtype=float)
        if self.global_slopes is not None:
            self.global_slopes = np.asarray(self.global_slopes, dtype=float)
        if self.atoms.shape[0] != self.sticks.size:
            raise ValidationError("one stick per atom required")
        if np.any((self.sticks <= 0) | (self.sticks >= 1)):
            raise ValidationError("sticks must lie in (0,1)")
        if (self.sigma2 is None) == (self.sigma2_atoms is None):
            raise ValidationError("exactly one of sigma2 / sigma2_atoms must be set")

    @property
    def n_atoms(self):
        return self.atoms.shape[0]

    def weights(self):
        return weights_from_sticks(self.sticks)

    def copy(self):
        return DDPParams(self.atoms.copy(), self.sticks.copy(), self.mu.copy(),
                         self.t_cov.copy(), self.sigma2,
                         _copy_arr(self.sigma2_atoms), _copy_arr(self.global_slopes),
                         self.alpha)

    def to_jsonable(self):
        return {"atoms": _jsonable(self.atoms), "sticks": _jsonable(self.sticks),
                "mu": _jsonable(self.mu), "t_cov": _jsonable(self.t_cov),
                "sigma2": self.sigma2, "sigma2_atoms": _jsonable(self.sigma2_atoms),
                "global_slopes": _jsonable(self.global_slopes), "alpha": self.alpha}

    @classmethod
    def from_jsonable(cls, d):
        arr = lambda k: None if d[k] is None else np.asarray(d[k])
        return cls(np.asarray(d["atoms"]), np.asarray(d["sticks"]),
                   np.asarray(d["mu"]), np.asarray(d["t_cov"]), d["sigma2"],
                   arr("sigma2_atoms"), arr("global_slopes"), d["alpha"])


@dataclass
class InfiniteProbitsParams:
    """State of the probit-weighted mixture.

    Atom intercepts are materialized on the integer window
    [j_lo, j_lo + len(mu_atoms) - 1]; indices outside it implicitly carry
    fresh N(0, sigma_mu^2) draws.  Homoscedastic states use (beta, sigma2)
    normal kernels with means mu_j + x'beta; the heteroscedastic variant
    drops beta and uses covariate-free kernels with per-atom variances
    sigma2_atoms and weight scale sqrt(exp(x'lam_omega)).
    """
    j_lo: int
    mu_atoms: np.ndarray
    sigma_mu: float
    beta_omega: np.ndarray
    beta: np.ndarray = None
    sigma2: float = None
    sigma_omega: float = None
    lam_omega: np.ndarray = None
    sigma2_atoms: np.ndarray = None
    gamma_kernel: np.ndarray = None    # 0/1 per slope when SSVS is on
    gamma_weight: np.ndarray = None

    def __post_init__(self):
        self.mu_atoms = np.atleast_1d(np.asarray(self.mu_atoms, dtype=float))
        self.beta_omega = np.asarray(self.beta_omega, dtype=float)
        if self.beta is not None:
            self.beta = np.asarray(self.beta, dtype=float)
        if self.lam_omega is not None:
            self.lam_omega = np.asarray(self.lam_omega, dtype=float)
        if self.sigma2_atoms is not None:
            self.sigma2_atoms = np.asarray(self.sigma2_atoms, dtype=float)
        if not self.sigma_mu > 0:
            raise ValidationError("sigma_mu must be positive")
        if (self.sigma_omega is None) == (self.lam_omega is None):
            raise ValidationError("exactly one of sigma_omega / lam_omega must be set")
        if self.sigma_omega is not None and not self.sigma_omega > 0:
            raise ValidationError("sigma_omega must be positive")
        het = self.lam_omega is not None
        if het:
            if self.sigma2_atoms is None or self.sigma2_atoms.size != self.mu_atoms.size:
                raise ValidationError(
                    "heteroscedastic state needs one kernel variance per atom")
        else:
            if self.beta is None or self.sigma2 is None or not self.sigma2 > 0:
                raise ValidationError("homoscedastic state needs beta and sigma2 > 0")

    @property
    def j_hi(self):
        return self.j_lo + self.mu_atoms.size - 1

    def window(self):
        return np.arange(self.j_lo, self.j_lo + self.mu_atoms.size)

    def atom_value(self, j):
        return self.mu_atoms[j - self.j_lo]

    def ensure_window(self, j_from, j_to, rng):
        """Materialize atoms over [j_from, j_to], drawing new intercepts from
        N(0, sigma_mu^2) (and, heteroscedastic, fresh kernel variances are the
        caller's job via the returned count masks)."""
        if j_from < self.j_lo:
            k = self.j_lo - j_from
            new = rng.normal(0.0, self.sigma_mu, size=k)
            self.mu_atoms = np.concatenate([new, self.mu_atoms])
            if self.sigma2_atoms is not None:
                self.sigma2_atoms = np.concatenate(
                    [np.full(k, np.nan), self.sigma2_atoms])
            self.j_lo = j_from
        if j_to > self.j_hi:
            k = j_to - self.j_hi
            new = rng.normal(0.0, self.sigma_mu, size=k)
            self.mu_atoms = np.concatenate([self.mu_atoms, new])
            if self.sigma2_atoms is not None:
                self.sigma2_atoms = np.concatenate(
                    [self.sigma2_atoms, np.full(k, np.nan)])

    def copy(self):
        return InfiniteProbitsParams(
            self.j_lo, self.mu_atoms.copy(), self.sigma_mu, self.beta_omega.copy(),
            _copy_arr(self.beta), self.sigma2, self.sigma_omega,
            _copy_arr(self.lam_omega), _copy_arr(self.sigma2_atoms),
            _copy_arr(self.gamma_kernel), _copy_arr(self.gamma_weight))

    def to_jsonable(self):
        return {"j_lo": self.j_lo, "mu_atoms": _jsonable(self.mu_atoms),
                "sigma_mu": self.sigma_mu, "beta_omega": _jsonable(self.beta_omega),
                "beta": _jsonable(self.beta), "sigma2": self.sigma2,
                "sigma_omega": self.sigma_omega, "lam_omega": _jsonable(self.lam_omega),
                "sigma2_atoms": _jsonable(self.sigma2_atoms),
                "gamma_kernel": _jsonable(self.gamma_kernel),
                "gamma_weight": _jsonable(self.gamma_weight)}

    @classmethod
    def from_jsonable(cls, d):
        arr = lambda k: None if d[k] is None else np.asarray(d[k])
        return cls(int(d["j_lo"]), np.asarray(d["mu_atoms"]), d["sigma_mu"],
                   np.asarray(d["beta_omega"]), arr("beta"), d["sigma2"],
                   d["sigma_omega"], arr("lam_omega"), arr("sigma2_atoms"),
                   arr("gamma_kernel"), arr("gamma_weight"))


@dataclass
class LatentState:
    """Sampler-owned latent variables: allocations and slice levels per
    mixture unit (rows, or level-2 groups for grouped mixtures), probit
    scores, censored imputations."""
    z: np.ndarray = None
    u: np.ndarray = None
    ystar: np.ndarray = None
    y_imputed: np.ndarray = None

    def copy(self):
        c = lambda a: None if a is None else np.array(a, copy=True)
        return LatentState(
            None if self.z is None else np.array(self.z, copy=True),
            c(self.u), c(self.ystar), c(self.y_imputed))

    def to_jsonable(self):
        return {"z": None if self.z is None else np.asarray(self.z).tolist(),
                "u": _jsonable(self.u), "ystar": _jsonable(self.ystar),
                "y_imputed": _jsonable(self.y_imputed)}

    @classmethod
    def from_jsonable(cls, d):
        z = None if d["z"] is None else np.asarray(d["z"], dtype=int)
        arr = lambda k: None if d[k] is None else np.asarray(d[k], dtype=float)
        return cls(z, arr("u"), arr("ystar"), arr("y_imputed"))


# ---------------------------------------------------------------------------
# probit-shaped mixture weights

def ip_mixture_weights(x, beta_omega, j_values, sigma_omega=None, lam_omega=None):
    """Weights w_j(x) = Phi((j - x'b)/s(x)) - Phi((j-1 - x'b)/s(x)).

    s(x) is the constant sigma_omega, or sqrt(exp(x'lam_omega)) when
    lam_omega is given instead.  Nonnegative, sums to 1 over all of Z.
    """
    x = np.asarray(x, dtype=float)
    center = float(x @ np.asarray(beta_omega, dtype=float))
    if (sigma_omega is None) == (lam_omega is None):
        raise ValidationError("pass exactly one of sigma_omega / lam_omega")
    if sigma_omega is not None:
        s = float(sigma_omega)
    else:
        s = math.sqrt(math.exp(float(x @ np.asarray(lam_omega, dtype=float))))
    if not s > 0:
        raise ValidationError("weight scale must be positive")
    j = np.asarray(j_values, dtype=float)
    return special.ndtr((j - center) / s) - special.ndtr((j - 1.0 - center) / s)


def ip_weight_center_scale(x, params):
    """(x'beta_omega, s(x)) for a parameter state."""
    x = np.asarray(x, dtype=float)
    center = float(x @ params.beta_omega)
    if params.sigma_omega is not None:
        s = params.sigma_omega
    else:
        s = math.sqrt(math.exp(float(x @ params.lam_omega)))
    return center, s


# ---------------------------------------------------------------------------
# probit augmentation

def probit_augment_bounds(y_binary):
    """Truncation interval for the latent score: y=1 -> (0, inf), y=0 -> (-inf, 0]."""
    y = float(y_binary)
    if y == 1.0:
        return (0.0, math.inf)
    if y == 0.0:
        return (-math.inf, 0.0)
    raise ValidationError("binary dependent values must be 0 or 1, got %r" % (y_binary,))


# ---------------------------------------------------------------------------
# log prior

def _ddp_stick_logprior(spec_prior, sticks):
    """Joint log density of the stick fractions under any supported family,
    as a product of sequential conditionals (normalized)."""
    sticks = np.asarray(sticks, dtype=float)
    if np.any((sticks <= 0) | (sticks >= 1)):
        return -math.inf
    fam = spec_prior.family
    if fam == "geometric":
        if sticks.size and not np.allclose(sticks, sticks[0]):
            return -math.inf
        return beta_logpdf(sticks[0], spec_prior.a, spec_prior.b) if sticks.size else 0.0
    if fam == "nig":
        total = 0.0
        log_remaining = 0.0
        for j0, v in enumerate(sticks):
            total += nig_stick_conditional_logpdf(
                spec_prior.c, j0 + 1, math.exp(-log_remaining), v)
            log_remaining += math.log1p(-v)
        return total
    total = 0.0
    for j0, v in enumerate(sticks):
        a_j, b_j = spec_prior.beta_params(j0 + 1)
        total += beta_logpdf(v, a_j, b_j)
    return total


def _nig_stick_lognorm(c, j, psi):
    """log of the normalizer of the raw conditional stick density.

    Substituting v = t^2 removes the integrable v^(-1/2) endpoint
    singularity: integral raw dv = integral 2 t raw(t^2) dt, smooth on [0,1).
    """
    from scipy.integrate import quad

    def logh(t):
        if t <= 0.0:
            t = 1e-300
        return math.log(2.0 * t) + _nig_stick_lograw(c, j, psi, t * t)

    grid = np.linspace(1e-8, 1.0 - 1e-8, 101)
    peak = max(logh(t) for t in grid)
    val, _ = quad(lambda t: math.exp(logh(t) - peak), 0.0, 1.0, limit=200)
    return peak + math.log(val)


def _nig_stick_lograw(c, j, psi, v):
    arg = c * math.sqrt(psi) / math.sqrt(1.0 - v)
    return (-0.5 * math.log(v) + 0.25 * (j - 5.0) * math.log1p(-v)
            + log_bessel_k(0.5 * (j + 1.0), arg))


def nig_stick_conditional_logpdf(c, j, psi, v):
    """Normalized log density of the j-th stick fraction given the mass
    remaining before it (psi = 1 / prod_{l<j} (1 - v_l) >= 1).

    Derived by changing variables in the (generalized inverse-Gaussian,
    inverse-gamma) pair that generates the fraction and integrating out the
    total: proportional to v^(-1/2) (1-v)^((j-5)/4) K_((j+1)/2)(c sqrt(psi/(1-v))).
    """
    if not 0.0 < v < 1.0:
        return -math.inf
    return _nig_stick_lograw(c, j, psi, v) - _nig_stick_lognorm(c, j, psi)


def log_prior(spec, params):
    """Joint log prior density of a parameter state.  Out-of-support states
    return -inf; the improper flat intercept contributes zero."""
    h = spec.hyper
    fam = spec.family
    if fam == "LinearNIG":
        return _linear_nig_logprior(params.beta, params.sigma2, h,
                                    fixed_sigma2=spec.link == "binary_probit")
    if fam == "HLM2":
        total = _linear_nig_logprior(params.beta, params.sigma2, h,
                                     fixed_sigma2=spec.link == "binary_probit")
        if not math.isfinite(total):
            return total
        q = params.u.shape[1]
        total += invwishart_logpdf(params.t_cov, q + 2, h.s0 * np.eye(q))
        for uh in params.u:
            total += mvn_logpdf(uh, np.zeros(q), params.t_cov)
        return total
    if fam == "DDPMixture":
        return _ddp_logprior(spec, params)
    return _ip_logprior(spec, params)


def _linear_nig_logprior(beta, sigma2, h, fixed_sigma2=False):
    if not sigma2 > 0:
        return -math.inf
    total = 0.0
    if not fixed_sigma2:
        total += invgamma_logpdf(sigma2, h.a0 / 2.0, h.a0 / 2.0)
    if not h.improper_intercept:
        total += float(normal_logpdf(beta[0], 0.0, sigma2 * h.v_beta0))
    total += float(normal_logpdf(beta[1:], 0.0, sigma2 * h.v_beta).sum())
    return total


def _ddp_logprior(spec, params):
    h = spec.hyper
    total = _ddp_stick_logprior(spec.stick_prior, params.sticks)
    if not math.isfinite(total):
        return total
    d = params.atoms.shape[1]
    for bj in params.atoms:
        total += mvn_logpdf(bj, params.mu, params.t_cov)
    total += float(normal_logpdf(params.mu, 0.0, h.r0).sum())
    total += invwishart_logpdf(params.t_cov, d + 2, h.s0 * np.eye(d))
    if params.sigma2_atoms is not None:
        for s2 in params.sigma2_atoms:
            total += invgamma_logpdf(s2, h.a0 / 2.0, h.a0 / 2.0)
    else:
        total += invgamma_logpdf(params.sigma2, h.a0 / 2.0, h.a0 / 2.0)
    if params.global_slopes is not None and params.global_slopes.size:
        total += float(normal_logpdf(params.global_slopes, 0.0, h.v_beta).sum())
    if spec.stick_prior.family == "dp":
        if params.alpha is None or not params.alpha > 0:
            return -math.inf
        total += gamma_logpdf(params.alpha, h.a_alpha, h.b_alpha)
    return total


def _ip_logprior(spec, params):
    h = spec.hyper
    if not 0.0 < params.sigma_mu < h.b_sigma_mu:
        return -math.inf
    total = -math.log(h.b_sigma_mu)   # uniform(0, b_sigma_mu) on sigma_mu
    total += float(normal_logpdf(params.mu_atoms, 0.0, params.sigma_mu ** 2).sum())
    if spec.heteroscedastic:
        for s2 in params.sigma2_atoms:
            if not np.isnan(s2):
                total += invgamma_logpdf(float(s2), h.a0 / 2.0, h.a0 / 2.0)
        slab = np.full(params.lam_omega.size, h.v_omega)
        if spec.ssvs_weight:
            sw = _ssvs_variances(params.gamma_weight, h.v_omega)
            slab[1:] = sw
            total += _ssvs_indicator_logmass(params.gamma_weight)
        total += float(normal_logpdf(params.lam_omega, 0.0, slab).sum())
        return total
    # homoscedastic: kernel side
    if not params.sigma2 > 0 or not params.sigma_omega > 0:
        return -math.inf
    total += invgamma_logpdf(params.sigma2, h.a0 / 2.0, h.a0 / 2.0)
    kern_var = np.full(params.beta.size, h.v * params.sigma2)
    if spec.ssvs_kernel:
        kern_var[1:] = _ssvs_variances(params.gamma_kernel, h.v) * params.sigma2
        total += _ssvs_indicator_logmass(params.gamma_kernel)
    if h.improper_intercept:
        total += float(normal_logpdf(params.beta[1:], 0.0, kern_var[1:]).sum())
    else:
        kern_var[0] = h.v_beta0 * params.sigma2
        total += float(normal_logpdf(params.beta, 0.0, kern_var).sum())
    # weight side
    s_om2 = params.sigma_omega ** 2
    total += invgamma_logpdf(s_om2, h.a_omega / 2.0, h.a_omega / 2.0)
    w_var = np.full(params.beta_omega.size, h.v_omega * s_om2)
    if spec.ssvs_weight:
        w_var[1:] = _ssvs_variances(params.gamma_weight, h.v_omega) * s_om2
        total += _ssvs_indicator_logmass(params.gamma_weight)
    total += float(normal_logpdf(params.beta_omega, 0.0, w_var).sum())
    return total


def _ssvs_variances(gamma, slab):
    gamma = np.asarray(gamma, dtype=float)
    return np.where(gamma > 0.5, slab, slab * SSVS_SPIKE_FACTOR)


def _ssvs_indicator_logmass(gamma):
    return float(np.asarray(gamma).size) * math.log(SSVS_PRIOR_INCLUSION)


# ---------------------------------------------------------------------------
# mixture density and likelihood

def ddp_kernel_means(params, x):
    """Kernel means per atom at covariate row x: (J,) array."""
    x = np.asarray(x, dtype=float)
    if params.global_slopes is not None:
        base = float(x[1:] @ params.global_slopes) if x.size > 1 else 0.0
        return params.atoms[:, 0] + base
    return params.atoms @ x


def ddp_kernel_variances(params):
    if params.sigma2_atoms is not None:
        return params.sigma2_atoms
    return np.full(params.n_atoms, params.sigma2)


def mixture_density(spec, params, y, x):
    """f(y | x) at the current parameter state.

    Mixtures are evaluated over the realized atoms; the unrealized tail is
    integrated against the baseline analytically when the kernel variance is
    shared (a single normal term), and folded in by renormalization when
    each atom has its own variance (documented approximation of order the
    tail mass).
    """
    x = np.asarray(x, dtype=float)
    fam = spec.family
    if fam == "LinearNIG":
        return float(np.exp(normal_logpdf(y, float(x @ params.beta), params.sigma2)))
    if fam == "HLM2":
        # marginal over the random coefficients of a *new* group
        var = params.sigma2 + float(x @ params.t_cov @ x)
        return float(np.exp(normal_logpdf(y, float(x @ params.beta), var)))
    if fam == "DDPMixture":
        ws = params.weights()
        means = ddp_kernel_means(params, x)
        varis = ddp_kernel_variances(params)
        dens = float(np.exp(normal_logpdf(y, means, varis)) @ ws.weights)
        resid = ws.truncation_mass
        if resid > 0.0:
            if params.sigma2_atoms is None:
                if params.global_slopes is not None:
                    base = float(x[1:] @ params.global_slopes) if x.size > 1 else 0.0
                    t_mean = params.mu[0] + base
                    t_var = params.sigma2 + params.t_cov[0, 0]
                else:
                    t_mean = float(x @ params.mu)
                    t_var = params.sigma2 + float(x @ params.t_cov @ x)
                dens += resid * float(np.exp(normal_logpdf(y, t_mean, t_var)))
            else:
                dens /= max(1.0 - resid, 1e-300)
        return dens
    # InfiniteProbits
    center, s = ip_weight_center_scale(x, params)
    j = params.window()
    w = special.ndtr((j - center) / s) - special.ndtr((j - 1.0 - center) / s)
    if spec.heteroscedastic:
        ok = ~np.isnan(params.sigma2_atoms)
        means = params.mu_atoms[ok]
        varis = params.sigma2_atoms[ok]
        w_ok = w[ok]
        dens = float(np.exp(normal_logpdf(y, means, varis)) @ w_ok)
        resid = 1.0 - float(w_ok.sum())
        if resid > 0:
            dens /= max(1.0 - resid, 1e-300)
        return dens
    kern_mean = params.mu_atoms + float(x @ params.beta)
    dens = float(np.exp(normal_logpdf(y, kern_mean, params.sigma2)) @ w)
    resid = 1.0 - float(w.sum())
    if resid > 0.0:
        # unmaterialized intercepts are N(0, sigma_mu^2)
        dens += resid * float(np.exp(normal_logpdf(
            y, float(x @ params.beta), params.sigma2 + params.sigma_mu ** 2)))
    return dens


def log_likelihood(spec, params, latent, data):
    """Weighted observed-data log likelihood at a parameter state.

    Censored rows contribute through their current imputed values; with a
    binary link the latent scores take the place of y.  A row weight w_i
    scales the kernel variance to sigma^2 / w_i and multiplies the row's
    log-density contribution is not separate -- the variance scaling *is*
    the weighting, matching the weighted normal likelihood.
    """
    y = _effective_y(latent, data)
    if spec.link == "binary_probit":
        if latent is None or latent.ystar is None:
            raise ValidationError("binary link requires latent probit scores")
        y = latent.ystar
    x = data.x
    w = data.w
    fam = spec.family
    if fam == "LinearNIG":
        mean = x @ params.beta
        return float(normal_logpdf(y, mean, params.sigma2 / w).sum())
    if fam == "HLM2":
        mean = x @ params.beta + np.einsum("ij,ij->i", x, params.u[data.groups])
        return float(normal_logpdf(y, mean, params.sigma2 / w).sum())
    if fam == "DDPMixture":
        return _ddp_loglik(params, y, x, w, data.groups)
    return _ip_loglik(spec, params, y, x, w)


def _effective_y(latent, data):
    y = data.y
    if latent is not None and latent.y_imputed is not None:
        y = np.where(np.isnan(y) | _censor_mask(data), latent.y_imputed, y)
    elif data.censoring is not None and np.isnan(y).any():
        raise ValidationError("censored rows lack imputed values")
    return y


def _censor_mask(data):
    if data.censoring is None:
        return np.zeros(data.n, dtype=bool)
    return np.array([st.kind != "uncensored" for st in data.censoring])


def _ddp_loglik(params, y, x, w, groups):
    ws = params.weights()
    logw = np.log(ws.weights)
    means = x @ (np.column_stack([params.atoms[:, 0],
                                  np.tile(params.global_slopes, (params.n_atoms, 1))]).T
                 if params.global_slopes is not None else params.atoms.T)
    varis = ddp_kernel_variances(params)
    # means: (n, J) kernel means; per-row log kernel densities at each atom
    logk = normal_logpdf(y[:, None], means, varis[None, :] / w[:, None])
    if groups is None:
        per_unit = special.logsumexp(logw[None, :] + logk, axis=1)
        return float(per_unit.sum())
    total = 0.0
    for h in range(int(groups.max()) + 1):
        rows = groups == h
        total += float(special.logsumexp(logw + logk[rows].sum(axis=0)))
    return total


def _ip_loglik(spec, params, y, x, w):
    centers = x @ params.beta_omega
    if params.sigma_omega is not None:
        s = np.full(y.size, params.sigma_omega)
    else:
        s = np.sqrt(np.exp(x @ params.lam_omega))
    j = params.window()
    wj = special.ndtr((j[None, :] - centers[:, None]) / s[:, None]) \
        - special.ndtr((j[None, :] - 1.0 - centers[:, None]) / s[:, None])
    if spec.heteroscedastic:
        ok = ~np.isnan(params.sigma2_atoms)
        logk = normal_logpdf(y[:, None], params.mu_atoms[None, ok],
                             params.sigma2_atoms[None, ok] / w[:, None])
        wj = wj[:, ok]
        row_mass = wj.sum(axis=1)
        wj = wj / np.maximum(row_mass, 1e-300)[:, None]
    else:
        kern_mean = params.mu_atoms[None, :] + (x @ params.beta)[:, None]
        logk = normal_logpdf(y[:, None], kern_mean, params.sigma2 / w[:, None])
        resid = np.maximum(1.0 - wj.sum(axis=1), 0.0)
        tail = normal_logpdf(y, x @ params.beta,
                             (params.sigma2 / w) + params.sigma_mu ** 2)
        with np.errstate(divide="ignore"):
            extra = np.log(resid) + tail
        per_row = special.logsumexp(
            np.column_stack([np.log(np.maximum(wj, 1e-300)) + logk, extra]), axis=1)
        return float(per_row.sum())
    per_row = special.logsumexp(np.log(np.maximum(wj, 1e-300)) + logk, axis=1)
    return float(per_row.sum())
