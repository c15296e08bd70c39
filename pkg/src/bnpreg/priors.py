"""Stick-breaking mixing priors and closed-form allocation rules.

Six families of stick-breaking laws are supported, all producing weights

    w_j = v_j * prod_{l<j} (1 - v_l),

and two exact predictive allocation rules: the Pitman-Yor rule and the
normalized inverse-Gaussian (NIG) rule, whose weights involve upper
incomplete gamma functions at nonpositive integer orders.

Families
--------
dp(alpha)                v_j ~ Be(1, alpha)
pitman_yor(a, b)         v_j ~ Be(1-a, b+j*a),  0 <= a < 1, b > -a
normalized_stable(a)     = pitman_yor(a, 0)
beta_two_param(a, b)     v_j ~ Be(a, b) iid
geometric(a, b)          one v ~ Be(a, b) shared by every j (w_j = v(1-v)^(j-1))
nig(c)                   v_j = g1/(g1+g0), a ratio of generalized
                         inverse-Gaussian and inverse-gamma variables whose
                         parameters depend on the mass remaining after the
                         first j-1 sticks (see draw_sticks)
"""

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy import special
from scipy.integrate import quad

from .errors import NumericError, ValidationError

__all__ = [
    "StickPriorSpec",
    "WeightSequence",
    "PartitionState",
    "weights_from_sticks",
    "draw_sticks",
    "draw_truncated",
    "py_allocation_probs",
    "nig_allocation_weights",
    "simulate_partition",
    "dp_moment_check",
    "log_upper_gamma",
]

FAMILIES = ("dp", "pitman_yor", "normalized_stable", "beta_two_param", "geometric", "nig")

TRUNCATION_MASS_TOL = 1e-10
TRUNCATION_MAX_J = 10_000
NIG_MAX_N = 500


@dataclass(frozen=True)
class StickPriorSpec:
    """A mixing-prior family plus its hyperparameters."""

    family: str
    alpha: float = None
    a: float = None
    b: float = None
    c: float = None

    def __post_init__(self):
        f = self.family
        if f not in FAMILIES:
            raise ValidationError("unknown stick prior family %r" % f)
        if f == "dp":
            if self.alpha is None or not self.alpha > 0:
                raise ValidationError("dp needs alpha > 0")
        elif f in ("pitman_yor", "normalized_stable"):
            if self.a is None or not (0 <= self.a < 1):
                raise ValidationError("%s needs discount 0 <= a < 1" % f)
            if f == "normalized_stable":
                object.__setattr__(self, "b", 0.0)
            if self.b is None or not (self.b > -self.a):
                raise ValidationError("pitman_yor needs strength b > -a")
        elif f == "beta_two_param" or f == "geometric":
            if self.a is None or self.b is None or not (self.a > 0 and self.b > 0):
                raise ValidationError("%s needs shape parameters a, b > 0" % f)
        elif f == "nig":
            if self.c is None or not self.c > 0:
                raise ValidationError("nig needs mass parameter c > 0")

    def beta_params(self, j):
        """Prior Be(a_j, b_j) for stick j (1-based) -- beta families only."""
        if self.family == "dp":
            return 1.0, self.alpha
        if self.family in ("pitman_yor", "normalized_stable"):
            return 1.0 - self.a, self.b + j * self.a
        if self.family == "beta_two_param":
            return self.a, self.b
        raise ValidationError("family %r has no per-stick beta law" % self.family)

    def to_dict(self):
        d = {"family": self.family}
        for k in ("alpha", "a", "b", "c"):
            v = getattr(self, k)
            if v is not None:
                d[k] = float(v)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class WeightSequence:
    """Stick variables, their weights, and the mass beyond the truncation."""

    sticks: np.ndarray
    weights: np.ndarray
    truncation_mass: float


@dataclass
class PartitionState:
    """Cluster allocations of n items."""

    allocations: np.ndarray

    @property
    def n(self):
        return len(self.allocations)

    @property
    def cluster_sizes(self):
        if self.n == 0:
            return np.empty(0, dtype=int)
        return np.unique(self.allocations, return_counts=True)[1]

    @property
    def k_n(self):
        return len(np.unique(self.allocations)) if self.n else 0


def sample_gig(chi, psi, lam, rng):
    """Exact draw from the generalized inverse-Gaussian GIG(chi, psi, lam).

    Density proportional to x^(lam-1) exp(-(chi/x + psi*x)/2) on x > 0,
    chi, psi > 0, lam real.  Sampling runs in log space: with
    X = sqrt(chi/psi) * exp(T), the density of T is proportional to
    exp(lam*t - omega*cosh(t)) with omega = sqrt(chi*psi), which is
    strictly log-concave for every (lam, omega), so a uniform-center /
    exponential-tail rejection envelope around the mode is valid and
    cheap in all parameter regimes.
    """
    if not (chi > 0 and psi > 0):
        raise ValidationError("sample_gig needs chi, psi > 0")
    omega = math.sqrt(chi * psi)
    scale = math.sqrt(chi / psi)

    def h(t):
        return lam * t - omega * math.cosh(t)

    t_star = math.asinh(lam / omega)
    h_star = h(t_star)
    w = 1.0 / math.sqrt(omega * math.cosh(t_star))
    tl, tr = t_star - w, t_star + w
    # tangent slopes at the shoulder points (concavity makes these valid bounds)
    sl = lam - omega * math.sinh(tl)   # > 0
    sr = omega * math.sinh(tr) - lam   # > 0
    ul = h(tl) - h_star
    ur = h(tr) - h_star
    m_mid = 2.0 * w
    m_left = math.exp(ul) / sl
    m_right = math.exp(ur) / sr
    total = m_mid + m_left + m_right
    while True:
        u, v = rng.random(), rng.random()
        pick = u * total
        if pick < m_mid:
            t = tl + (pick / m_mid) * 2.0 * w
            log_env = 0.0
        elif pick < m_mid + m_right:
            e = rng.exponential()
            t = tr + e / sr
            log_env = ur - sr * (t - tr)
        else:
            e = rng.exponential()
            t = tl - e / sl
            log_env = ul - sl * (tl - t)
        if math.log(v) + log_env <= h(t) - h_star:
            return scale * math.exp(t)


def weights_from_sticks(sticks):
    """Stick-breaking arithmetic: w_j = v_j * prod_{l<j}(1-v_l)."""
    v = np.asarray(sticks, dtype=float)
    if np.any(v < 0) or np.any(v > 1):
        raise ValidationError("stick variables must lie in [0,1]")
    one_minus = np.cumprod(1.0 - v)
    w = v.copy()
    w[1:] *= one_minus[:-1]
    return WeightSequence(v, w, float(one_minus[-1]) if v.size else 1.0)


def _draw_nig_sticks(c, J, rng):
    # v_j = g1/(g1+g0) with g1 ~ GIG(chi_j, 1, -j/2) and g0 ~ InvGamma(1/2, chi_j/2),
    # chi_j = c^2 / prod_{l<j}(1-v_l).  The inverse-gamma rate follows chi_j so the
    # pair stays consistent with the process's predictive rule for every c.
    v = np.empty(J)
    log_remaining = 0.0
    c2 = c * c
    for j in range(1, J + 1):
        chi = c2 * math.exp(-log_remaining)
        g1 = sample_gig(chi, 1.0, -j / 2.0, rng)
        g0 = 1.0 / rng.gamma(0.5, 2.0 / chi)
        v[j - 1] = g1 / (g1 + g0)
        log_remaining += math.log1p(-v[j - 1])
    return v


def draw_sticks(spec, J, rng):
    """Draw exactly J stick variables from the family's stick law."""
    if J < 1:
        raise ValidationError("J must be >= 1")
    f = spec.family
    if f == "dp":
        v = rng.beta(1.0, spec.alpha, size=J)
    elif f in ("pitman_yor", "normalized_stable"):
        j = np.arange(1, J + 1)
        v = rng.beta(1.0 - spec.a, spec.b + j * spec.a)
    elif f == "beta_two_param":
        v = rng.beta(spec.a, spec.b, size=J)
    elif f == "geometric":
        v = np.full(J, rng.beta(spec.a, spec.b))
    elif f == "nig":
        v = _draw_nig_sticks(spec.c, J, rng)
    else:  # pragma: no cover
        raise ValidationError("unknown family %r" % f)
    return weights_from_sticks(v)


def draw_truncated(spec, rng, mass_tol=TRUNCATION_MASS_TOL, max_j=TRUNCATION_MAX_J):
    """Draw sticks until the remaining mass falls below ``mass_tol`` (or J hits max_j)."""
    sticks = []
    remaining = 1.0
    block = 32
    while remaining >= mass_tol and len(sticks) < max_j:
        J = min(block, max_j - len(sticks))
        if spec.family in ("nig", "geometric"):
            # stateful families: extend one stick at a time
            J = 1
        if spec.family == "geometric" and sticks:
            v = np.array([sticks[0]])
        elif spec.family in ("pitman_yor", "normalized_stable"):
            j = np.arange(len(sticks) + 1, len(sticks) + J + 1)
            v = rng.beta(1.0 - spec.a, spec.b + j * spec.a)
        elif spec.family == "dp":
            v = rng.beta(1.0, spec.alpha, size=J)
        elif spec.family == "beta_two_param":
            v = rng.beta(spec.a, spec.b, size=J)
        elif spec.family == "geometric":
            v = np.array([rng.beta(spec.a, spec.b)])
        else:  # nig: continue the dependent recursion from the current remainder
            chi = spec.c * spec.c / remaining
            jj = len(sticks) + 1
            g1 = sample_gig(chi, 1.0, -jj / 2.0, rng)
            g0 = 1.0 / rng.gamma(0.5, 2.0 / chi)
            v = np.array([g1 / (g1 + g0)])
        for vi in v:
            sticks.append(float(vi))
            remaining *= 1.0 - vi
            if remaining < mass_tol or len(sticks) >= max_j:
                break
        block = min(block * 2, 4096)
    return weights_from_sticks(np.array(sticks))


# -- closed-form allocation rules ---------------------------------------------


def py_allocation_probs(a, b, partition):
    """Pitman-Yor predictive allocation probabilities.

    Entry 0 is the new-cluster probability (b + a*k)/(b + n); entry c is
    (n_c - a)/(b + n) for existing cluster c.
    """
    if not (0 <= a < 1) or not (b > -a):
        raise ValidationError("Pitman-Yor needs 0 <= a < 1 and b > -a")
    sizes = partition.cluster_sizes if isinstance(partition, PartitionState) else np.asarray(partition)
    sizes = np.asarray(sizes, dtype=float)
    n = sizes.sum()
    k = len(sizes)
    if n == 0:
        return np.array([1.0])
    out = np.empty(k + 1)
    out[0] = (b + a * k) / (b + n)
    out[1:] = (sizes - a) / (b + n)
    return out


def log_bessel_k(nu, x):
    """log K_nu(x), falling back to the uniform large-order expansion when
    the scaled Bessel function overflows double precision (small x with
    large nu)."""
    nu = abs(float(nu))
    x = float(x)
    if not x > 0:
        raise ValidationError("Bessel argument must be positive")
    val = special.kve(nu, x)
    if val > 0.0 and math.isfinite(val):
        return math.log(val) - x
    # K_nu(nu z) ~ sqrt(pi/(2 nu)) e^(-nu eta) (1+z^2)^(-1/4) (1 - u1/nu + u2/nu^2)
    z = x / nu
    sq = math.sqrt(1.0 + z * z)
    eta = sq + math.log(z / (1.0 + sq))
    t = 1.0 / sq
    u1 = (3.0 * t - 5.0 * t ** 3) / 24.0
    u2 = (81.0 * t ** 2 - 462.0 * t ** 4 + 385.0 * t ** 6) / 1152.0
    series = 1.0 - u1 / nu + u2 / nu ** 2
    return (0.5 * math.log(math.pi / (2.0 * nu)) - nu * eta
            - 0.25 * math.log1p(z * z) + math.log(series))


def log_upper_gamma(s_values, c):
    """log Gamma(s; c) = log int_c^inf t^(s-1) e^(-t) dt for integer s (s may be <= 0).

    Values for s >= 1 come from the regularized upper gamma; s = 0 is the
    exponential integral; negative orders follow the downward recurrence
    Gamma(s; c) = (c^s e^(-c) - Gamma(s+1; c)) / (-s), which is stable in
    this direction because errors shrink by 1/|s| per step.
    """
    s_values = np.asarray(s_values, dtype=int)
    smin = int(s_values.min())
    smax = int(s_values.max())
    logc = math.log(c)
    table = {}
    for s in range(max(smin, 1), smax + 1):
        table[s] = special.gammaln(s) + math.log(special.gammaincc(s, c))
    if smin <= 0:
        table[0] = math.log(special.exp1(c))
        for s in range(-1, smin - 1, -1):
            la = s * logc - c                  # log c^s e^(-c)
            lb = table[s + 1]
            if lb >= la:  # analytically impossible; guard roundoff
                diff = -math.inf
            else:
                diff = la + math.log1p(-math.exp(lb - la))
            table[s] = diff - math.log(-s)
    return np.array([table[int(s)] for s in s_values])


def _log_nig_integral(big_n, m, c):
    """log of the positive-integrand integral int_1^inf (s^2-1)^N s^m e^{-cs} ds.

    The alternating incomplete-gamma sums in the NIG predictive are binomial
    expansions of these integrals (substitute s = sqrt(1+2u) in the posterior
    mixing integral); evaluating the unexpanded form avoids the catastrophic
    cancellation that kills the expanded sums in double precision once n is
    much past ~50.
    """
    if big_n == 0:
        # int_1^inf s^m e^{-cs} ds = c^{-(m+1)} * Gamma(m+1; c)
        return -(m + 1) * math.log(c) + float(log_upper_gamma([m + 1], c)[0])

    def logf(s):
        return big_n * math.log(s * s - 1.0) + m * math.log(s) - c * s

    # stationary point: 2N s/(s^2-1) + m/s - c = 0, i.e. the cubic
    # -c s^3 + (2N+m) s^2 + c s - m = 0, which has exactly one root > 1
    # whenever the integrand vanishes at both ends (N >= 1).
    roots = np.roots([-c, 2.0 * big_n + m, c, -m])
    cands = [float(r.real) for r in roots
             if abs(r.imag) <= 1e-8 * (1.0 + abs(r)) and r.real > 1.0]
    if not cands:
        raise NumericError(
            "no interior mode for NIG weight integral (N=%d, m=%d, c=%g)" % (big_n, m, c)
        )
    s0 = max(cands)
    peak = logf(s0)
    hi = s0 + 1.0
    while logf(hi) - peak > -45.0:
        hi = 1.0 + 2.0 * (hi - 1.0)
    val, _ = quad(lambda s: math.exp(logf(s) - peak), 1.0, hi, points=[s0], limit=200)
    if not val > 0.0:
        raise NumericError("NIG weight integral underflowed (N=%d, m=%d, c=%g)" % (big_n, m, c))
    return peak + math.log(val)


@functools.lru_cache(maxsize=8192)
def _nig_weights_cached(c, n, k_n):
    log_ia = _log_nig_integral(n, k_n - 2 * n, c)        # new-cluster numerator
    log_ib = _log_nig_integral(n, k_n - 1 - 2 * n, c)    # per-unit numerator
    log_id = _log_nig_integral(n - 1, k_n + 1 - 2 * n, c)
    w0 = math.exp(math.log(c) + log_ia - math.log(2 * n) - log_id)
    w1 = math.exp(log_ib - math.log(n) - log_id)
    return w0, w1


def nig_allocation_weights(c, n, k_n):
    """Predictive weights (w0, w1) of the normalized inverse-Gaussian process.

    The posterior predictive after n observations in k_n clusters puts mass
    w0 on a new cluster and w1*(n_c - 1/2) on existing cluster c, so that
    w0 + w1*(n - k_n/2) = 1.  Computed from the log-space positive-integrand
    representation (see _log_nig_integral), stable over the whole supported
    range n <= 500.
    """
    if not c > 0:
        raise ValidationError("nig needs c > 0")
    n = int(n)
    k_n = int(k_n)
    if n < 1 or not (1 <= k_n <= n):
        raise ValidationError("need n >= 1 and 1 <= k_n <= n")
    if n > NIG_MAX_N:
        raise ValidationError("nig allocation weights supported for n <= %d" % NIG_MAX_N)
    return _nig_weights_cached(float(c), n, k_n)


def simulate_partition(spec, n, rng):
    """Sequentially apply a predictive allocation rule n times."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    alloc = np.zeros(n, dtype=int)
    sizes = []
    for i in range(n):
        if not sizes:
            sizes.append(0)
            alloc[i] = 0
            sizes[0] = 1
            continue
        k = len(sizes)
        m = i  # observations so far
        if spec.family in ("dp", "pitman_yor", "normalized_stable"):
            if spec.family == "dp":
                a, b = 0.0, spec.alpha
            else:
                a, b = spec.a, spec.b
            probs = np.empty(k + 1)
            probs[0] = (b + a * k) / (b + m)
            probs[1:] = (np.asarray(sizes) - a) / (b + m)
        elif spec.family == "nig":
            w0, w1 = nig_allocation_weights(spec.c, m, k)
            probs = np.empty(k + 1)
            probs[0] = w0
            probs[1:] = w1 * (np.asarray(sizes) - 0.5)
            probs = np.clip(probs, 0.0, None)
            probs /= probs.sum()
        else:
            raise ValidationError("no sequential allocation rule for family %r" % spec.family)
        z = rng.choice(k + 1, p=probs)
        if z == 0:
            sizes.append(1)
            alloc[i] = k
        else:
            sizes[z - 1] += 1
            alloc[i] = z - 1
    return PartitionState(alloc)


def dp_moment_check(alpha, p, draws, rng, mass_tol=TRUNCATION_MASS_TOL):
    """Monte Carlo mean and variance of G(B) under a DP prior.

    Each replicate draws a truncated weight sequence and assigns every atom
    to the event B independently with probability p; the truncated tail
    contributes its expectation p * remaining_mass.  As draws grow the mean
    approaches p and the variance approaches p(1-p)/(alpha+1).
    """
    if not 0 <= p <= 1:
        raise ValidationError("event probability must lie in [0,1]")
    draws = int(draws)
    g = np.empty(draws)
    # vectorized block extension: rows keep growing until all residuals are tiny
    block = max(32, int(4 * alpha) + 8)
    for start in range(0, draws, 4096):
        m = min(4096, draws - start)
        total = np.zeros(m)
        residual = np.ones(m)
        steps = 0
        while np.any(residual >= mass_tol) and steps < TRUNCATION_MAX_J:
            nb = min(block, TRUNCATION_MAX_J - steps)
            v = rng.beta(1.0, alpha, size=(m, nb))
            hit = rng.random((m, nb)) < p
            w = v * np.hstack([np.ones((m, 1)), np.cumprod(1 - v[:, :-1], axis=1)])
            w *= residual[:, None]
            total += (w * hit).sum(axis=1)
            residual *= np.prod(1 - v, axis=1)
            steps += nb
        total += residual * p
        g[start:start + m] = total
    return float(g.mean()), float(g.var(ddof=1))
