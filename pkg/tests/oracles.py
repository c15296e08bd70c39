"""Independent oracle implementations used to freeze expected test values.

Everything here deliberately avoids the production code paths: incomplete
gamma functions come from adaptive quadrature rather than recurrences,
predictive weights are assembled in plain float arithmetic, and moment
targets come from closed forms.  Tests compare the fast production
implementations against these slow-but-direct routes.
"""

import math

import numpy as np
from scipy import integrate, special


def upper_gamma_quad(s, c):
    """Gamma(s; c) = int_c^inf t^(s-1) e^(-t) dt by adaptive quadrature."""
    f = lambda t: t ** (s - 1.0) * math.exp(-t)
    mid = c + 1.0
    a1, _ = integrate.quad(f, c, mid, limit=200)
    a2, _ = integrate.quad(f, mid, np.inf, limit=200)
    return a1 + a2


def nig_weights_quad(c, n, k):
    """Direct float assembly of the NIG predictive weights using quadrature gammas."""
    c2 = c * c
    num0 = sum(
        math.comb(n, l) * (-c2) ** (-l + 1) * upper_gamma_quad(k + 1 + 2 * l - 2 * n, c)
        for l in range(n + 1)
    )
    num1 = sum(
        math.comb(n, l) * (-c2) ** (-l + 1) * upper_gamma_quad(k + 2 * l - 2 * n, c)
        for l in range(n + 1)
    )
    den = sum(
        math.comb(n - 1, l) * (-c2) ** (-l) * upper_gamma_quad(k + 2 + 2 * l - 2 * n, c)
        for l in range(n)
    )
    return num0 / (2 * n * den), num1 / (n * den)


def crp_expected_clusters(alpha, n):
    """E[k_n] for the Chinese restaurant process."""
    return sum(alpha / (alpha + i) for i in range(n))


def nig_first_stick_density(c):
    """Unnormalized density of the first NIG stick and its normalizer.

    Derived from size-biased sampling of the inverse-Gaussian subordinator
    (total mass ~ inverse-Gaussian with mean c, shape c^2, jump intensity
    proportional to x^(-3/2) e^(-x/2)):

        f(v) ∝ v^(-1/2) (1-v)^(-1) K_1(c / sqrt(1-v)),  v in (0,1).
    """
    def raw(v):
        return v ** -0.5 / (1 - v) * special.kv(1, c / math.sqrt(1 - v))

    z, _ = integrate.quad(raw, 0, 1, limit=400)
    return raw, z


def nig_first_stick_mean(c):
    raw, z = nig_first_stick_density(c)
    m, _ = integrate.quad(lambda v: v * raw(v), 0, 1, limit=400)
    return m / z


def batch_means_halfwidth_iid_target(S):
    """Expected batch-means half-width for an iid N(0,1) chain of length S."""
    b = int(math.isqrt(S))
    t = None
    from scipy import stats
    t = stats.t.ppf(0.975, b - 1)
    return t / math.sqrt(S)

def linear_conjugate_posterior(x, y, w, prior_prec_diag, a0):
    """Closed-form normal/inverse-gamma posterior for the weighted linear model.

    Prior: beta | sigma2 ~ N(0, sigma2 * D) on the proper coordinates (zero
    precision entries mark flat coordinates), sigma2 ~ IG(a0/2, rate a0/2).
    Returns (beta_mean, beta_cov, sig2_shape, sig2_rate) for the *marginal*
    posterior of beta (covariance = E[sigma2 | y] * A^-1) using explicit
    inverses rather than the production Cholesky route.
    """
    xtw = x.T * w
    a = xtw @ x + np.diag(prior_prec_diag)
    a_inv = np.linalg.inv(a)
    m = a_inv @ (xtw @ y)
    n_flat = int(np.sum(prior_prec_diag == 0.0))
    shape = 0.5 * (a0 + y.size - n_flat)
    rate = 0.5 * (a0 + float(w @ y ** 2) - float(m @ a @ m))
    sig2_mean = rate / (shape - 1.0)
    return m, sig2_mean * a_inv, shape, rate


def escobar_west_conditional_cdf(a_alpha, b_alpha, n, k, grid):
    """Grid-integrated CDF of the exact conditional p(alpha | k, n).

    Density is proportional to
        Ga(alpha; a, b) * alpha^(k-1) * (alpha + n) * B(alpha + 1, n),
    evaluated in logs on the grid and integrated with the trapezoid rule.
    """
    g = np.asarray(grid, dtype=float)
    logd = ((a_alpha - 1.0) * np.log(g) - b_alpha * g
            + (k - 1.0) * np.log(g) + np.log(g + n)
            + special.betaln(g + 1.0, n))
    d = np.exp(logd - logd.max())
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (d[1:] + d[:-1]) * np.diff(g))])
    return cdf / cdf[-1]


def ks_statistic(samples, cdf_fn):
    """One-sample Kolmogorov-Smirnov distance against a callable CDF."""
    s = np.sort(np.asarray(samples, dtype=float))
    n = s.size
    f = cdf_fn(s)
    upper = np.max(np.arange(1, n + 1) / n - f)
    lower = np.max(f - np.arange(n) / n)
    return max(upper, lower)


def batch_means_mcse(draws):
    """Batch-means Monte Carlo standard error with floor(sqrt(S)) batches."""
    v = np.asarray(draws, dtype=float)
    s = v.size
    b = int(math.isqrt(s))
    nb = s // b
    means = v[: nb * b].reshape(nb, b).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(nb))
