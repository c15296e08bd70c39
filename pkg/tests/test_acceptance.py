"""Acceptance suite: one test per shipping criterion.

Each test exercises the package end to end against an independent target —
hand-coded formulas, quadrature oracles, closed-form conjugate posteriors,
or byte-level file comparison — and the terminal summary prints a PASS/FAIL
line per criterion (see conftest.py).  Stated runtime caps are asserted.
"""

import io
import time

import numpy as np
import pytest

from oracles import (
    batch_means_mcse,
    linear_conjugate_posterior,
    nig_weights_quad,
)

from bnpreg.cli import main as cli_main
from bnpreg.data import DataTable, RoleAssignment
from bnpreg.diagnostics import batch_means_mcci, cusum_hairiness
from bnpreg.models import ModelSpec, build_design
from bnpreg.mcmc import SamplerConfig, run_chain
from bnpreg.predictive import (
    PosteriorSample,
    PredictiveQuery,
    fit_report,
    pd_functional,
    pp_functional,
    profile_covariates,
)
from bnpreg.priors import (
    StickPriorSpec,
    draw_truncated,
    nig_allocation_weights,
    py_allocation_probs,
)
from bnpreg.session import (
    COMMANDS_FILE,
    DATA_FILE,
    DRAWS_FILE,
    MANIFEST_FILE,
    MODEL_FILE,
    RESIDUALS_FILE,
    Session,
)

# ---------------------------------------------------------------------------
# shared synthetic datasets


def _linear_data(n=50, p=3, seed=42):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, p))
    beta = np.array([2.0, -1.0, 0.5])[:p]
    y = 1.0 + x @ beta + rng.normal(scale=0.8, size=n)
    cols = ["y"] + ["x%d" % (j + 1) for j in range(p)]
    table = DataTable("synth", tuple(cols), np.column_stack([y, x]))
    roles = RoleAssignment(dependent="y",
                           covariates=tuple(cols[1:]))
    return build_design(table, roles)


def _mixture_data(n=100, seed=11):
    """Two well-separated response components with an inert covariate."""
    rng = np.random.default_rng(seed)
    comp = rng.integers(0, 2, size=n)
    y = np.where(comp == 1, 5.0, -5.0) + rng.normal(scale=0.5, size=n)
    x = rng.normal(size=n)
    table = DataTable("mix", ("y", "x1"), np.column_stack([y, x]))
    roles = RoleAssignment(dependent="y", covariates=("x1",))
    return build_design(table, roles)


def _run_posterior(spec, data, iterations, burn_in, seed, thin=1):
    """Run a chain and decode its retained draws into a posterior sample."""
    cfg = SamplerConfig(total_iterations=iterations, burn_in=burn_in,
                        thin=thin, rng_seed=seed)
    states = []

    def on_draw(iteration, row, state):
        entry = {"iteration": int(iteration),
                 "params": state.params.to_jsonable()}
        if state.latent.z is not None:
            entry["z"] = [int(k) for k in state.latent.z]
        states.append(entry)

    _, store = run_chain(spec, data, cfg, on_draw=on_draw)
    if spec.family in ("DDPMixture", "InfiniteProbits"):
        post = PosteriorSample.from_states(spec, states, burn_in=burn_in)
    else:
        post = PosteriorSample.from_store(spec, store, burn_in=burn_in)
    return post, store


# ---------------------------------------------------------------------------
# 01: stick-breaking normalization


def test_criterion_01_stick_normalization():
    specs = [
        StickPriorSpec("dp", alpha=1.0),
        StickPriorSpec("pitman_yor", a=0.3, b=1.0),
        StickPriorSpec("normalized_stable", a=0.5),
        StickPriorSpec("beta_two_param", a=2.0, b=4.0),
        StickPriorSpec("geometric", a=2.0, b=2.0),
        StickPriorSpec("nig", c=1.0),
    ]
    rng = np.random.default_rng(0)
    t0 = time.time()
    for spec in specs:
        worst = 0.0
        for _ in range(1000):
            w = draw_truncated(spec, rng, mass_tol=1e-10, max_j=500)
            assert np.all(w.weights > 0.0)
            assert w.truncation_mass >= 0.0
            worst = max(worst, abs(w.weights.sum() + w.truncation_mass - 1.0))
        assert worst <= 1e-12, (spec.family, worst)
    assert time.time() - t0 < 10.0


# ---------------------------------------------------------------------------
# 02: DP random-measure variance


def test_criterion_02_dp_variance_moment():
    t0 = time.time()
    rng = np.random.default_rng(7)
    n_sim = 4000
    for alpha in (0.5, 1.0, 5.0):
        spec = StickPriorSpec("dp", alpha=alpha)
        for p in (0.2, 0.5):
            gb = np.empty(n_sim)
            for s in range(n_sim):
                w = draw_truncated(spec, rng, mass_tol=1e-8)
                hits = rng.random(w.weights.size) < p
                gb[s] = float(w.weights[hits].sum())
            target = p * (1.0 - p) / (alpha + 1.0)
            v_hat = float(np.var(gb, ddof=1))
            centered = gb - gb.mean()
            m4 = float(np.mean(centered ** 4))
            mcse_var = np.sqrt(max(m4 - v_hat ** 2, 0.0) / n_sim)
            assert abs(v_hat - target) <= 3.0 * mcse_var, (alpha, p)
    assert time.time() - t0 < 30.0


# ---------------------------------------------------------------------------
# 03: predictive allocation oracles


def test_criterion_03_allocation_oracles():
    rng = np.random.default_rng(3)
    for _ in range(50):
        k = int(rng.integers(1, 9))
        sizes = rng.integers(1, 30, size=k)
        a = float(rng.uniform(0.0, 0.9))
        b = float(rng.uniform(-a + 0.01, 5.0))
        probs = py_allocation_probs(a, b, sizes)
        n = int(sizes.sum())
        by_hand = np.concatenate(
            [[(b + a * k) / (b + n)], (sizes - a) / (b + n)])
        assert np.max(np.abs(probs - by_hand)) <= 1e-12
        assert abs(probs.sum() - 1.0) <= 1e-12

    for c in (0.5, 2.0):
        for n in range(1, 21):
            for k in sorted({1, (n + 1) // 2, n}):
                w0, w1 = nig_allocation_weights(c, n, k)
                q0, q1 = nig_weights_quad(c, n, k)
                assert abs(w0 - q0) <= 1e-6, (c, n, k)
                assert abs(w1 - q1) <= 1e-6, (c, n, k)


# ---------------------------------------------------------------------------
# 04: conjugate MCMC equivalence


def test_criterion_04_conjugate_mcmc_equivalence():
    t0 = time.time()
    data = _linear_data(n=50, p=3, seed=42)
    spec = ModelSpec("LinearNIG")
    h = spec.hyper
    prec = np.array([0.0 if h.improper_intercept else 1.0 / h.v_beta0]
                    + [1.0 / h.v_beta] * data.p)
    m_star, cov_star, _, _ = linear_conjugate_posterior(
        data.x, data.y, data.w, prec, h.a0)

    burn = 2000
    post, store = _run_posterior(spec, data, iterations=20000, burn_in=burn,
                                 seed=1)
    keep = store.column("iteration") > burn
    names = ["beta.%s" % c for c in data.x_names]
    draws = np.column_stack([store.column(nm)[keep] for nm in names])

    for j in range(draws.shape[1]):
        err = abs(draws[:, j].mean() - m_star[j])
        assert err <= 3.0 * batch_means_mcse(draws[:, j]), names[j]
    centered = draws - m_star
    for i in range(draws.shape[1]):
        for j in range(i + 1):
            series = centered[:, i] * centered[:, j]
            err = abs(series.mean() - cov_star[i, j])
            assert err <= 3.0 * batch_means_mcse(series), (i, j)
    assert time.time() - t0 < 60.0


# ---------------------------------------------------------------------------
# 05: mixture recovery


def test_criterion_05_mixture_recovery():
    t0 = time.time()
    data = _mixture_data()
    spec = ModelSpec("DDPMixture", mixing_target="intercept_only",
                     stick_prior=StickPriorSpec("dp", alpha=1.0))
    burn = 2000
    post, store = _run_posterior(spec, data, iterations=10000, burn_in=burn,
                                 seed=7, thin=5)
    keep = store.column("iteration") > burn
    k_draws = store.column("k_clusters")[keep].astype(int)
    modal_k = int(np.bincount(k_draws).argmax())
    assert modal_k == 2, modal_k

    y_grid = np.linspace(-8.0, 8.0, 321)
    query = PredictiveQuery(focal={"x1": np.array([0.0])},
                            functionals=("pdf",), y_grid=y_grid)
    pdf = pd_functional(post, data, query).curves["pdf"][0]
    interior = (pdf[1:-1] > pdf[:-2]) & (pdf[1:-1] > pdf[2:])
    peaks = np.flatnonzero(interior) + 1
    assert peaks.size >= 2, "predictive pdf is not multimodal"
    top2 = peaks[np.argsort(pdf[peaks])][-2:]
    lo, hi = sorted(int(i) for i in top2)
    trough = float(pdf[lo:hi + 1].min())
    smaller_peak = float(min(pdf[lo], pdf[hi]))
    assert trough < 0.25 * smaller_peak
    assert y_grid[lo] < 0.0 < y_grid[hi]
    assert time.time() - t0 < 300.0


# ---------------------------------------------------------------------------
# 06: fit-statistic model ranking


def test_criterion_06_fit_statistic_ranking():
    data = _mixture_data()
    mix_spec = ModelSpec("DDPMixture", mixing_target="intercept_only",
                         stick_prior=StickPriorSpec("dp", alpha=1.0))
    lin_spec = ModelSpec("LinearNIG")
    wins = 0
    for seed in range(1, 11):
        mix_post, _ = _run_posterior(mix_spec, data, iterations=2000,
                                     burn_in=500, seed=seed, thin=2)
        lin_post, _ = _run_posterior(lin_spec, data, iterations=2000,
                                     burn_in=500, seed=seed, thin=2)
        d_mix = fit_report(mix_post, data).d_m
        d_lin = fit_report(lin_post, data).d_m
        if d_mix < d_lin:
            wins += 1
    assert wins >= 9, "mixture won on only %d of 10 seeds" % wins


# ---------------------------------------------------------------------------
# 07: censoring containment


def test_criterion_07_censoring_containment():
    rng = np.random.default_rng(19)
    n = 80
    x = rng.normal(size=n)
    y_true = 1.0 + 2.0 * x + rng.normal(scale=0.8, size=n)
    censored = np.zeros(n, dtype=bool)
    censored[rng.permutation(n)[:int(0.3 * n)]] = True
    lb = np.full(n, -9999.0)
    ub = np.full(n, -9999.0)
    y = y_true.copy()
    cut = y_true - np.abs(rng.normal(size=n)) - 0.1
    y[censored] = cut[censored]
    lb[censored] = cut[censored]
    table = DataTable("cens", ("y", "x1", "lb", "ub"),
                      np.column_stack([y, x, lb, ub]))
    roles = RoleAssignment(dependent="y", covariates=("x1",),
                           censor_lb="lb", censor_ub="ub")
    data = build_design(table, roles)
    assert sum(st.kind == "right" for st in data.censoring) == int(0.3 * n)

    bounds = lb[censored]

    for spec, iters in ((ModelSpec("LinearNIG"), 400),
                        (ModelSpec("DDPMixture",
                                   mixing_target="intercept_only",
                                   stick_prior=StickPriorSpec("dp", alpha=1.0)),
                         300)):
        checked = []

        def on_draw(iteration, row, state):
            imput = state.latent.y_imputed[censored]
            checked.append(bool(np.all(imput >= bounds)))

        cfg = SamplerConfig(total_iterations=iters, burn_in=0, thin=1,
                            rng_seed=5)
        run_chain(spec, data, cfg, on_draw=on_draw)
        assert len(checked) == iters
        assert all(checked), spec.family


# ---------------------------------------------------------------------------
# 08: diagnostics calibration


def test_criterion_08_diagnostics_calibration():
    draws = np.random.default_rng(2025).standard_normal(10000)
    half_width = batch_means_mcci(draws, "mean")
    assert 0.7 * 0.0196 <= half_width <= 1.3 * 0.0196, half_width
    h = cusum_hairiness(draws)
    assert 0.45 <= h <= 0.55, h


# ---------------------------------------------------------------------------
# 09: predictive identities on every fitted family


def _hlm_data(n=80, n_groups=8, seed=31):
    rng = np.random.default_rng(seed)
    g = np.repeat(np.arange(n_groups, dtype=float), n // n_groups)
    u = rng.normal(scale=0.8, size=n_groups)
    x = rng.normal(size=n)
    y = 1.0 + (2.0 + u[g.astype(int)]) * x + rng.normal(scale=0.6, size=n)
    table = DataTable("hlm", ("y", "x1", "g"), np.column_stack([y, x, g]))
    roles = RoleAssignment(dependent="y", covariates=("x1",),
                           group_level2="g")
    return build_design(table, roles)


def _fitted_models():
    lin = _linear_data(n=80, p=1, seed=23)
    mix = _mixture_data()
    out = []
    for spec, data in (
            (ModelSpec("LinearNIG"), lin),
            (ModelSpec("HLM2"), _hlm_data()),
            (ModelSpec("DDPMixture", mixing_target="intercept_only",
                       stick_prior=StickPriorSpec("dp", alpha=1.0)), mix),
            (ModelSpec("InfiniteProbits"), lin)):
        post, _ = _run_posterior(spec, data, iterations=400, burn_in=100,
                                 seed=3)
        out.append((spec, data, post))
    return out


def test_criterion_09_predictive_identities():
    functionals = ("mean", "variance", "prob_y_ge_0", "quantile",
                   "pdf", "cdf", "survival", "hazard", "cumhaz")
    for spec, data, post in _fitted_models():
        query = PredictiveQuery(focal={"x1": np.array([0.3])},
                                functionals=functionals, u=0.7)
        table = pd_functional(post, data, query,
                              rng=np.random.default_rng(123))
        pdf = table.curves["pdf"][0]
        cdf = table.curves["cdf"][0]
        surv = table.curves["survival"][0]
        cumhaz = table.curves["cumhaz"][0]
        y_grid = table.y_grid

        # distribution + survival partition probability exactly
        assert np.max(np.abs(surv + cdf - 1.0)) <= 1e-12, spec.family

        # cumulative hazard is the negative log of survival
        ok = surv > 1e-12
        assert np.max(np.abs(cumhaz[ok] + np.log(surv[ok]))) <= 1e-9, \
            spec.family

        # the density integrates to one over the default grid
        mass = float(np.trapezoid(pdf, y_grid))
        assert abs(mass - 1.0) <= 1e-3, (spec.family, mass)

        # profile averaging over a single row is the plain functional
        profile = profile_covariates(data, ["x1"], "grand_mean")
        x_full = np.zeros(len(data.x_names))
        x_full[0] = 1.0
        x_full[data.x_names.index("x1")] = 0.3
        for j, name in enumerate(profile.nonfocal_names):
            x_full[data.x_names.index(name)] = profile.rows[0, j]
        for f in ("mean", "variance", "prob_y_ge_0"):
            direct = pp_functional(post, x_full, f, y_grid=y_grid)
            assert table.scalars[f][0] == direct, (spec.family, f)
        direct_q = pp_functional(post, x_full, "quantile", u=0.7,
                                 y_grid=y_grid,
                                 rng=np.random.default_rng(123))
        assert table.scalars["quantile"][0] == direct_q, spec.family
        for f in ("pdf", "cdf", "survival", "hazard", "cumhaz"):
            direct = pp_functional(post, x_full, f, y_grid=y_grid)
            assert np.array_equal(table.curves[f][0], direct), \
                (spec.family, f)


# ---------------------------------------------------------------------------
# 10: persistence and replay


def _write_csv(path, n=40, seed=3):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    y = 0.5 + 1.5 * x + rng.normal(scale=0.6, size=n)
    path.write_text("y,CLSIZE\n" + "\n".join(
        "%r,%r" % (float(a), float(b)) for a, b in zip(y, x)) + "\n")
    return path


def test_criterion_10_persistence_and_replay(tmp_path):
    from bnpreg.data import load_csv

    # restore -> append keeps the first segment byte-identical
    root = tmp_path / "sessions"
    csv_path = _write_csv(tmp_path / "d.csv")
    s = Session.create(root, "keep")
    s.set_table(load_csv(csv_path))
    s.set_roles(RoleAssignment(dependent="y", covariates=("CLSIZE",)))
    s.set_spec(ModelSpec("LinearNIG"))
    s.run(iterations=60, burn_in=10, thin=1, seed=5)
    first = (root / "keep" / DRAWS_FILE).read_bytes()
    restored = Session.restore(root, "keep")
    restored.run(iterations=40, append=True)
    combined = (root / "keep" / DRAWS_FILE).read_bytes()
    assert combined.startswith(first)

    whole = Session.create(root, "whole")
    whole.set_table(load_csv(csv_path))
    whole.set_roles(RoleAssignment(dependent="y", covariates=("CLSIZE",)))
    whole.set_spec(ModelSpec("LinearNIG"))
    whole.run(iterations=100, burn_in=10, thin=1, seed=5)
    assert (root / "whole" / DRAWS_FILE).read_bytes() == combined

    # a full command-log replay reproduces every artifact bit for bit
    cli_root = tmp_path / "cli"
    for argv in (
            ("import", str(csv_path), "--session", "work"),
            ("transform", "zscore", "CLSIZE", "--session", "work"),
            ("spec-model", "--session", "work", "--y", "y",
             "--covariates", "Z:CLSIZE", "--family", "LinearNIG"),
            ("run", "--session", "work", "--S", "80", "--burnin", "10",
             "--thin", "2", "--seed", "7"),
            ("fit", "--session", "work")):
        code = cli_main(["--root", str(cli_root)] + list(argv),
                        out=io.StringIO())
        assert code == 0, argv
    replay_root = tmp_path / "cli2"
    code = cli_main(["--root", str(replay_root), "replay",
                     "--session", "work",
                     "--manifest", str(cli_root / "work" / COMMANDS_FILE)],
                    out=io.StringIO())
    assert code == 0
    for name in (DATA_FILE, MODEL_FILE, DRAWS_FILE, RESIDUALS_FILE,
                 MANIFEST_FILE, COMMANDS_FILE):
        assert ((cli_root / "work" / name).read_bytes()
                == (replay_root / "work" / name).read_bytes()), name
