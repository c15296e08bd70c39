"""Shared pytest wiring: a per-criterion verdict table for the acceptance run."""

ACCEPTANCE_LABELS = {
    "test_criterion_01_stick_normalization":
        "01 stick-breaking normalization, all six weight families",
    "test_criterion_02_dp_variance_moment":
        "02 DP random-measure variance matches p(1-p)/(alpha+1)",
    "test_criterion_03_allocation_oracles":
        "03 PY substitution + NIG quadrature allocation oracles",
    "test_criterion_04_conjugate_mcmc_equivalence":
        "04 conjugate linear chain matches closed-form posterior",
    "test_criterion_05_mixture_recovery":
        "05 two-component mixture: modal cluster count + bimodal pdf",
    "test_criterion_06_fit_statistic_ranking":
        "06 mixture beats linear on D(m) for >= 9 of 10 seeds",
    "test_criterion_07_censoring_containment":
        "07 right-censored imputations respect lower bounds",
    "test_criterion_08_diagnostics_calibration":
        "08 batch-means half-width + hairiness on an iid chain",
    "test_criterion_09_predictive_identities":
        "09 predictive identities on every fitted family",
    "test_criterion_10_persistence_and_replay":
        "10 restore/append byte identity + bit-identical replay",
}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    outcomes = {}
    for reps in terminalreporter.stats.values():
        for rep in reps:
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py" not in nodeid:
                continue
            name = nodeid.split("::")[-1]
            if name not in ACCEPTANCE_LABELS:
                continue
            outcome = getattr(rep, "outcome", None)
            if outcome == "failed":
                outcomes[name] = "FAIL"
            elif outcome == "passed" and getattr(rep, "when", "") == "call":
                outcomes.setdefault(name, "PASS")
    if not outcomes:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, label in ACCEPTANCE_LABELS.items():
        verdict = outcomes.get(name, "NOT RUN")
        terminalreporter.write_line("%-60s %s" % (label, verdict))
