from __future__ import annotations

# Small budgets so end-to-end runs finish in seconds; the protocol is unchanged.
FAST = [
    "ensemble.R_smd=20",
    "ensemble.R_bayes=10",
    "methods.msm.bootstrap=100",
    "methods.pso.budget=60",
    "methods.cors.budget_per_dim=15",
    "methods.cors.n_maximin=200",
    "methods.cors.n_starts=20",
    "methods.bayes.chains=2",
    "methods.bayes.n_per_chain=40",
    "methods.bayes.burn_in=10",
    "methods.bayes.ks_members=5",
]

# One line per acceptance criterion, repeated in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
