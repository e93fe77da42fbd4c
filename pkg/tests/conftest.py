from collections import defaultdict

CRITERIA = {
    1: "solver correctness on 50 random games",
    2: "classic RPS equilibrium is uniform",
    3: "constant-shift invariance",
    4: "gradient fidelity against finite differences",
    5: "sequence form equals reduced normal form",
    6: "payoff construction fidelity",
    7: "noiseless parameter recovery",
    8: "sampled-data trends at desk scale",
    9: "determinism of generate and train",
}

_outcomes = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion checked by the test")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark:
            item.user_properties.append(("criterion", mark.args[0]))


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    if report.when == "call" or report.outcome != "passed":
        _outcomes[crit].append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for crit, label in CRITERIA.items():
        seen = _outcomes.get(crit)
        if not seen:
            status = "NOT RUN"
        elif all(o == "passed" for o in seen):
            status = "PASS"
        else:
            status = "FAIL"
        terminalreporter.write_line(f"criterion {crit}: {status}  {label} ({len(seen or [])} checks)")
