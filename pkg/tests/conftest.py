import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def _criterion_key(label):
    head = label.split()[0]
    return (int(head) if head.isdigit() else 99, label)


def pytest_terminal_summary(terminalreporter):
    rows = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", ()))
            if "criterion" in props and rep.when == "call":
                rows.append((props["criterion"], outcome, props.get("detail", "")))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for label, outcome, detail in sorted(rows, key=lambda r: _criterion_key(r[0])):
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  criterion {label}" + (f": {detail}" if detail else ""))
