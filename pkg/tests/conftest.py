import numpy as np
import pytest

from ldcvsa.dataio import Dataset


def make_blobs(n=400, K=3, N=12, M=16, seed=0, noise=2.0, name="blobs"):
    """Separable integer-level clusters for fast end-to-end tests."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % K
    centers = rng.uniform(2, M - 3, size=(K, N))
    X = np.clip(np.round(centers[labels] + rng.normal(0, noise, size=(n, N))), 0, M - 1)
    return Dataset(name, X.astype(np.int64), labels, M, K)


@pytest.fixture(scope="session")
def blobs():
    data = make_blobs(600, seed=0)
    return data.subset(400), Dataset("blobs", data.features[400:], data.labels[400:], 16, 3, "test")


def pytest_terminal_summary(terminalreporter):
    """Print one verdict line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance" not in nodeid or "test_criterion_" not in nodeid:
                continue
            if rep.when != "call" and rep.passed:
                continue
            props = dict(rep.user_properties)
            if "acceptance" in props:
                text = props["acceptance"]
            else:
                crash = getattr(rep.longrepr, "reprcrash", None)
                reason = crash.message.splitlines()[0] if crash else str(rep.longrepr).splitlines()[-1]
                text = f"FAIL  {reason}"
            number = int(nodeid.split("test_criterion_")[1][:2])
            lines.append((number, text))
    if lines:
        terminalreporter.section("acceptance criteria")
        for number, text in sorted(lines):
            terminalreporter.write_line(f"criterion {number:2d}: {text}")
