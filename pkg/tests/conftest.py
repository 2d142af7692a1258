import numpy as np
import pytest

from edabench.core import Domain, DomainStream, Split
from edabench.datagen import ShiftProfile, generate

REFERENCE = dict(kind="GradualRotation", T=10, num_classes=2, dim=2, n_per_domain=400, noise_sigma=0.35,
                 rotation_step=0.12, priors={"start": [0.85, 0.15], "end": [0.45, 0.55]})


def make_profile(**overrides) -> ShiftProfile:
    d = dict(kind="GradualRotation", T=3, n_per_domain=200, noise_sigma=0.35, rotation_step=0.1)
    d.update(overrides)
    return ShiftProfile.from_dict(d)


def tiny_stream(T=2, n=12, dim=2, M=2, seed=0) -> DomainStream:
    """Hand-built stream with fully labeled splits of sizes 6/1/5."""
    rng = np.random.default_rng(seed)
    domains, counter = [], 0
    for t in range(T + 1):
        parts = []
        for size in (n // 2, 1, n - n // 2 - 1):
            order = np.arange(counter, counter + size)
            counter += size
            y = np.arange(size) % M
            X = rng.normal(size=(size, dim)) + y[:, None]
            parts.append(Split(tuple(f"i{o}" for o in order), X, y, order))
        domains.append(Domain(t, f"d{t}", *parts))
    return DomainStream(domains, M, dim, tuple(f"c{c}" for c in range(M)))


@pytest.fixture(scope="session")
def small_stream():
    return generate(make_profile(), seed=3)


@pytest.fixture(scope="session")
def reference_stream():
    return generate(ShiftProfile.from_dict(REFERENCE), seed=42)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        ok, detail = mod.RESULTS[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
