import os

import hypothesis
import numpy as np
import pytest

hypothesis.settings.register_profile("default", max_examples=40, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=200, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_dataset():
    from darn.synth import SynthConfig, generate_in_memory

    return generate_in_memory(SynthConfig(item_count=24, seed=3))


ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


def _line(n):
    parts = ACCEPTANCE[n]
    ok = all(p[0] for p in parts)
    return f"criterion {n}: {'PASS' if ok else 'FAIL'}  " + "; ".join(p[1] for p in parts)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(_line(n))


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one check of criterion ``n`` and asserts it."""

    def record(n, ok, detail):
        ACCEPTANCE.setdefault(n, []).append((bool(ok), detail))
        print(_line(n))
        assert ok, detail

    return record
