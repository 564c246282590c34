import numpy as np
import pytest
from hypothesis import settings

from crmr.scenario import Scenario, paper_scenario, toeplitz_noise_cov

settings.register_profile("ci", max_examples=40, deadline=None)
settings.load_profile("ci")


@pytest.fixture
def ref():
    return paper_scenario(15.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20261015)


def random_hpd(rng, k, shift=0.05, scale=1.0):
    x = rng.standard_normal((k, k)) + 1j * rng.standard_normal((k, k))
    return scale * (x @ x.conj().T) / k + shift * np.eye(k)


def random_code(rng, k, power, frac=None):
    a = rng.standard_normal(k) + 1j * rng.standard_normal(k)
    frac = rng.uniform(0.2, 1.0) if frac is None else frac
    return a * np.sqrt(power * frac) / np.linalg.norm(a)


def scalar_scenario(sc=0.5, st=1.0, m=1.0, power=4.0, c_bits=3.0):
    return Scenario(1, 1, (st,), (sc,), np.array([[[m]]]), power, c_bits)


def small_scenario(c_bits=8.0, k=2, n=2, power=3.0):
    return Scenario(n, k, (1.0,) * n, tuple(0.25 * (i + 1) for i in range(n)),
                    np.array([toeplitz_noise_cov(i + 1, k) for i in range(n)]), power, c_bits)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
