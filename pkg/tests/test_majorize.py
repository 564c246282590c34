import numpy as np
import pytest

from crmr import majorize, metrics
from conftest import random_code, random_hpd


@pytest.fixture
def point(ref, rng):
    a = random_code(rng, 6, 10.0)
    q = np.array([random_hpd(rng, 6) for _ in range(3)])
    return a, q


def test_code_surrogate_certifies(ref, rng, point):
    a, q = point
    sur = majorize.build_code_surrogate(ref, q, a)
    certs = majorize.certify_code_surrogate(ref, q, sur, rng)
    assert [c.label for c in certs] == ["code/objective", "code/rate"]
    assert all(c.passed for c in certs), [c.summary() for c in certs]


def test_quant_surrogate_certifies(ref, rng, point):
    a, q = point
    sur = majorize.build_quant_surrogate(ref, a, q)
    certs = majorize.certify_quant_surrogate(ref, sur, rng)
    assert all(c.passed for c in certs), [c.summary() for c in certs]


def test_surrogates_touch_true_values(ref, point):
    a, q = point
    neg_b = -metrics.total_bhattacharyya(ref, a, q)
    rate = metrics.total_rate_nats(ref, a, q)
    cs = majorize.build_code_surrogate(ref, q, a)
    qs = majorize.build_quant_surrogate(ref, a, q)
    assert cs.objective(a) == pytest.approx(neg_b, abs=1e-12)
    assert cs.rate(a) == pytest.approx(rate, rel=1e-12)
    assert qs.objective(q) == pytest.approx(neg_b, abs=1e-12)
    assert qs.rate(q) == pytest.approx(rate, rel=1e-12)


def test_code_surrogate_is_upper_bound_along_rays(ref, point):
    a, q = point
    sur = majorize.build_code_surrogate(ref, q, a)
    for t in np.linspace(-1.5, 2.0, 41):
        b = t * a + (1 - t) * np.roll(a, 1)
        assert sur.objective(b) >= -metrics.total_bhattacharyya(ref, b, q) - 1e-10
        assert sur.rate(b) >= metrics.total_rate_nats(ref, b, q) - 1e-10


def test_rate_dropped_for_singular_q(ref, rng):
    a = random_code(rng, 6, 10.0)
    sur = majorize.build_code_surrogate(ref, np.zeros((3, 6, 6)), a)
    assert not sur.has_rate
    assert len(majorize.certify_code_surrogate(ref, np.zeros((3, 6, 6)), sur, rng)) == 1


@pytest.mark.parametrize("fault, which", [("code_linear_sign", "code"), ("quant_linear_sign", "quant")])
def test_injected_fault_is_caught(ref, rng, point, fault, which):
    a, q = point
    majorize.FAULTS.add(fault)
    try:
        if which == "code":
            sur = majorize.build_code_surrogate(ref, q, a)
            certs = majorize.certify_code_surrogate(ref, q, sur, rng)
        else:
            sur = majorize.build_quant_surrogate(ref, a, q)
            certs = majorize.certify_quant_surrogate(ref, sur, rng)
    finally:
        majorize.FAULTS.discard(fault)
    bad = [c for c in certs if not c.passed]
    assert bad and bad[0].label.endswith("objective")
    assert bad[0].worst_sample is not None or "tangency" in bad[0].failures


def test_certify_flags_a_non_bound():
    # a tangent line under a convex function is not a majorizer
    cert = majorize.certify(lambda x: float(x[0]), lambda x: float(x[0] ** 2), np.zeros(1),
                            lambda r: r.uniform(-1, 1, 1), 50, np.random.default_rng(0))
    assert "upper_bound" in cert.failures
    assert cert.tangency_margin == 0.0


def test_printed_coefficients_differ_only_in_phi(ref, point):
    a, q = point
    sur = majorize.build_code_surrogate(ref, q, a)
    rows = majorize.compare_printed(ref, q, sur)
    assert len(rows) == 3
