import math

import numpy as np
import pytest

from crmr import majorize, matops, metrics, oracles, subsolve
from conftest import random_code, random_hpd, scalar_scenario, small_scenario


def test_kkt_residual_basics():
    assert subsolve.kkt_residual([3.0, 4.0]) == 5.0
    # min x s.t. -x <= 0 at x = 0: grad 1 balanced by multiplier 1
    assert subsolve.kkt_residual([1.0], [[-1.0]], [0.0]) == pytest.approx(0.0, abs=1e-14)
    # wrong-sign gradient cannot be balanced by a nonnegative multiplier
    assert subsolve.kkt_residual([-1.0], [[-1.0]], [0.0]) == pytest.approx(1.0)
    # inactive constraint cannot absorb the gradient
    assert subsolve.kkt_residual([1.0], [[-1.0]], [-10.0]) > 0.09


def test_barrier_on_ball_constrained_linear():
    # min c.x s.t. |x|^2 <= 1: x* = -c/|c|
    c = np.array([1.0, -2.0, 2.0])

    def f0(x, order=0):
        return float(c @ x) if not order else (float(c @ x), c, np.zeros((3, 3)))

    def ball(x, order=0):
        v = float(x @ x) - 1
        return v if not order else (v, 2 * x, 2 * np.eye(3))

    res = subsolve.barrier_minimize(f0, [ball], np.zeros(3))
    assert res.status == "optimal"
    assert np.allclose(res.x, -c / 3.0, atol=1e-8)


def test_scalar_quant_step_matches_golden_section():
    s = scalar_scenario()
    q0 = np.array([[[0.3 + 0j]]])
    sur = majorize.build_quant_surrogate(s, np.array([2.0 + 0j]), q0)
    q, rep = subsolve.solve_quant_step(sur, s.capacity_nats, q0)
    q_ref, f_ref = oracles.scalar_quant_step(sur, s.capacity_nats)
    assert rep.status == "optimal"
    assert abs(rep.objective - f_ref) <= 1e-6
    assert q[0, 0, 0].real == pytest.approx(q_ref, rel=1e-6)


def test_code_step_matches_grid_k2(rng):
    s = small_scenario()
    a0 = np.array([0.8 + 0.3j, -0.4 + 0.5j]) * 0.8
    q = np.array([0.5 * np.eye(2)] * 2, dtype=complex)
    sur = majorize.build_code_surrogate(s, q, a0)
    a, rep = subsolve.solve_code_step(sur, s.power_budget, s.capacity_nats, a0)
    _, v = oracles.code_step_grid(sur, s.power_budget, s.capacity_nats, subsolve.GUARD_ETA)
    assert rep.status == "optimal"
    assert rep.objective <= v + 1e-12
    assert abs(rep.objective - v) <= 1e-3 * max(1.0, abs(v))


@pytest.mark.parametrize("with_rate", [False, True])
def test_code_fast_path_agrees_with_barrier(ref, rng, with_rate):
    for _ in range(5):
        a = random_code(rng, 6, 10.0)
        q = np.array([random_hpd(rng, 6, scale=2.0, shift=0.3) for _ in range(3)])
        c = metrics.total_rate_nats(ref, a, q) * 1.05 if with_rate else None
        sur = majorize.build_code_surrogate(ref, q, a, enforce_rate=with_rate)
        _, r1 = subsolve.solve_code_step(sur, 10.0, c, a)
        _, r2 = subsolve.solve_code_step(sur, 10.0, c, a, fast=False)
        assert r1.ok and r1.kkt_residual <= subsolve.KKT_TOL
        assert r1.objective == pytest.approx(r2.objective, abs=1e-8)


def test_quant_fast_path_agrees_with_barrier(ref, rng):
    for _ in range(4):
        a = random_code(rng, 6, 10.0)
        q = np.array([random_hpd(rng, 6, scale=2.0, shift=0.3) for _ in range(3)])
        c = metrics.total_rate_nats(ref, a, q) * 1.02
        sur = majorize.build_quant_surrogate(ref, a, q)
        q1, r1 = subsolve.solve_quant_step(sur, c, q)
        _, r2 = subsolve.solve_quant_step(sur, c, q, fast=False)
        assert r1.ok and r2.ok
        assert r1.objective == pytest.approx(r2.objective, abs=1e-8)
        assert sur.rate(q1) <= c * (1 + 1e-9)
        assert all(np.linalg.eigvalsh(x)[0] >= ref.floor(n) for n, x in enumerate(q1))


def test_surrogate_descent_is_true_descent(ref, rng):
    a = random_code(rng, 6, 10.0)
    q = np.array([random_hpd(rng, 6, scale=2.0, shift=0.3) for _ in range(3)])
    s = ref.with_capacity(metrics.total_rate_nats(ref, a, q) / math.log(2) * 1.01)
    b0 = metrics.total_bhattacharyya(s, a, q)
    a1, _ = subsolve.solve_code_step(majorize.build_code_surrogate(s, q, a), 10.0, s.capacity_nats, a)
    b1 = metrics.total_bhattacharyya(s, a1, q)
    q2, _ = subsolve.solve_quant_step(majorize.build_quant_surrogate(s, a1, q), s.capacity_nats, q)
    b2 = metrics.total_bhattacharyya(s, a1, q2)
    assert b0 <= b1 + 1e-12 <= b2 + 2e-12
    assert metrics.total_rate_nats(s, a1, q2) <= s.capacity_nats * (1 + 1e-8)


def test_diagonal_basis_restricts_solution(ref, rng):
    a = random_code(rng, 6, 10.0)
    q = np.array([np.diag(rng.uniform(0.5, 2.0, 6)).astype(complex) for _ in range(3)])
    c = metrics.total_rate_nats(ref, a, q)
    sur = majorize.build_quant_surrogate(ref, a, q)
    qd, rd = subsolve.solve_quant_step(sur, c, q, basis=matops.diagonal_basis(6))
    qf, rf = subsolve.solve_quant_step(sur, c, q)
    assert rd.ok
    assert all(np.allclose(x, np.diag(np.diag(x))) for x in qd)
    assert rf.objective <= rd.objective + 1e-10


def test_infeasible_rate_reported(ref, rng):
    a = random_code(rng, 6, 10.0)
    q = np.array([random_hpd(rng, 6) for _ in range(3)])
    sur = majorize.build_quant_surrogate(ref, a, q)
    q1, rep = subsolve.solve_quant_step(sur, -1.0, q)
    assert rep.status == "infeasible" and not rep.ok
    assert np.allclose(q1, q, atol=1e-15)


def test_trace_csv(tmp_path, ref, rng):
    a = random_code(rng, 6, 10.0)
    q = np.array([random_hpd(rng, 6, shift=0.3) for _ in range(3)])
    sur = majorize.build_quant_surrogate(ref, a, q)
    _, rep = subsolve.solve_quant_step(sur, metrics.total_rate_nats(ref, a, q), q, keep_trace=True)
    assert rep.trace
    p = tmp_path / "t.csv"
    subsolve.write_trace_csv(rep, p)
    lines = p.read_text().splitlines()
    assert lines[0].startswith("iteration,objective,kkt_residual")
    assert len(lines) == len(rep.trace) + 1
    assert rep.to_dict()["status"] == rep.status
