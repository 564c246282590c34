"""Brute-force reference solutions for tiny instances.

These deliberately avoid the optimizer's machinery (no barrier, no MM) so they
can serve as independent checks: golden-section search, zooming grid search,
nested quadrature.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
import scipy.integrate
import scipy.optimize

from crmr.scenario import Scenario

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section(f, lo: float, hi: float, tol: float = 1e-12, max_iter: int = 500):
    """Minimizer and minimum of a unimodal f on [lo, hi]."""
    a, b = lo, hi
    c, d = b - INV_PHI * (b - a), a + INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a <= tol * max(1.0, abs(a) + abs(b)):
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + INV_PHI * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    return x, f(x)


def zoom_grid_min(f, lo, hi, points: int = 21, rounds: int = 12, keep: int = 8):
    """Minimize a vectorized f over a box by repeated grid refinement.

    f takes an (m, d) array and returns (m,) values (inf marks infeasible points).
    Each round shrinks the box to the bounding box of the `keep` best grid points
    plus one cell, which follows thin feasible ridges better than zooming on the
    incumbent alone.
    """
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    box_lo, box_hi = lo.copy(), hi.copy()
    best_x, best_f = None, math.inf
    for _ in range(rounds):
        axes = [np.linspace(l, h, points) for l, h in zip(lo, hi)]
        grid = np.array(list(itertools.product(*axes)))
        vals = f(grid)
        order = np.argsort(vals, kind="stable")
        if vals[order[0]] < best_f:
            best_f, best_x = float(vals[order[0]]), grid[order[0]]
        if best_x is None:
            raise ValueError("no feasible grid point")
        top = grid[order[:keep]][np.isfinite(vals[order[:keep]])]
        top = np.vstack([top, best_x])
        cell = (hi - lo) / (points - 1)
        lo = np.maximum(top.min(axis=0) - cell, box_lo)
        hi = np.minimum(top.max(axis=0) + cell, box_hi)
    return best_x, best_f


# --- quantization step, one antenna, one sample -----------------------------------


def scalar_quant_step(sur, c_nats: float):
    """Exact minimizer of the scalar (N = K = 1) quantization surrogate by golden section."""
    a_ = float(sur.obj_mat[0].real.item())
    g = float(sur.obj_lin[0].real.item())
    h = float(sur.rate_lin[0].real.item())
    rc = float(sur.rate_const[0])
    floor = float(sur.floors[0])

    def rate(q):
        return -math.log(q) + h * q + rc - c_nats

    q_star = 1.0 / h  # rate minimizer
    if rate(q_star) > 0:
        raise ValueError("scalar quantization step is infeasible")
    lo = floor
    if rate(lo) > 0:
        lo = scipy.optimize.brentq(rate, floor, q_star, xtol=1e-15, rtol=1e-15)
    hi = q_star
    while rate(hi) <= 0:
        hi *= 2.0
    hi = scipy.optimize.brentq(rate, q_star, hi, xtol=1e-15, rtol=1e-15)

    def obj(q):
        return -math.log(a_ + q) + g * q + float(sur.obj_const[0])

    return golden_section(obj, lo, hi, tol=1e-14)


# --- code step, K = 2, by 4-D grid ------------------------------------------------


def code_step_grid(sur, power: float, c_nats: float | None, guard_eta: float, points: int = 15,
                   rounds: int = 25):
    """Grid-search minimum of the code surrogate over the real 2K-dimensional power ball."""
    dim = 2 * sur.code_len
    r = math.sqrt(power)

    def f(x):
        u = 1.0 + sur.slope[None, :] * (2.0 * x @ sur.g_real.T - sur.y0[None, :])
        quad = np.einsum("mi,ij,mj->m", x, sur.phi_mat, x)
        with np.errstate(invalid="ignore", divide="ignore"):
            val = quad - np.sum(np.log(np.where(u > 0, u, np.nan)), axis=1) + np.sum(sur.obj_const)
        bad = (np.sum(x * x, axis=1) > power) | np.any(u < guard_eta, axis=1) | ~np.isfinite(val)
        if c_nats is not None and sur.has_rate:
            rate = np.einsum("mi,ij,mj->m", x, sur.rate_mat, x) + np.sum(sur.rate_const)
            bad |= rate > c_nats
        return np.where(bad, np.inf, val)

    return zoom_grid_min(f, -r * np.ones(dim), r * np.ones(dim), points=points, rounds=rounds)


# --- scalar joint problem -----------------------------------------------------------


def scalar_joint_grid(s: Scenario, points: int = 101, rounds: int = 40):
    """Best Bhattacharyya distance for N = K = 1 over (|a|^2, q) by zooming 2-D grid search.

    For one sample the total rate collapses to log((q + m + (sc + st) p) / q), so
    the feasible q at power p are q >= q_min(p). The grid runs over
    (p, log(q / q_min(p))), which puts the rate boundary on a grid axis.
    Returns ((p, q), B).
    """
    if s.n_antennas != 1 or s.code_len != 1:
        raise ValueError("scalar oracle needs N = K = 1")
    st, sc = float(s.sigma_t2[0]), float(s.sigma_c2[0])
    m = float(s.noise_cov[0].real.item())
    floor = s.floor(0)
    expm1_c = math.expm1(s.capacity_nats)

    def q_of(z):
        q_min = np.maximum((m + (sc + st) * z[:, 0]) / expm1_c, floor)
        return q_min * np.exp(z[:, 1])

    def neg_b(z):
        p, q = z[:, 0], q_of(z)
        lam = np.maximum(st * p / (sc * p + m + q), 0.0)
        return -(np.log1p(0.5 * lam) - 0.5 * np.log1p(lam))

    z, v = zoom_grid_min(neg_b, [0.0, 0.0], [s.power_budget, 30.0], points=points, rounds=rounds)
    return (float(z[0]), float(q_of(z[None, :])[0])), -v


def scalar_epsilon(s: Scenario) -> float:
    """Isotropic epsilon for N = K = 1 with a = sqrt(P): root of the closed-form rate."""
    st, sc = float(s.sigma_t2[0]), float(s.sigma_c2[0])
    m = float(s.noise_cov[0].real.item())
    p = s.power_budget

    def g(e):
        return math.log1p(m / e) + math.log1p((sc + st) * p / (e + m)) - s.capacity_nats

    lo, hi = 1e-300, 1.0
    while g(hi) > 0:
        hi *= 10.0
    return scipy.optimize.bisect(g, lo, hi, xtol=1e-300, rtol=1e-15, maxiter=5000)


# --- detector tail by quadrature ------------------------------------------------------


def tail_by_quadrature(weights, gamma: float) -> float:
    """P(w1 E1 + w2 E2 + w3 E3 >= gamma) by nested integration over E1, E2."""
    w1, w2, w3 = weights

    def inner(y, x):
        rest = gamma - w1 * x - w2 * y
        sf = 1.0 if rest <= 0 else math.exp(-rest / w3)
        return math.exp(-x - y) * sf

    val, _ = scipy.integrate.dblquad(inner, 0.0, np.inf, 0.0, np.inf, epsabs=1e-12, epsrel=1e-10)
    return val
