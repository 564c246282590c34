"""Solvers for the two convex block subproblems.

Both are handled by one log-barrier Newton method over real coordinates: the
code vector through its 2K real embedding, each Q_n through coordinates in an
orthonormal Hermitian basis.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
import scipy.optimize

from crmr import matops
from crmr.majorize import CodeSurrogate, QuantSurrogate

log = logging.getLogger(__name__)

KKT_TOL = 1e-7
FEAS_RTOL = 1e-9
MAX_ITER = 500
BARRIER_MU = 10.0
GUARD_ETA = 1e-6
START_MARGIN = 1e-6  # relative interior margin required of a barrier start point


class SolverError(RuntimeError):
    def __init__(self, msg: str, report: "SolveReport | None" = None):
        super().__init__(msg)
        self.report = report


@dataclass
class SolveReport:
    status: str  # optimal | max-iter | infeasible | numerical-failure
    objective: float
    kkt_residual: float
    iterations: int
    slacks: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == "optimal"

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "objective": self.objective,
            "kkt_residual": self.kkt_residual,
            "iterations": self.iterations,
            "slacks": self.slacks,
            "notes": list(self.notes),
        }


def write_trace_csv(report: SolveReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        keys = sorted({k for row in report.trace for k in row.get("slacks", {})})
        w.writerow(["iteration", "objective", "kkt_residual", *keys])
        for row in report.trace:
            w.writerow([row["iteration"], repr(row["objective"]), repr(row["kkt_residual"]),
                        *(repr(row["slacks"].get(k)) for k in keys)])


def kkt_residual(grad_obj, cons_grads: Sequence = (), cons_vals: Sequence = ()) -> float:
    """KKT residual of a primal-feasible point of min f0 s.t. f_i <= 0.

    Multipliers mu >= 0 are fitted by nonnegative least squares to
    min |grad f0 + sum mu_i grad f_i|^2 + sum (mu_i f_i)^2, so the value covers
    stationarity and complementary slackness.
    """
    g = np.asarray(grad_obj, dtype=float)
    if len(cons_grads) == 0:
        return float(np.linalg.norm(g))
    a = np.column_stack([np.asarray(c, dtype=float) for c in cons_grads])
    f = np.abs(np.asarray(cons_vals, dtype=float))
    a_aug = np.vstack([a, np.diag(f)])
    b_aug = np.concatenate([-g, np.zeros(len(f))])
    _, rnorm = scipy.optimize.nnls(a_aug, b_aug, maxiter=50 * a_aug.shape[1])
    return float(rnorm)


@dataclass
class BarrierResult:
    x: np.ndarray
    status: str
    iterations: int
    t: float
    history: list


Fn = Callable  # f(x, order) -> value | (value, grad, hess); +inf outside domain


def barrier_minimize(
    f0: Fn,
    ineqs: Sequence[Fn],
    x0,
    extra: Fn | None = None,
    extra_degree: float = 0.0,
    t0: float | None = None,
    mu: float = BARRIER_MU,
    gap_tol: float = 1e-10,
    newton_tol: float = 1e-12,
    max_iter: int = MAX_ITER,
    on_outer: Callable | None = None,
) -> BarrierResult:
    """Minimize f0 subject to f_i <= 0 from a strictly feasible x0.

    `extra` is an additional self-concordant barrier (e.g. -logdet) of the given
    degree; it is kept at unit weight like the scalar constraint barriers.
    """
    x = np.array(x0, dtype=float)
    m = len(ineqs) + extra_degree
    t = 1.0 if t0 is None else t0
    it = 0
    history = []

    def phi(x, order):
        v0 = f0(x, order)
        vals = [fi(x, order) for fi in ineqs]
        ve = extra(x, order) if extra is not None else None
        if order == 0:
            if not np.isfinite(v0):
                return math.inf
            total = t * v0
            for v in vals:
                if not v < 0:
                    return math.inf
                total -= math.log(-v)
            if ve is not None:
                if not np.isfinite(ve):
                    return math.inf
                total += ve
            return total
        val, g, h = v0
        total, grad, hess = t * val, t * g, t * h
        for v, gi, hi in vals:
            total -= math.log(-v)
            grad = grad + gi / (-v)
            hess = hess + np.outer(gi, gi) / v**2 + hi / (-v)
        if ve is not None:
            total += ve[0]
            grad = grad + ve[1]
            hess = hess + ve[2]
        return total, grad, hess

    if not np.isfinite(phi(x, 0)):
        return BarrierResult(x, "infeasible", 0, t, history)
    if t0 is None:
        # weight that makes x0 closest to the central path (least-squares fit of
        # t * grad f0 + grad barrier = 0)
        g0 = f0(x, 1)[1]
        t = 0.0
        _, gb, _ = phi(x, 1)
        gg = float(g0 @ g0)
        if gg > 0:
            t = -float(g0 @ gb) / gg
        t = min(max(t, 1.0), m / gap_tol if m else 1.0)

    while True:
        # centering
        while True:
            val, g, h = phi(x, 2)
            try:
                c = scipy.linalg.cho_factor(h)
                dx = -scipy.linalg.cho_solve(c, g)
            except (np.linalg.LinAlgError, ValueError):
                dx = -np.linalg.lstsq(h, g, rcond=None)[0]
            dec2 = float(-g @ dx)
            it += 1
            if not np.isfinite(dec2):
                return BarrierResult(x, "numerical-failure", it, t, history)
            # decrement below round-off of phi itself counts as centered
            if dec2 / 2 <= max(newton_tol, 1e-14 * abs(val)):
                break
            step = 1.0
            while True:
                xn = x + step * dx
                vn = phi(xn, 0)
                if np.isfinite(vn) and vn <= val - 0.25 * step * dec2:
                    break
                step *= 0.5
                if step < 1e-14:
                    break
            if step < 1e-14 or val - vn <= 1e-13 * abs(val):
                # no progress possible at working precision; treat as centered
                if step >= 1e-14:
                    x = xn
                break
            x = xn
            if it >= max_iter:
                return BarrierResult(x, "max-iter", it, t, history)
        history.append({"t": t, "iterations": it, "x": x.copy()})
        if on_outer is not None:
            on_outer(x, t, it)
        if m == 0 or m / t < gap_tol:
            return BarrierResult(x, "optimal", it, t, history)
        t *= mu


# --- code-vector step ----------------------------------------------------------


def _active_set_newton(f0: Fn, active: Sequence[Fn], x0, max_iter: int = 50):
    """Newton on the KKT system of min f0 with the `active` constraints held as equalities.

    Returns (x, multipliers, iterations) or None when the iteration fails to
    converge from x0 (wrong active-set guess, leaves the domain, singular system).
    """
    x = np.array(x0, dtype=float)
    m = len(active)

    def state(x, mu):
        v, g, h = f0(x, 2)
        if not np.isfinite(v):
            return None
        cv, cg, ch = [], [], []
        for f in active:
            a, b, c = f(x, 2)
            cv.append(a)
            cg.append(b)
            ch.append(c)
        cg = np.array(cg).reshape(m, x.size)
        res = np.concatenate([g + cg.T @ mu, cv])
        hl = h + sum(mu_i * c for mu_i, c in zip(mu, ch))
        return res, hl, cg, g

    v, g, _ = f0(x, 2)
    if not np.isfinite(v):
        return None
    if m:
        cg = np.array([f(x, 1)[1] for f in active]).reshape(m, x.size)
        mu = np.linalg.lstsq(cg.T, -g, rcond=None)[0]
        mu = np.maximum(mu, 1e-8)
    else:
        mu = np.zeros(0)
    st = state(x, mu)
    scale = 1.0 + np.linalg.norm(g)
    for it in range(1, max_iter + 1):
        res, hl, cg, _ = st
        kkt = np.block([[hl, cg.T], [cg, np.zeros((m, m))]])
        try:
            d = np.linalg.solve(kkt, -res)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(d)):
            return None
        merit = float(res @ res)
        step = 1.0
        while step > 1e-10:
            x_n, mu_n = x + step * d[: x.size], mu + step * d[x.size :]
            st_n = state(x_n, mu_n)
            if st_n is not None:
                r = float(st_n[0] @ st_n[0])
                if r <= (1 - 1e-4 * step) * merit or r < (1e-15 * scale) ** 2:
                    break
            step *= 0.5
        else:
            return None
        x, mu, st = x_n, mu_n, st_n
        if np.linalg.norm(st[0]) <= 1e-12 * scale:
            return x, mu, it
    return None


def _code_problem(sur: CodeSurrogate, power: float, c_nats: float | None):
    eta = GUARD_ETA
    n2 = 2 * sur.code_len
    cons, names = [], []

    def f_power(x, order=0):
        v = float(x @ x) - power
        return v if not order else (v, 2 * x, 2 * np.eye(n2))

    cons.append(f_power)
    names.append("power")
    if c_nats is not None and sur.has_rate:

        def f_rate(x, order=0):
            if not order:
                return sur.rate_real(x) - c_nats
            v, g, h = sur.rate_real(x, 2)
            return v - c_nats, g, h

        cons.append(f_rate)
        names.append("rate")
    for n in range(sur.n_antennas):

        def f_guard(x, order=0, n=n):
            v = eta - float(sur.affine(x)[n])
            if not order:
                return v
            return v, -2.0 * sur.slope[n] * sur.g_real[n], np.zeros((n2, n2))

        cons.append(f_guard)
        names.append(f"guard{n + 1}")
    return sur.objective_real, cons, names


def _slack_dict(cons, names, x, scales):
    return {nm: float(-f(x)) / sc for f, nm, sc in zip(cons, names, scales)}


def solve_code_step(
    sur: CodeSurrogate,
    power: float,
    c_nats: float | None,
    a_init,
    tol: float = KKT_TOL,
    max_iter: int = MAX_ITER,
    keep_trace: bool = False,
    fast: bool = True,
):
    """Minimize the code surrogate over the power ball and the rate surrogate bound.

    `c_nats=None` drops the rate constraint. With `fast`, likely active sets are
    tried by Newton's method first; a result is kept only if it certifies as a
    KKT point (the problem is convex, so that is the optimum). Returns (a, SolveReport).
    """
    f0, cons, names = _code_problem(sur, power, c_nats)
    emb = sur.embedding
    x_ref = emb.vec(a_init)
    scales = [power] + ([abs(c_nats)] if "rate" in names else []) + [1.0] * sur.n_antennas
    notes = []
    ref_ok = all(f(x_ref) <= FEAS_RTOL * sc for f, sc in zip(cons, scales))
    x0 = None
    for c in (1.0, 1 - 1e-6, 1 - 1e-4, 1 - 1e-2, 0.9, 0.7, 0.5, 0.25, 0.1, 0.01):
        if all(f(c * x_ref) < -START_MARGIN * sc for f, sc in zip(cons, scales)) and np.isfinite(f0(c * x_ref)):
            x0 = c * x_ref
            if c < 1 - 1e-4:
                notes.append(f"start scaled by {c} to restore strict feasibility")
                log.info("code step: start scaled by %g to restore strict feasibility", c)
            break
    if x0 is None:
        rep = SolveReport("infeasible", math.inf, math.inf, 0, _slack_dict(cons, names, x_ref, scales), notes=notes)
        return np.asarray(a_init, dtype=complex), rep
    trace = []

    def on_outer(x, t, it):
        if keep_trace:
            trace.append(_code_trace_row(f0, cons, names, scales, x, it))

    x, iters, status = None, 0, "optimal"
    if fast and not keep_trace:
        x, iters = _code_fast_path(f0, cons, names, scales, x0, tol)
    if x is None:
        res = barrier_minimize(f0, cons, x0, max_iter=max_iter, on_outer=on_outer)
        x, iters, status = res.x, iters + res.iterations, res.status
    if ref_ok and f0(x) > f0(x_ref):
        x = x_ref
        notes.append("warm start kept (no surrogate descent)")
    val, g, _ = f0(x, 2)
    grads = [f(x, 1)[1] for f in cons]
    vals = [f(x) for f in cons]
    kkt = kkt_residual(g, grads, vals)
    status = _final_status(status, kkt, tol, notes)
    rep = SolveReport(status, float(val), kkt, iters, _slack_dict(cons, names, x, scales), trace, notes)
    return emb.unvec(x), rep


def _code_fast_path(f0, cons, names, scales, x0, tol):
    """(x, newton iterations) from the first certified active-set guess, or (None, iterations)."""
    idx = {nm: i for i, nm in enumerate(names)}
    guesses = [["power"], ["power", "rate"], ["rate"], []]
    total = 0
    for guess in guesses:
        if any(g not in idx for g in guess):
            continue
        out = _active_set_newton(f0, [cons[idx[g]] for g in guess], x0)
        if out is None:
            continue
        x, mu, it = out
        total += it
        if np.any(mu < 0) or any(f(x) > FEAS_RTOL * sc for f, sc in zip(cons, scales)):
            continue
        g = f0(x, 1)[1]
        if kkt_residual(g, [f(x, 1)[1] for f in cons], [f(x) for f in cons]) <= tol:
            return x, total
    return None, total


def _final_status(status, kkt, tol, notes):
    if status == "optimal" and not kkt <= tol:
        notes.append(f"barrier converged but KKT residual {kkt:.2e} exceeds {tol:.0e}")
        return "numerical-failure"
    return status


def _code_trace_row(f0, cons, names, scales, x, it):
    val, g, _ = f0(x, 2)
    kkt = kkt_residual(g, [f(x, 1)[1] for f in cons], [f(x) for f in cons])
    return {"iteration": it, "objective": float(val), "kkt_residual": kkt,
            "slacks": _slack_dict(cons, names, x, scales)}


# --- quantization-noise step -------------------------------------------------


class _QuantProblem:
    """Quantization step in stacked basis coordinates theta = [theta_1, ..., theta_N]."""

    def __init__(self, sur: QuantSurrogate, c_nats: float, basis):
        self.sur = sur
        self.c_nats = c_nats
        self.basis = basis
        self.n_ant = sur.n_antennas
        self.k = sur.anchor.shape[1]
        self.nb = basis.shape[0]
        self.bmat = basis.reshape(self.nb, -1).T  # (K^2, nb)
        self.bmat_h = self.bmat.conj().T
        self.zeros = np.zeros((self.n_ant, self.k, self.k))
        self.floor_shift = -sur.floors[:, None, None] * np.eye(self.k)
        self.obj_const = float(np.sum(sur.obj_const))
        self.rate_const = float(np.sum(sur.rate_const))

    def unpack(self, theta):
        flat = np.asarray(theta, dtype=float).reshape(self.n_ant, self.nb) @ self.bmat.T
        return flat.reshape(self.n_ant, self.k, self.k)

    def pack(self, q):
        return np.real(np.asarray(q, dtype=complex).reshape(self.n_ant, -1) @ self.bmat.conj()).ravel()

    def _blocks(self, q, mats, lins, order):
        """sum_n [-logdet(mats_n + Q_n) + Re tr(lins_n Q_n)], optionally with
        gradient and block-diagonal Hessian (stacked, shape (N, nb, nb))."""
        x = mats + q
        try:
            c = np.linalg.cholesky(x)
        except np.linalg.LinAlgError:
            return (math.inf, None, None) if order else math.inf
        val = -2.0 * float(np.sum(np.log(np.real(np.diagonal(c, axis1=1, axis2=2))))) + float(
            np.real(np.sum(lins * q.transpose(0, 2, 1)))
        )
        if not order:
            return val
        xi = np.linalg.inv(x)
        xi = 0.5 * (xi + xi.conj().transpose(0, 2, 1))
        grad = self.pack(lins - xi)
        k2 = self.k * self.k
        kr = (xi[:, :, None, :, None] * xi.transpose(0, 2, 1)[:, None, :, None, :]).reshape(self.n_ant, k2, k2)
        hess = np.real(self.bmat_h @ kr @ self.bmat)
        return val, grad, hess

    def objective(self, theta, order=0, blocks=False):
        sur = self.sur
        r = self._blocks(self.unpack(theta), sur.obj_mat, sur.obj_lin, order)
        if not order:
            return r + self.obj_const
        if not np.isfinite(r[0]):
            return r
        return r[0] + self.obj_const, r[1], r[2] if blocks else scipy.linalg.block_diag(*r[2])

    def rate(self, theta, order=0, blocks=False):
        r = self._blocks(self.unpack(theta), self.zeros, self.sur.rate_lin, order)
        c = self.rate_const - self.c_nats
        if not order:
            return r + c
        if not np.isfinite(r[0]):
            return r
        return r[0] + c, r[1], r[2] if blocks else scipy.linalg.block_diag(*r[2])

    def floor_barrier(self, theta, order=0):
        r = self._blocks(self.unpack(theta), self.floor_shift, self.zeros, order)
        if not order or not np.isfinite(r[0]):
            return r
        return r[0], r[1], scipy.linalg.block_diag(*r[2])

    @property
    def floor_degree(self) -> float:
        return float(self.n_ant * self.k)

    def floor_slack(self, theta) -> float:
        q = self.unpack(theta)
        return float(np.min(np.linalg.eigvalsh(q)[:, 0] - self.sur.floors))


def _active_rate_newton(prob: _QuantProblem, th0, max_iter: int = 50):
    """Newton on the KKT system with the rate bound held as an equality.

    Returns (theta, nu, iterations) or None if the iteration leaves the region
    where that active-set guess is valid.
    """
    th = np.array(th0, dtype=float)
    n, nb = prob.n_ant, prob.nb
    f_val, f_g, f_h = prob.objective(th, 2, blocks=True)
    r_val, r_g, r_h = prob.rate(th, 2, blocks=True)
    if not (np.isfinite(f_val) and np.isfinite(r_val)):
        return None
    nu = max(-float(f_g @ r_g) / float(r_g @ r_g), 1e-8)

    def residual(f_g, r_g, r_val, nu):
        return np.concatenate([f_g + nu * r_g, [r_val]])

    res = residual(f_g, r_g, r_val, nu)
    scale = 1.0 + np.linalg.norm(f_g) + abs(prob.c_nats)
    for it in range(1, max_iter + 1):
        h = f_h + nu * r_h
        g_l = res[:-1]
        try:
            c = np.linalg.cholesky(h)
        except np.linalg.LinAlgError:
            return None
        rhs = np.stack([g_l.reshape(n, nb), r_g.reshape(n, nb)], axis=-1)
        sol = np.linalg.solve(h, rhs)
        u, v = sol[..., 0].ravel(), sol[..., 1].ravel()
        dnu = (r_val - r_g @ u) / (r_g @ v)
        dth = -u - v * dnu
        merit = float(res @ res)
        step = 1.0
        while step > 1e-10:
            th_n = th + step * dth
            nu_n = nu + step * dnu
            fv = prob.objective(th_n, 2, blocks=True)
            if np.isfinite(fv[0]):
                rv = prob.rate(th_n, 2, blocks=True)
                if np.isfinite(rv[0]):
                    res_n = residual(fv[1], rv[1], rv[0], nu_n)
                    if float(res_n @ res_n) <= (1 - 1e-4 * step) * merit or float(res_n @ res_n) < 1e-30 * scale:
                        break
            step *= 0.5
        else:
            return None
        th, nu, res = th_n, nu_n, res_n
        (f_val, f_g, f_h), (r_val, r_g, r_h) = fv, rv
        if nu <= 0:
            return None
        if np.linalg.norm(res) <= 1e-12 * scale:
            return th, nu, it
    return None


def solve_quant_step(
    sur: QuantSurrogate,
    c_nats: float,
    q_init,
    tol: float = KKT_TOL,
    max_iter: int = MAX_ITER,
    basis=None,
    keep_trace: bool = False,
    fast: bool = True,
):
    """Minimize the quantization surrogate subject to the rate surrogate bound and Q_n >= delta_n I.

    `basis` restricts each Q_n to the span of the given Hermitian basis
    (default: all Hermitian matrices). With `fast`, an active-constraint Newton
    solve is tried first and accepted only if it certifies as a KKT point;
    otherwise the barrier method runs. Returns (Q stack, SolveReport).
    """
    k = sur.anchor.shape[1]
    basis = matops.hermitian_basis(k) if basis is None else basis
    prob = _QuantProblem(sur, c_nats, basis)
    q_ref = np.array([matops.hermitize(x) for x in q_init])
    th_ref = prob.pack(q_ref)
    notes = []
    scale = max(abs(c_nats), 1.0)
    ref_ok = prob.rate(th_ref) <= FEAS_RTOL * scale and np.isfinite(prob.floor_barrier(th_ref))
    th0 = None
    for c in (1.0, 1 + 1e-6, 1 + 1e-4, 1 + 1e-2, 1.1, 1.5, 2.0, 4.0, 10.0, 100.0, 1e4):
        th = c * th_ref
        if prob.rate(th) < -START_MARGIN * scale and np.isfinite(prob.floor_barrier(th)) and np.isfinite(prob.objective(th)):
            th0 = th
            if c > 1 + 1e-4:
                notes.append(f"start scaled by {c} to restore strict feasibility")
            break
    if th0 is None:
        rep = SolveReport("infeasible", math.inf, math.inf, 0, {"rate": -prob.rate(th_ref) / scale}, notes=notes)
        return q_ref, rep

    th, iters, status = None, 0, "optimal"
    if fast and not keep_trace:
        out = _active_rate_newton(prob, th0)
        if out is not None:
            cand, nu, iters = out
            rv = prob.rate(cand)
            if rv <= FEAS_RTOL * scale and prob.floor_slack(cand) > 0:
                row = _quant_trace_row(prob, cand, iters, scale)
                if row["kkt_residual"] <= tol:
                    th = cand
    if th is None:
        trace = []

        def on_outer(x, t, it):
            if keep_trace:
                trace.append(_quant_trace_row(prob, x, it, scale))

        res = barrier_minimize(
            prob.objective, [prob.rate], th0,
            extra=prob.floor_barrier, extra_degree=prob.floor_degree,
            max_iter=max_iter, on_outer=on_outer,
        )
        th, iters, status = res.x, iters + res.iterations, res.status
    else:
        trace = []
    if ref_ok and prob.objective(th) > prob.objective(th_ref):
        th = th_ref
        notes.append("warm start kept (no surrogate descent)")
    row = _quant_trace_row(prob, th, iters, scale)
    status = _final_status(status, row["kkt_residual"], tol, notes)
    rep = SolveReport(status, row["objective"], row["kkt_residual"], iters, row["slacks"], trace, notes)
    q = prob.unpack(th)
    return 0.5 * (q + q.conj().transpose(0, 2, 1)), rep


def _quant_trace_row(prob: _QuantProblem, th, it, scale):
    val, g, _ = prob.objective(th, 1)
    rv, rg, _ = prob.rate(th, 1)
    kkt = kkt_residual(g, [rg], [rv])
    return {"iteration": it, "objective": float(val), "kkt_residual": kkt,
            "slacks": {"rate": float(-rv) / scale, "psd_floor": prob.floor_slack(th)}}
