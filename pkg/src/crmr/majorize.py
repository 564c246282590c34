"""Convex majorizers for the two block updates, and their numerical certification.

Code block (Q fixed, W_n = (M_n + Q_n)^-1, y_n(a) = a^H W_n a):

    -B_n = -log(1 + s_n y) + 0.5 log(1 + sc y) + 0.5 log(1 + (sc + st) y),  s_n = sc + st/2

The two concave log terms are replaced by their tangents in y (convex quadratics
in a). The first term is convex and decreasing in y, and y(a) is bounded below by
its tangent plane 2 Re(a0^H W a) - y0, which gives the convex bound
-log(1 + s_n (2 Re(a0^H W a) - y0)). The rate bound linearizes log(1 + x).

Quantization block (a fixed): the concave logdet terms of -B_n and of the rate
are replaced by their tangents at Q0, leaving -logdet(affine(Q)) + linear.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from crmr import matops
from crmr.metrics import neg_bhattacharyya_of_y
from crmr.scenario import Scenario

log = logging.getLogger(__name__)

# Names of deliberately broken constructions; used by `crmr validate --inject-fault`.
FAULTS: set[str] = set()

TANGENCY_TOL = 1e-8
BOUND_TOL = 1e-8
GRAD_RTOL = 1e-6
FD_STEP = 1e-5


class CertificationError(RuntimeError):
    def __init__(self, cert: "Certificate"):
        super().__init__(f"surrogate certification failed: {cert.summary()}")
        self.certificate = cert


@dataclass
class CodeSurrogate:
    st: np.ndarray
    sc: np.ndarray
    w: np.ndarray  # (N, K, K) (M_n + Q_n)^-1
    anchor: np.ndarray
    y0: np.ndarray
    x0: np.ndarray  # rate argument (sc + st) y0
    lam0: np.ndarray
    phi: np.ndarray  # quadratic weights
    slope: np.ndarray  # s_n = sc + st/2
    d: np.ndarray  # (N, K) W_n a0: log-affine term is 1 + s_n (2 Re(d_n^H a) - y0_n)
    obj_const: np.ndarray
    rate_coef: np.ndarray | None  # None: rate constraint not enforced (Q singular)
    rate_const: np.ndarray | None
    n_antennas: int = field(init=False)
    code_len: int = field(init=False)

    def __post_init__(self):
        self.n_antennas, self.code_len = self.d.shape
        emb = matops.real_embed(self.code_len)
        self.embedding = emb
        self.w_real = np.array([emb.mat(w) for w in self.w])
        self.g_real = np.array([emb.vec(v) for v in self.d])
        self.phi_mat = np.tensordot(self.phi, self.w_real, axes=1)
        if self.rate_coef is not None:
            self.rate_mat = np.tensordot(self.rate_coef, self.w_real, axes=1)

    @property
    def has_rate(self) -> bool:
        return self.rate_coef is not None

    def affine(self, x):
        """Arguments of the log-affine terms at real point x, shape (N,)."""
        return 1.0 + self.slope * (2.0 * (self.g_real @ x) - self.y0)

    # real-coordinate (2K) forms used by the solver --------------------------
    def objective_real(self, x, order: int = 0):
        u = self.affine(x)
        if np.any(u <= 0):
            return (math.inf, None, None) if order else math.inf
        val = float(x @ self.phi_mat @ x - np.sum(np.log(u)) + np.sum(self.obj_const))
        if not order:
            return val
        coef = 2.0 * self.slope / u
        grad = 2.0 * self.phi_mat @ x - coef @ self.g_real
        hess = 2.0 * self.phi_mat + (self.g_real.T * coef**2) @ self.g_real
        return val, grad, hess

    def rate_real(self, x, order: int = 0):
        val = float(x @ self.rate_mat @ x + np.sum(self.rate_const))
        if not order:
            return val
        return val, 2.0 * self.rate_mat @ x, 2.0 * self.rate_mat

    # complex-vector forms --------------------------------------------------
    def objective(self, a) -> float:
        return self.objective_real(self.embedding.vec(a))

    def rate(self, a) -> float:
        return self.rate_real(self.embedding.vec(a))


def build_code_surrogate(s: Scenario, q, a_anchor, enforce_rate: bool = True) -> CodeSurrogate:
    """Majorizer of sum_n -B_n(a, Q_n) and of the total rate around `a_anchor`.

    With `enforce_rate=False` (or singular Q) only the objective part is built.
    """
    a0 = np.asarray(a_anchor, dtype=complex)
    st, sc = s.sigma_t2, s.sigma_c2
    n_ant = s.n_antennas
    w = np.array([matops.inv(s.noise_cov[n] + q[n]) for n in range(n_ant)])
    y0 = np.array([float(np.real(np.vdot(a0, w[n] @ a0))) for n in range(n_ant)])
    p = sc + st
    phi = 0.5 * sc / (1.0 + sc * y0) + 0.5 * p / (1.0 + p * y0)
    obj_const = 0.5 * (np.log1p(sc * y0) - sc * y0 / (1.0 + sc * y0)) + 0.5 * (
        np.log1p(p * y0) - p * y0 / (1.0 + p * y0)
    )
    slope = sc + 0.5 * st
    d = np.array([w[n] @ a0 for n in range(n_ant)])
    if "code_linear_sign" in FAULTS:
        d = -d
    x0 = p * y0
    lam0 = st * y0 / (1.0 + sc * y0)
    rate_coef = rate_const = None
    if enforce_rate and all(matops.is_pd(q[n]) for n in range(n_ant)):
        ld = np.array(
            [matops.logdet(s.noise_cov[n] + q[n]) - matops.logdet(q[n]) for n in range(n_ant)]
        )
        rate_coef = p / (1.0 + x0)
        rate_const = ld + np.log1p(x0) - x0 / (1.0 + x0)
    return CodeSurrogate(st, sc, w, a0, y0, x0, lam0, phi, slope, d, obj_const, rate_coef, rate_const)


def printed_code_coefficients(s: Scenario, q, a_anchor):
    """The per-antenna (phi, d) coefficients exactly as typeset in the source derivation.

    The typeset d adds a scalar to a vector; numpy broadcasting reproduces that
    literally. Diagnostic only: these are never used to build a surrogate.
    """
    a0 = np.asarray(a_anchor, dtype=complex)
    out = []
    for n in range(s.n_antennas):
        w = matops.inv(s.noise_cov[n] + q[n])
        beta = s.sigma_c2[n]
        gamma = s.sigma_t2[n] / beta
        y = float(np.real(np.vdot(a0, w @ a0)))
        lam = gamma - gamma / (1.0 + beta * y)
        phi = beta / (1 + beta * y) + beta * (1 + 0.5 * gamma) + 0.5 * gamma / (1 + lam) * beta / (1 + beta * y) ** 2
        d = 2 * beta * (1 + 0.5 * gamma) / (1 + beta * y * (1 + 0.5 * gamma)) + 2 * beta * (1 + 0.5 * gamma) * (w @ a0)
        out.append((phi, d))
    return out


def compare_printed(s: Scenario, q, surrogate: CodeSurrogate) -> list[dict]:
    rows = []
    for n, (phi_p, d_p) in enumerate(printed_code_coefficients(s, q, surrogate.anchor)):
        row = {
            "antenna": n + 1,
            "phi_printed": float(phi_p),
            "phi_used": float(surrogate.phi[n]),
            "d_printed_norm": float(np.linalg.norm(d_p)),
            "d_used_norm": float(2 * surrogate.slope[n] * np.linalg.norm(surrogate.d[n])),
        }
        log.info("printed vs certified coefficients: %s", row)
        rows.append(row)
    return rows


def code_true_objective(s: Scenario, q) -> Callable:
    """sum_n -B_n(a, Q_n) as a function of the 2K real coordinates of a."""
    w = [matops.inv(s.noise_cov[n] + q[n]) for n in range(s.n_antennas)]
    emb = matops.real_embed(s.code_len)
    wr = [emb.mat(x) for x in w]

    def f(x):
        return float(
            sum(neg_bhattacharyya_of_y(s.sigma_t2[n], s.sigma_c2[n], x @ wr[n] @ x) for n in range(s.n_antennas))
        )

    return f


def code_true_rate(s: Scenario, q) -> Callable:
    emb = matops.real_embed(s.code_len)
    wr, ld = [], []
    for n in range(s.n_antennas):
        wr.append(emb.mat(matops.inv(s.noise_cov[n] + q[n])))
        ld.append(matops.logdet(s.noise_cov[n] + q[n]) - matops.logdet(q[n]))
    p = s.sigma_c2 + s.sigma_t2

    def f(x):
        return float(sum(ld[n] + math.log1p(p[n] * (x @ wr[n] @ x)) for n in range(s.n_antennas)))

    return f


@dataclass
class QuantSurrogate:
    code: np.ndarray
    anchor: np.ndarray  # (N, K, K)
    obj_mat: np.ndarray  # A_n = (sc + st/2) a a^H + M_n; objective has -logdet(A_n + Q_n)
    obj_lin: np.ndarray  # G_n
    obj_const: np.ndarray
    rate_lin: np.ndarray  # H_n; rate has -logdet(Q_n) + Re tr(H_n Q_n)
    rate_const: np.ndarray
    floors: np.ndarray

    @property
    def n_antennas(self) -> int:
        return self.anchor.shape[0]

    def objective(self, q) -> float:
        total = 0.0
        for n in range(self.n_antennas):
            x = self.obj_mat[n] + q[n]
            if not matops.is_pd(x):
                return math.inf
            total += -matops.logdet_chol(x) + _tr(self.obj_lin[n], q[n]) + self.obj_const[n]
        return total

    def rate(self, q) -> float:
        total = 0.0
        for n in range(self.n_antennas):
            if not matops.is_pd(q[n]):
                return math.inf
            total += -matops.logdet_chol(q[n]) + _tr(self.rate_lin[n], q[n]) + self.rate_const[n]
        return total


def _tr(a, b) -> float:
    """Re tr(A B) for Hermitian A, B."""
    return float(np.real(np.sum(a * b.T)))


def build_quant_surrogate(s: Scenario, a_fixed, q_anchor) -> QuantSurrogate:
    a = np.asarray(a_fixed, dtype=complex)
    aa = np.outer(a, a.conj())
    st, sc = s.sigma_t2, s.sigma_c2
    obj_mat, obj_lin, obj_const, rate_lin, rate_const = [], [], [], [], []
    for n in range(s.n_antennas):
        q0 = matops.hermitize(q_anchor[n])
        m = s.noise_cov[n]
        s1 = sc[n] * aa + m + q0
        s2 = (sc[n] + st[n]) * aa + m + q0
        g1, g2 = matops.inv(s1), matops.inv(s2)
        obj_mat.append((sc[n] + 0.5 * st[n]) * aa + m)
        sign = -1.0 if "quant_linear_sign" in FAULTS else 1.0
        obj_lin.append(sign * 0.5 * (g1 + g2))
        obj_const.append(
            0.5 * (matops.logdet(s1) - _tr(g1, q0)) + 0.5 * (matops.logdet(s2) - _tr(g2, q0))
        )
        rate_lin.append(g2)
        rate_const.append(matops.logdet(s2) - _tr(g2, q0))
    floors = np.array([s.floor(n) for n in range(s.n_antennas)])
    return QuantSurrogate(
        a,
        np.array([matops.hermitize(x) for x in q_anchor]),
        np.array(obj_mat),
        np.array(obj_lin),
        np.array(obj_const),
        np.array(rate_lin),
        np.array(rate_const),
        floors,
    )


def quant_true_objective(s: Scenario, a) -> Callable:
    """sum_n -B_n(a, Q_n) as a function of the stacked Q (matrix form)."""
    a = np.asarray(a, dtype=complex)
    aa = np.outer(a, a.conj())
    st, sc = s.sigma_t2, s.sigma_c2

    def f(q):
        total = 0.0
        for n in range(s.n_antennas):
            base = s.noise_cov[n] + q[n]
            try:
                total += (
                    -matops.logdet_chol((sc[n] + 0.5 * st[n]) * aa + base)
                    + 0.5 * matops.logdet_chol(sc[n] * aa + base)
                    + 0.5 * matops.logdet_chol((sc[n] + st[n]) * aa + base)
                )
            except matops.NotPositiveDefiniteError:
                return math.nan
        return total

    return f


def quant_true_rate(s: Scenario, a) -> Callable:
    a = np.asarray(a, dtype=complex)
    aa = np.outer(a, a.conj())
    p = s.sigma_c2 + s.sigma_t2

    def f(q):
        total = 0.0
        for n in range(s.n_antennas):
            try:
                total += matops.logdet_chol(p[n] * aa + s.noise_cov[n] + q[n]) - matops.logdet_chol(q[n])
            except matops.NotPositiveDefiniteError:
                return math.nan
        return total

    return f


# --- certification -----------------------------------------------------------


@dataclass
class Certificate:
    passed: bool
    tangency_margin: float
    bound_margin: float  # min over samples of surrogate - true (normalized)
    grad_error: float | None
    worst_sample: list | None
    n_samples: int
    failures: list = field(default_factory=list)
    label: str = ""

    def summary(self) -> str:
        status = "pass" if self.passed else "FAIL(" + ",".join(self.failures) + ")"
        g = "n/a" if self.grad_error is None else f"{self.grad_error:.2e}"
        return (
            f"{self.label or 'surrogate'}: {status} tangency={self.tangency_margin:.2e} "
            f"bound={self.bound_margin:.2e} grad={g} samples={self.n_samples}"
        )

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "passed": self.passed,
            "failures": list(self.failures),
            "tangency_margin": self.tangency_margin,
            "bound_margin": self.bound_margin,
            "grad_error": self.grad_error,
            "n_samples": self.n_samples,
            "worst_sample": self.worst_sample,
        }


def _fd_grad(f, x, h):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def certify(
    surrogate: Callable,
    true_fn: Callable,
    anchor,
    sampler: Callable,
    n_samples: int = 100,
    rng: np.random.Generator | None = None,
    check_grad: bool = True,
    fd_step: float = FD_STEP,
    label: str = "",
) -> Certificate:
    """Check tangency, the global upper bound over sampled points, and gradient match.

    `surrogate` and `true_fn` act on real vectors; `sampler(rng)` returns one
    real vector in the domain of `true_fn`.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    x0 = np.asarray(anchor, dtype=float)
    t0 = true_fn(x0)
    s0 = surrogate(x0)
    tangency = abs(s0 - t0) / (1.0 + abs(t0))
    failures = []
    if not tangency <= TANGENCY_TOL:
        failures.append("tangency")
    worst, worst_x = math.inf, None
    for _ in range(n_samples):
        x = np.asarray(sampler(rng), dtype=float)
        t = true_fn(x)
        if not np.isfinite(t):
            continue
        margin = (surrogate(x) - t) / (1.0 + abs(t))
        if margin < worst:
            worst, worst_x = margin, x
    if worst < -BOUND_TOL:
        failures.append("upper_bound")
    grad_err = None
    if check_grad:
        gt = _fd_grad(true_fn, x0, fd_step)
        gs = _fd_grad(surrogate, x0, fd_step)
        grad_err = float(np.linalg.norm(gs - gt) / max(1.0, np.linalg.norm(gt)))
        if not grad_err <= GRAD_RTOL:
            failures.append("gradient")
    return Certificate(
        passed=not failures,
        tangency_margin=float(tangency),
        bound_margin=float(worst),
        grad_error=grad_err,
        worst_sample=None if worst_x is None else [float(v) for v in worst_x],
        n_samples=n_samples,
        failures=failures,
        label=label,
    )


def ball_sampler(dim_real: int, radius2: float, anchor=None, spread: float = 0.3):
    """Mix of uniform points in the ball |x|^2 <= radius2 and perturbations of `anchor`."""
    r = math.sqrt(radius2)

    def sample(rng):
        if anchor is not None and rng.random() < 0.5:
            x = np.asarray(anchor) + spread * r * rng.standard_normal(dim_real) / math.sqrt(dim_real)
            nx = np.linalg.norm(x)
            return x if nx <= r else x * (r / nx)
        v = rng.standard_normal(dim_real)
        return v / np.linalg.norm(v) * r * rng.random() ** (1.0 / dim_real)

    return sample


def certify_code_surrogate(
    s: Scenario, q, sur: CodeSurrogate, rng=None, n_samples: int = 100
) -> list[Certificate]:
    x0 = sur.embedding.vec(sur.anchor)
    sampler = ball_sampler(2 * s.code_len, s.power_budget, x0)
    certs = [
        certify(sur.objective_real, code_true_objective(s, q), x0, sampler, n_samples, rng, label="code/objective")
    ]
    if sur.has_rate:
        certs.append(certify(sur.rate_real, code_true_rate(s, q), x0, sampler, n_samples, rng, label="code/rate"))
    return certs


def certify_quant_surrogate(
    s: Scenario, sur: QuantSurrogate, rng=None, n_samples: int = 100
) -> list[Certificate]:
    k = s.code_len
    basis = matops.hermitian_basis(k)
    n_ant = s.n_antennas

    def unpack(theta):
        return np.array([matops.herm_from_coords(t, basis) for t in theta.reshape(n_ant, k * k)])

    theta0 = np.concatenate([matops.herm_coords(q, basis) for q in sur.anchor])
    wmin = min(float(np.linalg.eigvalsh(q)[0]) for q in sur.anchor)
    step = min(FD_STEP, 0.1 * wmin)

    def sample(rng):
        out = []
        for q0 in sur.anchor:
            scale = float(np.trace(q0).real) / k
            if rng.random() < 0.5:
                x = rng.standard_normal((k, k)) + 1j * rng.standard_normal((k, k))
                q = scale * math.exp(rng.normal(0, 1.5)) * (x @ x.conj().T) / k
            else:
                x = 0.3 * (rng.standard_normal((k, k)) + 1j * rng.standard_normal((k, k)))
                q = q0 + scale * matops.hermitize(x)
                w = np.linalg.eigvalsh(q)[0]
                if w <= 0:
                    q = q + (1e-3 * scale - w) * np.eye(k)
            out.append(matops.herm_coords(matops.hermitize(q), basis))
        return np.concatenate(out)

    t_obj = quant_true_objective(s, sur.code)
    t_rate = quant_true_rate(s, sur.code)
    return [
        # the objective sees Q only through M + Q, so it tolerates the full step
        certify(lambda th: sur.objective(unpack(th)), lambda th: t_obj(unpack(th)), theta0, sample,
                n_samples, rng, fd_step=FD_STEP, label="quant/objective"),
        certify(lambda th: sur.rate(unpack(th)), lambda th: t_rate(unpack(th)), theta0, sample,
                n_samples, rng, fd_step=step, label="quant/rate"),
    ]
