"""Block coordinate descent over (code, quantization noise) with MM inner loops,
and the three reference strategies it is compared against."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import scipy.optimize

from crmr import majorize, matops, subsolve
from crmr.metrics import DesignPoint, is_feasible, make_design, total_bhattacharyya, total_rate_nats
from crmr.scenario import LN2, Scenario

log = logging.getLogger(__name__)

STRATEGIES = ("none", "code", "quant", "joint")


@dataclass(frozen=True)
class BcdConfig:
    outer_tol: float = 1e-6
    outer_cap: int = 100
    mm_tol: float = 1e-6
    mm_cap: int = 50
    seed: int = 0
    certify_every_iter: bool = False
    certify: bool = True
    certify_samples: int = 100
    tol: float = subsolve.KKT_TOL

    def __post_init__(self):
        for name in ("outer_tol", "mm_tol", "tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("outer_cap", "mm_cap"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @classmethod
    def from_dict(cls, d: dict | None) -> "BcdConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown solver options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimizeTrace:
    strategy: str = ""
    records: list = field(default_factory=list)
    certificates: list = field(default_factory=list)
    initial_bhattacharyya: float = math.nan

    @property
    def outer_iterations(self) -> int:
        return len(self.records)

    @property
    def bhattacharyya(self) -> list:
        return [self.initial_bhattacharyya] + [r["bhattacharyya_total"] for r in self.records]

    def monotone_violation(self) -> float:
        """Largest decrease of the distance between consecutive iterates (0 if monotone)."""
        b = self.bhattacharyya
        return max([0.0] + [b[i] - b[i + 1] for i in range(len(b) - 1)])

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "initial_bhattacharyya": self.initial_bhattacharyya,
            "records": self.records,
            "certificates": self.certificates,
        }


def _rel_change(new: float, old: float) -> float:
    return abs(new - old) / max(abs(old), 1e-300)


# --- single-block MM loops ----------------------------------------------------


def _certify_code(s, q, sur, cfg, rng, trace):
    certs = majorize.certify_code_surrogate(s, q, sur, rng, cfg.certify_samples)
    _record_certs(certs, trace)


def _certify_quant(s, sur, cfg, rng, trace):
    certs = majorize.certify_quant_surrogate(s, sur, rng, cfg.certify_samples)
    _record_certs(certs, trace)


def _record_certs(certs, trace):
    for c in certs:
        if trace is not None:
            trace.certificates.append(c.to_dict())
        if not c.passed:
            raise majorize.CertificationError(c)


def mm_code(s: Scenario, q, a0, cfg: BcdConfig, enforce_rate: bool = True, cap: int | None = None,
            certify_first: bool = False, rng=None, trace=None):
    """MM loop for the code block with Q fixed. Returns (a, summary)."""
    a = np.asarray(a0, dtype=complex)
    c_nats = s.capacity_nats if enforce_rate else None
    f = -total_bhattacharyya(s, a, q)
    reports = []
    cap = cfg.mm_cap if cap is None else cap
    for it in range(cap):
        sur = majorize.build_code_surrogate(s, q, a, enforce_rate=enforce_rate)
        if certify_first and it == 0:
            _certify_code(s, q, sur, cfg, rng, trace)
        a_new, rep = subsolve.solve_code_step(sur, s.power_budget, c_nats, a, tol=cfg.tol)
        reports.append(rep)
        if rep.status == "infeasible":
            log.warning("code step infeasible: %s", rep.notes)
            break
        f_new = -total_bhattacharyya(s, a_new, q)
        if f_new > f:
            # surrogate descent guarantees this cannot happen beyond round-off
            log.debug("code step raised objective by %.3e; keeping previous iterate", f_new - f)
            break
        a, done = a_new, _rel_change(f_new, f) <= cfg.mm_tol
        f = f_new
        if done:
            break
    return a, _summarize(reports)


def mm_quant(s: Scenario, a, q0, cfg: BcdConfig, cap: int | None = None, certify_first: bool = False,
             rng=None, trace=None, basis=None):
    """MM loop for the quantization block with a fixed. Returns (Q, summary)."""
    q = np.array(q0, dtype=complex)
    f = -total_bhattacharyya(s, a, q)
    reports = []
    cap = cfg.mm_cap if cap is None else cap
    for it in range(cap):
        sur = majorize.build_quant_surrogate(s, a, q)
        if certify_first and it == 0:
            _certify_quant(s, sur, cfg, rng, trace)
        q_new, rep = subsolve.solve_quant_step(sur, s.capacity_nats, q, tol=cfg.tol, basis=basis)
        reports.append(rep)
        if rep.status == "infeasible":
            log.warning("quantization step infeasible: %s", rep.notes)
            break
        f_new = -total_bhattacharyya(s, a, q_new)
        if f_new > f:
            log.debug("quantization step raised objective by %.3e; keeping previous iterate", f_new - f)
            break
        q, done = q_new, _rel_change(f_new, f) <= cfg.mm_tol
        f = f_new
        if done:
            break
    return q, _summarize(reports)


def _summarize(reports) -> dict:
    if not reports:
        return {"mm_iterations": 0}
    statuses = {}
    for r in reports:
        statuses[r.status] = statuses.get(r.status, 0) + 1
    return {
        "mm_iterations": len(reports),
        "statuses": statuses,
        "max_kkt_residual": max(r.kkt_residual for r in reports),
        "last": reports[-1].to_dict(),
    }


# --- strategies -----------------------------------------------------------------


def isotropic_epsilon(s: Scenario, a) -> float:
    """epsilon > 0 with total rate of (a, epsilon I) equal to the budget.

    If the budget cannot be spent without epsilon underflowing, the smallest
    normal double is returned and the rate falls short of C.
    """
    eye = np.eye(s.code_len)
    target = s.capacity_nats
    tiny = float(np.finfo(float).tiny)
    log_tiny = math.log(tiny)

    def g(log_eps):
        q = np.array([max(math.exp(log_eps), tiny) * eye] * s.n_antennas)
        return total_rate_nats(s, a, q) - target

    scale = math.log(max(float(np.max(np.linalg.eigvalsh(s.noise_cov))), 1e-300))
    lo, hi = scale - 1.0, scale + 1.0
    while g(lo) <= 0:
        if lo <= log_tiny:
            log.warning("isotropic noise level underflows at C = %g bits; clamped", s.capacity_bits)
            return tiny
        lo = max(lo - 2.0 * (1 + abs(lo - scale)), log_tiny)
    while g(hi) >= 0:
        hi += 2.0 * (1 + abs(hi - scale))
    root = scipy.optimize.brentq(g, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    return max(math.exp(root), tiny)


def uniform_code(s: Scenario) -> np.ndarray:
    return np.full(s.code_len, math.sqrt(s.power_budget / s.code_len), dtype=complex)


def _isotropic(s: Scenario, eps: float, floor: bool = False) -> np.ndarray:
    eye = np.eye(s.code_len)
    return np.array([(max(eps, s.floor(n)) if floor else eps) * eye for n in range(s.n_antennas)], dtype=complex)


def run_baseline_none(s: Scenario) -> DesignPoint:
    """Uniform code, isotropic quantization noise spending the whole budget."""
    a = uniform_code(s)
    eps = isotropic_epsilon(s, a)
    return make_design(s, a, _isotropic(s, eps), strategy="none", epsilon=eps, c_bits=s.capacity_bits)


def run_baseline_code_only(s: Scenario, cfg: BcdConfig = BcdConfig(), trace: OptimizeTrace | None = None) -> DesignPoint:
    """Code optimized with Q = 0 and no rate constraint, then isotropic noise fitted to the budget."""
    t0 = time.perf_counter()
    trace = trace if trace is not None else OptimizeTrace()
    trace.strategy = "code"
    rng = np.random.default_rng(cfg.seed)
    a = uniform_code(s)
    q0 = np.zeros((s.n_antennas, s.code_len, s.code_len), dtype=complex)
    trace.initial_bhattacharyya = total_bhattacharyya(s, a, q0)
    a, summary = mm_code(s, q0, a, cfg, enforce_rate=False, cap=cfg.mm_cap * cfg.outer_cap,
                         certify_first=cfg.certify, rng=rng, trace=trace)
    trace.records.append({
        "iteration": 1,
        "bhattacharyya_total": total_bhattacharyya(s, a, q0),
        "backhaul_bits": math.inf,
        "step1": summary,
        "wall_s": time.perf_counter() - t0,
    })
    eps = isotropic_epsilon(s, a)
    return make_design(s, a, _isotropic(s, eps), strategy="code", epsilon=eps, c_bits=s.capacity_bits,
                       outer_iters=1, mm_iters=summary["mm_iterations"])


def run_baseline_quant_only(s: Scenario, cfg: BcdConfig = BcdConfig(), trace: OptimizeTrace | None = None) -> DesignPoint:
    """Uniform code, quantization noise optimized by the MM loop."""
    t0 = time.perf_counter()
    trace = trace if trace is not None else OptimizeTrace()
    trace.strategy = "quant"
    rng = np.random.default_rng(cfg.seed)
    start = run_baseline_none(s)
    a = start.code
    q = _isotropic(s, start.meta["epsilon"], floor=True)
    trace.initial_bhattacharyya = total_bhattacharyya(s, a, q)
    q, summary = mm_quant(s, a, q, cfg, cap=cfg.mm_cap * cfg.outer_cap, certify_first=cfg.certify,
                          rng=rng, trace=trace)
    if cfg.certify:
        _certify_quant(s, majorize.build_quant_surrogate(s, a, q), cfg, rng, trace)
    trace.records.append({
        "iteration": 1,
        "bhattacharyya_total": total_bhattacharyya(s, a, q),
        "backhaul_bits": total_rate_nats(s, a, q) / LN2,
        "step2": summary,
        "wall_s": time.perf_counter() - t0,
    })
    return make_design(s, a, q, strategy="quant", c_bits=s.capacity_bits, outer_iters=1,
                       mm_iters=summary["mm_iterations"])


def run_joint(s: Scenario, cfg: BcdConfig = BcdConfig(), init: DesignPoint | None = None,
              trace: OptimizeTrace | None = None) -> tuple[DesignPoint, OptimizeTrace]:
    """Alternate the code MM loop and the quantization MM loop until the distance settles."""
    trace = trace if trace is not None else OptimizeTrace()
    trace.strategy = "joint"
    rng = np.random.default_rng(cfg.seed)
    if init is None:
        init = run_baseline_none(s)
    a = np.array(init.code, dtype=complex)
    q = np.array(init.quant, dtype=complex)
    for n in range(s.n_antennas):
        wmin = float(np.linalg.eigvalsh(q[n])[0])
        if wmin < s.floor(n):
            q[n] = q[n] + (s.floor(n) - wmin) * np.eye(s.code_len)
    d0 = make_design(s, a, q)
    if not is_feasible(s, d0, 1e-8):
        raise ValueError(
            f"initial design is infeasible (power {d0.power:.6g}/{s.power_budget:.6g}, "
            f"rate {d0.backhaul_total:.6g}/{s.capacity_bits:.6g} bits)"
        )
    b_prev = d0.bhattacharyya_total
    trace.initial_bhattacharyya = b_prev
    for m in range(1, cfg.outer_cap + 1):
        t0 = time.perf_counter()
        cert_now = cfg.certify and (cfg.certify_every_iter or m == 1)
        a, sum1 = mm_code(s, q, a, cfg, certify_first=cert_now, rng=rng, trace=trace)
        q, sum2 = mm_quant(s, a, q, cfg, certify_first=cert_now, rng=rng, trace=trace)
        b = total_bhattacharyya(s, a, q)
        trace.records.append({
            "iteration": m,
            "bhattacharyya_total": b,
            "backhaul_bits": total_rate_nats(s, a, q) / LN2,
            "step1": sum1,
            "step2": sum2,
            "wall_s": time.perf_counter() - t0,
        })
        done = _rel_change(b, b_prev) <= cfg.outer_tol
        b_prev = b
        if done:
            break
    if cfg.certify and not cfg.certify_every_iter:
        # surrogates at the returned point
        _certify_code(s, q, majorize.build_code_surrogate(s, q, a), cfg, rng, trace)
        _certify_quant(s, majorize.build_quant_surrogate(s, a, q), cfg, rng, trace)
    d = make_design(s, a, q, strategy="joint", c_bits=s.capacity_bits, outer_iters=trace.outer_iterations)
    return d, trace


def run_strategy(s: Scenario, strategy: str, cfg: BcdConfig = BcdConfig(), cache: dict | None = None):
    """Run one named strategy; returns (DesignPoint, OptimizeTrace).

    `cache` (keyed by strategy name) lets the joint run reuse the single-block
    results it is initialized from.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    cache = {} if cache is None else cache
    if strategy in cache:
        return cache[strategy]
    trace = OptimizeTrace(strategy=strategy)
    if strategy == "none":
        d = run_baseline_none(s)
        trace.initial_bhattacharyya = d.bhattacharyya_total
        trace.records.append({"iteration": 1, "bhattacharyya_total": d.bhattacharyya_total,
                              "backhaul_bits": d.backhaul_total, "wall_s": 0.0})
    elif strategy == "code":
        d = run_baseline_code_only(s, cfg, trace)
    elif strategy == "quant":
        d = run_baseline_quant_only(s, cfg, trace)
    else:
        dc, _ = run_strategy(s, "code", cfg, cache)
        dq, _ = run_strategy(s, "quant", cfg, cache)
        init = dc if dc.bhattacharyya_total >= dq.bhattacharyya_total else dq
        d, trace = run_joint(s, cfg, init, trace)
        d.meta["init"] = init.meta.get("strategy", "")
    cache[strategy] = (d, trace)
    return d, trace
