"""Detection and backhaul metrics of a design.

All logarithms are natural; backhaul totals are reported in bits as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from crmr import matops
from crmr.scenario import (
    LN2,
    Scenario,
    ScenarioError,
    decode_complex,
    encode_complex,
    scenario_from_dict,
    scenario_to_dict,
)


class ConsistencyError(ArithmeticError):
    """Two algebraically identical evaluations disagree beyond tolerance."""


def _close(x, y, rtol, atol=1e-14):
    return abs(x - y) <= rtol * max(abs(x), abs(y)) + atol


def lambda_of(s: Scenario, a, q_n, n: int, check: bool = True) -> float:
    """Post-whitening target SNR of antenna n (0-based).

    Evaluated directly as sigma_t2 a^H (sigma_c2 a a^H + M + Q)^-1 a and cross-checked
    against the rank-one update form sigma_t2 y / (1 + sigma_c2 y), y = a^H (M + Q)^-1 a.
    """
    a = np.asarray(a, dtype=complex)
    st, sc = s.sigma_t2[n], s.sigma_c2[n]
    base = s.noise_cov[n] + np.asarray(q_n)
    lam = st * matops.quad_inv(sc * np.outer(a, a.conj()) + base, a)
    if check:
        y = matops.quad_inv(base, a)
        lam_sm = st * y / (1.0 + sc * y)
        if not _close(lam, lam_sm, 1e-10):
            raise ConsistencyError(f"lambda forms disagree for antenna {n + 1}: {lam!r} vs {lam_sm!r}")
    return max(lam, 0.0)


def bhattacharyya_term(lam: float) -> float:
    """log((1 + lam/2) / sqrt(1 + lam))."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return math.log1p(0.5 * lam) - 0.5 * math.log1p(lam)


def neg_bhattacharyya_of_y(st: float, sc: float, y):
    """-B_n written through y = a^H (M + Q)^-1 a; vectorized over y."""
    y = np.asarray(y, dtype=float)
    return -np.log1p((sc + 0.5 * st) * y) + 0.5 * np.log1p(sc * y) + 0.5 * np.log1p((sc + st) * y)


def mutual_info(s: Scenario, a, q_n, n: int, check: bool = True) -> float:
    """Backhaul rate of link n in nats, evaluated under the target-present hypothesis."""
    a = np.asarray(a, dtype=complex)
    q_n = matops.hermitize(q_n)
    if not matops.is_pd(q_n):
        raise matops.NotPositiveDefiniteError(
            f"Q_{n + 1} must be positive definite for the rate to be finite"
        )
    m = s.noise_cov[n]
    k = s.code_len
    ratio = np.eye(k) + np.linalg.solve(q_n, m)
    sign, ld = np.linalg.slogdet(ratio)
    val = float(ld) + math.log1p((s.sigma_c2[n] + s.sigma_t2[n]) * matops.quad_inv(q_n + m, a))
    if check:
        p = s.sigma_c2[n] + s.sigma_t2[n]
        alt = matops.logdet(p * np.outer(a, a.conj()) + m + q_n) - matops.logdet(q_n)
        if not _close(val, alt, 1e-9, 1e-9):
            raise ConsistencyError(f"rate forms disagree for link {n + 1}: {val!r} vs {alt!r}")
    return max(val, 0.0)


@dataclass(frozen=True)
class MetricReport:
    lambda_n: tuple
    b_n: tuple
    i_n: tuple
    b_total: float
    i_total_bits: float

    def to_dict(self) -> dict:
        return {
            "lambda_n": list(self.lambda_n),
            "b_n": list(self.b_n),
            "i_n_nats": list(self.i_n),
            "b_total": self.b_total,
            "i_total_bits": self.i_total_bits,
        }


def evaluate(s: Scenario, a, q=None, check: bool = True) -> MetricReport:
    """Metric report for code `a` and covariances `q` (or a DesignPoint as `a`)."""
    if isinstance(a, DesignPoint):
        a, q = a.code, a.quant
    lam = tuple(lambda_of(s, a, q[n], n, check) for n in range(s.n_antennas))
    b = tuple(bhattacharyya_term(x) for x in lam)
    i = tuple(mutual_info(s, a, q[n], n, check) for n in range(s.n_antennas))
    return MetricReport(lam, b, i, float(sum(b)), float(sum(i)) / LN2)


def total_rate_nats(s: Scenario, a, q) -> float:
    return sum(mutual_info(s, a, q[n], n, check=False) for n in range(s.n_antennas))


def total_bhattacharyya(s: Scenario, a, q) -> float:
    return sum(bhattacharyya_term(lambda_of(s, a, q[n], n, check=False)) for n in range(s.n_antennas))


@dataclass(frozen=True, eq=False)
class DesignPoint:
    code: np.ndarray
    quant: np.ndarray  # (N, K, K)
    lambda_n: tuple
    bhattacharyya_total: float
    backhaul_total: float  # bits per sample
    meta: dict = field(default_factory=dict)

    @property
    def power(self) -> float:
        return float(np.vdot(self.code, self.code).real)


def make_design(s: Scenario, a, q, **meta) -> DesignPoint:
    a = np.array(a, dtype=complex).reshape(s.code_len)
    q = np.array([matops.hermitize(x) for x in q])
    a.setflags(write=False)
    q.setflags(write=False)
    rep = evaluate(s, a, q)
    return DesignPoint(a, q, rep.lambda_n, rep.b_total, rep.i_total_bits, dict(meta))


def feasibility(s: Scenario, d: DesignPoint) -> dict:
    """Relative constraint slacks (positive = satisfied)."""
    psd = []
    for n, q in enumerate(d.quant):
        w = np.linalg.eigvalsh(q)
        psd.append(float(w[0] - s.floor(n)))
    return {
        "power": (s.power_budget - d.power) / s.power_budget,
        "capacity": (s.capacity_bits - d.backhaul_total) / s.capacity_bits,
        "psd_floor": psd,
    }


def is_feasible(s: Scenario, d: DesignPoint, rtol: float = 1e-8) -> bool:
    f = feasibility(s, d)
    return f["power"] >= -rtol and f["capacity"] >= -rtol and all(
        x >= -1e-10 * float(np.trace(q).real) for x, q in zip(f["psd_floor"], d.quant)
    )


def design_to_dict(d: DesignPoint) -> dict:
    return {
        "code": encode_complex(d.code),
        "quant": encode_complex(d.quant),
        "metrics": {
            "lambda_n": [float(x) for x in d.lambda_n],
            "bhattacharyya_total": d.bhattacharyya_total,
            "backhaul_bits": d.backhaul_total,
        },
        "meta": {k: v for k, v in d.meta.items() if isinstance(v, (str, int, float, bool))},
    }


def save_design(path, s: Scenario, d: DesignPoint) -> None:
    doc = {"scenario": scenario_to_dict(s), "design": design_to_dict(d)}
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))


def load_design(path) -> tuple[Scenario, DesignPoint]:
    doc = yaml.safe_load(Path(path).read_text())
    if not isinstance(doc, dict) or "design" not in doc or "scenario" not in doc:
        raise ScenarioError(f"{path}: expected 'scenario' and 'design' blocks")
    s = scenario_from_dict(doc["scenario"])
    dd = doc["design"]
    d = make_design(s, decode_complex(dd["code"]), decode_complex(dd["quant"]), **(dd.get("meta") or {}))
    cached = (dd.get("metrics") or {}).get("bhattacharyya_total")
    if cached is not None and not _close(cached, d.bhattacharyya_total, 1e-10):
        raise ScenarioError(f"{path}: cached metrics do not match the stored design")
    return s, d
