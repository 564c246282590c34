"""Fusion-center detector: whitening, exact ROC and Monte Carlo ROC.

After whitening, each antenna block of the detector kernel has rank one, so the
statistic is a weighted sum of independent unit-mean exponentials:
T = sum_n w_n E_n with w_n = lam_n / (1 + lam_n) under H0 and w_n = lam_n under H1.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.optimize

from crmr import matops
from crmr.metrics import DesignPoint
from crmr.scenario import Scenario

CSV_SCHEMA = "crmr-roc/1"
MERGE_RTOL = 1e-9  # weights closer than this are treated as coincident
CLOSED_FORM_GAP = 1e-3  # below this relative gap the partial-fraction form loses too many digits
MC_CHUNK = 20_000


@dataclass(frozen=True)
class WhitenedModel:
    d_n: tuple
    lambda_n: np.ndarray
    u_n: tuple
    scenario: Scenario | None = None
    design: DesignPoint | None = None

    @property
    def weights_h0(self) -> np.ndarray:
        lam = self.lambda_n
        return lam / (1.0 + lam)

    @property
    def weights_h1(self) -> np.ndarray:
        return np.asarray(self.lambda_n, dtype=float)


def whiten(s: Scenario, design: DesignPoint) -> WhitenedModel:
    a = np.asarray(design.code, dtype=complex)
    ds, lams, us = [], [], []
    for n in range(s.n_antennas):
        cov = s.sigma_c2[n] * np.outer(a, a.conj()) + s.noise_cov[n] + design.quant[n]
        d = matops.inv_sqrt(cov)
        v = d @ a
        nv = float(np.linalg.norm(v))
        lams.append(s.sigma_t2[n] * nv**2)
        if nv > 0:
            us.append(v / nv)
        else:
            e = np.zeros(s.code_len, dtype=complex)
            e[0] = 1.0
            us.append(e)
        ds.append(d)
    return WhitenedModel(tuple(ds), np.array(lams), tuple(us), s, design)


# --- exact tail -----------------------------------------------------------------


def _phase_type_sf(w, gammas):
    """Survival of sum w_i E_i as a series of exponential phases (handles repeats)."""
    m = len(w)
    rates = 1.0 / np.asarray(w)
    sub = np.diag(-rates) + np.diag(rates[:-1], 1)
    ones = np.ones(m)
    out = np.empty(len(gammas))
    for i, g in enumerate(gammas):
        out[i] = scipy.linalg.expm(sub * g)[0] @ ones
    return out


def hypoexp_sf(weights, gammas) -> np.ndarray:
    """P(sum_i w_i E_i >= gamma) for independent unit-mean exponentials E_i."""
    g = np.asarray(gammas, dtype=float)
    if np.any(g < 0):
        raise ValueError("thresholds must be nonnegative")
    w = np.sort(np.asarray(weights, dtype=float))[::-1]
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    wmax = w[0] if w.size else 0.0
    w = w[w > MERGE_RTOL * wmax] if wmax > 0 else w[:0]
    if w.size == 0:
        return (g <= 0).astype(float)
    gaps = np.abs(np.diff(w)) / w[0]
    if w.size == 1 or gaps.min() >= CLOSED_FORM_GAP:
        out = np.zeros_like(g)
        for i, wi in enumerate(w):
            others = np.delete(w, i)
            pi = np.prod(wi / (wi - others))
            out += pi * np.exp(-g / wi)
    else:
        out = _phase_type_sf(w, g)
    out[g <= 0] = 1.0
    return np.clip(out, 0.0, 1.0)


def erlang_sf(n: int, w: float, gammas) -> np.ndarray:
    """Gamma(n, scale w) survival; reference for fully coincident weights."""
    from scipy.stats import gamma as gamma_dist

    return gamma_dist.sf(np.asarray(gammas, dtype=float), n, scale=w)


@dataclass
class RocCurve:
    points: np.ndarray  # (n, 3): gamma, pfa, pd
    method: str
    trials: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def gamma(self):
        return self.points[:, 0]

    @property
    def pfa(self):
        return self.points[:, 1]

    @property
    def pd(self):
        return self.points[:, 2]

    def to_csv(self, path, header_extra: str = "") -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# schema={CSV_SCHEMA} method={self.method} trials={self.trials} seed={self.seed}{header_extra}\n")
            wr = csv.writer(fh)
            wr.writerow(["gamma", "pfa", "pd"])
            for g, pf, pd in self.points:
                wr.writerow([repr(float(g)), repr(float(pf)), repr(float(pd))])

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "trials": self.trials,
            "seed": self.seed,
            "gamma": self.gamma.tolist(),
            "pfa": self.pfa.tolist(),
            "pd": self.pd.tolist(),
            "meta": self.meta,
        }

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def _check_gammas(gammas) -> np.ndarray:
    g = np.asarray(gammas, dtype=float).ravel()
    if np.any(g < 0) or not np.all(np.isfinite(g)):
        raise ValueError("thresholds must be finite and nonnegative")
    return np.sort(g)


def roc_exact(model: WhitenedModel, gammas) -> RocCurve:
    g = _check_gammas(gammas)
    pfa = hypoexp_sf(model.weights_h0, g)
    pd = hypoexp_sf(model.weights_h1, g)
    # enforce nonincreasing against last-digit wobble of the expm path
    pfa = np.minimum.accumulate(pfa)
    pd = np.minimum.accumulate(pd)
    return RocCurve(np.column_stack([g, pfa, pd]), "exact")


def threshold_for_pfa(model: WhitenedModel, pfa) -> np.ndarray:
    """Thresholds attaining the given false-alarm probabilities exactly."""
    w = model.weights_h0
    top = float(np.max(w)) if w.size else 0.0
    if top <= 0:
        raise ValueError("all weights are zero; the statistic is degenerate")
    out = []
    for p in np.atleast_1d(pfa):
        if not 0 < p <= 1:
            raise ValueError("pfa must lie in (0, 1]")
        if p == 1:
            out.append(0.0)
            continue
        f = lambda g: float(hypoexp_sf(w, [g])[0]) - p  # noqa: E731
        hi = top
        while f(hi) > 0:
            hi *= 2.0
        out.append(scipy.optimize.brentq(f, 0.0, hi, xtol=1e-14 * hi, rtol=1e-15))
    return np.array(out)


def pd_at_pfa(model: WhitenedModel, pfa) -> np.ndarray:
    return hypoexp_sf(model.weights_h1, threshold_for_pfa(model, pfa))


def default_gamma_grid(model: WhitenedModel, n: int = 200, pfa_min: float = 1e-4) -> np.ndarray:
    """n log-spaced thresholds spanning false-alarm probabilities [pfa_min, 1 - pfa_min]."""
    lo, hi = threshold_for_pfa(model, [1.0 - pfa_min, pfa_min])
    return np.logspace(math.log10(lo), math.log10(hi), n)


# --- Monte Carlo --------------------------------------------------------------


def _cn(rng, shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2.0)


def _cn_cov(rng, cov, count):
    k = cov.shape[0]
    if not np.any(cov):
        return np.zeros((count, k), dtype=complex)
    e = matops.eigh(cov)
    root = e.eigenvectors * np.sqrt(np.clip(e.eigenvalues, 0, None))
    return _cn(rng, (count, k)) @ root.T


def _statistic_blocks(model, rng, count, h1: bool):
    """Detector statistic from block-covariance draws y_n ~ CN(0, I [+ lam u u^H])."""
    t = np.zeros(count)
    for lam, u in zip(model.lambda_n, model.u_n):
        k = u.shape[0]
        y = _cn(rng, (count, k))
        if h1 and lam > 0:
            # (I + lam u u^H)^(1/2) = I + (sqrt(1 + lam) - 1) u u^H
            y = y + (math.sqrt(1.0 + lam) - 1.0) * np.outer(y @ u.conj(), u)
        t += lam / (1.0 + lam) * np.abs(y @ u.conj()) ** 2
    return t


def _statistic_sources(model, rng, count, h1: bool):
    """Detector statistic from per-source draws of target, clutter, noise and quantization terms."""
    s, d = model.scenario, model.design
    if s is None or d is None:
        raise ValueError("per-source sampling needs the scenario and design attached to the model")
    a = np.asarray(d.code, dtype=complex)
    t = np.zeros(count)
    for n, (lam, u, dn) in enumerate(zip(model.lambda_n, model.u_n, model.d_n)):
        rho = _cn(rng, count) * math.sqrt(s.sigma_c2[n])
        x = np.outer(rho, a) + _cn_cov(rng, s.noise_cov[n], count) + _cn_cov(rng, d.quant[n], count)
        if h1:
            alpha = _cn(rng, count) * math.sqrt(s.sigma_t2[n])
            x = x + np.outer(alpha, a)
        y = x @ dn.T
        t += lam / (1.0 + lam) * np.abs(y @ u.conj()) ** 2
    return t


def roc_monte_carlo(model: WhitenedModel, gammas, trials: int, seed: int = 0, per_source: bool = False,
                    chunk: int = MC_CHUNK) -> RocCurve:
    """Empirical ROC; chunks draw from independent spawned streams, so counts do not depend on chunk order."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    g = _check_gammas(gammas)
    stat = _statistic_sources if per_source else _statistic_blocks
    n_chunks = -(-trials // chunk)
    streams = np.random.SeedSequence(seed).spawn(n_chunks)
    counts0 = np.zeros(g.size, dtype=np.int64)
    counts1 = np.zeros(g.size, dtype=np.int64)
    for i, ss in enumerate(streams):
        m = min(chunk, trials - i * chunk)
        rng = np.random.default_rng(ss)
        t0 = np.sort(stat(model, rng, m, False))
        t1 = np.sort(stat(model, rng, m, True))
        counts0 += m - np.searchsorted(t0, g, side="left")
        counts1 += m - np.searchsorted(t1, g, side="left")
    pts = np.column_stack([g, counts0 / trials, counts1 / trials])
    return RocCurve(pts, "monte-carlo", trials, seed, {"per_source": per_source})


def sample_h0(model: WhitenedModel, trials: int, seed: int = 0) -> np.ndarray:
    """Whitened H0 observations stacked over antennas, shape (trials, N*K)."""
    rng = np.random.default_rng(seed)
    s, d = model.scenario, model.design
    a = np.asarray(d.code, dtype=complex)
    out = []
    for n, dn in enumerate(model.d_n):
        rho = _cn(rng, trials) * math.sqrt(s.sigma_c2[n])
        x = np.outer(rho, a) + _cn_cov(rng, s.noise_cov[n], trials) + _cn_cov(rng, d.quant[n], trials)
        out.append(x @ dn.T)
    return np.concatenate(out, axis=1)
