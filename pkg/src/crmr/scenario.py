"""Problem instances and run configuration files.

Config files are YAML with three top-level blocks::

    scenario:
      n_antennas: 3
      code_len: 6
      sigma_t2: [1.0, 1.0, 1.0]
      sigma_c2: [0.125, 0.25, 0.5]
      power_budget: 10.0
      capacity_bits: 15.0
      noise_cov:
        toeplitz: {step: 0.15}      # [M_n]_{mk} = (1 - step*n)^|m-k|, n = 1..N
      # or explicit matrices, entries as [re, im] pairs:
      # noise_cov: [[[[1.0, 0.0], [0.5, 0.0]], [[0.5, 0.0], [1.0, 0.0]]], ...]
    solver:                         # optional, see optimize.BcdConfig
      outer_tol: 1.0e-6
    experiment:                     # optional, see cli
      sweep_c_bits: [5, 10, 15, 20, 25]

Antenna indices are 1-based wherever they appear in files or messages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from crmr import matops

HERMITIAN_TOL = 1e-12
LN2 = math.log(2.0)


class ScenarioError(ValueError):
    """Invalid scenario or config contents."""


@dataclass(frozen=True, eq=False)
class Scenario:
    n_antennas: int
    code_len: int
    sigma_t2: np.ndarray
    sigma_c2: np.ndarray
    noise_cov: np.ndarray  # (N, K, K) complex
    power_budget: float
    capacity_bits: float

    def __post_init__(self):
        st = np.array(self.sigma_t2, dtype=float).reshape(-1)
        sc = np.array(self.sigma_c2, dtype=float).reshape(-1)
        m = np.array(self.noise_cov, dtype=complex)
        for arr in (st, sc, m):
            arr.setflags(write=False)
        object.__setattr__(self, "sigma_t2", st)
        object.__setattr__(self, "sigma_c2", sc)
        object.__setattr__(self, "noise_cov", m)
        object.__setattr__(self, "n_antennas", int(self.n_antennas))
        object.__setattr__(self, "code_len", int(self.code_len))
        object.__setattr__(self, "power_budget", float(self.power_budget))
        object.__setattr__(self, "capacity_bits", float(self.capacity_bits))
        validate(self)

    @property
    def capacity_nats(self) -> float:
        return self.capacity_bits * LN2

    def floor(self, n: int) -> float:
        """PD floor delta_n for Q_n (0-based n)."""
        return 1e-8 * float(np.trace(self.noise_cov[n]).real) / self.code_len

    def with_capacity(self, c_bits: float) -> "Scenario":
        return replace(self, capacity_bits=float(c_bits))

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return (
            self.n_antennas == other.n_antennas
            and self.code_len == other.code_len
            and np.array_equal(self.sigma_t2, other.sigma_t2)
            and np.array_equal(self.sigma_c2, other.sigma_c2)
            and np.array_equal(self.noise_cov, other.noise_cov)
            and self.power_budget == other.power_budget
            and self.capacity_bits == other.capacity_bits
        )

    __hash__ = None


def validate(s: Scenario) -> None:
    n, k = s.n_antennas, s.code_len
    if n < 1:
        raise ScenarioError(f"n_antennas must be >= 1, got {n}")
    if k < 1:
        raise ScenarioError(f"code_len must be >= 1, got {k}")
    for name in ("sigma_t2", "sigma_c2"):
        v = getattr(s, name)
        if v.shape != (n,):
            raise ScenarioError(f"{name} must have {n} entries, got {v.size}")
        for i, x in enumerate(v):
            if not (np.isfinite(x) and x > 0):
                raise ScenarioError(f"{name}[{i + 1}] must be > 0, got {x!r}")
    if s.noise_cov.shape != (n, k, k):
        raise ScenarioError(f"noise_cov must have shape ({n}, {k}, {k}), got {s.noise_cov.shape}")
    for i, m in enumerate(s.noise_cov):
        dev = float(np.max(np.abs(m - m.conj().T)))
        if dev > HERMITIAN_TOL:
            raise ScenarioError(f"noise_cov M_{i + 1} is not Hermitian (max deviation {dev:.3e})")
        wmin = float(np.linalg.eigvalsh(matops.hermitize(m))[0])
        if not wmin > 0:
            raise ScenarioError(f"noise_cov M_{i + 1} is not positive definite (min eigenvalue {wmin:.3e})")
    for name in ("power_budget", "capacity_bits"):
        v = getattr(s, name)
        if not (np.isfinite(v) and v > 0):
            raise ScenarioError(f"{name} must be > 0, got {v!r}")


def toeplitz_noise_cov(n: int, k: int, step: float = 0.15) -> np.ndarray:
    """Real symmetric Toeplitz covariance with entries (1 - step*n)^|m-k| (n is 1-based)."""
    base = 1.0 - step * n
    if not 0.0 < base < 1.0:
        raise ScenarioError(f"decay base 1 - {step}*{n} = {base} is outside (0, 1)")
    if k < 1:
        raise ScenarioError(f"K must be >= 1, got {k}")
    idx = np.arange(k)
    return base ** np.abs(idx[:, None] - idx[None, :]).astype(float)


def paper_scenario(capacity_bits: float = 15.0) -> Scenario:
    """The N=3, K=6 reference instance."""
    n, k = 3, 6
    return Scenario(
        n_antennas=n,
        code_len=k,
        sigma_t2=[1.0, 1.0, 1.0],
        sigma_c2=[0.125, 0.25, 0.5],
        noise_cov=np.array([toeplitz_noise_cov(i + 1, k) for i in range(n)], dtype=complex),
        power_budget=10.0,
        capacity_bits=capacity_bits,
    )


# --- (de)serialization -----------------------------------------------------


def encode_complex(x) -> list:
    """Nested list with each complex entry as [re, im]."""
    x = np.asarray(x, dtype=complex)
    if x.ndim == 0:
        return [float(x.real), float(x.imag)]
    return [encode_complex(v) for v in x]


def decode_complex(obj) -> np.ndarray:
    arr = np.asarray(obj, dtype=float)
    if arr.shape[-1] != 2:
        raise ScenarioError("complex entries must be [re, im] pairs")
    return arr[..., 0] + 1j * arr[..., 1]


def scenario_from_dict(d: dict) -> Scenario:
    try:
        n = int(d["n_antennas"])
        k = int(d["code_len"])
        mspec = d["noise_cov"]
        if isinstance(mspec, dict):
            if "toeplitz" not in mspec:
                raise ScenarioError(f"unknown noise_cov generator {sorted(mspec)}")
            step = float((mspec["toeplitz"] or {}).get("step", 0.15))
            m = np.array([toeplitz_noise_cov(i + 1, k, step) for i in range(n)], dtype=complex)
        else:
            m = decode_complex(mspec)
        return Scenario(
            n_antennas=n,
            code_len=k,
            sigma_t2=d["sigma_t2"],
            sigma_c2=d["sigma_c2"],
            noise_cov=m,
            power_budget=d["power_budget"],
            capacity_bits=d["capacity_bits"],
        )
    except KeyError as exc:
        raise ScenarioError(f"missing scenario field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(f"malformed scenario: {exc}") from None


def scenario_to_dict(s: Scenario) -> dict:
    return {
        "n_antennas": s.n_antennas,
        "code_len": s.code_len,
        "sigma_t2": [float(v) for v in s.sigma_t2],
        "sigma_c2": [float(v) for v in s.sigma_c2],
        "power_budget": s.power_budget,
        "capacity_bits": s.capacity_bits,
        "noise_cov": encode_complex(s.noise_cov),
    }


@dataclass(frozen=True)
class RunConfig:
    scenario: Scenario
    solver: dict = field(default_factory=dict)
    experiment: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)


def _read_yaml(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such config file: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ScenarioError(f"cannot parse {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ScenarioError(f"{path}: top level must be a mapping")
    return doc


def load_config(path) -> RunConfig:
    doc = _read_yaml(path)
    if "scenario" not in doc:
        raise ScenarioError(f"{path}: missing 'scenario' block")
    return RunConfig(
        scenario=scenario_from_dict(doc["scenario"]),
        solver=dict(doc.get("solver") or {}),
        experiment=dict(doc.get("experiment") or {}),
        raw=doc,
    )


def load_scenario(path) -> Scenario:
    return load_config(path).scenario


def save_scenario(s: Scenario, path, **extra_blocks: Any) -> None:
    doc = {"scenario": scenario_to_dict(s)}
    doc.update({k: v for k, v in extra_blocks.items() if v is not None})
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))
