"""Command-line experiment runner.

    crmr sweep     --scenario cfg.yaml --out DIR    capacity sweep over strategies
    crmr roc       --scenario cfg.yaml --out DIR    exact and Monte Carlo ROC curves
    crmr validate  --scenario cfg.yaml --out DIR    invariant / oracle suite
    crmr optimize  --scenario cfg.yaml --out DIR    single optimization run, saves designs
    crmr show      PATH                             print a design or scenario summary

Exit codes: 0 success, 1 usage or input error, 2 validation failure, 3 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from crmr import __version__, detect, majorize, matops, metrics, optimize, oracles, subsolve
from crmr.scenario import RunConfig, Scenario, ScenarioError, load_config, paper_scenario, scenario_to_dict

log = logging.getLogger("crmr")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_SOLVER = 0, 1, 2, 3
SWEEP_SCHEMA = "crmr-sweep/1"
DEFAULT_GRID = (5.0, 10.0, 15.0, 20.0, 25.0)
DEFAULT_TRIALS = 100_000
DEFAULT_N_GAMMA = 200
DEFAULT_PFA_MIN = 1e-4


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class ExperimentSpec:
    scenario: Scenario
    strategies: tuple = optimize.STRATEGIES
    sweep_c_bits: tuple = DEFAULT_GRID
    roc_c_bits: float = 15.0
    trials: int = DEFAULT_TRIALS
    n_gamma: int = DEFAULT_N_GAMMA
    pfa_min: float = DEFAULT_PFA_MIN
    out: Path = Path("out")
    seed: int = 0
    solver: optimize.BcdConfig = field(default_factory=optimize.BcdConfig)

    def __post_init__(self):
        if not self.strategies:
            raise UsageError("at least one strategy is required")
        bad = [s for s in self.strategies if s not in optimize.STRATEGIES]
        if bad:
            raise UsageError(f"unknown strategies {bad}; choose from {list(optimize.STRATEGIES)}")
        if not self.sweep_c_bits:
            raise UsageError("sweep grid is empty")
        c = list(self.sweep_c_bits)
        if any(x <= 0 for x in c) or any(b <= a for a, b in zip(c, c[1:])):
            raise UsageError("sweep capacities must be positive and strictly increasing")
        if self.roc_c_bits <= 0:
            raise UsageError("roc capacity must be positive")
        if self.trials < 0:
            raise UsageError("trials must be >= 0")
        if self.n_gamma < 2 or not 0 < self.pfa_min < 0.5:
            raise UsageError("need n_gamma >= 2 and 0 < pfa_min < 0.5")

    def resolved(self) -> dict:
        """Everything that determines the outputs, in a JSON-stable form."""
        return {
            "scenario": scenario_to_dict(self.scenario),
            "solver": self.solver.to_dict(),
            "experiment": {
                "strategies": list(self.strategies),
                "sweep_c_bits": [float(c) for c in self.sweep_c_bits],
                "roc": {"c_bits": self.roc_c_bits, "trials": self.trials, "n_gamma": self.n_gamma,
                        "pfa_min": self.pfa_min},
                "seed": self.seed,
            },
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _parse_list(text: str, conv=str) -> tuple:
    try:
        return tuple(conv(x) for x in text.replace(" ", "").split(",") if x)
    except ValueError:
        raise UsageError(f"cannot parse list {text!r}") from None


def build_spec(args) -> ExperimentSpec:
    if args.scenario:
        cfg = load_config(args.scenario)
    else:
        cfg = RunConfig(paper_scenario())
    exp = dict(cfg.experiment)
    roc = dict(exp.get("roc") or {})
    solver = dict(cfg.solver)
    seed = args.seed if args.seed is not None else int(exp.get("seed", solver.get("seed", 0)))
    solver["seed"] = seed
    if args.certify_every_iter:
        solver["certify_every_iter"] = True
    if args.tol is not None:
        solver["tol"] = args.tol
    try:
        bcd = optimize.BcdConfig.from_dict(solver)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"solver block: {exc}") from None
    strategies = _parse_list(args.strategies) if args.strategies else tuple(exp.get("strategies", optimize.STRATEGIES))
    if args.c_bits is not None:
        grid = _parse_list(args.c_bits, float)
    else:
        grid = tuple(float(c) for c in exp.get("sweep_c_bits", DEFAULT_GRID))
    roc_c = roc.get("c_bits", 15.0)
    if args.command in ("roc", "optimize") and args.c_bits is not None:
        if len(grid) != 1:
            raise UsageError(f"{args.command} takes a single --c-bits value")
        roc_c = grid[0]
    trials = args.trials if args.trials is not None else int(roc.get("trials", DEFAULT_TRIALS))
    return ExperimentSpec(
        scenario=cfg.scenario,
        strategies=strategies,
        sweep_c_bits=grid,
        roc_c_bits=float(roc_c),
        trials=trials,
        n_gamma=int(roc.get("n_gamma", DEFAULT_N_GAMMA)),
        pfa_min=float(roc.get("pfa_min", DEFAULT_PFA_MIN)),
        out=Path(args.out),
        seed=seed,
        solver=bcd,
    )


# --- helpers -------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(spec: ExperimentSpec, command: str, files: list, extra: dict) -> Path:
    out = spec.out
    cfg_path = out / "config.yaml"
    cfg_path.write_text(yaml.safe_dump(spec.resolved(), sort_keys=False))
    manifest = {
        "command": command,
        "version": __version__,
        "config_hash": spec.config_hash(),
        "config": cfg_path.name,
        "seed": spec.seed,
        "files": {p.name: _sha256(p) for p in files},
        **extra,
    }
    path = out / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=1, default=_json_default))
    return path


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serializable: {type(o)}")


def _run_cell(s: Scenario, strategy: str, cfg, cache):
    """(design, trace, status, message) for one strategy at one capacity."""
    try:
        d, tr = optimize.run_strategy(s, strategy, cfg, cache)
    except majorize.CertificationError as exc:
        return None, None, "certification-failure", str(exc)
    except (subsolve.SolverError, ValueError, np.linalg.LinAlgError, ArithmeticError) as exc:
        return None, None, "solver-failure", f"{type(exc).__name__}: {exc}"
    return d, tr, "ok", ""


def _fmt(x: float) -> str:
    return repr(float(x))


# --- verbs ------------------------------------------------------------------------------


def cmd_sweep(spec: ExperimentSpec) -> int:
    out = spec.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "traces").mkdir(exist_ok=True)
    (out / "designs").mkdir(exist_ok=True)
    rows, timing, failures = [], {}, 0
    for c in spec.sweep_c_bits:
        s = spec.scenario.with_capacity(c)
        cache = {}
        for strat in spec.strategies:
            t0 = time.perf_counter()
            d, tr, status, msg = _run_cell(s, strat, spec.solver, cache)
            wall_ms = 1e3 * (time.perf_counter() - t0)
            timing[f"{strat}@{c:g}"] = wall_ms
            if d is None:
                failures += 1
                log.error("%s at C=%g failed: %s", strat, c, msg)
                rows.append([strat, _fmt(c), "nan", "nan", "0", status])
                continue
            rows.append([strat, _fmt(c), _fmt(d.bhattacharyya_total), _fmt(d.backhaul_total),
                         str(tr.outer_iterations), status])
            (out / "traces" / f"{strat}_C{c:g}.json").write_text(
                json.dumps(tr.to_dict(), indent=1, default=_json_default))
            metrics.save_design(out / "designs" / f"{strat}_C{c:g}.yaml", s, d)
            log.info("%-5s C=%5g  B=%.8f  backhaul=%.9f bits  (%.0f ms)", strat, c,
                     d.bhattacharyya_total, d.backhaul_total, wall_ms)
    path = out / "sweep.csv"
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema={SWEEP_SCHEMA} config_hash={spec.config_hash()}\n")
        wr = csv.writer(fh)
        wr.writerow(["strategy", "c_bits", "bhattacharyya_nats", "backhaul_bits_used", "outer_iters", "status"])
        wr.writerows(rows)
    _write_manifest(spec, "sweep", [path], {"wall_ms": timing, "failures": failures})
    return EXIT_SOLVER if failures else EXIT_OK


def cmd_roc(spec: ExperimentSpec) -> int:
    out = spec.out
    out.mkdir(parents=True, exist_ok=True)
    s = spec.scenario.with_capacity(spec.roc_c_bits)
    cache, files, timing, failures = {}, [], {}, 0
    seeds = {}
    for i, strat in enumerate(spec.strategies):
        t0 = time.perf_counter()
        d, _, status, msg = _run_cell(s, strat, spec.solver, cache)
        if d is None:
            failures += 1
            log.error("%s failed: %s", strat, msg)
            continue
        metrics.save_design(out / f"design_{strat}.yaml", s, d)
        files.append(out / f"design_{strat}.yaml")
        model = detect.whiten(s, d)
        gammas = detect.default_gamma_grid(model, spec.n_gamma, spec.pfa_min)
        ex = detect.roc_exact(model, gammas)
        p = out / f"roc_{strat}_exact.csv"
        ex.to_csv(p)
        files.append(p)
        if spec.trials > 0:
            # one independent stream per strategy, derived from the run seed
            seeds[strat] = [spec.seed, i]
            mc = detect.roc_monte_carlo(model, gammas, spec.trials, seed=seeds[strat])
            p = out / f"roc_{strat}_mc.csv"
            mc.to_csv(p)
            files.append(p)
        timing[strat] = 1e3 * (time.perf_counter() - t0)
        log.info("%-5s lambda=%s (%.0f ms)", strat, np.array2string(model.lambda_n, precision=4), timing[strat])
    _write_manifest(spec, "roc", files, {"wall_ms": timing, "mc_seeds": seeds, "failures": failures})
    return EXIT_SOLVER if failures else EXIT_OK


def cmd_optimize(spec: ExperimentSpec) -> int:
    out = spec.out
    out.mkdir(parents=True, exist_ok=True)
    s = spec.scenario.with_capacity(spec.roc_c_bits)
    cache, files, failures = {}, [], 0
    for strat in spec.strategies:
        d, tr, status, msg = _run_cell(s, strat, spec.solver, cache)
        if d is None:
            failures += 1
            log.error("%s failed: %s", strat, msg)
            print(f"{strat:6s} {status}: {msg}")
            continue
        metrics.save_design(out / f"design_{strat}.yaml", s, d)
        (out / f"trace_{strat}.json").write_text(json.dumps(tr.to_dict(), indent=1, default=_json_default))
        files += [out / f"design_{strat}.yaml", out / f"trace_{strat}.json"]
        print(f"{strat:6s} B={d.bhattacharyya_total:.8f} nats  backhaul={d.backhaul_total:.9f} bits  "
              f"power={d.power:.9f}  outer_iters={tr.outer_iterations}")
    _write_manifest(spec, "optimize", files, {"failures": failures})
    return EXIT_SOLVER if failures else EXIT_OK


def _check(name, fn):
    try:
        ok, detail = fn()
    except majorize.CertificationError as exc:
        ok, detail = False, {"error": str(exc), "certificate": exc.certificate.to_dict()}
    except Exception as exc:  # every failure is a report entry, not a crash
        ok, detail = False, {"error": f"{type(exc).__name__}: {exc}"}
    return {"name": name, "passed": bool(ok), "detail": detail}


def validation_suite(s: Scenario, seed: int = 0, anchors: int = 3) -> list:
    rng = np.random.default_rng(seed)
    k, n_ant = s.code_len, s.n_antennas

    def random_point():
        a = rng.standard_normal(k) + 1j * rng.standard_normal(k)
        a *= math.sqrt(s.power_budget) * rng.uniform(0.2, 1.0) / np.linalg.norm(a)
        qs = []
        for _ in range(n_ant):
            x = rng.standard_normal((k, k)) + 1j * rng.standard_normal((k, k))
            qs.append(x @ x.conj().T / k + 0.05 * np.eye(k))
        return a, np.array(qs)

    def metric_identities():
        worst = 0.0
        for _ in range(50):
            a, q = random_point()
            for n in range(n_ant):
                base = s.noise_cov[n] + q[n]
                y = matops.quad_inv(base, a)
                lam_direct = s.sigma_t2[n] * matops.quad_inv(s.sigma_c2[n] * np.outer(a, a.conj()) + base, a)
                lam_sm = s.sigma_t2[n] * y / (1 + s.sigma_c2[n] * y)
                p = s.sigma_c2[n] + s.sigma_t2[n]
                i_direct = matops.logdet(p * np.outer(a, a.conj()) + base) - matops.logdet(q[n])
                i_lemma = float(np.linalg.slogdet(np.eye(k) + np.linalg.solve(q[n], s.noise_cov[n]))[1]) + math.log1p(p * y)
                worst = max(worst, abs(lam_direct - lam_sm) / abs(lam_direct), abs(i_direct - i_lemma) / abs(i_direct))
        return worst <= 1e-9, {"max_relative_error": worst}

    def certification():
        out = []
        for _ in range(anchors):
            a, q = random_point()
            sc = majorize.build_code_surrogate(s, q, a)
            out += majorize.certify_code_surrogate(s, q, sc, rng)
            sq = majorize.build_quant_surrogate(s, a, q)
            out += majorize.certify_quant_surrogate(s, sq, rng)
        bad = [c for c in out if not c.passed]
        if bad:
            raise majorize.CertificationError(bad[0])
        return True, {"certificates": [c.summary() for c in out]}

    def quant_step_oracle():
        s1 = Scenario(1, 1, (1.0,), (0.5,), np.array([[[1.0]]]), 4.0, 3.0)
        sur = majorize.build_quant_surrogate(s1, np.array([2.0 + 0j]), np.array([[[0.3 + 0j]]]))
        q, rep = subsolve.solve_quant_step(sur, s1.capacity_nats, np.array([[[0.3 + 0j]]]))
        _, ref = oracles.scalar_quant_step(sur, s1.capacity_nats)
        err = abs(rep.objective - ref)
        return err <= 1e-6, {"solver": rep.objective, "golden_section": ref, "abs_error": err}

    def detector_oracle():
        a, q = random_point()
        d = metrics.make_design(s, a, q)
        model = detect.whiten(s, d)
        lam_err = float(np.max(np.abs(model.lambda_n - np.array(d.lambda_n)) / np.array(d.lambda_n)))
        w = model.weights_h1[:3] if n_ant >= 3 else np.array([1.0, 0.6, 0.3])
        errs = []
        for g in (0.1, 1.0, 3.0):
            errs.append(abs(float(detect.hypoexp_sf(w, [g])[0]) - oracles.tail_by_quadrature(w, g)))
        ok = lam_err <= 1e-10 and max(errs) <= 1e-6
        return ok, {"lambda_rel_error": lam_err, "tail_abs_error": max(errs)}

    return [
        _check("metric-identities", metric_identities),
        _check("majorizer-certification", certification),
        _check("quant-step-oracle", quant_step_oracle),
        _check("detector-oracle", detector_oracle),
    ]


def cmd_validate(spec: ExperimentSpec) -> int:
    out = spec.out
    out.mkdir(parents=True, exist_ok=True)
    checks = validation_suite(spec.scenario, spec.seed)
    passed = all(c["passed"] for c in checks)
    path = out / "validate.json"
    path.write_text(json.dumps({"passed": passed, "faults": sorted(majorize.FAULTS), "checks": checks},
                               indent=1, default=_json_default))
    for c in checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'}  {c['name']}")
    _write_manifest(spec, "validate", [path], {})
    return EXIT_OK if passed else EXIT_VALIDATION


def cmd_show(path: str) -> int:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {p}")
    doc = yaml.safe_load(p.read_text())
    if isinstance(doc, dict) and "design" in doc:
        s, d = metrics.load_design(p)
        rep = metrics.evaluate(s, d)
        print(f"design: N={s.n_antennas} K={s.code_len} P={s.power_budget:g} C={s.capacity_bits:g} bits")
        print(f"  power used      {d.power:.9f}")
        for n in range(s.n_antennas):
            print(f"  link {n + 1}: lambda={rep.lambda_n[n]:.6f}  B={rep.b_n[n]:.6f}  I={rep.i_n[n] / math.log(2):.6f} bits")
        print(f"  total B         {rep.b_total:.8f} nats")
        print(f"  total backhaul  {rep.i_total_bits:.9f} bits")
        for key, val in sorted(d.meta.items()):
            print(f"  {key}: {val}")
        return EXIT_OK
    s = load_config(p).scenario
    print(f"scenario: N={s.n_antennas} K={s.code_len} P={s.power_budget:g} C={s.capacity_bits:g} bits")
    print(f"  sigma_t2={s.sigma_t2.tolist()} sigma_c2={s.sigma_c2.tolist()}")
    d = optimize.run_baseline_none(s)
    print(f"  uniform code with isotropic noise: B={d.bhattacharyya_total:.8f} nats, epsilon={d.meta['epsilon']:.6g}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crmr", description="Joint radar code and backhaul quantization design.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("sweep", "roc", "validate", "optimize"):
        sp = sub.add_parser(name)
        sp.add_argument("--scenario", help="YAML config (default: built-in reference scenario)")
        sp.add_argument("--out", default="out")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--trials", type=int)
        sp.add_argument("--certify-every-iter", action="store_true")
        sp.add_argument("--strategies", help="comma-separated subset of none,code,quant,joint")
        sp.add_argument("--c-bits", help="comma-separated capacities in bits per sample")
        sp.add_argument("--tol", type=float, help="KKT tolerance of the subproblem solvers")
        sp.add_argument("--inject-fault", action="append", default=[], help=argparse.SUPPRESS)
        sp.add_argument("-v", "--verbose", action="store_true")
    sp = sub.add_parser("show")
    sp.add_argument("path")
    sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    try:
        args = make_parser().parse_args(argv)
    except SystemExit as exc:  # --help, --version, or a usage error
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    saved_faults = set(majorize.FAULTS)
    try:
        if args.command == "show":
            return cmd_show(args.path)
        for f in args.inject_fault:
            if f not in ("code_linear_sign", "quant_linear_sign"):
                raise UsageError(f"unknown fault {f!r}")
            majorize.FAULTS.add(f)
        spec = build_spec(args)
        return {"sweep": cmd_sweep, "roc": cmd_roc, "validate": cmd_validate, "optimize": cmd_optimize}[
            args.command
        ](spec)
    except (UsageError, FileNotFoundError, ScenarioError) as exc:
        print(f"crmr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except majorize.CertificationError as exc:
        print(f"crmr: certification failed: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except subsolve.SolverError as exc:
        print(f"crmr: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    finally:
        majorize.FAULTS.clear()
        majorize.FAULTS.update(saved_faults)


if __name__ == "__main__":
    sys.exit(main())
