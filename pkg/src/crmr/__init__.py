"""Joint code-vector and backhaul-quantization design for cloud multistatic radar."""

from crmr.scenario import Scenario, load_scenario, save_scenario, paper_scenario
from crmr.metrics import DesignPoint, MetricReport, evaluate, make_design
from crmr.optimize import (
    BcdConfig,
    run_baseline_code_only,
    run_baseline_none,
    run_baseline_quant_only,
    run_joint,
    run_strategy,
)
from crmr.detect import roc_exact, roc_monte_carlo, whiten

__all__ = [
    "Scenario",
    "load_scenario",
    "save_scenario",
    "paper_scenario",
    "DesignPoint",
    "MetricReport",
    "evaluate",
    "make_design",
    "BcdConfig",
    "run_baseline_code_only",
    "run_baseline_none",
    "run_baseline_quant_only",
    "run_joint",
    "run_strategy",
    "roc_exact",
    "roc_monte_carlo",
    "whiten",
]

__version__ = "0.1.0"
