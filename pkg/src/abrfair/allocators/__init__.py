"""Bandwidth allocators for players sharing one bottleneck link."""

from abrfair.allocators._common import INFEASIBLE, MAX_ITERS, OPTIMAL, AllocationDecision, project_simplex
from abrfair.allocators.baseline import baseline_allocate, steady_state_split
from abrfair.allocators.centralized import CentralizedPlan, CentralizedSettings, centralized_plan, evaluate_plan
from abrfair.allocators.nmpc import CapacityForecast, NmpcSettings, nmpc_allocate

__all__ = [
    "AllocationDecision",
    "CapacityForecast",
    "CentralizedPlan",
    "CentralizedSettings",
    "INFEASIBLE",
    "MAX_ITERS",
    "NmpcSettings",
    "OPTIMAL",
    "baseline_allocate",
    "centralized_plan",
    "evaluate_plan",
    "nmpc_allocate",
    "project_simplex",
    "steady_state_split",
]
