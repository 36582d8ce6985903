"""Synchronized discrete-time engine: players, bottleneck link and metrics.

Within a step every decision uses the previous step's observations:
players pick bitrates from last step's bandwidth and their current buffer,
the link splits the step's capacity, then buffers and QoE sums advance.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from abrfair.allocators import (
    AllocationDecision,
    CapacityForecast,
    CentralizedSettings,
    NmpcSettings,
    baseline_allocate,
    centralized_plan,
    nmpc_allocate,
)
from abrfair.core import (
    DomainError,
    PlayerSpec,
    PlayerState,
    SimConfig,
    accumulate_qoe,
    alpha_fairness,
    buffer_step,
    normalized_jain,
    social_welfare,
    step_qoe,
)
from abrfair.policies import decide_bitrate
from abrfair.tcp import TcpShareModel, tcp_share
from abrfair.traces import BandwidthTrace

ALLOCATORS = ("tcp_model", "baseline", "nmpc", "centralized")


@dataclass(frozen=True)
class Scenario:
    specs: tuple[PlayerSpec, ...]
    allocator: str
    trace: BandwidthTrace
    sim: SimConfig = SimConfig()
    initial_buffers_s: tuple[float, ...] | None = None  # default 2 s each
    initial_bitrates_kbps: tuple[float, ...] | None = None  # default ladder minimum
    seed: int = 0
    tcp: TcpShareModel = TcpShareModel()
    nmpc: NmpcSettings = NmpcSettings()
    centralized: CentralizedSettings = CentralizedSettings()
    forecast: str = "perfect"  # or "persistence"

    def __post_init__(self) -> None:
        specs = tuple(self.specs)
        object.__setattr__(self, "specs", specs)
        if not specs:
            raise DomainError("scenario needs at least one player")
        if self.allocator not in ALLOCATORS:
            raise DomainError(f"unknown allocator {self.allocator!r}")
        if self.forecast not in ("perfect", "persistence"):
            raise DomainError(f"unknown forecast {self.forecast!r}")
        if len(self.trace) < self.sim.horizon_steps:
            raise DomainError(f"trace has {len(self.trace)} steps, run needs {self.sim.horizon_steps}")
        if self.trace.dt_s != self.sim.dt_s:
            raise DomainError("trace grid and simulation step differ")
        n = len(specs)
        b0 = self.initial_buffers_s if self.initial_buffers_s is not None else (2.0,) * n
        r0 = self.initial_bitrates_kbps if self.initial_bitrates_kbps is not None else tuple(s.ladder.min_kbps for s in specs)
        if len(b0) != n or len(r0) != n:
            raise DomainError("initial buffers and bitrates need one entry per player")
        for s, b, r in zip(specs, b0, r0):
            if not s.buffer_min_s <= b <= s.buffer_max_s:
                raise DomainError(f"initial buffer {b} outside [{s.buffer_min_s}, {s.buffer_max_s}]")
            if not s.ladder.min_kbps <= r <= s.ladder.max_kbps:
                raise DomainError(f"initial bitrate {r} outside the ladder")
        object.__setattr__(self, "initial_buffers_s", tuple(float(b) for b in b0))
        object.__setattr__(self, "initial_bitrates_kbps", tuple(float(r) for r in r0))

    @property
    def n_players(self) -> int:
        return len(self.specs)


@dataclass(frozen=True, eq=False)
class StepRecord:
    k: int
    W: float
    w: np.ndarray
    r: np.ndarray
    b: np.ndarray  # buffer after the step
    step_qoe: np.ndarray
    flags: tuple[tuple[str, ...], ...]  # per player: overflow / underflow / idle
    allocator_flags: tuple[str, ...] = ()
    solver_status: str = "optimal"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, StepRecord):
            return NotImplemented
        return (
            self.k == other.k
            and self.W == other.W
            and all(np.array_equal(getattr(self, a), getattr(other, a)) for a in ("w", "r", "b", "step_qoe"))
            and self.flags == other.flags
            and self.allocator_flags == other.allocator_flags
            and self.solver_status == other.solver_status
        )


@dataclass
class Metrics:
    session_qoe: tuple[float | None, ...]
    social_welfare: float | None
    alpha_fairness: float | None
    normalized_jain: float | None
    violations: dict[str, int] = field(default_factory=dict)
    idle_players: tuple[int, ...] = ()


@dataclass
class RunResult:
    records: list[StepRecord]
    metrics: Metrics
    alpha: float
    allocator: str

    @property
    def session_qoe(self):
        return self.metrics.session_qoe

    @property
    def social_welfare(self):
        return self.metrics.social_welfare

    @property
    def alpha_fairness(self):
        return self.metrics.alpha_fairness

    @property
    def normalized_jain(self):
        return self.metrics.normalized_jain

    @property
    def violations(self):
        return self.metrics.violations

    def bandwidth(self) -> np.ndarray:
        return np.array([rec.w for rec in self.records])

    def bitrates(self) -> np.ndarray:
        return np.array([rec.r for rec in self.records])

    def buffers(self) -> np.ndarray:
        return np.array([rec.b for rec in self.records])


def _metrics_from_sums(num: Sequence[float], den: Sequence[float], alpha: float, records: Sequence[StepRecord]) -> Metrics:
    U = tuple(n / d if d > 0 else None for n, d in zip(num, den))
    idle = tuple(i for i, u in enumerate(U) if u is None)
    active = [u for u in U if u is not None]
    violations = {
        "underflow": sum(f.count("underflow") for rec in records for f in rec.flags),
        "overflow": sum(f.count("overflow") for rec in records for f in rec.flags),
        "floor": sum("qoe_floor" in rec.allocator_flags for rec in records),
        "infeasible": sum(rec.solver_status == "infeasible" for rec in records),
        "fallback": sum("baseline_fallback" in rec.allocator_flags for rec in records),
    }
    if not active:
        return Metrics(U, None, None, None, violations, idle)
    try:
        F = alpha_fairness(active, alpha)
    except DomainError:
        F = None
    try:
        J = normalized_jain(active)
    except DomainError:
        J = None
    return Metrics(U, social_welfare(active), F, J, violations, idle)


def _initial_states(sc: Scenario) -> list[PlayerState]:
    w0 = float(sc.trace.step_values[0]) / sc.n_players  # equal-share prior for the first observation
    return [PlayerState(b, r, w0) for b, r in zip(sc.initial_buffers_s, sc.initial_bitrates_kbps)]


def run(sc: Scenario) -> RunResult:
    """Simulate a scenario. Deterministic given the scenario."""
    specs, n, dt, alpha = sc.specs, sc.n_players, sc.sim.dt_s, sc.sim.alpha
    K = min(sc.sim.horizon_steps, len(sc.trace))
    trace = sc.trace.step_values
    states = _initial_states(sc)
    plan = None
    if sc.allocator == "centralized":
        plan = centralized_plan(specs, trace[:K], alpha, dt, states, sc.centralized)
    records: list[StepRecord] = []
    for k in range(K):
        Wk = float(trace[k])
        if plan is not None:
            r = plan.r[k].astype(float)
        else:
            r = np.array([decide_bitrate(s.policy, st.last_bandwidth_kbps, st.buffer_s, s.ladder) for s, st in zip(specs, states)])
        dec = _allocate(sc, states, r, k, plan)
        w = np.asarray(dec.per_player_w, dtype=float)
        new_states, b_out, qoe, flags = [], np.empty(n), np.empty(n), []
        for i, (s, st) in enumerate(zip(specs, states)):
            bu = buffer_step(st.buffer_s, w[i], r[i], dt, s.buffer_min_s, s.buffer_max_s)
            r_prev = r[i] if st.steps == 0 else st.last_bitrate_kbps
            acc = accumulate_qoe(st, r[i], r_prev, w[i], s)
            f = tuple(name for name, on in (("overflow", bu.overflow), ("underflow", bu.underflow), ("idle", w[i] == 0)) if on)
            new_states.append(
                PlayerState(bu.buffer_s, float(r[i]), float(w[i]), acc.qoe_numerator, acc.qoe_denominator, acc.steps)
            )
            b_out[i] = bu.buffer_s
            qoe[i] = step_qoe(r[i], r_prev, s)
            flags.append(f)
        records.append(StepRecord(k, Wk, w, r, b_out, qoe, tuple(flags), tuple(dec.flags), dec.solver_status))
        states = new_states
    metrics = _metrics_from_sums([s.qoe_numerator for s in states], [s.qoe_denominator for s in states], alpha, records)
    return RunResult(records, metrics, alpha, sc.allocator)


def _allocate(sc: Scenario, states, r: np.ndarray, k: int, plan) -> AllocationDecision:
    Wk = float(sc.trace.step_values[k])
    if sc.allocator == "tcp_model":
        return AllocationDecision(tcp_share(sc.tcp, r, Wk), 0.0)
    if sc.allocator == "baseline":
        return baseline_allocate(sc.specs, Wk, sc.sim.alpha)
    if sc.allocator == "nmpc":
        H = sc.nmpc.horizon
        if sc.forecast == "perfect":
            fc = CapacityForecast.perfect(sc.trace.step_values, k, H)
        else:
            last = float(sc.trace.step_values[k - 1]) if k > 0 else Wk
            fc = CapacityForecast.persistence(last, H)
        dec = nmpc_allocate(states, sc.specs, fc, sc.sim.alpha, sc.sim.dt_s, sc.nmpc)
        if sc.forecast == "persistence":
            # the plan was made for the forecast; the link delivers the actual capacity
            dec.per_player_w = dec.per_player_w * (Wk / dec.per_player_w.sum())
        return dec
    return AllocationDecision(np.asarray(plan.w[k], dtype=float), plan.objective_value, plan.status)


def replay_metrics(records: Sequence[StepRecord], specs: Sequence[PlayerSpec], alpha: float) -> Metrics:
    """Recompute every metric from a step log alone."""
    n = len(specs)
    states = [PlayerState(0.0, 1.0, 0.0) for _ in range(n)]
    for rec in records:
        nxt = []
        for i, (s, st) in enumerate(zip(specs, states)):
            r_prev = rec.r[i] if st.steps == 0 else st.last_bitrate_kbps
            acc = accumulate_qoe(st, rec.r[i], r_prev, rec.w[i], s)
            nxt.append(replace(acc, last_bitrate_kbps=float(rec.r[i])))
        states = nxt
    return _metrics_from_sums([s.qoe_numerator for s in states], [s.qoe_denominator for s in states], alpha, records)


def write_records(result: RunResult, path: str | Path) -> None:
    """Step log as ``k,player,w,r,b,step_qoe,flags``; flags are ``;``-joined."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["k", "player", "w", "r", "b", "step_qoe", "flags"])
        for rec in result.records:
            for i in range(len(rec.w)):
                flags = ";".join(rec.flags[i] + rec.allocator_flags)
                out.writerow([rec.k, i, repr(float(rec.w[i])), repr(float(rec.r[i])), repr(float(rec.b[i])), repr(float(rec.step_qoe[i])), flags])


def summary(result: RunResult) -> dict:
    m = result.metrics
    return {
        "allocator": result.allocator,
        "alpha": result.alpha,
        "steps": len(result.records),
        "session_qoe": list(m.session_qoe),
        "social_welfare": m.social_welfare,
        "alpha_fairness": m.alpha_fairness,
        "normalized_jain": m.normalized_jain,
        "violations": m.violations,
        "idle_players": list(m.idle_players),
    }


def write_summary(result: RunResult, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(summary(result), fh, indent=2)
