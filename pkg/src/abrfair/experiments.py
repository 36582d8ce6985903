"""Experiment suite: efficiency/fairness sweep and three sensitivity studies.

Every plan expands into independent runs (sweep point x allocator x trace x
replicate). Runs execute serially or on a process pool; results are keyed
by their position in the expansion and aggregated in that order, so the
tables do not depend on scheduling.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import pickle
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from abrfair.allocators import CentralizedSettings, NmpcSettings
from abrfair.core import DomainError, PlayerSpec, QualityFunction, SimConfig
from abrfair.simulation import ALLOCATORS, Scenario, run
from abrfair.tcp import TcpShareModel
from abrfair.traces import BandwidthTrace, add_noise

log = logging.getLogger(__name__)

KINDS = ("pareto", "q", "init", "noise")
EARLY_STEPS = 10  # window for the early-bandwidth columns


@dataclass(frozen=True)
class ScenarioTemplate:
    specs: tuple[PlayerSpec, ...]
    sim: SimConfig = SimConfig()
    initial_buffers_s: tuple[float, ...] | None = None
    initial_bitrates_kbps: tuple[float, ...] | None = None
    nmpc: NmpcSettings = NmpcSettings()
    centralized: CentralizedSettings = CentralizedSettings()
    tcp: TcpShareModel = TcpShareModel()
    forecast: str = "perfect"

    def build(self, allocator: str, trace: BandwidthTrace, seed: int = 0, **changes) -> Scenario:
        fields = dict(
            specs=self.specs,
            allocator=allocator,
            trace=trace,
            sim=self.sim,
            initial_buffers_s=self.initial_buffers_s,
            initial_bitrates_kbps=self.initial_bitrates_kbps,
            seed=seed,
            tcp=self.tcp,
            nmpc=self.nmpc,
            centralized=self.centralized,
            forecast=self.forecast,
        )
        fields.update(changes)
        return Scenario(**fields)


@dataclass(frozen=True)
class ExperimentPlan:
    """One study: a template swept along one axis.

    ``axis`` holds alphas (pareto), exponent pairs (q), initial-buffer pairs
    (init) or noise standard deviations in kbps (noise).
    """

    name: str
    kind: str
    template: ScenarioTemplate
    axis: tuple
    traces: tuple[BandwidthTrace, ...]
    allocators: tuple[str, ...] = ("baseline", "nmpc", "centralized")
    replicates: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise DomainError(f"unknown experiment kind {self.kind!r}")
        if not self.axis:
            raise DomainError("sweep axis is empty")
        if self.replicates < 1:
            raise DomainError("replicates must be >= 1")
        if not self.traces:
            raise DomainError("plan needs at least one trace")
        bad = set(self.allocators) - set(ALLOCATORS)
        if bad or not self.allocators:
            raise DomainError(f"bad allocator list {self.allocators}")
        if self.kind == "pareto" and list(self.axis) != sorted(self.axis):
            raise DomainError("alpha list must be sorted ascending")


@dataclass(frozen=True)
class RunKey:
    sweep: int
    allocator: str
    trace: int
    replicate: int


@dataclass
class ResultTable:
    """One row per (sweep point, allocator) with mean/stdev/n of each metric."""

    name: str
    kind: str
    rows: list[dict] = field(default_factory=list)

    def row(self, sweep, allocator: str) -> dict:
        for r in self.rows:
            if r["sweep"] == sweep and r["allocator"] == allocator:
                return r
        raise KeyError((sweep, allocator))

    def column(self, allocator: str, name: str) -> list:
        return [r[name] for r in self.rows if r["allocator"] == allocator]

    @property
    def failures(self) -> int:
        return sum(r["failures"] for r in self.rows)

    def columns(self) -> list[str]:
        cols: list[str] = []
        for r in self.rows:
            for c in r:
                if c not in cols:
                    cols.append(c)
        return cols

    def write(self, path: str | Path, fmt: str = "csv") -> None:
        if fmt == "csv":
            cols = self.columns()
            with open(path, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=cols)
                w.writeheader()
                for r in self.rows:
                    w.writerow({c: _cell(r.get(c)) for c in cols})
        elif fmt == "json-lines":
            with open(path, "w") as fh:
                for r in self.rows:
                    fh.write(json.dumps({k: _jsonable(v) for k, v in r.items()}) + "\n")
        else:
            raise DomainError(f"unknown format {fmt!r}")


def _cell(v):
    if isinstance(v, (list, tuple)):
        return json.dumps(_jsonable(v))
    return v


def _jsonable(v):
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, np.generic):
        return v.item()
    return v


def _replicate_seed(plan_seed: int, trace: int, replicate: int) -> int:
    return int(np.random.SeedSequence([plan_seed, trace, replicate]).generate_state(1)[0])


def expand(plan: ExperimentPlan) -> list[tuple[RunKey, Scenario]]:
    """All runs of a plan in canonical order."""
    out = []
    for si, x in enumerate(plan.axis):
        for ti, tr in enumerate(plan.traces):
            for rep in range(plan.replicates):
                seed = _replicate_seed(plan.seed, ti, rep)
                trace, changes = tr, {}
                if plan.kind == "pareto":
                    changes["sim"] = replace(plan.template.sim, alpha=float(x))
                elif plan.kind == "q":
                    changes["specs"] = tuple(
                        replace(s, quality=QualityFunction(float(p))) for s, p in zip(plan.template.specs, x)
                    )
                elif plan.kind == "init":
                    changes["initial_buffers_s"] = tuple(float(b) for b in x)
                else:
                    # same seed at every sigma: the noise shape is shared across the sweep
                    trace = add_noise(tr, float(x), seed)
                for alloc in plan.allocators:
                    out.append((RunKey(si, alloc, ti, rep), plan.template.build(alloc, trace, seed, **changes)))
    return out


def _execute(sc: Scenario) -> dict:
    res = run(sc)
    bw = res.bandwidth()
    return {
        "session_qoe": [None if u is None else float(u) for u in res.session_qoe],
        "welfare": res.social_welfare,
        "alpha_fairness": res.alpha_fairness,
        "normalized_jain": res.normalized_jain,
        "early_bandwidth": [float(v) for v in bw[:EARLY_STEPS].mean(axis=0)],
        "solver_max_iters": sum(r.solver_status == "max_iters" for r in res.records),
        "violations": dict(res.violations),
    }


def _safe_execute(sc: Scenario) -> dict:
    try:
        return _execute(sc)
    except Exception as exc:  # a failed run is reported, not fatal
        return {"error": f"{type(exc).__name__}: {exc}"}


def execute_runs(scenarios: Sequence[Scenario], parallelism: int = 1) -> list[dict]:
    """Run scenarios, returning outcomes in input order.

    Runs are deterministic, so identical scenarios are executed once. The
    scenario seed only labels a replicate (``run`` draws no random numbers),
    so it is left out of the comparison.
    """
    index: dict[bytes, int] = {}
    unique: list[Scenario] = []
    slot = []
    for sc in scenarios:
        key = pickle.dumps(replace(sc, seed=0))
        if key not in index:
            index[key] = len(unique)
            unique.append(sc)
        slot.append(index[key])
    if parallelism <= 1 or len(unique) <= 1:
        done = [_safe_execute(sc) for sc in unique]
    else:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            done = list(pool.map(_safe_execute, unique, chunksize=1))
    return [done[i] for i in slot]


def _stats(values: list[float]) -> tuple[float, float, int]:
    v = np.array([x for x in values if x is not None and math.isfinite(x)], dtype=float)
    if v.size == 0:
        return float("nan"), float("nan"), 0
    sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return float(v.mean()), sd, int(v.size)


def aggregate(plan: ExperimentPlan, keys: Sequence[RunKey], outcomes: Sequence[dict]) -> ResultTable:
    by_key = dict(zip(keys, outcomes))
    # normalization reference: best centralized welfare per trace (per sweep point unless pareto)
    ref: dict[tuple, float] = {}
    for k, o in by_key.items():
        if "error" in o or o["welfare"] is None:
            continue
        g = (k.trace, k.replicate) if plan.kind == "pareto" else (k.sweep, k.trace, k.replicate)
        cur = ref.get(g)
        is_c = k.allocator == "centralized"
        has_c = "centralized" in plan.allocators
        if has_c and not is_c:
            continue
        ref[g] = o["welfare"] if cur is None else max(cur, o["welfare"])
    n_players = len(plan.template.specs)
    table = ResultTable(plan.name, plan.kind)
    for si, x in enumerate(plan.axis):
        for alloc in plan.allocators:
            ks = [k for k in keys if k.sweep == si and k.allocator == alloc]
            ok = [(k, by_key[k]) for k in ks if "error" not in by_key[k]]
            row = {"experiment": plan.name, "sweep": _jsonable(list(x) if isinstance(x, tuple) else x), "allocator": alloc}
            metrics = {
                "welfare": [o["welfare"] for _, o in ok],
                "normalized_welfare": [
                    None
                    if o["welfare"] is None
                    else o["welfare"] / ref[(k.trace, k.replicate) if plan.kind == "pareto" else (k.sweep, k.trace, k.replicate)]
                    for k, o in ok
                ],
                "alpha_fairness": [o["alpha_fairness"] for _, o in ok],
                "normalized_jain": [o["normalized_jain"] for _, o in ok],
            }
            for i in range(n_players):
                metrics[f"qoe_{i}"] = [o["session_qoe"][i] for _, o in ok]
                metrics[f"early_bw_{i}"] = [o["early_bandwidth"][i] for _, o in ok]
            for name, vals in metrics.items():
                m, s, n = _stats(vals)
                row[f"{name}_mean"], row[f"{name}_std"], row[f"{name}_n"] = m, s, n
            row["n"] = len(ks)
            row["failures"] = len(ks) - len(ok)
            row["max_iters_steps"] = sum(o["solver_max_iters"] for _, o in ok)
            row["underflow_steps"] = sum(o["violations"]["underflow"] for _, o in ok)
            table.rows.append(row)
    for k in keys:
        if "error" in by_key[k]:
            log.warning("%s run %s failed: %s", plan.name, k, by_key[k]["error"])
    return table


def run_plan(plan: ExperimentPlan, parallelism: int = 1) -> ResultTable:
    units = expand(plan)
    outcomes = execute_runs([sc for _, sc in units], parallelism)
    return aggregate(plan, [k for k, _ in units], outcomes)


def _check(plan: ExperimentPlan, kind: str) -> None:
    if plan.kind != kind:
        raise DomainError(f"plan {plan.name!r} is a {plan.kind} study, expected {kind}")


def pareto_sweep(plan: ExperimentPlan, parallelism: int = 1) -> ResultTable:
    _check(plan, "pareto")
    return run_plan(plan, parallelism)


def sensitivity_q(plan: ExperimentPlan, parallelism: int = 1) -> ResultTable:
    _check(plan, "q")
    return run_plan(plan, parallelism)


def sensitivity_init(plan: ExperimentPlan, parallelism: int = 1) -> ResultTable:
    _check(plan, "init")
    return run_plan(plan, parallelism)


def sensitivity_noise(plan: ExperimentPlan, parallelism: int = 1) -> ResultTable:
    _check(plan, "noise")
    return run_plan(plan, parallelism)


def run_batch(
    plans: Iterable[ExperimentPlan],
    parallelism: int = 1,
    out_dir: str | Path | None = None,
    fmt: str = "csv",
) -> list[ResultTable]:
    """Run several plans over one worker pool and optionally write their tables.

    All runs of all plans are pooled, so a small plan does not leave workers idle.
    """
    plans = list(plans)
    expanded = [expand(p) for p in plans]
    flat = [sc for units in expanded for _, sc in units]
    outcomes = execute_runs(flat, parallelism)
    tables, pos = [], 0
    for plan, units in zip(plans, expanded):
        n = len(units)
        tables.append(aggregate(plan, [k for k, _ in units], outcomes[pos : pos + n]))
        pos += n
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ext = "csv" if fmt == "csv" else "jsonl"
        for t in tables:
            t.write(out / f"{t.name}.{ext}", fmt)
    return tables
