"""Bandwidth traces: ingestion from 5 s throughput samples, filtering,
noise injection and synthetic fixtures."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from itertools import groupby
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from abrfair.core import DomainError

log = logging.getLogger(__name__)

NOISE_FLOOR_KBPS = 50.0


@dataclass(frozen=True)
class RawMeasurement:
    session_id: str
    seq: int
    throughput_kbps: float
    duration_s: float = 5.0

    def __post_init__(self) -> None:
        if not self.throughput_kbps >= 0:
            raise DomainError(f"throughput must be >= 0, got {self.throughput_kbps}")
        if not self.duration_s > 0:
            raise DomainError(f"duration must be > 0, got {self.duration_s}")


@dataclass(frozen=True, eq=False)
class BandwidthTrace:
    step_values: np.ndarray
    source_id: str = ""
    dt_s: float = 2.0

    def __post_init__(self) -> None:
        v = np.array(self.step_values, dtype=float)
        if v.ndim != 1 or v.size == 0:
            raise DomainError("trace needs at least one step")
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise DomainError("trace capacities must be finite and > 0")
        if not self.dt_s > 0:
            raise DomainError("dt must be > 0")
        v.setflags(write=False)
        object.__setattr__(self, "step_values", v)

    def __len__(self) -> int:
        return self.step_values.size

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BandwidthTrace):
            return NotImplemented
        return (
            self.source_id == other.source_id
            and self.dt_s == other.dt_s
            and np.array_equal(self.step_values, other.step_values)
        )

    def mean(self) -> float:
        return float(self.step_values.mean())


def _hold(values: np.ndarray, durations: np.ndarray, dt: float) -> np.ndarray:
    """Sample a piecewise-constant signal at ``0, dt, 2dt, ...``."""
    edges = np.cumsum(durations)
    n = int(math.floor(edges[-1] / dt + 1e-9))
    t = np.arange(n) * dt
    idx = np.searchsorted(edges, t, side="right")
    return values[np.minimum(idx, len(values) - 1)]


def ingest(rows: Iterable[RawMeasurement], dt_s: float = 2.0) -> list[BandwidthTrace]:
    """One trace per session: samples held over their duration, resampled onto the ``dt`` grid.

    Sessions that yield no positive-capacity step are skipped with a warning.
    """
    ordered = sorted(rows, key=lambda m: (m.session_id, m.seq))
    traces = []
    for sid, group in groupby(ordered, key=lambda m: m.session_id):
        g = list(group)
        vals = np.array([m.throughput_kbps for m in g], dtype=float)
        durs = np.array([m.duration_s for m in g], dtype=float)
        steps = _hold(vals, durs, dt_s)
        if steps.size == 0 or np.any(steps <= 0):
            log.warning("skipping session %s: no usable steps", sid)
            continue
        traces.append(BandwidthTrace(steps, str(sid), dt_s))
    return traces


def read_measurements(path: str | Path) -> list[RawMeasurement]:
    """Read ``session_id,seq,throughput_kbps[,duration_s]`` rows."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"session_id", "seq", "throughput_kbps"} - set(reader.fieldnames or ())
        if missing:
            raise DomainError(f"missing columns: {sorted(missing)}")
        out = []
        for row in reader:
            kw = {}
            if row.get("duration_s"):
                kw["duration_s"] = float(row["duration_s"])
            out.append(RawMeasurement(row["session_id"], int(row["seq"]), float(row["throughput_kbps"]), **kw))
    return out


def write_trace(trace: BandwidthTrace, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "capacity_kbps"])
        for k, v in enumerate(trace.step_values):
            w.writerow([k, repr(float(v))])


def read_trace(path: str | Path, dt_s: float = 2.0, source_id: str | None = None) -> BandwidthTrace:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "capacity_kbps" not in rows[0]:
        raise DomainError(f"{path}: expected header step,capacity_kbps")
    rows.sort(key=lambda r: int(r["step"]))
    vals = [float(r["capacity_kbps"]) for r in rows]
    return BandwidthTrace(np.array(vals), source_id if source_id is not None else Path(path).stem, dt_s)


def filter_and_scale(
    traces: Sequence[BandwidthTrace],
    n_players: int,
    min_avg_kbps: float = 0.0,
    max_avg_kbps: float = 3000.0,
) -> list[BandwidthTrace]:
    """Keep traces whose mean lies in ``(min, max]`` and multiply them by ``n_players``."""
    if not min_avg_kbps < max_avg_kbps:
        raise DomainError("need min_avg_kbps < max_avg_kbps")
    if n_players < 1:
        raise DomainError("n_players must be >= 1")
    out = []
    for t in traces:
        m = t.mean()
        if min_avg_kbps < m <= max_avg_kbps:
            out.append(BandwidthTrace(t.step_values * n_players, t.source_id, t.dt_s))
    return out


def add_noise(trace: BandwidthTrace, sigma_kbps: float, seed: int, floor_kbps: float = NOISE_FLOOR_KBPS) -> BandwidthTrace:
    """Additive white Gaussian noise, clamped below at ``floor_kbps``."""
    if sigma_kbps < 0:
        raise DomainError("sigma must be >= 0")
    if sigma_kbps == 0:
        return trace
    rng = np.random.default_rng(seed)
    noisy = trace.step_values + rng.normal(0.0, sigma_kbps, size=len(trace))
    return BandwidthTrace(np.maximum(noisy, floor_kbps), f"{trace.source_id}+n{sigma_kbps:g}s{seed}", trace.dt_s)


def synthesize(kind: str, params: dict, length: int, seed: int = 0, dt_s: float = 2.0) -> BandwidthTrace:
    """Deterministic fixtures.

    ``constant``: ``level``. ``step``: ``level1``, ``level2``, ``change_at``.
    ``markov``: ``levels`` (two values), ``p_switch``, optional ``start`` state.
    """
    if length < 1:
        raise DomainError("length must be >= 1")
    try:
        if kind == "constant":
            vals = np.full(length, float(params["level"]))
        elif kind == "step":
            k = int(params["change_at"])
            if not 0 <= k <= length:
                raise DomainError("change_at outside the trace")
            vals = np.where(np.arange(length) < k, float(params["level1"]), float(params["level2"]))
        elif kind == "markov":
            levels = np.asarray(params["levels"], dtype=float)
            p = float(params["p_switch"])
            if levels.shape != (2,) or not 0 <= p <= 1:
                raise DomainError("markov needs two levels and 0 <= p_switch <= 1")
            rng = np.random.default_rng(seed)
            flips = rng.random(length) < p
            flips[0] = False
            state = (int(params.get("start", 0)) + np.cumsum(flips)) % 2
            vals = levels[state]
        else:
            raise DomainError(f"unknown trace kind {kind!r}")
    except KeyError as exc:
        raise DomainError(f"{kind} trace missing parameter {exc}") from None
    return BandwidthTrace(vals, f"{kind}-{seed}", dt_s)
