"""Exhaustive and dynamic-programming oracles used to verify the solvers.

They are slow and coarse on purpose: simple enough to trust by inspection.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from abrfair.allocators._common import alpha_utility
from abrfair.allocators.centralized import evaluate_plan
from abrfair.allocators.nmpc import CapacityForecast, NmpcProblem, NmpcSettings
from abrfair.core import PlayerSpec, PlayerState

MAX_POINTS = 10_000_000


class SearchSpaceTooLarge(ValueError):
    pass


@dataclass
class OracleResult:
    value: float
    argmax: np.ndarray  # (steps, players)
    points: int


def _step_grid(W: float, lo: np.ndarray, hi: np.ndarray, step: float) -> np.ndarray:
    """Splits of ``W`` with the first ``N-1`` shares on a ``step`` grid and the last taking the rest."""
    axes = [np.arange(l, min(h, W) + step * 1e-9, step) for l, h in zip(lo[:-1], hi[:-1])]
    head = np.array(list(itertools.product(*axes)), dtype=float).reshape(-1, len(lo) - 1)
    last = W - head.sum(axis=1)
    keep = (last >= lo[-1] - 1e-9) & (last <= hi[-1] + 1e-9)
    return np.column_stack([head[keep], last[keep]])


def brute_force_oracle(
    objective: Callable[[np.ndarray], np.ndarray],
    capacities: Sequence[float],
    lower: Sequence[float],
    upper: Sequence[float],
    step: float,
    max_points: int = MAX_POINTS,
    batch: int = 200_000,
) -> OracleResult:
    """Enumerate every per-step split on the grid and keep the best.

    ``objective`` maps plans ``(M, steps, N)`` to values ``(M,)``. Ties go to
    the plan closest to the equal split.
    """
    lo, hi = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
    grids = [_step_grid(float(W), lo, hi, step) for W in capacities]
    sizes = [len(g) for g in grids]
    total = int(np.prod(sizes, dtype=float))
    if total > max_points:
        raise SearchSpaceTooLarge(f"{total} points exceeds the limit of {max_points}")
    if total == 0:
        raise ValueError("no feasible grid point")
    equal = np.array([[W / len(lo)] * len(lo) for W in capacities])
    best_v, best_x, best_d = -np.inf, None, np.inf
    for start in range(0, total, batch):
        idx = np.arange(start, min(start + batch, total))
        sub = np.unravel_index(idx, sizes)
        plans = np.stack([g[s] for g, s in zip(grids, sub)], axis=1)
        vals = np.asarray(objective(plans), dtype=float)
        top = np.max(vals)
        if top < best_v - 1e-12 * max(abs(best_v), 1.0):
            continue
        tied = np.nonzero(vals >= top - 1e-12 * max(abs(top), 1.0))[0]
        dist = np.linalg.norm((plans[tied] - equal).reshape(len(tied), -1), axis=1)
        j = tied[np.argmin(dist)]
        if top > best_v + 1e-12 * max(abs(best_v), 1.0) or dist.min() < best_d:
            best_v, best_x, best_d = float(vals[j]), plans[j], float(dist.min())
    return OracleResult(best_v, best_x, total)


def baseline_objective(specs: Sequence[PlayerSpec], alpha: float) -> Callable[[np.ndarray], np.ndarray]:
    """Steady-state value of a single-step split: ``sum F(w_i ** p_i)``."""
    p = np.array([s.quality.exponent_p for s in specs])

    def f(plans: np.ndarray) -> np.ndarray:
        return alpha_utility(plans[:, 0, :] ** p, alpha).sum(axis=1)

    return f


def baseline_oracle(specs: Sequence[PlayerSpec], W: float, alpha: float, step: float = 1.0) -> OracleResult:
    lo = [s.ladder.min_kbps for s in specs]
    hi = [s.ladder.max_kbps for s in specs]
    return brute_force_oracle(baseline_objective(specs, alpha), [W], lo, hi, step)


def nmpc_objective(
    states: Sequence[PlayerState],
    specs: Sequence[PlayerSpec],
    forecast: CapacityForecast,
    alpha: float,
    dt: float,
    settings: NmpcSettings = NmpcSettings(),
) -> Callable[[np.ndarray], np.ndarray]:
    """Exact (unsmoothed) horizon objective of explicit bandwidth plans.

    Plans that let a buffer underflow when the step could have prevented it
    score ``-inf``, mirroring the solver's feasible set. For ``0 < alpha < 1``
    nonpositive QoE uses the solver's linear extension below the floor; for
    ``alpha >= 1`` it scores ``-inf``, the region where the solver hands over
    to the baseline.
    """
    floor = settings.qoe_floor if 0 < alpha < 1 else 0.0
    prob = NmpcProblem(
        states, specs, forecast, alpha, dt, 0.0, floor, settings.terminal_steps, settings.include_history
    )

    def f(plans: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            J, _, U, _ = prob.rollout(plans, direct=True, smooth=False)
        if alpha >= 1:
            J = np.where(np.any(U <= 0, axis=1), -np.inf, J)
        return np.where(np.isnan(J), -np.inf, J)

    return f


def nmpc_oracle(
    states: Sequence[PlayerState],
    specs: Sequence[PlayerSpec],
    forecast: CapacityForecast,
    alpha: float,
    dt: float,
    step: float = 1.0,
    settings: NmpcSettings = NmpcSettings(),
) -> OracleResult:
    n = len(specs)
    return brute_force_oracle(
        nmpc_objective(states, specs, forecast, alpha, dt, settings),
        forecast.values,
        [0.0] * n,
        [max(forecast.values)] * n,
        step,
    )


@dataclass
class DpOracleResult:
    value: float
    session_qoe: np.ndarray
    r: np.ndarray
    w: np.ndarray
    split: np.ndarray  # constant per-step bandwidth of each player


def _player_dp(
    spec: PlayerSpec,
    w: np.ndarray,
    b0: float,
    dt: float,
    rates: np.ndarray,
    bstep: float,
    iters: int = 50,
) -> tuple[float, np.ndarray] | None:
    """Best bitrate sequence for one player with a fixed bandwidth sequence.

    Maximizes the playtime-weighted average QoE by Dinkelbach iteration over
    an additive DP. The buffer is tracked on a grid rounded down, so a plan
    that is stall-free on the grid is stall-free exactly.
    """
    K = len(w)
    p, mu = spec.quality.exponent_p, spec.mu
    bmin, bmax = spec.buffer_min_s, spec.buffer_max_s
    nb = int(np.floor((bmax - bmin) / bstep)) + 1
    levels = bmin + bstep * np.arange(nb)
    q = rates**p
    R = len(rates)
    # transitions: buffer level x action -> next level, or -1 when it would stall
    nxt = np.empty((K, nb, R), dtype=int)
    for k in range(K):
        raw = levels[:, None] - dt + w[k] * dt / rates[None, :]
        ok = raw >= bmin - 1e-9
        j = np.floor((np.minimum(raw, bmax) - bmin) / bstep + 1e-9).astype(int)
        nxt[k] = np.where(ok, np.clip(j, 0, nb - 1), -1)
    b_idx0 = int(np.floor((b0 - bmin) / bstep + 1e-9))
    omega = w[:, None] / rates[None, :]  # (K, R)
    pen = mu * np.abs(q[:, None] - q[None, :])  # (prev, cur)
    lam = 0.0
    best = None
    for _ in range(iters):
        # V[b, prev]: best value-to-go; step 0 has no previous bitrate
        V = np.zeros((nb, R))
        pol = []
        for k in range(K - 1, 0, -1):
            gain = omega[k][None, :] * (q[None, :] - pen - lam)  # (prev, cur)
            nk = nxt[k]
            fut = np.where(nk >= 0, V[np.maximum(nk, 0), np.arange(R)[None, :]], -np.inf)  # (b, cur)
            tot = gain[None, :, :] + fut[:, None, :]  # (b, prev, cur)
            a = np.argmax(tot, axis=2)
            V = np.take_along_axis(tot, a[..., None], axis=2)[..., 0]
            pol.append(a)
        pol.reverse()
        n0 = nxt[0][b_idx0]
        first = np.where(n0 >= 0, omega[0] * (q - lam) + V[np.maximum(n0, 0), np.arange(R)], -np.inf)
        if not np.any(np.isfinite(first)):
            return None
        a0 = int(np.argmax(first))
        seq = [a0]
        bi, prev = int(n0[a0]), a0
        for k in range(1, K):
            a = int(pol[k - 1][bi, prev])
            seq.append(a)
            bi, prev = int(nxt[k][bi, a]), a
        idx = np.array(seq)
        r = rates[idx]
        up = q[idx] - mu * np.abs(q[idx] - q[np.r_[idx[0], idx[:-1]]])
        om = w / r
        U = float(np.sum(om * up) / np.sum(om))
        best = (U, r)
        if abs(U - lam) <= 1e-12 * max(abs(U), 1.0):
            break
        lam = U
    return best


def centralized_dp_oracle(
    specs: Sequence[PlayerSpec],
    capacities: Sequence[float],
    alpha: float,
    dt: float,
    states: Sequence[PlayerState] | None = None,
    rate_step: float = 100.0,
    bandwidth_step: float = 100.0,
    buffer_step: float = 1.0,
) -> DpOracleResult:
    """Feasible-plan value for a two-player joint plan on a coarse grid.

    Every player keeps a constant bandwidth share (100 kbps grid); for each
    share pair the bitrate sequences are optimized per player by DP, which
    suffices because the fairness aggregate is increasing in each QoE. The
    returned value is the exact evaluation of the best plan found, so it is
    a lower bound on the true optimum.
    """
    if len(specs) != 2:
        raise ValueError("the DP oracle handles two players")
    W = np.asarray(capacities, dtype=float)
    if states is None:
        b0 = [2.0, 2.0]
    else:
        if any(s.steps > 0 for s in states):
            raise ValueError("the DP oracle plans from the start of a session")
        b0 = [s.buffer_s for s in states]
    Wmin = float(W.min())
    best = None
    for s1 in np.arange(bandwidth_step, Wmin, bandwidth_step):
        frac = s1 / Wmin
        ws = [W * frac, W * (1 - frac)]
        plans = []
        for i, spec in enumerate(specs):
            rates = np.arange(spec.ladder.min_kbps, spec.ladder.max_kbps + 1e-9, rate_step)
            res = _player_dp(spec, ws[i], b0[i], dt, rates, buffer_step)
            if res is None:
                break
            plans.append(res[1])
        if len(plans) < 2:
            continue
        r = np.column_stack(plans)
        w = np.column_stack(ws)
        J, U, r_eff = evaluate_plan(specs, W, r, w, alpha, dt, states)
        if np.all(np.isfinite(U)) and (best is None or J > best.value):
            best = DpOracleResult(J, U, r_eff, w, np.array([ws[0][0], ws[1][0]]))
    if best is None:
        raise ValueError("no stall-free plan on the grid")
    return best
