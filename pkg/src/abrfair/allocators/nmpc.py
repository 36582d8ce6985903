"""Receding-horizon (NMPC) router-assisted allocation.

The router knows each player's policy, quality function and state. It
plans bandwidth for the next ``H`` steps by rolling every player's closed
loop forward (policy decision, download, buffer update) and maximizing the
alpha-fair aggregate of each player's session QoE over the horizon window.
The quality change of the first planned chunk is measured from the last
committed bitrate. Optionally the QoE already accumulated can be included,
and a terminal term can credit the bitrate the player ends the horizon at.
Only the first step of the plan is applied.

Each step's allocation is parametrized as ``w = lb + (W - sum lb) * theta``
with ``theta`` on the probability simplex, where ``lb`` is the smallest
bandwidth that keeps the player's buffer from underflowing at its planned
bitrate. Every candidate plan therefore respects the capacity and, when
possible, the no-rebuffering constraint. ``theta`` is optimized by projected
gradient ascent with finite-difference gradients, a batched backtracking
line search and a fixed set of multi-starts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from abrfair.allocators._common import (
    MAX_ITERS,
    OPTIMAL,
    AllocationDecision,
    PlayerArrays,
    canonical_order,
    floored_utility,
    group_averager,
    player_keys,
    project_simplex,
)
from abrfair.allocators.baseline import baseline_allocate
from abrfair.core import PlayerSpec, PlayerState


@dataclass(frozen=True)
class CapacityForecast:
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise ValueError("forecast needs at least one step")
        if any(v <= 0 for v in vals):
            raise ValueError("forecast capacities must be > 0")
        object.__setattr__(self, "values", vals)

    @property
    def horizon_len(self) -> int:
        return len(self.values)

    @classmethod
    def perfect(cls, trace_values: Sequence[float], k: int, horizon: int) -> CapacityForecast:
        """Next ``horizon`` true capacities, padded with the last trace value."""
        vals = list(trace_values[k : k + horizon])
        vals += [trace_values[-1]] * (horizon - len(vals))
        return cls(tuple(vals))

    @classmethod
    def persistence(cls, last_value: float, horizon: int) -> CapacityForecast:
        return cls((last_value,) * horizon)


@dataclass(frozen=True)
class NmpcSettings:
    horizon: int = 5
    starts: int = 8
    max_iters: int = 500
    rel_tol: float = 1e-6
    smoothing_delta: float = 1e-3
    qoe_floor: float = 1e-6
    line_search_steps: int = 8
    fd_step: float = 1e-6
    seed: int = 0
    terminal_steps: float = 0.0
    include_history: bool = False
    # starts trailing the incumbent by this relative gap are dropped after prune_after iterations
    prune_after: int = 20
    prune_gap: float = 0.005


class NmpcProblem:
    """Horizon rollout of all players for candidate allocations."""

    def __init__(
        self,
        states: Sequence[PlayerState],
        specs: Sequence[PlayerSpec],
        forecast: CapacityForecast,
        alpha: float,
        dt: float,
        delta: float = 1e-3,
        floor: float = 1e-6,
        terminal_steps: float = 0.0,
        include_history: bool = False,
    ) -> None:
        self.terminal_steps = terminal_steps
        self.pa = PlayerArrays.from_specs(specs)
        self.W = np.asarray(forecast.values)
        self.H = forecast.horizon_len
        self.N = len(specs)
        self.alpha = alpha
        self.dt = dt
        self.delta = delta
        self.floor = floor
        self.b0 = np.array([s.buffer_s for s in states], dtype=float)
        self.w_prev = np.array([s.last_bandwidth_kbps for s in states], dtype=float)
        keep = 1.0 if include_history else 0.0
        self.num0 = keep * np.array([s.qoe_numerator for s in states], dtype=float)
        self.den0 = keep * np.array([s.qoe_denominator for s in states], dtype=float)
        self.r0 = self.pa.decide(self.w_prev, self.b0)
        last = np.array([s.last_bitrate_kbps for s in states], dtype=float)
        fresh = np.array([s.steps == 0 for s in states])
        # the first chunk of a session has no switching penalty
        self.anchor = np.where(fresh, self.r0, last)

    def rollout(self, x: np.ndarray, *, direct: bool = False, smooth: bool = True):
        """Evaluate plans of shape ``(M, H, N)``.

        ``x`` holds simplex weights ``theta`` unless ``direct`` is set, in
        which case it holds bandwidths and plans that underflow a buffer
        while the step could have avoided it are scored ``-inf``.
        Returns ``(objective, w_plan, U, r_plan)``.
        """
        pa, dt = self.pa, self.dt
        M = x.shape[0]
        # first step: every plan starts from the same state
        b, r = self.b0, self.r0
        q_prev = self.anchor**pa.p
        A, D = self.num0, self.den0
        plain = 0.0
        ok = np.ones(M, dtype=bool)
        w_plan = np.empty((M, self.H, self.N))
        r_plan = np.empty((M, self.H, self.N))
        slack = dt + pa.bmin
        for t in range(self.H):
            Wt = self.W[t]
            lb = np.maximum(0.0, r * (slack - b) / dt)
            L = lb.sum(axis=-1, keepdims=True)
            if direct:
                w = x[:, t, :]
                ok &= ~np.any((w < lb - 1e-9 * Wt) & (L <= Wt), axis=1)
            else:
                spare = Wt - L
                w = np.where(spare >= 0, lb + spare * x[:, t, :], lb * (Wt / np.maximum(L, 1e-300)))
            w_plan[:, t] = w
            r_plan[:, t] = r
            q = r**pa.p
            d = q - q_prev
            s = np.sqrt(d * d + self.delta**2) if smooth else np.abs(d)
            omega = w / r
            step_u = q - pa.mu * s
            A = A + omega * step_u
            D = D + omega
            plain = plain + step_u
            b = np.minimum(np.maximum(b + (omega - 1.0) * dt, pa.bmin), pa.bmax)
            q_prev = q
            r = pa.decide(w, b)
        if self.terminal_steps > 0:
            q = r ** pa.p
            d = q - q_prev
            s = np.sqrt(d * d + self.delta**2) if smooth else np.abs(d)
            A = A + self.terminal_steps * q - pa.mu * s
            D = D + self.terminal_steps
        # a player that downloads nothing in the window gets the limit of the
        # weighted mean as its weights vanish together, so U stays continuous
        with np.errstate(divide="ignore", invalid="ignore"):
            U = np.where(D > 0, A / np.where(D > 0, D, 1.0), plain / self.H)
        J = self._aggregate(U)
        if direct:
            J = np.where(ok, J, -np.inf)
        return J, w_plan, U, r_plan

    def _aggregate(self, U: np.ndarray) -> np.ndarray:
        return floored_utility(U, self.alpha, self.floor).sum(axis=1)

    def objective(self, x: np.ndarray, **kw) -> np.ndarray:
        return self.rollout(x, **kw)[0]


def _fd_gradient(prob: NmpcProblem, theta: np.ndarray, h: float) -> np.ndarray:
    S, H, N = theta.shape
    P = H * N
    eye = np.eye(P).reshape(P, H, N) * h
    batch = np.concatenate([theta[:, None] + eye[None], theta[:, None] - eye[None]], axis=1)
    J = prob.objective(batch.reshape(S * 2 * P, H, N)).reshape(S, 2 * P)
    return ((J[:, :P] - J[:, P:]) / (2 * h)).reshape(S, H, N)


def projected_gradient(
    prob: NmpcProblem,
    theta: np.ndarray,
    settings: NmpcSettings,
    sym=None,
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Batched projected-gradient ascent over simplex weights, one row per start.

    ``sym``, when given, maps iterates onto the subspace where exchangeable
    players share equally; the objective is invariant under it.
    """
    S = theta.shape[0]
    if sym is not None:
        theta = sym(theta)
    J = prob.objective(theta)
    eta = np.full(S, 0.25)
    active = np.ones(S, dtype=bool)
    factors = 0.5 ** np.arange(settings.line_search_steps)
    converged = False
    for it in range(settings.max_iters):
        if it >= settings.prune_after:
            best = J.max()
            active &= J >= best - settings.prune_gap * abs(best)
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            converged = True
            break
        th = theta[idx]
        g = _fd_gradient(prob, th, settings.fd_step)
        gmax = np.max(np.abs(g), axis=(1, 2))
        stalled = gmax < 1e-300
        gn = g / np.where(stalled, 1.0, gmax)[:, None, None]
        steps = eta[idx, None] * factors[None, :]  # (s, L)
        cand = project_simplex(th[:, None] + steps[:, :, None, None] * gn[:, None], 1.0)
        if sym is not None:
            cand = sym(cand)
        Lc = len(factors)
        Jc = prob.objective(cand.reshape(-1, *th.shape[1:])).reshape(idx.size, Lc)
        gain = np.sum(g[:, None] * (cand - th[:, None]), axis=(2, 3))
        accept = Jc >= J[idx, None] + 1e-4 * gain
        first = np.where(accept.any(axis=1), np.argmax(accept, axis=1), -1)
        for row, (i, j) in enumerate(zip(idx, first)):
            if j < 0 or stalled[row]:
                eta[i] *= factors[-1] / 2
                if eta[i] < 1e-9 or stalled[row]:
                    active[i] = False
                continue
            new_J = Jc[row, j]
            change = abs(new_J - J[i])
            theta[i] = cand[row, j]
            J[i] = new_J
            eta[i] = min(1.0, steps[row, j] * 2)
            if change <= settings.rel_tol * max(abs(new_J), 1e-12):
                active[i] = False
    else:
        converged = not active.any()
    return theta, J, converged


def _start_set(S: int, H: int, N: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    starts = [np.full((H, N), 1.0 / N)]
    for _ in range(S - 1):
        starts.append(rng.dirichlet(np.ones(N), size=H))
    return np.stack(starts)


def select_winner(J: np.ndarray, first_w: np.ndarray, W0: float, rel: float = 1e-7) -> int:
    """Best objective; near-ties go to the plan closest to the equal split."""
    best = float(np.max(J))
    tied = np.nonzero(J >= best - rel * max(abs(best), 1e-12))[0]
    dist = np.linalg.norm(first_w[tied] - W0 / first_w.shape[1], axis=1)
    return int(tied[np.argmin(dist)])


def nmpc_allocate(
    states: Sequence[PlayerState],
    specs: Sequence[PlayerSpec],
    forecast: CapacityForecast,
    alpha: float,
    dt: float,
    settings: NmpcSettings = NmpcSettings(),
) -> AllocationDecision:
    """First step of the best horizon plan.

    Players are solved in a canonical order and exchangeable players (same
    spec and state) are kept on equal shares, so the result is equivariant
    under reordering. Falls back to the steady-state allocation when the
    best plan leaves some player with nonpositive QoE under ``alpha >= 1``.
    """
    N = len(specs)
    W0 = forecast.values[0]
    if N == 1:
        return AllocationDecision(np.array([W0]), 0.0, OPTIMAL)
    keys = player_keys(specs, states)
    perm = canonical_order(keys)
    specs_c = [specs[i] for i in perm]
    states_c = [states[i] for i in perm]
    sym = group_averager([keys[i] for i in perm])
    prob = NmpcProblem(
        states_c,
        specs_c,
        forecast,
        alpha,
        dt,
        settings.smoothing_delta,
        settings.qoe_floor,
        settings.terminal_steps,
        settings.include_history,
    )
    theta0 = _start_set(settings.starts, prob.H, N, settings.seed)
    theta, _, converged = projected_gradient(prob, theta0, settings, sym)
    J_exact, w_plan, U, _ = prob.rollout(theta, smooth=False)
    # the equal split competes too, so flat objectives resolve to it
    equal = np.broadcast_to(prob.W[None, :, None] / N, (1, prob.H, N)).copy()
    J_eq, w_eq, U_eq, _ = prob.rollout(equal, direct=True, smooth=False)
    J_exact = np.concatenate([J_exact, J_eq])
    w_plan = np.concatenate([w_plan, w_eq])
    U = np.concatenate([U, U_eq])
    win = select_winner(J_exact, w_plan[:, 0], W0)
    flags: list[str] = []
    U_win = U[win]
    if alpha >= 1 and np.any(U_win <= 0):
        fb = baseline_allocate(specs, W0, alpha)
        fb.flags = ("baseline_fallback",)
        return fb
    if alpha > 0 and np.any(U_win < settings.qoe_floor):
        flags.append("qoe_floor")
    lb = np.maximum(0.0, prob.r0 * (dt + prob.pa.bmin - prob.b0) / dt)
    if lb.sum() > W0:
        flags.append("rebuffer_unavoidable")
    w = np.empty(N)
    w[perm] = w_plan[win, 0] * (W0 / w_plan[win, 0].sum())
    plan = np.empty_like(w_plan[win])
    plan[:, perm] = w_plan[win]
    return AllocationDecision(
        w,
        float(J_exact[win]),
        OPTIMAL if converged else MAX_ITERS,
        tuple(flags),
        plan=plan,
    )
