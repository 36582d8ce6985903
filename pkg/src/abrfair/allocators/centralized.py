"""Clairvoyant joint bitrate and bandwidth planning.

The planner sees the whole capacity trace and picks every player's bitrate
and bandwidth trajectory, ignoring the players' own policies. It is an upper
reference for the policy-constrained allocators.

Feasibility is enforced inside the rollout. Each step's bandwidth is
``lb + (W - sum lb) * theta`` with ``theta`` on the probability simplex,
where ``lb`` is what a player needs to fetch a minimum-bitrate chunk
without draining its buffer below the lower bound. A planned bitrate that
the step's download cannot sustain is cut back to the highest sustainable
one (never below the ladder minimum). Plans are therefore stall-free
whenever the capacity allows.

Optimization is block-coordinate ascent alternating projected-gradient
steps on the bitrate block (box projection) and the split block
(per-step simplex projection), with exact reverse-mode gradients and
several starts evaluated as one batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from abrfair.allocators._common import (
    MAX_ITERS,
    OPTIMAL,
    PlayerArrays,
    canonical_order,
    floored_marginal,
    floored_utility,
    group_averager,
    player_keys,
    project_simplex,
)
from abrfair.allocators.baseline import baseline_allocate
from abrfair.allocators.nmpc import select_winner
from abrfair.core import PlayerSpec, PlayerState


@dataclass(frozen=True)
class CentralizedSettings:
    starts: int = 8
    max_iters: int = 500
    inner_steps: int = 3
    rel_tol: float = 1e-6
    smoothing_delta: float = 1e-3
    qoe_floor: float = 1e-6
    line_search_steps: int = 8
    seed: int = 0
    # starts trailing the incumbent by this relative gap are dropped after prune_after iterations
    prune_after: int = 50
    prune_gap: float = 0.005


@dataclass
class CentralizedPlan:
    r: np.ndarray  # (K, N) effective bitrates
    w: np.ndarray  # (K, N) bandwidths
    objective_value: float
    session_qoe: np.ndarray
    status: str


class PlanProblem:
    def __init__(
        self,
        specs: Sequence[PlayerSpec],
        capacities: Sequence[float],
        alpha: float,
        dt: float,
        states: Sequence[PlayerState] | None = None,
        delta: float = 1e-3,
        floor: float = 1e-6,
    ) -> None:
        self.pa = PlayerArrays.from_specs(specs)
        self.W = np.asarray(capacities, dtype=float)
        self.K = len(self.W)
        self.N = len(specs)
        self.alpha = alpha
        self.dt = dt
        self.delta = delta
        self.floor = floor
        if states is None:
            states = [PlayerState(2.0, s.ladder.min_kbps, 0.0) for s in specs]
        self.b0 = np.array([s.buffer_s for s in states], dtype=float)
        self.num0 = np.array([s.qoe_numerator for s in states], dtype=float)
        self.den0 = np.array([s.qoe_denominator for s in states], dtype=float)
        self.has_anchor = np.array([s.steps > 0 for s in states])
        self.anchor = np.array([s.last_bitrate_kbps for s in states], dtype=float)

    def bandwidth(self, theta_k: np.ndarray, b: np.ndarray, Wk: float):
        """Step allocation from simplex weights: stall-free floor plus a share of the rest."""
        lb = self.pa.rmin * np.maximum(0.0, self.dt + self.pa.bmin - b) / self.dt
        L = lb.sum(axis=1, keepdims=True)
        spare = Wk - L
        short = spare < 0
        w = np.where(short, lb * (Wk / np.maximum(L, 1e-300)), lb + spare * theta_k)
        return w, lb, L, short

    def forward(self, r: np.ndarray, x: np.ndarray, smooth: bool = True, tape: bool = False, direct: bool = False):
        """Roll plans ``(M, K, N)`` forward.

        ``x`` holds per-step simplex weights, or bandwidths when ``direct``.
        Returns objective, U, effective bitrates, bandwidths (and the tape).
        """
        pa, dt = self.pa, self.dt
        M = r.shape[0]
        b = np.broadcast_to(self.b0, (M, self.N)).copy()
        q_prev = np.broadcast_to(np.where(self.has_anchor, self.anchor, 1.0) ** pa.p, (M, self.N))
        A = np.broadcast_to(self.num0, (M, self.N)).copy()
        D = np.broadcast_to(self.den0, (M, self.N)).copy()
        r_eff = np.empty_like(r)
        w_all = np.empty_like(r)
        rec = []
        for k in range(self.K):
            rk = r[:, k]
            if direct:
                wk = x[:, k]
                lb = L = short = None
            else:
                wk, lb, L, short = self.bandwidth(x[:, k], b, self.W[k])
            den = dt + pa.bmin - b
            needs_cap = den > 0
            with np.errstate(divide="ignore", invalid="ignore"):
                cap = np.where(needs_cap, wk * dt / np.where(needs_cap, den, 1.0), np.inf)
            by_cap = cap < rk
            r1 = np.where(by_cap, cap, rk)
            by_min = r1 < pa.rmin
            re = np.where(by_min, pa.rmin, r1)
            q = re ** pa.p
            if k == 0:
                q_prev = np.where(self.has_anchor, q_prev, q)
            d = q - q_prev
            s = np.sqrt(d * d + self.delta**2) if smooth else np.abs(d)
            up = q - pa.mu * s
            omega = wk / re
            A += omega * up
            D += omega
            b_raw = b - dt + omega * dt
            inside = (b_raw >= pa.bmin) & (b_raw <= pa.bmax)
            if tape:
                rec.append((b, wk, lb, L, short, den, by_cap, by_min, re, d, s, up, omega, inside))
            b = np.clip(b_raw, pa.bmin, pa.bmax)
            q_prev = q
            r_eff[:, k] = re
            w_all[:, k] = wk
        with np.errstate(divide="ignore", invalid="ignore"):
            U = np.where(D > 0, A / np.where(D > 0, D, 1.0), 0.0)
        J = floored_utility(U, self.alpha, self.floor).sum(axis=1)
        if tape:
            return J, U, r_eff, w_all, (rec, A, D)
        return J, U, r_eff, w_all

    def gradient(self, r: np.ndarray, theta: np.ndarray):
        """Objective and its exact gradients with respect to ``r`` and ``theta``."""
        pa, dt = self.pa, self.dt
        J, U, r_eff, w_all, (rec, A, D) = self.forward(r, theta, tape=True)
        Dsafe = np.where(D > 0, D, 1.0)
        phi = floored_marginal(U, self.alpha, self.floor)
        A_bar = phi / Dsafe
        D_bar = -phi * A / Dsafe**2
        gr = np.zeros_like(r)
        gth = np.zeros_like(theta)
        b_next_bar = np.zeros_like(A)
        q_carry = np.zeros_like(A)
        for k in range(self.K - 1, -1, -1):
            b, wk, lb, L, short, den, by_cap, by_min, re, d, s, up, omega, inside = rec[k]
            b_raw_bar = b_next_bar * inside
            om_bar = A_bar * up + D_bar + b_raw_bar * dt
            b_bar = b_raw_bar.copy()
            up_bar = A_bar * omega
            ds = d / s if self.delta > 0 else np.sign(d)
            if k == 0:
                ds = np.where(self.has_anchor, ds, 0.0)
            q_bar = up_bar * (1 - pa.mu * ds) + q_carry
            q_carry = up_bar * pa.mu * ds
            re_bar = q_bar * pa.p * re ** (pa.p - 1) - om_bar * wk / re**2
            w_bar = om_bar / re
            r1_bar = np.where(by_min, 0.0, re_bar)
            gr[:, k] = np.where(by_cap, 0.0, r1_bar)
            cap_bar = np.where(by_cap, r1_bar, 0.0)
            with np.errstate(divide="ignore", invalid="ignore"):
                w_bar = w_bar + np.where(by_cap, cap_bar * dt / den, 0.0)
                b_bar += np.where(by_cap, cap_bar * wk * dt / den**2, 0.0)
            # w = lb + (W - sum lb) * theta, or lb * W / sum lb when short
            Wk = self.W[k]
            th = theta[:, k]
            spare = Wk - L
            gth[:, k] = np.where(short, 0.0, w_bar * spare)
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                Ls = np.maximum(L, 1e-300)
                lb_bar_short = w_bar * Wk / Ls - np.sum(w_bar * lb, axis=1, keepdims=True) * Wk / Ls**2
            lb_bar_ok = w_bar - np.sum(w_bar * th, axis=1, keepdims=True)
            lb_bar = np.where(short, lb_bar_short, lb_bar_ok)
            b_bar += lb_bar * np.where(den > 0, -pa.rmin / dt, 0.0)
            b_next_bar = b_bar
        return J, gr, gth


def _armijo_step(obj, x, g, J, eta, project, factors, c=1e-4):
    """Batched backtracking on normalized ascent directions; returns new x, J, eta, moved."""
    S = x.shape[0]
    gmax = np.max(np.abs(g), axis=(1, 2))
    flat = gmax < 1e-300
    gn = g / np.where(flat, 1.0, gmax)[:, None, None]
    steps = eta[:, None] * factors[None, :]
    cand = project(x[:, None] + steps[:, :, None, None] * gn[:, None])
    Lc = len(factors)
    Jc = obj(cand.reshape(S * Lc, *x.shape[1:])).reshape(S, Lc)
    gain = np.sum(g[:, None] * (cand - x[:, None]), axis=(2, 3))
    ok = (Jc >= J[:, None] + c * gain) & ~flat[:, None]
    any_ok = ok.any(axis=1)
    j = np.argmax(ok, axis=1)
    rows = np.arange(S)
    x_new = np.where(any_ok[:, None, None], cand[rows, j], x)
    J_new = np.where(any_ok, Jc[rows, j], J)
    eta_new = np.where(any_ok, np.minimum(steps[rows, j] * 2, eta * 4), eta * factors[-1] / 2)
    return x_new, J_new, eta_new, any_ok


def _starts(prob: PlanProblem, specs, settings: CentralizedSettings):
    K, N = prob.K, prob.N
    rng = np.random.default_rng(settings.seed)
    lo, hi = prob.pa.rmin, prob.pa.rmax
    w_eq = np.repeat(prob.W[:, None] / N, N, axis=1)
    base = np.stack([baseline_allocate(specs, Wk, prob.alpha).per_player_w for Wk in prob.W])
    rs = [np.clip(w_eq, lo, hi), np.clip(base, lo, hi)]
    ws = [w_eq, base]
    while len(rs) < settings.starts:
        wk = rng.dirichlet(np.ones(N), size=K) * prob.W[:, None]
        ws.append(wk)
        rs.append(np.clip(wk * rng.uniform(0.6, 1.0, size=(K, N)), lo, hi))
    return np.stack(rs[: settings.starts]), np.stack(ws[: settings.starts])


def centralized_plan(
    specs: Sequence[PlayerSpec],
    capacities: Sequence[float],
    alpha: float,
    dt: float,
    states: Sequence[PlayerState] | None = None,
    settings: CentralizedSettings = CentralizedSettings(),
) -> CentralizedPlan:
    """Jointly plan bitrates and bandwidth over the whole trace.

    As in the receding-horizon allocator, players are solved in a canonical
    order and exchangeable players are kept on identical trajectories.
    """
    keys = player_keys(specs, states)
    perm = canonical_order(keys)
    specs_c = [specs[i] for i in perm]
    states_c = None if states is None else [states[i] for i in perm]
    sym = group_averager([keys[i] for i in perm])
    same = (lambda x: x) if sym is None else sym

    prob = PlanProblem(specs_c, capacities, alpha, dt, states_c, settings.smoothing_delta, settings.qoe_floor)
    lo, hi = prob.pa.rmin, prob.pa.rmax
    r, w0 = _starts(prob, specs_c, settings)
    r = same(r)
    w = same(w0 / prob.W[None, :, None])  # simplex weights
    S = r.shape[0]
    factors = 0.5 ** np.arange(settings.line_search_steps)
    eta_r = np.full(S, 500.0)
    eta_w = np.full(S, 0.25)

    def proj_r(x):
        return same(np.clip(x, lo, hi))

    def proj_w(x):
        return same(project_simplex(x, 1.0))

    J = prob.forward(r, w)[0]
    active = np.ones(S, dtype=bool)
    converged = False
    for it in range(settings.max_iters):
        if it >= settings.prune_after:
            best = J.max()
            active &= J >= best - settings.prune_gap * abs(best)
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            converged = True
            break
        ri, wi, Ji = r[idx], w[idx], J[idx]
        J_start = Ji.copy()
        for _ in range(settings.inner_steps):
            _, gr, _ = prob.gradient(ri, wi)
            ri, Ji, eta_r[idx], _ = _armijo_step(
                lambda x: prob.forward(x, np.repeat(wi, len(factors), axis=0))[0], ri, gr, Ji, eta_r[idx], proj_r, factors
            )
        for _ in range(settings.inner_steps):
            _, _, gw = prob.gradient(ri, wi)
            wi, Ji, eta_w[idx], _ = _armijo_step(
                lambda x: prob.forward(np.repeat(ri, len(factors), axis=0), x)[0], wi, gw, Ji, eta_w[idx], proj_w, factors
            )
        r[idx], w[idx], J[idx] = ri, wi, Ji
        small = np.abs(Ji - J_start) <= settings.rel_tol * np.maximum(np.abs(Ji), 1e-12)
        stuck = (eta_r[idx] < 1e-6) & (eta_w[idx] < 1e-6)
        active[idx[small | stuck]] = False
    else:
        converged = not active.any()

    J_exact, U, r_eff, w_real = prob.forward(r, w, smooth=False)
    win = select_winner(J_exact, w_real[:, 0], float(prob.W[0]))
    out_r, out_w, out_U = np.empty_like(r_eff[win]), np.empty_like(w_real[win]), np.empty_like(U[win])
    out_r[:, perm], out_w[:, perm], out_U[perm] = r_eff[win], w_real[win], U[win]
    return CentralizedPlan(
        r=out_r,
        w=out_w,
        objective_value=float(J_exact[win]),
        session_qoe=out_U,
        status=OPTIMAL if converged else MAX_ITERS,
    )


def evaluate_plan(
    specs: Sequence[PlayerSpec],
    capacities: Sequence[float],
    r: np.ndarray,
    w: np.ndarray,
    alpha: float,
    dt: float,
    states: Sequence[PlayerState] | None = None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Exact (unsmoothed) objective, session QoE and effective bitrates of one plan."""
    prob = PlanProblem(specs, capacities, alpha, dt, states, delta=0.0)
    J, U, r_eff, _ = prob.forward(
        np.asarray(r, dtype=float)[None], np.asarray(w, dtype=float)[None], smooth=False, direct=True
    )
    return float(J[0]), U[0], r_eff[0]
