"""Steady-state QoE-aware allocation, re-solved at every step.

In steady state each player's bitrate equals its bandwidth, so the problem
reduces to maximizing ``sum_i F_alpha(q_i(w_i))`` over the capacity simplex
with ``w_i`` in the player's ladder. For power-law quality the marginal
utility is ``p_i * w_i ** (p_i (1 - alpha) - 1)``, which gives a closed-form
best response to a capacity price; the price is found by bisection.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from abrfair.allocators._common import INFEASIBLE, OPTIMAL, AllocationDecision, alpha_utility
from abrfair.core import PlayerSpec


def _best_response(log_lam: float, p: np.ndarray, expo: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    out = np.empty_like(p)
    linear = expo == 0
    curved = ~linear
    log_w = (log_lam - np.log(p[curved])) / expo[curved]
    out[curved] = np.exp(np.clip(log_w, np.log(lo[curved]), np.log(hi[curved])))
    # linear utility (p = 1, alpha = 0): all-or-nothing around its constant marginal
    out[linear] = np.where(np.log(p[linear]) > log_lam, hi[linear], lo[linear])
    return out


def steady_state_split(p: np.ndarray, lo: np.ndarray, hi: np.ndarray, W: float, alpha: float) -> np.ndarray:
    """Optimal bandwidth vector for ``lo.sum() <= W <= hi.sum()``."""
    expo = p * (1.0 - alpha) - 1.0
    # marginals at the box corners bound the price
    with np.errstate(over="ignore", divide="ignore"):
        m_lo = np.log(p) + expo * np.log(hi)
        m_hi = np.log(p) + expo * np.log(lo)
    a, b = float(m_lo.min()) - 1.0, float(m_hi.max()) + 1.0  # log-price bracket
    for _ in range(200):
        mid = 0.5 * (a + b)
        if _best_response(mid, p, expo, lo, hi).sum() > W:
            a = mid
        else:
            b = mid
        if b - a < 1e-14:
            break
    w_hi = _best_response(a, p, expo, lo, hi)  # sum >= W
    w_lo = _best_response(b, p, expo, lo, hi)  # sum <= W
    s_hi, s_lo = w_hi.sum(), w_lo.sum()
    theta = 0.0 if s_hi == s_lo else (W - s_lo) / (s_hi - s_lo)
    w = w_lo + theta * (w_hi - w_lo)
    return w * (W / w.sum())


def baseline_allocate(specs: Sequence[PlayerSpec], W: float, alpha: float) -> AllocationDecision:
    """Split ``W`` by solving the steady-state fairness problem.

    Capacity below the sum of minimum bitrates is split in proportion to
    them and reported infeasible. Capacity above the sum of maximum
    bitrates puts every player at its top bitrate and spreads the surplus
    as evenly as the lower bounds allow.
    """
    if W <= 0:
        raise ValueError("capacity must be > 0")
    p = np.array([s.quality.exponent_p for s in specs])
    lo = np.array([s.ladder.min_kbps for s in specs])
    hi = np.array([s.ladder.max_kbps for s in specs])
    n = len(specs)
    if W < lo.sum():
        w = W * lo / lo.sum()
        r = w
        status = INFEASIBLE
    elif W >= hi.sum():
        r = hi.copy()
        w = _fill_above(hi, W)
        status = OPTIMAL
    else:
        w = steady_state_split(p, lo, hi, W, alpha)
        r = w
        status = OPTIMAL
    if n == 1:
        w = np.array([W])
    U = r ** p
    return AllocationDecision(w, float(np.sum(alpha_utility(U, alpha))), status)


def _fill_above(floor: np.ndarray, W: float) -> np.ndarray:
    """``w_i = max(floor_i, t)`` with ``sum w = W``: the most even split above the floors."""
    f = np.sort(floor)
    n = len(f)
    for k in range(n, 0, -1):
        # the k smallest floors sit below the level t
        t = (W - f[k:].sum()) / k
        if t >= f[k - 1]:
            return np.maximum(floor, t)
    return floor * (W / floor.sum())
