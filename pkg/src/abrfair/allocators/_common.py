from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from abrfair.core import PlayerSpec
from abrfair.policies import BB, LBB, LRB, RB

OPTIMAL = "optimal"
MAX_ITERS = "max_iters"
INFEASIBLE = "infeasible"


@dataclass
class AllocationDecision:
    per_player_w: np.ndarray
    objective_value: float
    solver_status: str = OPTIMAL
    flags: tuple[str, ...] = ()
    plan: np.ndarray | None = None  # full horizon plan (steps x players) when one exists


def project_simplex(v: np.ndarray, total) -> np.ndarray:
    """Euclidean projection of the last axis of ``v`` onto ``{x >= 0, sum x = total}``."""
    v = np.asarray(v, dtype=float)
    total = np.broadcast_to(np.asarray(total, dtype=float), v.shape[:-1])[..., None]
    n = v.shape[-1]
    u = -np.sort(-v, axis=-1)
    css = np.cumsum(u, axis=-1) - total
    ks = np.arange(1, n + 1)
    cond = u - css / ks > 0
    rho = n - 1 - np.argmax(cond[..., ::-1], axis=-1)
    theta = np.take_along_axis(css, rho[..., None], axis=-1) / (rho[..., None] + 1)
    return np.maximum(v - theta, 0.0)


def player_keys(specs: Sequence[PlayerSpec], states: Sequence | None = None) -> list[str]:
    """Canonical description of each player; equal keys mean exchangeable players."""
    if states is None:
        return [repr(s) for s in specs]
    return [repr(s) + "|" + repr(st) for s, st in zip(specs, states)]


def canonical_order(keys: Sequence[str]) -> np.ndarray:
    """Permutation sorting players by key (stable), so solvers see a fixed order."""
    return np.array(sorted(range(len(keys)), key=lambda i: keys[i]), dtype=int)


def group_averager(keys: Sequence[str]):
    """Map averaging the last axis within groups of equal keys, or None if all keys differ."""
    labels = {k: j for j, k in enumerate(dict.fromkeys(keys))}
    lab = np.array([labels[k] for k in keys])
    if len(labels) == len(keys):
        return None
    G = (lab[:, None] == lab[None, :]).astype(float)
    G /= G.sum(axis=1, keepdims=True)

    def avg(x: np.ndarray) -> np.ndarray:
        return x @ G.T

    return avg


def alpha_utility(U: np.ndarray, alpha: float) -> np.ndarray:
    if alpha == 0:
        return U
    if alpha == 1:
        return np.log(U)
    return U ** (1.0 - alpha) / (1.0 - alpha)


def alpha_marginal(U: np.ndarray, alpha: float) -> np.ndarray:
    if alpha == 0:
        return np.ones_like(U)
    return U ** (-alpha)


def floored_utility(U: np.ndarray, alpha: float, floor: float) -> np.ndarray:
    """``F_alpha`` continued linearly below ``floor`` so it stays finite and C1."""
    if alpha == 0:
        return U
    if floor <= 0:
        return alpha_utility(U, alpha)
    Uc = np.maximum(U, floor)
    return alpha_utility(Uc, alpha) + np.minimum(U - floor, 0.0) * floor ** (-alpha)


def floored_marginal(U: np.ndarray, alpha: float, floor: float) -> np.ndarray:
    if alpha == 0:
        return np.ones_like(U)
    return np.maximum(U, floor) ** (-alpha)


@dataclass
class PlayerArrays:
    """Per-player parameters stacked for vectorized rollouts."""

    p: np.ndarray
    mu: np.ndarray
    bmin: np.ndarray
    bmax: np.ndarray
    rmin: np.ndarray
    rmax: np.ndarray
    cw: np.ndarray
    cb: np.ndarray
    c0: np.ndarray
    tables: list[tuple[int, bool, np.ndarray, np.ndarray]] = field(default_factory=list)

    @classmethod
    def from_specs(cls, specs: Sequence[PlayerSpec]) -> PlayerArrays:
        n = len(specs)
        cw, cb, c0 = np.zeros(n), np.zeros(n), np.zeros(n)
        tables = []
        for i, s in enumerate(specs):
            pol = s.policy
            if isinstance(pol, LRB):
                cw[i] = pol.alpha
            elif isinstance(pol, LBB):
                cb[i], c0[i] = pol.alpha, pol.beta
            elif isinstance(pol, (RB, BB)):
                tables.append((i, isinstance(pol, BB), np.asarray(pol.xs), np.asarray(pol.ys)))
            else:
                raise TypeError(f"unknown policy {pol!r}")
        return cls(
            p=np.array([s.quality.exponent_p for s in specs]),
            mu=np.array([s.mu for s in specs]),
            bmin=np.array([s.buffer_min_s for s in specs]),
            bmax=np.array([s.buffer_max_s for s in specs]),
            rmin=np.array([s.ladder.min_kbps for s in specs]),
            rmax=np.array([s.ladder.max_kbps for s in specs]),
            cw=cw,
            cb=cb,
            c0=c0,
            tables=tables,
        )

    def decide(self, w_prev: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Vectorized policy decision, clamped to each ladder; last axis = players."""
        r = self.cw * w_prev + self.cb * b + self.c0
        if self.tables:
            r = np.array(r, copy=True)
            for i, use_b, xs, ys in self.tables:
                r[..., i] = np.interp(b[..., i] if use_b else w_prev[..., i], xs, ys)
        return np.minimum(np.maximum(r, self.rmin), self.rmax)
