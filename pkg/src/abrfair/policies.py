"""Player-side bitrate adaptation policies.

Rate-based policies map the previous step's bandwidth to the next bitrate,
buffer-based policies map the current buffer level to it. LRB and LBB are
the affine special cases; RB and BB take a knot table evaluated by linear
interpolation with constant extrapolation at the ends.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Union

import numpy as np

from abrfair.core import BitrateLadder, DomainError


@dataclass(frozen=True)
class LRB:
    """Linear rate-based policy ``r = alpha * w_prev``."""

    alpha: float = 0.8

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise DomainError("LRB alpha must be > 0")

    def raw(self, w_prev, b):
        return self.alpha * w_prev


@dataclass(frozen=True)
class LBB:
    """Linear buffer-based policy ``r = alpha * b + beta`` (alpha in kbps per second)."""

    alpha: float = 100.0
    beta: float = 0.0

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise DomainError("LBB alpha must be > 0")
        if self.beta < 0:
            raise DomainError("LBB beta must be >= 0")

    def raw(self, w_prev, b):
        return self.alpha * b + self.beta


def _check_table(xs: tuple[float, ...], ys: tuple[float, ...], strict: bool) -> tuple[tuple[float, ...], tuple[float, ...]]:
    xs = tuple(float(x) for x in xs)
    ys = tuple(float(y) for y in ys)
    if len(xs) < 2 or len(xs) != len(ys):
        raise DomainError("a policy table needs at least two (x, y) knots of equal length")
    if any(b <= a for a, b in zip(xs, xs[1:])):
        raise DomainError("policy table x knots must be strictly increasing")
    if strict and any(b <= a for a, b in zip(ys, ys[1:])):
        raise DomainError("policy table must be strictly increasing")
    return xs, ys


@dataclass(frozen=True)
class RB:
    """Table rate-based policy: knots map observed bandwidth (kbps) to bitrate.

    Pass ``strict=False`` to build a deliberately non-monotone table, e.g.
    to exercise :func:`policy_is_monotone`.
    """

    xs: tuple[float, ...]
    ys: tuple[float, ...]
    strict: bool = True

    def __post_init__(self) -> None:
        xs, ys = _check_table(self.xs, self.ys, self.strict)
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)

    def raw(self, w_prev, b):
        return np.interp(w_prev, self.xs, self.ys)


@dataclass(frozen=True)
class BB:
    """Table buffer-based policy: knots map buffer level (s) to bitrate."""

    xs: tuple[float, ...]
    ys: tuple[float, ...]
    strict: bool = True

    def __post_init__(self) -> None:
        xs, ys = _check_table(self.xs, self.ys, self.strict)
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)

    def raw(self, w_prev, b):
        return np.interp(b, self.xs, self.ys)


AdaptationPolicy = Union[LRB, LBB, RB, BB]


def is_buffer_based(policy: AdaptationPolicy) -> bool:
    return isinstance(policy, (LBB, BB))


def decide_bitrate(
    policy: AdaptationPolicy,
    w_prev: float,
    b: float,
    ladder: BitrateLadder,
    snap: bool = False,
) -> float:
    """Next bitrate chosen by ``policy``, clamped into the ladder.

    With ``snap=True`` the result is rounded down to the ladder's discrete
    levels (no-op for a purely continuous ladder).
    """
    r = ladder.clamp(float(policy.raw(w_prev, b)))
    return ladder.snap(r) if snap else r


def policy_input(policy: AdaptationPolicy, w_prev: float, b: float) -> float:
    """The observation the policy actually reads."""
    return b if is_buffer_based(policy) else w_prev


def invert_policy(policy: AdaptationPolicy, r: float) -> float:
    """Input level at which the (unclamped) policy outputs ``r``.

    Used to derive a consistent buffer level for a buffer-based player that
    should start at a given bitrate. Table policies must be monotone.
    """
    if isinstance(policy, LRB):
        return r / policy.alpha
    if isinstance(policy, LBB):
        return (r - policy.beta) / policy.alpha
    return float(np.interp(r, policy.ys, policy.xs))


class MonotonicityReport(NamedTuple):
    monotone: bool
    violation: tuple[float, float] | None  # inputs x1 < x2 with f(x1) > f(x2)


def policy_is_monotone(policy: AdaptationPolicy, grid_size: int = 512, upper: float | None = None) -> MonotonicityReport:
    """Sample the unclamped policy on a grid and look for a decreasing pair.

    Table policies are sampled at every knot in addition to the grid, so a
    single inversion between adjacent knots is always caught.
    """
    if isinstance(policy, (RB, BB)):
        lo, hi = policy.xs[0], policy.xs[-1]
        pad = 0.1 * (hi - lo)
        grid = np.union1d(np.linspace(lo - pad, hi + pad, grid_size), policy.xs)
    else:
        hi = upper if upper is not None else (60.0 if isinstance(policy, LBB) else 10_000.0)
        grid = np.linspace(0.0, hi, grid_size)
    if is_buffer_based(policy):
        vals = np.asarray(policy.raw(0.0, grid), dtype=float)
    else:
        vals = np.asarray(policy.raw(grid, 0.0), dtype=float)
    drops = np.nonzero(np.diff(vals) < 0)[0]
    if drops.size:
        i = int(drops[0])
        return MonotonicityReport(False, (float(grid[i]), float(grid[i + 1])))
    return MonotonicityReport(True, None)
