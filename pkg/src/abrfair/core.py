"""Domain types and closed-form player math.

Units throughout the package: bitrates and bandwidths in kbps, buffer
levels and durations in seconds. With these units ``w * dt / r`` is the
playtime (seconds) downloaded during one step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, NamedTuple, Sequence

import numpy as np

if TYPE_CHECKING:
    from abrfair.policies import AdaptationPolicy


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation."""


@dataclass(frozen=True)
class BitrateLadder:
    """Continuous bitrate range, optionally backed by discrete levels.

    ``levels`` is only consulted by :meth:`snap`; decisions stay continuous
    unless a caller asks for snapping.
    """

    min_kbps: float = 200.0
    max_kbps: float = 3000.0
    levels: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if not (0 < self.min_kbps <= self.max_kbps):
            raise DomainError(f"need 0 < min_kbps <= max_kbps, got {self.min_kbps}, {self.max_kbps}")
        if self.levels is not None:
            lv = tuple(sorted(float(x) for x in self.levels))
            if not lv or lv[0] < self.min_kbps or lv[-1] > self.max_kbps:
                raise DomainError("ladder levels must lie inside [min_kbps, max_kbps]")
            object.__setattr__(self, "levels", lv)

    def clamp(self, r: float) -> float:
        return min(max(r, self.min_kbps), self.max_kbps)

    def snap(self, r: float) -> float:
        """Highest discrete level not above ``r`` (lowest level if none)."""
        if self.levels is None:
            return self.clamp(r)
        below = [lv for lv in self.levels if lv <= r]
        return below[-1] if below else self.levels[0]


@dataclass(frozen=True)
class QualityFunction:
    """Power-law perceived quality ``q(r) = r**p``."""

    exponent_p: float = 0.6

    def __post_init__(self) -> None:
        if not (0 < self.exponent_p <= 1):
            raise DomainError(f"quality exponent must lie in (0, 1], got {self.exponent_p}")

    def __call__(self, r):
        return quality(r, self)


@dataclass(frozen=True, kw_only=True)
class PlayerSpec:
    policy: AdaptationPolicy
    quality: QualityFunction = QualityFunction()
    mu: float = 1.0
    buffer_min_s: float = 0.0
    buffer_max_s: float = 30.0
    ladder: BitrateLadder = BitrateLadder()

    def __post_init__(self) -> None:
        if self.mu < 0:
            raise DomainError(f"smoothness weight mu must be >= 0, got {self.mu}")
        if not (0 <= self.buffer_min_s < self.buffer_max_s):
            raise DomainError("need 0 <= buffer_min_s < buffer_max_s")


@dataclass(frozen=True)
class PlayerState:
    """Dynamic player state.

    ``steps`` counts accumulated steps; the first step carries no switching
    penalty because there is no previous chunk to compare against.
    """

    buffer_s: float
    last_bitrate_kbps: float
    last_bandwidth_kbps: float
    qoe_numerator: float = 0.0
    qoe_denominator: float = 0.0
    steps: int = 0

    def __post_init__(self) -> None:
        if self.qoe_denominator < 0:
            raise DomainError("qoe_denominator must be >= 0")

    @property
    def session_qoe(self) -> float | None:
        return session_qoe(self.qoe_numerator, self.qoe_denominator)


@dataclass(frozen=True)
class SimConfig:
    dt_s: float = 2.0
    horizon_steps: int = 30
    alpha: float = 1.0

    def __post_init__(self) -> None:
        if self.dt_s <= 0:
            raise DomainError("dt_s must be > 0")
        if self.horizon_steps < 1:
            raise DomainError("horizon_steps must be >= 1")
        if self.alpha < 0:
            raise DomainError("alpha must be >= 0")


def quality(r, q: QualityFunction):
    """Evaluate ``r**p``; works on scalars and numpy arrays."""
    if isinstance(r, np.ndarray):
        if np.any(r <= 0):
            raise DomainError("bitrate must be > 0")
        return r ** q.exponent_p
    if r <= 0:
        raise DomainError(f"bitrate must be > 0, got {r}")
    return r ** q.exponent_p


def step_qoe(r: float, r_prev: float, spec: PlayerSpec) -> float:
    """QoE of the chunk downloaded in one step: quality minus switching penalty."""
    qr = quality(r, spec.quality)
    return qr - spec.mu * abs(qr - quality(r_prev, spec.quality))


class BufferUpdate(NamedTuple):
    buffer_s: float
    unclamped_s: float
    overflow: bool
    underflow: bool


def buffer_step(
    b: float,
    w: float,
    r: float,
    dt: float,
    buffer_min_s: float = 0.0,
    buffer_max_s: float = math.inf,
) -> BufferUpdate:
    """Advance a buffer by one step and clamp it to its bounds.

    Overflow means downloaded video was discarded; underflow means the player
    would have stalled.
    """
    if r <= 0:
        raise DomainError(f"bitrate must be > 0, got {r}")
    if dt <= 0:
        raise DomainError("dt must be > 0")
    raw = b - dt + w * dt / r
    if raw > buffer_max_s:
        return BufferUpdate(buffer_max_s, raw, True, False)
    if raw < buffer_min_s:
        return BufferUpdate(buffer_min_s, raw, False, True)
    return BufferUpdate(raw, raw, False, False)


def accumulate_qoe(state: PlayerState, r: float, r_prev: float, w: float, spec: PlayerSpec) -> PlayerState:
    """Add one step's downloaded-playtime-weighted QoE to the session sums.

    A step with zero bandwidth has zero weight and leaves the sums untouched.
    """
    if r <= 0:
        raise DomainError(f"bitrate must be > 0, got {r}")
    weight = w / r
    if weight == 0:
        return replace(state, steps=state.steps + 1)
    return replace(
        state,
        qoe_numerator=state.qoe_numerator + weight * step_qoe(r, r_prev, spec),
        qoe_denominator=state.qoe_denominator + weight,
        steps=state.steps + 1,
    )


def session_qoe(numerator: float, denominator: float) -> float | None:
    """Average QoE of downloaded video, or None if nothing was downloaded."""
    if denominator <= 0:
        return None
    return numerator / denominator


def alpha_fairness(U: Sequence[float], alpha: float) -> float:
    """Alpha-fair aggregate of per-player utilities.

    alpha = 0 is the plain sum (social welfare), alpha = 1 the sum of logs.
    """
    if alpha < 0:
        raise DomainError("alpha must be >= 0")
    u = np.asarray(U, dtype=float)
    if alpha == 0:
        return float(u.sum())
    if alpha >= 1 and np.any(u <= 0):
        raise DomainError("alpha-fairness with alpha >= 1 needs strictly positive utilities")
    if np.any(u < 0):
        raise DomainError("alpha-fairness with fractional alpha needs nonnegative utilities")
    if alpha == 1:
        return float(np.log(u).sum())
    return float((u ** (1.0 - alpha) / (1.0 - alpha)).sum())


def social_welfare(U: Sequence[float]) -> float:
    return float(np.sum(U))


def jain_index(x: Sequence[float]) -> float:
    """Jain's index ``(sum x)^2 / (n * sum x^2)``; scale invariant."""
    v = np.asarray(x, dtype=float)
    if v.size == 0:
        raise DomainError("Jain's index of an empty vector")
    if np.any(v < 0):
        raise DomainError("Jain's index needs a nonnegative vector")
    sq = float(np.dot(v, v))
    if sq == 0:
        raise DomainError("Jain's index of an all-zero vector")
    return float(v.sum()) ** 2 / (v.size * sq)


def normalized_jain(U: Sequence[float]) -> float:
    """Jain's index of ``U / sum(U)``."""
    v = np.asarray(U, dtype=float)
    total = v.sum()
    if total <= 0:
        raise DomainError("normalized Jain's index needs a positive total")
    return jain_index(v / total)
