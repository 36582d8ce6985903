"""Numerical equilibrium and convergence checks for players coupled through TCP sharing.

Homogeneous rate-based players iterate ``r <- f(h(r))``; their equal-share
equilibrium is stable when that map contracts. Homogeneous linear
buffer-based players are governed by the cross partials of ``h`` at the
equal share: stable when they lie in ``(-1/n, 0)``, unstable below ``-1/n``.
All norms are infinity norms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from abrfair.core import BitrateLadder
from abrfair.policies import LBB, AdaptationPolicy, invert_policy, is_buffer_based
from abrfair.tcp import TcpShareModel, analytic_share_jacobian, share_jacobian, tcp_share

STABLE = "stable"
UNSTABLE = "unstable"
INCONCLUSIVE = "inconclusive"

NORM = "inf"


@dataclass
class EquilibriumReport:
    equilibrium_r: np.ndarray
    equilibrium_w: np.ndarray
    classification: str = INCONCLUSIVE
    evidence: dict[str, float] = field(default_factory=dict)


@dataclass
class ContractionReport:
    lipschitz: float
    spectral_radius_max: float
    spectral_radius_eq: float
    classification: str
    domain: tuple[float, float]
    norm: str = NORM


@dataclass
class ConvergenceResult:
    converged: bool
    limit_r: np.ndarray
    limit_w: np.ndarray
    steps_taken: int


def _eval_policy(policy: AdaptationPolicy, ladder: BitrateLadder, w, b):
    return np.clip(policy.raw(w, b), ladder.min_kbps, ladder.max_kbps)


def rb_equilibrium(
    policy: AdaptationPolicy,
    W: float,
    n: int,
    ladder: BitrateLadder = BitrateLadder(),
    model: TcpShareModel | None = None,
) -> EquilibriumReport:
    """Equal-share equilibrium of homogeneous rate-based players: ``r0 = f(W/n)``.

    When ``model`` is given the report carries the residual of one round of
    sharing followed by adaptation, and the contraction classification.
    """
    w0 = np.full(n, W / n)
    r0 = np.full(n, float(_eval_policy(policy, ladder, W / n, 0.0)))
    report = EquilibriumReport(r0, w0)
    if model is not None:
        again = _eval_policy(policy, ladder, tcp_share(model, r0, W), 0.0)
        report.evidence["fixed_point_residual"] = float(np.max(np.abs(again - r0)))
        c = contraction_estimate(model, policy, W, n, ladder)
        report.classification = c.classification
        report.evidence.update(lipschitz=c.lipschitz, spectral_radius_eq=c.spectral_radius_eq)
    return report


def absorbing_box(model: TcpShareModel, policy: AdaptationPolicy, W: float, n: int, ladder: BitrateLadder) -> tuple[float, float]:
    """Box every rate-based trajectory enters after one step and never leaves."""
    g0 = float(model.weight(0.0))
    ginf = float(model.weight(np.inf))
    h_lo = W * g0 / (g0 + (n - 1) * ginf)
    h_hi = W * ginf / (ginf + (n - 1) * g0)
    lo = float(_eval_policy(policy, ladder, h_lo, 0.0))
    hi = float(_eval_policy(policy, ladder, h_hi, 0.0))
    return lo, hi


def contraction_estimate(
    model: TcpShareModel,
    policy: AdaptationPolicy,
    W: float,
    n: int,
    ladder: BitrateLadder = BitrateLadder(),
    domain: tuple[float, float] | None = None,
    samples: int = 10_000,
    seed: int = 0,
    grid_size: int = 24,
    margin: float = 0.05,
) -> ContractionReport:
    """Estimate how strongly ``r -> f(h(r))`` contracts on a bitrate box.

    The Lipschitz estimate is the largest ratio over sampled pairs (half
    uniform pairs, half nearby pairs). The spectral radius comes from
    central-difference Jacobians on a grid over the box and at the
    equilibrium. The default box is the absorbing box of the map.
    """
    if is_buffer_based(policy):
        raise TypeError("contraction_estimate applies to rate-based policies; use lbb_stability_check")
    lo, hi = domain if domain is not None else absorbing_box(model, policy, W, n, ladder)
    rng = np.random.default_rng(seed)

    def F(r):
        return _eval_policy(policy, ladder, tcp_share(model, r, W), 0.0)

    half = samples // 2
    a = rng.uniform(lo, hi, size=(samples, n))
    b = np.empty_like(a)
    b[:half] = rng.uniform(lo, hi, size=(half, n))
    radius = max(1e-3 * (hi - lo), 1e-6)
    b[half:] = np.clip(a[half:] + rng.uniform(-radius, radius, size=(samples - half, n)), lo, hi)
    dr = np.max(np.abs(a - b), axis=1)
    keep = dr > 1e-9
    if hi > lo and np.any(keep):
        L = float(np.max(np.max(np.abs(F(a[keep]) - F(b[keep])), axis=1) / dr[keep]))
    else:
        L = 0.0

    if n <= 3:
        axis = np.linspace(lo, hi, grid_size if n <= 2 else max(grid_size // 2, 4))
        pts = np.stack(np.meshgrid(*([axis] * n), indexing="ij"), axis=-1).reshape(-1, n)
    else:
        pts = rng.uniform(lo, hi, size=(512, n))
    r0 = np.full(n, float(_eval_policy(policy, ladder, W / n, 0.0)))
    rho_max = float(np.max(_spectral_radius(F, pts)))
    rho_eq = float(_spectral_radius(F, r0[None, :])[0])

    if L < 1 - margin and rho_max < 1 - margin:
        cls = STABLE
    elif rho_eq > 1 + margin:
        cls = UNSTABLE
    else:
        cls = INCONCLUSIVE
    return ContractionReport(L, rho_max, rho_eq, cls, (lo, hi))


def _spectral_radius(F, pts: np.ndarray, step: float = 1.0) -> np.ndarray:
    m, n = pts.shape
    J = np.empty((m, n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = step
        J[:, :, j] = (F(pts + e) - F(pts - e)) / (2 * step)
    return np.max(np.abs(np.linalg.eigvals(J)), axis=1)


def lbb_stability_check(model: TcpShareModel, n: int, W: float, band: float = 1e-3) -> EquilibriumReport:
    """Classify the equal-share equilibrium of homogeneous LBB players.

    Cross partials at ``r0 = W/n`` are taken by central differences (1 kbps)
    and cross-checked against the closed form. Values within
    ``band / n`` of the thresholds ``-1/n`` or ``0`` are inconclusive.
    """
    if n < 2:
        raise ValueError("need at least two players")
    r0 = np.full(n, W / n)
    J = share_jacobian(model, r0, W, step=1.0)
    Ja = analytic_share_jacobian(model, r0, W)
    off = ~np.eye(n, dtype=bool)
    cross = J[off]
    tol = band / n
    if np.all((cross > -1.0 / n + tol) & (cross < -tol)):
        cls = STABLE
    elif np.any(cross < -1.0 / n - tol):
        cls = UNSTABLE
    else:
        cls = INCONCLUSIVE
    evidence = {
        "cross_partial_min": float(cross.min()),
        "cross_partial_max": float(cross.max()),
        "threshold": -1.0 / n,
        "analytic_mismatch": float(np.max(np.abs(J - Ja))),
        "row_sum_max": float(np.max(np.abs(J.sum(axis=1)))),
    }
    return EquilibriumReport(r0.copy(), r0.copy(), cls, evidence)


def _iterate(
    model: TcpShareModel,
    policies: Sequence[AdaptationPolicy],
    ladders: Sequence[BitrateLadder],
    W: float,
    r: np.ndarray,
    b: np.ndarray,
    steps: int,
    tol: float,
    dt: float,
    buffer_bounds: tuple[float, float],
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Batched closed loop; rows are independent initial conditions."""
    r = r.copy()
    b = b.copy()
    m, n = r.shape
    taken = np.full(m, steps)
    done = np.zeros(m, dtype=bool)
    bb = [is_buffer_based(p) for p in policies]
    w = tcp_share(model, r, W)
    for k in range(steps):
        w = tcp_share(model, r, W)
        b = np.clip(b - dt + w * dt / r, *buffer_bounds)
        r_new = np.empty_like(r)
        for i, (pol, lad) in enumerate(zip(policies, ladders)):
            r_new[:, i] = _eval_policy(pol, lad, w[:, i], b[:, i]) if bb[i] else _eval_policy(pol, lad, w[:, i], 0.0)
        moved = np.max(np.abs(r_new - r), axis=1)
        newly = (~done) & (moved < tol)
        taken[newly] = k + 1
        done |= newly
        r = np.where(done[:, None], r, r_new)
        if done.all():
            break
    return r, tcp_share(model, r, W), done, taken


def simulate_convergence(
    model: TcpShareModel,
    policies: Sequence[AdaptationPolicy],
    W: float,
    initial_r: Sequence[float],
    steps: int = 5000,
    tol: float | None = None,
    dt: float = 2.0,
    ladder: BitrateLadder = BitrateLadder(),
    buffer_bounds: tuple[float, float] = (0.0, 30.0),
    initial_b: Sequence[float] | None = None,
) -> ConvergenceResult:
    """Iterate sharing and adaptation until bitrates stop moving.

    Buffer-based players carry their buffer through the loop; their
    initial buffer defaults to the level at which their policy yields
    ``initial_r``.
    """
    tol = 1e-6 * W if tol is None else tol
    r0 = np.asarray(initial_r, dtype=float)[None, :]
    b0 = _initial_buffers(policies, r0, initial_b, buffer_bounds)
    r, w, done, taken = _iterate(model, policies, [ladder] * len(policies), W, r0, b0, steps, tol, dt, buffer_bounds)
    return ConvergenceResult(bool(done[0]), r[0], w[0], int(taken[0]))


def _initial_buffers(policies, r0: np.ndarray, initial_b, buffer_bounds) -> np.ndarray:
    if initial_b is not None:
        return np.broadcast_to(np.asarray(initial_b, dtype=float), r0.shape).copy()
    b0 = np.zeros_like(r0)
    for i, pol in enumerate(policies):
        if is_buffer_based(pol):
            b0[:, i] = [invert_policy(pol, x) for x in r0[:, i]]
    return np.clip(b0, *buffer_bounds)


@dataclass
class AgreementResult:
    predicted: str
    equilibrium_r: np.ndarray
    n_starts: int
    n_converged_to_equilibrium: int

    @property
    def agrees(self) -> bool:
        """Stable predictions need every start to reach the equilibrium,
        unstable ones need at least one start to miss it."""
        if self.predicted == STABLE:
            return self.n_converged_to_equilibrium == self.n_starts
        if self.predicted == UNSTABLE:
            return self.n_converged_to_equilibrium < self.n_starts
        return True


def check_agreement(
    model: TcpShareModel,
    policy: AdaptationPolicy,
    W: float,
    n: int,
    starts: int = 100,
    seed: int = 0,
    ladder: BitrateLadder = BitrateLadder(),
    steps: int = 5000,
    dt: float = 2.0,
    buffer_bounds: tuple[float, float] = (0.0, 30.0),
    within_kbps: float = 1.0,
) -> AgreementResult:
    """Compare the stability prediction with simulations from random starts."""
    if isinstance(policy, LBB):
        rep = lbb_stability_check(model, n, W)
        predicted, r_eq = rep.classification, rep.equilibrium_r
    elif is_buffer_based(policy):
        raise TypeError("no stability prediction for table buffer-based policies")
    else:
        predicted = contraction_estimate(model, policy, W, n, ladder).classification
        r_eq = rb_equilibrium(policy, W, n, ladder).equilibrium_r
    rng = np.random.default_rng(seed)
    R0 = rng.uniform(ladder.min_kbps, ladder.max_kbps, size=(starts, n))
    pols = [policy] * n
    B0 = _initial_buffers(pols, R0, None, buffer_bounds)
    r, _, _, _ = _iterate(model, pols, [ladder] * n, W, R0, B0, steps, 1e-6 * W, dt, buffer_bounds)
    hits = int(np.sum(np.max(np.abs(r - r_eq), axis=1) < within_kbps))
    return AgreementResult(predicted, r_eq, starts, hits)
