"""Parametric non-ideal TCP bandwidth sharing.

Each player gets a weight ``g(r) = c + r^h / (r^h + kappa^h)`` and the link
is split in proportion to the weights. With ``h = 1`` this is the plain
saturating family; ``h > 1`` makes ``g`` sigmoidal, which is what lets the
composed player/link map become expansive around the equal share.
``kappa = inf`` gives ideal TCP (constant weights, equal shares).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from abrfair.core import BitrateLadder, DomainError


@dataclass(frozen=True)
class TcpShareModel:
    base_c: float = 0.5
    half_sat_kappa: float = 1000.0
    hill: float = 1.0

    def __post_init__(self) -> None:
        # base_c == 0 is accepted on purpose: it is the degenerate family whose
        # shares vanish as all bitrates go to zero.
        if self.base_c < 0:
            raise DomainError("base_c must be >= 0")
        if not self.half_sat_kappa > 0:
            raise DomainError("half_sat_kappa must be > 0")
        if self.hill < 1:
            raise DomainError("hill exponent must be >= 1")

    @classmethod
    def ideal(cls) -> TcpShareModel:
        return cls(base_c=1.0, half_sat_kappa=math.inf)

    @property
    def is_ideal(self) -> bool:
        return math.isinf(self.half_sat_kappa)

    def weight(self, r):
        """Per-player weight; accepts ``inf`` (the saturated limit)."""
        r = np.asarray(r, dtype=float)
        if self.is_ideal:
            return np.full_like(r, self.base_c)
        x = np.where(np.isinf(r), 1.0, 0.0)
        finite = np.isfinite(r)
        rr = np.where(finite, r, 0.0)
        if self.hill == 1.0:
            sat = rr / (rr + self.half_sat_kappa)
        else:
            rh = rr ** self.hill
            sat = rh / (rh + self.half_sat_kappa ** self.hill)
        return self.base_c + np.where(finite, sat, x)

    def weight_derivative(self, r):
        r = np.asarray(r, dtype=float)
        if self.is_ideal:
            return np.zeros_like(r)
        k, h = self.half_sat_kappa, self.hill
        if h == 1.0:
            return k / (r + k) ** 2
        kh = k ** h
        return h * r ** (h - 1) * kh / (r ** h + kh) ** 2


def tcp_share(model: TcpShareModel, r, W: float) -> np.ndarray:
    """Split capacity ``W`` among players with bitrates ``r``.

    ``r`` may carry leading batch axes; the last axis indexes players. The
    shares are rescaled after division so they sum to ``W``.
    """
    r = np.asarray(r, dtype=float)
    if r.ndim == 0 or r.shape[-1] == 0:
        raise DomainError("tcp_share needs at least one player")
    if W <= 0:
        raise DomainError("capacity must be > 0")
    g = model.weight(r)
    total = g.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise DomainError("all sharing weights vanish; the split is undefined")
    w = W * g / total
    return w * (W / w.sum(axis=-1, keepdims=True))


def share_jacobian(model: TcpShareModel, r, W: float, step: float = 1.0) -> np.ndarray:
    """Central-difference Jacobian ``d h_i / d r_j`` (last two axes i, j)."""
    r = np.asarray(r, dtype=float)
    n = r.shape[-1]
    J = np.empty(r.shape + (n,))
    for j in range(n):
        e = np.zeros(n)
        e[j] = step
        J[..., :, j] = (tcp_share(model, r + e, W) - tcp_share(model, r - e, W)) / (2 * step)
    return J


def analytic_share_jacobian(model: TcpShareModel, r, W: float) -> np.ndarray:
    """Closed-form Jacobian of the weight-proportional split."""
    r = np.asarray(r, dtype=float)
    g = model.weight(r)
    dg = model.weight_derivative(r)
    S = g.sum(axis=-1, keepdims=True)
    n = r.shape[-1]
    # d/dr_j (W g_i / S) = W (delta_ij dg_j S - g_i dg_j) / S^2
    J = -W * g[..., :, None] * dg[..., None, :] / (S[..., None] ** 2)
    idx = np.arange(n)
    J[..., idx, idx] += (W * dg / S)
    return J


@dataclass
class PropertyCheck:
    name: str
    passed: bool
    witness: tuple | None = None


@dataclass
class AssumptionReport:
    checks: list[PropertyCheck] = field(default_factory=list)

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> PropertyCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def lines(self) -> list[str]:
        return [f"{c.name}: {'pass' if c.passed else 'FAIL'}" + (f" witness={c.witness}" if c.witness else "") for c in self.checks]


def _point(x) -> tuple[float, ...]:
    return tuple(float(v) for v in x)


PROPERTY_NAMES = ("symmetry", "order_preservation", "partial_signs", "limit_bounds", "permutation")


def validate_assumption1(
    model: TcpShareModel,
    ladder: BitrateLadder,
    W: float,
    grid_size: int = 64,
    n_players: int = 2,
) -> AssumptionReport:
    """Check the five sharing-function axioms on a bitrate grid.

    1. equal bitrates get equal shares; 2. a strictly higher bitrate gets a
    strictly larger share; 3. own partial positive, cross partials negative
    (central differences, 1 kbps); 4. the limits ``r_i -> 0`` and
    ``r_i -> inf`` and the ladder extremes keep ``h_i`` strictly inside
    ``(0, W)``; 5. permuting bitrates permutes shares.
    """
    if grid_size < 2:
        raise DomainError("grid_size must be >= 2")
    n = n_players
    axis = np.linspace(ladder.min_kbps, ladder.max_kbps, grid_size)
    pts = np.stack(np.meshgrid(*([axis] * n), indexing="ij"), axis=-1).reshape(-1, n)
    h = tcp_share(model, pts, W)
    tol = 1e-12 * W
    report = AssumptionReport()

    # 1. symmetry between equal components
    wit = None
    for i, j in itertools.combinations(range(n), 2):
        mask = pts[:, i] == pts[:, j]
        bad = np.nonzero(mask & (np.abs(h[:, i] - h[:, j]) > 1e-9 * W))[0]
        if bad.size:
            wit = (_point(pts[bad[0]]), i, j)
            break
    report.checks.append(PropertyCheck("symmetry", wit is None, wit))

    # 2. order preservation
    wit = None
    for i, j in itertools.permutations(range(n), 2):
        mask = pts[:, i] > pts[:, j]
        bad = np.nonzero(mask & ~(h[:, i] - h[:, j] > tol))[0]
        if bad.size:
            wit = (_point(pts[bad[0]]), i, j)
            break
    report.checks.append(PropertyCheck("order_preservation", wit is None, wit))

    # 3. partial derivative signs at interior points
    interior = pts[np.all((pts > ladder.min_kbps) & (pts < ladder.max_kbps), axis=1)]
    wit = None
    if interior.size:
        J = share_jacobian(model, interior, W, step=1.0)
        own = np.diagonal(J, axis1=-2, axis2=-1)
        off = J.copy()
        idx = np.arange(n)
        off[:, idx, idx] = -1.0
        bad_own = np.nonzero(~np.all(own > 0, axis=1))[0]
        bad_off = np.nonzero(~np.all(off < 0, axis=(1, 2)))[0]
        if bad_own.size:
            wit = ("own", _point(interior[bad_own[0]]))
        elif bad_off.size:
            wit = ("cross", _point(interior[bad_off[0]]))
    report.checks.append(PropertyCheck("partial_signs", wit is None, wit))

    # 4. limits and extremes stay strictly inside (0, W)
    wit = None
    others = pts[:, 1:]
    for label, ri in (("r_i->0", 0.0), ("r_i->inf", math.inf), ("r_i=min", ladder.min_kbps), ("r_i=max", ladder.max_kbps)):
        g_i = model.weight(np.full(len(others), ri))
        g_rest = model.weight(others).sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            hi_ = W * g_i / (g_i + g_rest)
        bad = np.nonzero(~((hi_ > 0) & (hi_ < W)))[0]
        if bad.size:
            wit = (label, _point(others[bad[0]]))
            break
    if wit is None:
        # Joint limit: every bitrate goes to zero together.
        g0 = float(model.weight(0.0))
        if g0 <= 0:
            wit = ("all r->0", (0.0,) * n)
    report.checks.append(PropertyCheck("limit_bounds", wit is None, wit))

    # 5. permutation equivariance
    wit = None
    for perm in itertools.permutations(range(n)):
        hp = tcp_share(model, pts[:, perm], W)
        bad = np.nonzero(np.max(np.abs(hp - h[:, perm]), axis=1) > 1e-9 * W)[0]
        if bad.size:
            wit = (_point(pts[bad[0]]), perm)
            break
    report.checks.append(PropertyCheck("permutation", wit is None, wit))
    return report


def find_fixed_points(
    model: TcpShareModel,
    W: float,
    n_players: int,
    search_box: tuple[float, float] | None = None,
    grid_size: int = 64,
    damping: float = 0.5,
    damped_iters: int = 200,
    newton_iters: int = 30,
) -> list[np.ndarray]:
    """All distinct solutions of ``h(r) = r`` reachable from a search grid.

    Each grid cell is refined by damped fixed-point iteration followed by a
    Newton polish (the damped map only converges to attracting points, the
    polish also recovers repelling ones). Points with residual below
    ``1e-6 * W`` are kept and deduplicated.
    """
    n = n_players
    lo, hi = search_box if search_box is not None else (0.0, W)
    if n > 3:
        grid_size = min(grid_size, 12)
    axis = np.linspace(lo, hi, grid_size)
    r = np.stack(np.meshgrid(*([axis] * n), indexing="ij"), axis=-1).reshape(-1, n)
    # shares always sum to W, so project starting points onto that plane
    r = np.clip(r + (W - r.sum(axis=1, keepdims=True)) / n, 0.0, W)
    for _ in range(damped_iters):
        r = r + damping * (tcp_share(model, r, W) - r)
    eye = np.eye(n)
    for _ in range(newton_iters):
        F = tcp_share(model, r, W) - r
        J = share_jacobian(model, r, W, step=1e-3 * W) - eye
        with np.errstate(all="ignore"):
            try:
                delta = np.linalg.solve(J, F[..., None])[..., 0]
            except np.linalg.LinAlgError:
                delta = np.zeros_like(r)
        delta = np.where(np.isfinite(delta), delta, 0.0)
        r = np.clip(r - delta, 0.0, W)
    tol = 1e-6 * W
    resid = np.max(np.abs(tcp_share(model, r, W) - r), axis=1)
    cands = r[resid < tol]
    eq = np.full(n, W / n)
    found: list[np.ndarray] = [eq]
    for c in cands[np.lexsort(cands.T[::-1])]:
        if all(np.max(np.abs(c - f)) > 1e-3 * W for f in found):
            found.append(c)
    return sorted(found, key=lambda v: tuple(v))
