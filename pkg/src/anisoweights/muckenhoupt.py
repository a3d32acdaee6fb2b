"""Muckenhoupt quantities for scalar and matrix weights over anisotropic balls.

Family-wide constants are maxima over finite, documented ball families and
therefore lower bounds for the supremum over all balls.  Every reported
value comes from a quadrature refinement ladder (node counts n, 4n, 16n)
with a Richardson-style error estimate; essential suprema are approximated
by node maxima, with nodes perturbed off singular sets.  The matrix norm
convention is the spectral norm throughout.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares
from scipy.special import ndtri
from scipy.stats import qmc

from .dilation import DilationGroup
from .geometry import AffineMap, AnisoBall, ball_volume, compute_r0, map_ball
from .weights import SingularWeight

NORM_CONVENTION = "spectral"
_LEVELS = 3


class NonIntegrable(ArithmeticError):
    """Quadrature averages keep growing under node refinement."""


class TruncationNotConverged(RuntimeError):
    """Annulus partial sums failed to go Cauchy at the configured depth."""


# -- spectral norms of stacked matrices ---------------------------------------


def spectral_norms(M: np.ndarray) -> np.ndarray:
    """Largest singular value of each matrix in a (..., N, N) stack."""
    N = M.shape[-1]
    if N == 1:
        return np.abs(M[..., 0, 0])
    if N == 2:
        a, b = M[..., 0, 0], M[..., 0, 1]
        c, d = M[..., 1, 0], M[..., 1, 1]
        g11 = np.abs(a) ** 2 + np.abs(c) ** 2
        g22 = np.abs(b) ** 2 + np.abs(d) ** 2
        g12 = np.conj(a) * b + np.conj(c) * d
        tr = g11 + g22
        disc = np.sqrt(np.maximum(tr ** 2 - 4 * (g11 * g22 - np.abs(g12) ** 2), 0.0))
        return np.sqrt(0.5 * (tr + disc))
    flat = M.reshape(-1, N, N)
    out = np.empty(len(flat))
    step = 1 << 15
    for i in range(0, len(flat), step):
        out[i:i + step] = np.linalg.svd(flat[i:i + step], compute_uv=False)[:, 0]
    return out.reshape(M.shape[:-2])


# -- quadrature ----------------------------------------------------------------


def _midpoint_axis(m: int) -> np.ndarray:
    return -1.0 + (np.arange(m) + 0.5) * 2.0 / m


@dataclass
class BallQuadrature:
    """Normalized averaging rule on the reference unit ball.

    Nodes live on B_A(0, 1) (the Euclidean ball of radius 1/sqrt(sigma))
    and carry equal weights, so the average of 1 over any ball is exactly 1.
    Pushforward to B_A(c, r) maps node u to delta_r u + c.  Monte-Carlo
    levels draw from streams keyed by (seed, task, level), which makes the
    family loops order-independent.
    """

    rule: str = "monte_carlo"
    n_nodes: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.rule not in ("monte_carlo", "mapped_grid"):
            raise ValueError(f"unknown rule {self.rule!r}")
        if self.n_nodes < 64:
            raise ValueError("need at least 64 nodes")

    def describe(self) -> str:
        return f"{self.rule}(n={self.n_nodes},seed={self.seed})"

    def level_count(self, level: int, pair: bool = False) -> int:
        if pair:
            # two node sets whose product realizes the n, 4n, 16n ladder
            return int(np.ceil(np.sqrt(self.n_nodes))) * 2 ** level
        return self.n_nodes * 4 ** level

    def reference_nodes(self, G: DilationGroup, level: int, task: int = 0,
                        pair: bool = False) -> np.ndarray:
        d, sigma = G.d, G.p_scale
        n = self.level_count(level, pair=pair)
        if self.rule == "monte_carlo":
            rng = np.random.default_rng(
                np.random.SeedSequence((self.seed, task, level))
            )
            g = rng.standard_normal((n, d))
            g /= np.linalg.norm(g, axis=1, keepdims=True)
            radii = rng.random(n) ** (1.0 / d)
            return g * radii[:, None] / np.sqrt(sigma)
        m = int(np.ceil(n ** (1.0 / d)))
        m += m % 2  # even counts keep the origin off the lattice
        shift = 0.25 * (task % 2) * 2.0 / m  # offset stream for double integrals
        axes = [_midpoint_axis(m) + shift for _ in range(d)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        pts = pts[np.linalg.norm(pts, axis=1) < 1.0]
        return pts / np.sqrt(sigma)

    def ball_nodes(self, G: DilationGroup, ball: AnisoBall, level: int,
                   task: int = 0, pair: bool = False) -> np.ndarray:
        u = self.reference_nodes(G, level, task, pair=pair)
        return G.dilate(ball.radius, u) + ball.center


@dataclass
class LadderValue:
    value: float
    error: float
    levels: tuple

    def __float__(self):
        return self.value


def ladder_estimate(levels, stochastic: bool) -> LadderValue:
    """Collapse a 3-level refinement into a value and an error estimate.

    Grid ladders get geometric (Aitken) extrapolation when the increments
    behave; Monte-Carlo ladders keep the finest value with the last
    increment as the error.  Systematic growth across levels signals a
    divergent average.
    """
    v1, v2, v3 = (float(v) for v in levels)
    if not np.all(np.isfinite([v1, v2, v3])):
        raise NonIntegrable("non-finite quadrature average")
    if v1 > 0 and v2 > 1.3 * v1 and v3 > 1.3 * v2:
        raise NonIntegrable(
            f"average grows under refinement: {v1:.3g} -> {v2:.3g} -> {v3:.3g}"
        )
    scale = max(abs(v3), 1e-300)
    d1, d2 = v2 - v1, v3 - v2
    if not stochastic and d1 != d2 and abs(d2) < 0.75 * abs(d1) and d1 * d2 > 0:
        value = v3 + d2 * d2 / (d1 - d2)
        error = max(abs(value - v3), 1e-15 * scale)
    elif not stochastic:
        value = v3
        error = max(abs(d2), abs(d1) / 4, 1e-15 * scale)
    else:
        value = v3
        error = max(abs(d2), abs(d1) / 2, 1e-12 * scale)
    return LadderValue(value, error, (v1, v2, v3))


# -- singular-set safe evaluation ----------------------------------------------


def _is_matrix(spec) -> bool:
    return hasattr(spec, "power_values")


def _perturb(pts: np.ndarray, mask: np.ndarray, scale: float, attempt: int) -> np.ndarray:
    d = pts.shape[1]
    shift = 1e-9 * scale * (attempt + 1) / np.sqrt(d)
    out = pts.copy()
    out[mask] = out[mask] + shift
    return out


def safe_scalar_values(spec, pts: np.ndarray, scale: float) -> np.ndarray:
    """Weight values with nodes nudged off the singular set."""
    vals = np.asarray(spec.values(pts), dtype=float)
    for attempt in range(3):
        bad = ~np.isfinite(vals) | (vals <= 0.0)
        if not bad.any():
            return vals
        pts = _perturb(pts, bad, scale, attempt)
        vals[bad] = spec.values(pts[bad])
    bad = ~np.isfinite(vals) | (vals <= 0.0)
    if bad.any():
        raise SingularWeight("could not move nodes off the singular set")
    return vals


def safe_power_values(spec, pts: np.ndarray, a: float, scale: float) -> np.ndarray:
    for attempt in range(4):
        try:
            return spec.power_values(pts, a)
        except SingularWeight:
            vals = spec.values(pts)
            eig = np.linalg.eigvalsh(vals)
            bad = eig[:, 0] < 1e-300
            if not bad.any():
                raise
            pts = _perturb(pts, bad, scale, attempt)
    raise SingularWeight("could not move nodes off the singular set")


# -- per-ball quantities ---------------------------------------------------------


def _scalar_quantity_at_nodes(w: np.ndarray, p: float) -> float:
    if p > 1:
        return float(np.mean(w) * np.mean(w ** (-1.0 / (p - 1))) ** (p - 1))
    return float(np.mean(w) * np.max(1.0 / w))


def _matrix_quantity_at_nodes(Px: np.ndarray, Mt: np.ndarray, p: float) -> float:
    norms = _pair_norms(Px, Mt)
    if p > 1:
        pp = p / (p - 1.0)
        inner = np.mean(norms ** pp, axis=1) ** (p / pp)
        return float(np.mean(inner) ** (1.0 / p))
    return float(np.max(np.mean(norms ** p, axis=0)))


def _pair_norms(Px: np.ndarray, Mt: np.ndarray, budget: int = 1 << 21) -> np.ndarray:
    n1, n2 = len(Px), len(Mt)
    out = np.empty((n1, n2))
    rows = max(1, budget // max(n2, 1))
    for i in range(0, n1, rows):
        prod = np.einsum("aij,bjk->abik", Px[i:i + rows], Mt)
        out[i:i + rows] = spectral_norms(prod)
    return out


def ap_ball_quantity_ladder(W, B: AnisoBall, p: float, quad: BallQuadrature,
                            G: DilationGroup, task: int = 0) -> LadderValue:
    """Muckenhoupt quantity of one ball across the refinement ladder."""
    if p <= 0:
        raise ValueError("p must be positive")
    scale = G.euclidean_radius_bound(B.radius)
    levels = []
    for level in range(_LEVELS):
        if _is_matrix(W):
            xs = quad.ball_nodes(G, B, level, task=2 * task, pair=True)
            ts = quad.ball_nodes(G, B, level, task=2 * task + 1, pair=True)
            Px = safe_power_values(W, xs, 1.0 / p, scale)
            Mt = safe_power_values(W, ts, -1.0 / p, scale)
            levels.append(_matrix_quantity_at_nodes(Px, Mt, p))
        else:
            nodes = quad.ball_nodes(G, B, level, task=task)
            w = safe_scalar_values(W, nodes, scale)
            levels.append(_scalar_quantity_at_nodes(w, p))
    return ladder_estimate(levels, stochastic=quad.rule == "monte_carlo")


def ap_ball_quantity(W, B: AnisoBall, p: float, quad: BallQuadrature,
                     G: DilationGroup) -> float:
    return ap_ball_quantity_ladder(W, B, p, quad, G).value


# -- family reports ---------------------------------------------------------------


@dataclass
class ApReport:
    weight_label: str
    p: float
    balls: list
    values: np.ndarray
    errors: np.ndarray
    constant: float
    family_descriptor: str
    quadrature: str
    norm_convention: str = NORM_CONVENTION

    def rows(self):
        for B, v, e in zip(self.balls, self.values, self.errors):
            yield (B.center.tolist(), B.radius, v, e)


def default_ball_family(G: DilationGroup, max_center_norm: float = 8.0,
                        radii=None, step: float = 1.0) -> list[AnisoBall]:
    """Lattice centers inside {|c|_A <= max_center_norm} with dyadic radii."""
    if radii is None:
        radii = [2.0 ** m for m in range(-3, 4)]
    reach = G.euclidean_radius_bound(max_center_norm)
    axes = [np.arange(-np.floor(reach), np.floor(reach) + 1, step)] * G.d
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, G.d)
    pts = pts[G.quasi_norm(pts) <= max_center_norm]
    return [AnisoBall(c, r) for c in pts for r in radii]


def family_descriptor(family: list[AnisoBall]) -> str:
    radii = sorted({float(B.radius) for B in family})
    return f"{len(family)} balls, radii {radii[0]:g}..{radii[-1]:g}"


def estimate_ap_constant(W, p: float, family: list[AnisoBall],
                         quad: BallQuadrature, G: DilationGroup,
                         jobs: int = 1) -> ApReport:
    """Max per-ball quantity over the family; a lower bound of the supremum."""
    if not family:
        raise ValueError("family must be nonempty")

    def one(i):
        return ap_ball_quantity_ladder(W, family[i], p, quad, G, task=i)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            ladders = list(ex.map(one, range(len(family))))
    else:
        ladders = [one(i) for i in range(len(family))]
    values = np.array([l.value for l in ladders])
    errors = np.array([l.error for l in ladders])
    label = getattr(W, "label", "weight")
    return ApReport(label, p, list(family), values, errors, float(values.max()),
                    family_descriptor(family), quad.describe())


# -- averaging operators -----------------------------------------------------------


def averaging_operator_check(W, B: AnisoBall, p: float, quad: BallQuadrature,
                             G: DilationGroup, test_fields) -> float:
    """Lower bound for the L^p(W) norm of f -> 1_B avg_B(f).

    Both sides are restricted to the ball, so constants give ratio 1 and the
    unweighted case is a contraction by Jensen.
    """
    if p <= 1:
        raise ValueError("averaging check needs p > 1")
    scale = G.euclidean_radius_bound(B.radius)
    nodes = quad.ball_nodes(G, B, _LEVELS - 1)
    Wp = safe_power_values(W, nodes, 1.0 / p, scale)
    best = 0.0
    for f in test_fields:
        vals = np.asarray(f(nodes))
        if vals.ndim == 1:
            vals = vals[:, None]
        mean = vals.mean(axis=0)
        num = np.mean(np.linalg.norm(np.einsum("mij,j->mi", Wp, mean), axis=1) ** p)
        den = np.mean(np.linalg.norm(np.einsum("mij,mj->mi", Wp, vals), axis=1) ** p)
        if den > 0:
            best = max(best, (num / den) ** (1.0 / p))
    return float(best)


# -- scalar slices ------------------------------------------------------------------


def _local_scale(pts: np.ndarray) -> float:
    return 1.0 + float(np.max(np.abs(pts), initial=0.0))


@dataclass(frozen=True)
class SliceWeight:
    """Scalar weight t -> |W^(1/p)(t) v|^p extracted from a matrix weight."""

    W: object
    p: float
    v: np.ndarray
    label: str = ""

    def values(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        Wp = safe_power_values(self.W, pts, 1.0 / self.p, _local_scale(pts))
        return np.linalg.norm(np.einsum("mij,j->mi", Wp, self.v), axis=1) ** self.p


@dataclass(frozen=True)
class NormWeight:
    """Scalar weight t -> ||W(t)|| (spectral norm)."""

    W: object
    label: str = "||W||"

    def values(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return spectral_norms(self.W.values(pts))


@dataclass(frozen=True)
class DualSliceWeight:
    """Scalar weight t -> ||W^(1/p)(x0) W^(-1/p)(t)||^p' for fixed x0.

    The left factor is evaluated once, with x0 nudged off the singular set
    if needed.
    """

    W: object
    p: float
    x0: np.ndarray
    label: str = "dual-slice"

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=float)
        left = safe_power_values(self.W, x0[None, :], 1.0 / self.p,
                                 _local_scale(x0[None, :]))[0]
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "_left", left)

    def values(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        pp = self.p / (self.p - 1.0)
        right = safe_power_values(self.W, pts, -1.0 / self.p, _local_scale(pts))
        return spectral_norms(np.einsum("ij,mjk->mik", self._left, right)) ** pp


def scalar_slice_ap(W, p: float, v, family: list[AnisoBall],
                    quad: BallQuadrature, G: DilationGroup) -> ApReport:
    """A_p report for the scalar slice |W^(1/p)(.) v|^p (A_1 when p <= 1)."""
    v = np.asarray(v, dtype=float)
    if not np.any(v):
        raise ValueError("direction v must be nonzero")
    label = f"slice[{getattr(W, 'label', 'W')}]"
    sl = SliceWeight(W, p, v, label=label)
    return estimate_ap_constant(sl, p, family, quad, G)


# -- doubling -----------------------------------------------------------------------


@dataclass
class DoublingReport:
    weight_label: str
    p: float
    nu: float
    bound_constant: float
    rows: list  # (ball index, component, lambda, ratio)
    fitted_beta: dict

    def max_ratio(self):
        return max(r[3] for r in self.rows)

    def bound_satisfied(self, slack: float = 1e-9) -> bool:
        return all(
            ratio <= self.bound_constant * lam ** (self.nu * max(1.0, self.p)) * (1 + slack)
            for (_, _, lam, ratio) in self.rows
        )


def _mass_ladder(w, B: AnisoBall, quad: BallQuadrature, G: DilationGroup,
                 task: int = 0) -> LadderValue:
    scale = G.euclidean_radius_bound(B.radius)
    vol = ball_volume(G, B.radius)
    levels = []
    for level in range(_LEVELS):
        nodes = quad.ball_nodes(G, B, level, task=task)
        levels.append(vol * np.mean(safe_scalar_values(w, nodes, scale)))
    return ladder_estimate(levels, stochastic=quad.rule == "monte_carlo")


def doubling_check(W, p: float, family: list[AnisoBall], lambdas,
                   quad: BallQuadrature, G: DilationGroup, v=None,
                   bound_constant: float | None = None) -> DoublingReport:
    """Mass ratios w(lambda B) / w(B) for the weight and its scalar shadows."""
    if any(lam < 1 for lam in lambdas):
        raise ValueError("lambdas must be >= 1")
    if _is_matrix(W):
        if v is None:
            v = np.zeros(W.N)
            v[0] = 1.0
        comps = {"slice": SliceWeight(W, p, np.asarray(v, float)),
                 "norm": NormWeight(W)}
        if p > 1:
            comps["dual-slice"] = None  # per-ball, needs the center
    else:
        comps = {"scalar": W}
    if bound_constant is None:
        probe = comps.get("scalar") or comps["slice"]
        bound_constant = estimate_ap_constant(
            probe, max(1.0, p), family, quad, G
        ).constant
    rows = []
    logs = {name: ([], []) for name in comps}
    for i, B in enumerate(family):
        for name, comp in comps.items():
            if comp is None:
                comp = DualSliceWeight(W, p, B.center)
            base = _mass_ladder(comp, B, quad, G, task=i).value
            for lam in lambdas:
                grown = _mass_ladder(comp, AnisoBall(B.center, lam * B.radius),
                                     quad, G, task=i).value
                ratio = grown / base
                rows.append((i, name, float(lam), float(ratio)))
                logs[name][0].append(np.log(lam))
                logs[name][1].append(np.log(max(ratio, 1e-300)))
    fitted = {}
    for name, (lx, ly) in logs.items():
        lx, ly = np.asarray(lx), np.asarray(ly)
        fitted[name] = float((lx * ly).sum() / (lx * lx).sum())
    return DoublingReport(getattr(W, "label", "weight"), p, G.nu,
                          float(bound_constant), rows, fitted)


# -- reverse Hoelder -----------------------------------------------------------------


@dataclass
class ReverseHolderResult:
    r_best: float | None
    c1: float
    table: list  # (r, max ratio or None)


@dataclass(frozen=True)
class PowerWeight:
    base: object
    exponent: float
    label: str = "w^r"

    def values(self, pts):
        return np.asarray(self.base.values(pts), dtype=float) ** self.exponent


def reverse_holder_search(w, p: float, family: list[AnisoBall], r_grid,
                          quad: BallQuadrature, G: DilationGroup) -> ReverseHolderResult:
    """Largest grid r with (avg w^r)^(1/r) <= c1 * avg w across the family."""
    # the weight itself must be integrable before any r > 1 makes sense
    for i, B in enumerate(family):
        _mass_ladder(w, B, quad, G, task=i)  # raises NonIntegrable if not
    table = []
    best = None
    for r in sorted(r_grid):
        try:
            worst = 0.0
            for i, B in enumerate(family):
                scale = G.euclidean_radius_bound(B.radius)
                levels_hi, levels_lo = [], []
                for level in range(_LEVELS):
                    nodes = quad.ball_nodes(G, B, level, task=i)
                    vals = safe_scalar_values(w, nodes, scale)
                    levels_hi.append(np.mean(vals ** r) ** (1.0 / r))
                    levels_lo.append(np.mean(vals))
                stoch = quad.rule == "monte_carlo"
                hi = ladder_estimate(levels_hi, stochastic=stoch).value
                lo = ladder_estimate(levels_lo, stochastic=stoch).value
                worst = max(worst, hi / lo)
            table.append((float(r), float(worst)))
            if best is None or r > best[0]:
                best = (float(r), float(worst))
        except NonIntegrable:
            table.append((float(r), None))
    if best is None:
        return ReverseHolderResult(None, float("inf"), table)
    return ReverseHolderResult(best[0], best[1], table)


# -- reducing operators ---------------------------------------------------------------


@dataclass
class ReducingPair:
    ball: AnisoBall
    p: float
    A_B: np.ndarray
    A_B_sharp: np.ndarray | None
    distortion: float
    sharp_distortion: float | None
    product_norm: float | None
    q_values: dict
    largest_q: float | None
    fit_degenerate: bool


def _directions(N: int, n: int, complex_: bool) -> np.ndarray:
    eng = qmc.Halton(2 * N if complex_ else N, scramble=False)
    eng.fast_forward(1)
    u = eng.random(n)
    g = ndtri(np.clip(u, 1e-12, 1 - 1e-12))
    if complex_:
        g = g[:, :N] + 1j * g[:, N:]
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    dirs = g / norms
    # make sure the coordinate axes are represented
    dirs[:N] = np.eye(N)
    return dirs


def _eta_values(W, nodes: np.ndarray, dirs: np.ndarray, power: float,
                exponent: float, scale: float) -> np.ndarray:
    """(avg |W^power(t) u|^exponent)^(1/exponent) for each direction u."""
    Wp = safe_power_values(W, nodes, power, scale)
    # (m, N, N) @ (K, N) -> (m, K, N)
    prod = np.einsum("mij,kj->mki", Wp, dirs)
    mags = np.linalg.norm(prod, axis=2)
    return np.mean(mags ** exponent, axis=0) ** (1.0 / exponent)


def _fit_log_ellipsoid(dirs: np.ndarray, eta: np.ndarray, S0: np.ndarray,
                       complex_: bool) -> np.ndarray:
    """Least squares of log|S u| on log eta over S = expm(H), H Hermitian."""
    N = S0.shape[0]
    lam0, V0 = np.linalg.eigh(S0)
    H0 = (V0 * np.log(np.maximum(lam0, 1e-150))) @ V0.conj().T

    iu = np.triu_indices(N, k=1)

    def pack(H):
        parts = [np.real(np.diag(H)), np.real(H[iu])]
        if complex_:
            parts.append(np.imag(H[iu]))
        return np.concatenate(parts)

    def unpack(x):
        H = np.zeros((N, N), dtype=complex)
        H[np.diag_indices(N)] = x[:N]
        k = N + len(iu[0])
        off = x[N:k]
        if complex_:
            off = off + 1j * x[k:]
        H[iu] = off
        H[(iu[1], iu[0])] = np.conj(off)
        return H

    target = np.log(eta)

    def resid(x):
        H = unpack(x)
        lam, V = np.linalg.eigh(H)
        S = (V * np.exp(lam)) @ V.conj().T
        mags = np.linalg.norm(dirs @ S.conj().T, axis=1)
        return np.log(np.maximum(mags, 1e-150)) - target

    sol = least_squares(resid, pack(H0), method="lm", max_nfev=400)
    H = unpack(sol.x)
    lam, V = np.linalg.eigh(H)
    return (V * np.exp(lam)) @ V.conj().T


def reducing_operators(W, B: AnisoBall, p: float, quad: BallQuadrature,
                       G: DilationGroup, n_directions: int | None = None,
                       q_grid=None, fit_tol: float = 0.05) -> ReducingPair:
    """Fit positive definite A_B with |A_B u| ~ (avg_B |W^(1/p) u|^p)^(1/p).

    At p = 2 the Gram identity gives A_B = (avg_B W)^(1/2) exactly; other
    exponents start from the Gram proxy and refine by log least squares.
    The companion A_B^# uses the dual exponent and W^(-1/p) (p > 1 only).
    """
    N = W.N
    if n_directions is None:
        n_directions = max(2 * N * N, 8)
    scale = G.euclidean_radius_bound(B.radius)
    nodes = quad.ball_nodes(G, B, _LEVELS - 1)
    sample = W.values(B.center[None, :])[0]
    complex_ = bool(np.max(np.abs(np.imag(sample))) > 1e-14)
    dirs = _directions(N, n_directions, complex_)

    def fit(power, exponent):
        eta = _eta_values(W, nodes, dirs, power, exponent, scale)
        gram = safe_power_values(W, nodes, 2 * power, scale).mean(axis=0)
        lam, V = np.linalg.eigh(gram)
        S0 = (V * np.sqrt(np.maximum(lam, 1e-150))) @ V.conj().T
        if abs(exponent - 2.0) < 1e-12:
            S = S0
        else:
            S = _fit_log_ellipsoid(dirs, eta, S0, complex_)
        mags = np.linalg.norm(dirs @ S.conj().T, axis=1)
        ratios = mags / eta
        return S, float(ratios.max() / ratios.min())

    A_B, distortion = fit(1.0 / p, p)
    if p > 1:
        pp = p / (p - 1.0)
        A_sharp, sharp_distortion = fit(-1.0 / p, pp)
        product_norm = float(np.linalg.norm(A_B @ A_sharp, 2))
    else:
        A_sharp, sharp_distortion, product_norm = None, None, None

    q_values, largest_q = {}, None
    if p > 1 and A_sharp is not None:
        if q_grid is None:
            q_grid = [p + 0.25, p + 0.5, p + 0.75, p + 1.0]
        for q in q_grid:
            try:
                levels = []
                for level in range(_LEVELS):
                    nds = quad.ball_nodes(G, B, level)
                    Wp = safe_power_values(W, nds, 1.0 / p, scale)
                    vals = spectral_norms(np.einsum("mij,jk->mik", Wp, A_sharp))
                    levels.append(np.mean(vals ** q))
                lv = ladder_estimate(levels, stochastic=quad.rule == "monte_carlo")
                levels2 = []
                for level in range(_LEVELS):
                    nds = quad.ball_nodes(G, B, level, task=1)
                    Wm = safe_power_values(W, nds, -1.0 / p, scale)
                    vals = spectral_norms(np.einsum("ij,mjk->mik", A_B, Wm))
                    levels2.append(np.mean(vals ** q))
                lv2 = ladder_estimate(levels2, stochastic=quad.rule == "monte_carlo")
                q_values[float(q)] = (lv.value, lv2.value)
                largest_q = float(q)
            except NonIntegrable:
                break

    degenerate = distortion > np.sqrt(N) * (1 + fit_tol)
    return ReducingPair(B, p, A_B, A_sharp, distortion, sharp_distortion,
                        product_norm, q_values, largest_q, degenerate)


# -- affine invariance -----------------------------------------------------------------


@dataclass
class InvarianceRow:
    ball: AnisoBall
    composed: float
    transported: float
    discrepancy: float
    combined_error: float


def invariance_report(W, p: float, T: AffineMap, family: list[AnisoBall],
                      quad_a: BallQuadrature, quad_b: BallQuadrature,
                      G: DilationGroup) -> list[InvarianceRow]:
    """Quantity of W∘T on B against the quantity of W on T(B), per ball."""
    from .weights import compose_affine

    WT = compose_affine(W, T)
    rows = []
    for i, B in enumerate(family):
        la = ap_ball_quantity_ladder(WT, B, p, quad_a, G, task=i)
        lb = ap_ball_quantity_ladder(W, map_ball(G, T, B), p, quad_b, G, task=i)
        rows.append(InvarianceRow(B, la.value, lb.value,
                                  abs(la.value - lb.value), la.error + lb.error))
    return rows


def invariance_check(W, p: float, T: AffineMap, family: list[AnisoBall],
                     quad_a: BallQuadrature, quad_b: BallQuadrature,
                     G: DilationGroup) -> float:
    rows = invariance_report(W, p, T, family, quad_a, quad_b, G)
    return max(r.discrepancy for r in rows)


# -- polynomial admissibility ------------------------------------------------------------


def polynomial_ap_validity(k: int, beta: float, p: float) -> bool:
    """Degree-k polynomial to the beta gives an A_p weight iff -1 < k*beta < p-1."""
    if p <= 1:
        raise ValueError("validity predicate applies to p > 1")
    return -1.0 < k * beta < p - 1.0


# -- weighted tail bound -------------------------------------------------------------------


@dataclass
class TailBoundResult:
    ratio: float
    bound: float
    terms: list
    doubling_constant: float


def weighted_tail_bound(w, G: DilationGroup, t_j: float, ell, L: float,
                        quad: BallQuadrature, beta: float, r0: float | None = None,
                        depth: int = 40) -> TailBoundResult:
    """Integral of w(x) (1 + t_j |x - x_jl|_A)^(-L) against the cell mass.

    Dyadic annuli around the cell are summed until the partial sums go
    Cauchy; the result is compared with the geometric bound implied by the
    measured doubling constant of w at exponent beta.
    """
    if L <= beta:
        raise ValueError("need L > beta")
    if r0 is None:
        r0 = compute_r0(G, 0.01)
    center = G.dilate(1.0 / t_j, np.asarray(ell, dtype=float))
    rho = r0 / t_j
    scale = G.euclidean_radius_bound(rho)

    def annulus_integral(m):
        """Integral over the dyadic annulus m (m = 0 is the core cell)."""
        R = AnisoBall(center, 2.0 ** m * rho)
        nodes = quad.ball_nodes(G, R, _LEVELS - 1)
        qn = G.quasi_norm(nodes - center)
        if m > 0:
            sel = qn >= 2.0 ** (m - 1) * rho
            vol = ball_volume(G, R.radius) - ball_volume(G, R.radius / 2)
            frac_nodes = nodes[sel]
            qn = qn[sel]
        else:
            vol = ball_volume(G, R.radius)
            frac_nodes = nodes
        if len(frac_nodes) == 0:
            return 0.0, 0.0
        vals = safe_scalar_values(w, frac_nodes, scale)
        decay = (1.0 + t_j * qn) ** (-L)
        return vol * np.mean(vals * decay), vol * np.mean(vals)

    core_decay, core_mass = annulus_integral(0)
    if core_mass <= 0:
        raise ValueError("cell mass vanished")
    total = core_decay
    doubling_c = 1.0
    terms = [core_decay]
    prev_masses = core_mass
    m_used = 0
    for m in range(1, depth + 1):
        term, mass = annulus_integral(m)
        terms.append(term)
        prev_masses += mass
        doubling_c = max(doubling_c, prev_masses / (2.0 ** (m * beta) * core_mass))
        total += term
        m_used = m
        if term < 1e-12 * total:
            break
    else:
        recent = terms[-3:]
        if not all(b < 0.95 * a for a, b in zip(recent, recent[1:])):
            raise TruncationNotConverged(
                f"annulus terms not Cauchy at depth {depth}"
            )
    # on the m-th annulus 1 + t_j |x - x_jl|_A >= 1 + 2^(m-1) r0, and the
    # annulus mass is at most c' 2^(m beta) times the cell mass
    tail = sum(2.0 ** (m * beta) * (1.0 + 2.0 ** (m - 1) * r0) ** (-L)
               for m in range(1, max(m_used, 60) + 1))
    bound = 1.0 + doubling_c * tail
    return TailBoundResult(float(total / core_mass), float(bound), terms,
                           float(doubling_c))
