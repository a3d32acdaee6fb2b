"""Anisotropic balls, affine transport, lattice cells, structured coverings.

Balls are B_A(c, r) = {x : |x - c|_A < r}.  Coverings here are truncated to
a bounded region {|xi|_A <= max_norm}; coverage, overlap height, and
disjointness of shrunk cores are validated by sampling rather than proof.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, ndtri
from scipy.stats import qmc

from .dilation import DilationGroup, triangle_constant_estimate


class NonPositiveRadius(ValueError):
    """Ball radius must be strictly positive."""


class VerificationFailed(RuntimeError):
    """A sampled geometric invariant did not hold."""


class CoverageGap(RuntimeError):
    """A sampled point of the target region is not covered by any ball."""


class HeightUnbounded(RuntimeError):
    """Measured covering height exceeds the configured cap."""


@dataclass(frozen=True)
class AnisoBall:
    """Ball B_A(center, radius) for the quasi-norm of some dilation group."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).ravel())
        if self.radius <= 0:
            raise NonPositiveRadius(f"radius must be > 0, got {self.radius}")

    def contains(self, G: DilationGroup, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return G.quasi_norm(pts - self.center) < self.radius


@dataclass(frozen=True)
class AffineMap:
    """x -> delta_scale x + shift for a fixed dilation group."""

    group: DilationGroup
    scale: float
    shift: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "shift", np.asarray(self.shift, dtype=float).ravel())
        if self.scale <= 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")

    def apply(self, points):
        return self.group.dilate(self.scale, points) + self.shift

    def inverse(self) -> "AffineMap":
        s = 1.0 / self.scale
        return AffineMap(self.group, s, -self.group.dilate(s, self.shift))

    def compose(self, other: "AffineMap") -> "AffineMap":
        """self after other: x -> self(other(x))."""
        return AffineMap(
            self.group,
            self.scale * other.scale,
            self.group.dilate(self.scale, other.shift) + self.shift,
        )


def euclidean_ball_volume(d: int) -> float:
    return float(np.exp(0.5 * d * np.log(np.pi) - gammaln(0.5 * d + 1)))


def ball_volume(G: DilationGroup, r: float) -> float:
    """|B_A(xi, r)| = r^nu * omega_d^A, valid for the P = sigma*Id calibration."""
    if r <= 0:
        raise NonPositiveRadius(f"radius must be > 0, got {r}")
    omega = euclidean_ball_volume(G.d) * G.p_scale ** (-0.5 * G.d)
    return r ** G.nu * omega


def map_ball(G: DilationGroup, T: AffineMap, B: AnisoBall) -> AnisoBall:
    """Affine image: T(B_A(xi, r)) = B_A(delta_t xi + c, r t)."""
    return AnisoBall(T.apply(B.center), B.radius * T.scale)


# -- low-discrepancy helpers -------------------------------------------------


def _halton(n: int, d: int) -> np.ndarray:
    # skip the degenerate first point (0.5, 1/3, ...) of the unscrambled stream
    eng = qmc.Halton(d, scramble=False)
    eng.fast_forward(1)
    return eng.random(n)


def _sphere_directions(n: int, d: int) -> np.ndarray:
    """Deterministic low-discrepancy unit vectors."""
    if d == 1:
        return np.where(np.arange(n) % 2 == 0, 1.0, -1.0)[:, None]
    u = _halton(n, d)
    g = ndtri(np.clip(u, 1e-12, 1 - 1e-12))
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    degenerate = norms[:, 0] == 0.0
    g[degenerate, 0] = 1.0
    norms[degenerate] = 1.0
    return g / norms


def _unit_ball_reference_nodes(n: int, d: int, sigma: float, boundary_bias=False) -> np.ndarray:
    """Low-discrepancy nodes in the reference ball B_A(0,1) = {|x| < 1/sqrt(sigma)}."""
    u = _halton(n, d + 1)
    g = ndtri(np.clip(u[:, :d], 1e-12, 1 - 1e-12))
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    degenerate = norms[:, 0] == 0.0
    g[degenerate, 0] = 1.0
    norms[degenerate] = 1.0
    g = g / norms
    radii = u[:, d] ** (1.0 / d)
    if boundary_bias:
        radii = radii ** 0.25
    return g * radii[:, None] / np.sqrt(sigma)


# -- unit-scale lattice covering ---------------------------------------------


@dataclass(frozen=True)
class UnitCovering:
    """Cells U_k = B_A(0, r0) + k, k in Z^d, with measured overlap height."""

    group: DilationGroup
    r0: float
    height_bound: int

    def cell(self, k) -> AnisoBall:
        return AnisoBall(np.asarray(k, dtype=float), self.r0)

    def cover_count(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        G = self.group
        reach = G.euclidean_radius_bound(self.r0)
        lo = np.floor(pts.min(axis=0) - reach).astype(int)
        hi = np.ceil(pts.max(axis=0) + reach).astype(int)
        counts = np.zeros(len(pts), dtype=int)
        for k in np.ndindex(*(hi - lo + 1)):
            kk = np.asarray(k) + lo
            counts += G.quasi_norm(pts - kk) < self.r0
        return counts


def _cube_boundary_grid(d: int, half: float, res: int = 9) -> np.ndarray:
    """Grid on the boundary of [-half, half]^d."""
    axes = [np.linspace(-half, half, res) for _ in range(d)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    on_boundary = np.any(np.isclose(np.abs(pts), half), axis=1)
    return pts[on_boundary]


def compute_r0(G: DilationGroup, margin: float) -> float:
    """Radius with the unit cube [-1/2, 1/2)^d inside B_A(0, r0).

    Uses the exact quasi-norm envelope for the Euclidean radius sqrt(d)/2
    of the cube, then verifies on a corner-and-face grid.
    """
    if margin <= 0:
        raise ValueError("margin must be > 0")
    r0 = (1.0 + margin) * G.quasi_radius_bound(np.sqrt(G.d) / 2.0)
    grid = _cube_boundary_grid(G.d, 0.5)
    qn = G.quasi_norm(grid)
    if np.any(qn >= r0):
        raise VerificationFailed(
            f"cube point with |x|_A = {qn.max():.6g} >= r0 = {r0:.6g}"
        )
    return float(r0)


def unit_covering(G: DilationGroup, r0: float, n_samples: int = 4096) -> UnitCovering:
    """Measure the overlap height n0 of the cells U_k on a dense sample."""
    cov = UnitCovering(G, r0, height_bound=0)
    pts = _halton(n_samples, G.d)  # [0,1)^d suffices by translation invariance
    counts = cov.cover_count(pts)
    if counts.min() < 1:
        raise CoverageGap("unit covering leaves a sampled point uncovered")
    return UnitCovering(G, r0, height_bound=int(counts.max()))


# -- structured coverings ------------------------------------------------------


@dataclass
class StructuredCovering:
    """Balls B_A(zeta_j, c * <zeta_j>_A) covering {|xi|_A <= max_norm}.

    shrink_factor is the validated factor c'' such that the balls with radii
    c'' * <zeta_j>_A are pairwise disjoint on the sampled witness sets; the
    greedy packing separation factor is recorded separately.
    """

    group: DilationGroup
    c: float
    centers: np.ndarray
    t: np.ndarray
    radii: np.ndarray
    max_norm: float
    separation_factor: float
    shrink_factor: float
    height: int
    triangle_estimate: float
    shells: list = field(default_factory=list)

    def __len__(self):
        return len(self.centers)

    def ball(self, j: int) -> AnisoBall:
        return AnisoBall(self.centers[j], self.radii[j])

    def affine_map(self, j: int) -> AffineMap:
        return AffineMap(self.group, float(self.t[j]), self.centers[j])

    def balls(self):
        return [self.ball(j) for j in range(len(self))]

    def cover_count(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        counts = np.zeros(len(pts), dtype=int)
        for j in range(len(self)):
            counts += self.ball(j).contains(self.group, pts)
        return counts

    def to_records(self) -> list[tuple]:
        return [
            (j, self.centers[j].tolist(), float(self.radii[j]), float(self.t[j]))
            for j in range(len(self))
        ]


def _dilate_each(G: DilationGroup, s: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply delta_{s[i]} to pts[i] for every i."""
    Q, lam = G.eigenvectors, G.eigenvalues
    return (pts @ Q) * s[:, None] ** lam @ Q.T


def _quasi_polar(G: DilationGroup, u: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Points delta_s(dir) with |dir|_A = 1, so |result|_A = s exactly."""
    if G.d == 1:
        dirs = np.where(u[:, 0] < 0.5, -1.0, 1.0)[:, None]
    else:
        dirs = ndtri(np.clip(u[:, : G.d], 1e-12, 1 - 1e-12))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return _dilate_each(G, s, dirs / np.sqrt(G.p_scale))


def _region_samples(G: DilationGroup, max_norm: float, n: int) -> np.ndarray:
    """Low-discrepancy points of {|xi|_A <= max_norm} in quasi-polar form."""
    u = _halton(n, G.d + 1)
    s = max_norm * np.maximum(u[:, G.d], 1e-9) ** (1.0 / G.nu)
    return _quasi_polar(G, u, s)


def _shell_candidates(G: DilationGroup, lo: float, hi: float, n: int, offset: int) -> np.ndarray:
    """Candidates with |zeta|_A in [lo, hi), exact by quasi-polar construction."""
    u = _halton(n + offset, G.d + 1)[offset:]
    s = lo + (hi - lo) * u[:, G.d]
    return _quasi_polar(G, u, s)


def build_structured_covering(
    G: DilationGroup,
    c: float,
    max_norm: float,
    seed: int,
    candidates_per_shell: int | None = None,
    height_cap: int = 256,
    validation_samples: int = 2048,
) -> StructuredCovering:
    """Greedy net construction on dyadic shells, then sampled validation.

    On the core {|zeta|_A < 1} and each shell {2^m <= |zeta|_A < 2^(m+1)}
    a maximal subset of deterministic candidates is kept whose pairwise
    quasi-distances exceed sep * min(<zeta_i>, <zeta_j>), where
    sep = c / (4 * C_est) and C_est is the sampled triangle constant.
    """
    if not 0 < c <= 1:
        raise ValueError("require 0 < c <= 1")
    if max_norm < 1:
        raise ValueError("require max_norm >= 1")
    c_est = max(1.0, triangle_constant_estimate(G, 2000, seed))
    sep = c / (4.0 * c_est)

    n_shells = max(1, int(np.ceil(np.log2(max_norm))))
    shells = [(0.0, 1.0)] + [(2.0 ** m, 2.0 ** (m + 1)) for m in range(n_shells)]
    if candidates_per_shell is None:
        candidates_per_shell = int(min(12000, max(256, 6 * (2.0 / sep) ** G.nu)))

    sel_pts = np.empty((0, G.d))
    sel_br = np.empty(0)
    shell_slices = []
    offset = 0
    prev_start = 0
    sqrt_sigma = np.sqrt(G.p_scale)
    for lo, hi in shells:
        cands = _shell_candidates(G, max(lo, 1e-6), hi, candidates_per_shell, offset)
        offset += 17  # decorrelate the Halton streams between shells
        br = G.bracket(cands)
        start = len(sel_pts)
        for i in range(len(cands)):
            z, bz = cands[i], br[i]
            ok = True
            # points two or more shells below cannot conflict at this sep
            window = slice(prev_start, len(sel_pts))
            pts_w, br_w = sel_pts[window], sel_br[window]
            if len(pts_w):
                thresh = sep * np.minimum(br_w, bz)
                reach = np.maximum(thresh ** G.alpha1, thresh ** G.alpha2) / sqrt_sigma
                near = np.flatnonzero(np.abs(pts_w - z).max(axis=1) <= reach)
                if near.size:
                    qd = G.quasi_norm(pts_w[near] - z)
                    ok = bool(np.all(qd > thresh[near]))
            if ok:
                sel_pts = np.vstack([sel_pts, z[None, :]])
                sel_br = np.append(sel_br, bz)
        shell_slices.append((start, len(sel_pts)))
        prev_start = start

    centers = sel_pts
    t = sel_br
    radii = c * t

    cov = StructuredCovering(
        group=G, c=c, centers=centers, t=t, radii=radii, max_norm=max_norm,
        separation_factor=sep, shrink_factor=sep, height=0,
        triangle_estimate=c_est, shells=shell_slices,
    )

    # coverage and height on a sampled region
    pts = _region_samples(G, max_norm, validation_samples)
    counts = cov.cover_count(pts)
    if counts.min() < 1:
        j = int(np.argmin(counts))
        raise CoverageGap(
            f"point {pts[j]} with |x|_A <= {max_norm} uncovered; "
            "decrease the separation or increase candidate density"
        )
    height = int(counts.max())
    if height > height_cap:
        raise HeightUnbounded(f"measured height {height} exceeds cap {height_cap}")
    cov.height = height

    cov.shrink_factor = _validated_shrink_factor(cov)
    return cov


def _validated_shrink_factor(cov: StructuredCovering, witnesses: int = 128) -> float:
    """Largest tested factor c'' <= sep/(2*C_est) with disjoint shrunk balls."""
    G = cov.group
    factor = cov.separation_factor / (2.0 * cov.triangle_estimate * 1.05)
    nodes = _unit_ball_reference_nodes(witnesses, G.d, G.p_scale, boundary_bias=True)
    for _ in range(8):
        if _shrunk_disjoint(cov, factor, nodes):
            return factor
        factor *= 0.5
    raise VerificationFailed("no disjoint shrink factor found")


def _shrunk_disjoint(cov: StructuredCovering, factor: float, nodes: np.ndarray) -> bool:
    G = cov.group
    centers, t = cov.centers, cov.t
    rad = factor * t
    for i in range(len(centers)):
        # witnesses inside shrunk ball i
        pts = G.dilate(rad[i], nodes) + centers[i]
        dist = np.linalg.norm(centers - centers[i], axis=1)
        reach = G.euclidean_radius_bound(cov.triangle_estimate * float(rad[i] + rad.max())) * 1.1
        near = np.flatnonzero((dist <= reach))
        for j in near:
            if j == i:
                continue
            if np.any(G.quasi_norm(pts - centers[j]) < rad[j]):
                return False
    return True


def covering_intersection_stats(
    C1: StructuredCovering,
    C2: StructuredCovering,
    witnesses: int = 128,
    slack: float = 0.05,
) -> tuple[int, float]:
    """Max neighbor count of C1-balls in C2 and the bracket ratio bound.

    Intersection is decided conservatively: pairs whose center distance
    exceeds C_est*(r1+r2)*(1+slack) are declared empty, a sampled witness
    declares nonempty, ambiguous pairs get a denser boundary-biased sample.
    """
    G = C1.group
    c_est = max(C1.triangle_estimate, C2.triangle_estimate)
    nodes = _unit_ball_reference_nodes(witnesses, G.d, G.p_scale)
    dense = _unit_ball_reference_nodes(8 * witnesses, G.d, G.p_scale, boundary_bias=True)
    max_neighbors = 0
    ratio_bound = 1.0
    for i in range(len(C1)):
        ci, ri = C1.centers[i], C1.radii[i]
        qd = G.quasi_norm(C2.centers - ci)
        possible = np.flatnonzero(qd <= c_est * (ri + C2.radii) * (1.0 + slack))
        pts = G.dilate(ri, nodes) + ci
        br_i = G.bracket(pts)
        count = 0
        for j in possible:
            inside = G.quasi_norm(pts - C2.centers[j]) < C2.radii[j]
            if not np.any(inside):
                dpts = G.dilate(ri, dense) + ci
                inside = G.quasi_norm(dpts - C2.centers[j]) < C2.radii[j]
                if not np.any(inside):
                    continue
            count += 1
            pts_j = G.dilate(C2.radii[j], nodes) + C2.centers[j]
            br_j = G.bracket(pts_j)
            r = max(br_i.max() / br_j.min(), br_j.max() / br_i.min())
            ratio_bound = max(ratio_bound, float(r))
        max_neighbors = max(max_neighbors, count)
    return max_neighbors, ratio_bound
