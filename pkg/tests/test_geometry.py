import numpy as np
import pytest

from anisoweights.dilation import new_dilation_group
from anisoweights.geometry import (
    AffineMap,
    AnisoBall,
    NonPositiveRadius,
    ball_volume,
    build_structured_covering,
    compute_r0,
    covering_intersection_stats,
    map_ball,
    unit_covering,
)


@pytest.fixture(scope="module")
def G1():
    return new_dilation_group([[1.0]])


@pytest.fixture(scope="module")
def Giso():
    return new_dilation_group(np.eye(2))


@pytest.fixture(scope="module")
def Gani():
    return new_dilation_group(np.diag([1.0, 2.0]))


def mc_volume(G, r, n=2 ** 16, seed=0):
    """Monte-Carlo volume of {|x|_A < r} with a binomial standard error."""
    rng = np.random.default_rng(seed)
    R = G.euclidean_radius_bound(r)
    pts = rng.uniform(-R, R, size=(n, G.d))
    inside_box = np.linalg.norm(pts, axis=1) <= R
    pts = pts[inside_box]
    box_vol = (2 * R) ** G.d
    p_ball = np.mean(G.quasi_norm(pts) < r)
    p = p_ball * len(pts) / n
    est = p * box_vol
    se = np.sqrt(p * (1 - p) / n) * box_vol
    return est, se


class TestBallVolume:
    def test_unit_disc(self, Giso):
        assert ball_volume(Giso, 1.0) == pytest.approx(np.pi)

    def test_anisotropic_against_monte_carlo(self, Gani):
        vol = ball_volume(Gani, 2.0)
        assert vol == pytest.approx(8 * np.pi)
        est, se = mc_volume(Gani, 2.0, seed=42)
        assert abs(est - vol) <= 3 * se

    def test_monte_carlo_across_radii(self, Giso, Gani):
        for G in (Giso, Gani):
            for r in (0.25, 1.0, 4.0):
                est, se = mc_volume(G, r, seed=7)
                assert abs(est - ball_volume(G, r)) <= 3 * se

    def test_precise_doubling(self, Gani):
        for r in (0.3, 1.0, 5.0):
            assert ball_volume(Gani, 2 * r) / ball_volume(Gani, r) == pytest.approx(
                2.0 ** Gani.nu
            )

    def test_rejects_nonpositive_radius(self, Giso):
        with pytest.raises(NonPositiveRadius):
            ball_volume(Giso, 0.0)


class TestAffine:
    def test_identity_map(self, Gani):
        T = AffineMap(Gani, 1.0, np.zeros(2))
        B = AnisoBall([0.5, -1.0], 2.0)
        out = map_ball(Gani, T, B)
        assert out.center == pytest.approx([0.5, -1.0])
        assert out.radius == pytest.approx(2.0)

    def test_membership_equivariance(self, Gani):
        T = AffineMap(Gani, 1.7, np.array([0.3, -0.8]))
        B = AnisoBall([1.0, 2.0], 1.5)
        TB = map_ball(Gani, T, B)
        rng = np.random.default_rng(21)
        x = rng.uniform(-4, 4, size=(1000, 2))
        lhs = B.contains(Gani, x)
        rhs = TB.contains(Gani, T.apply(x))
        assert np.array_equal(lhs, rhs)

    def test_composition(self, Gani):
        T1 = AffineMap(Gani, 2.0, np.array([1.0, 0.0]))
        T2 = AffineMap(Gani, 0.5, np.array([0.0, 3.0]))
        B = AnisoBall([0.2, 0.2], 1.0)
        one = map_ball(Gani, T2, map_ball(Gani, T1, B))
        two = map_ball(Gani, T2.compose(T1), B)
        assert one.center == pytest.approx(list(two.center))
        assert one.radius == pytest.approx(two.radius)

    def test_inverse(self, Gani):
        T = AffineMap(Gani, 3.0, np.array([1.0, -2.0]))
        x = np.array([[0.4, 0.9], [-1.0, 2.0]])
        back = T.inverse().apply(T.apply(x))
        assert np.max(np.abs(back - x)) < 1e-12


class TestComputeR0:
    def test_one_dimensional(self, G1):
        assert compute_r0(G1, 0.01) == pytest.approx(0.505)

    def test_isotropic_plane(self, Giso):
        assert compute_r0(Giso, 0.01) == pytest.approx(np.sqrt(2) / 2 * 1.01, rel=1e-9)

    def test_margin_strict(self, Gani):
        r0 = compute_r0(Gani, 0.01)
        assert r0 > Gani.quasi_radius_bound(np.sqrt(2) / 2)


class TestUnitCovering:
    def test_interval_height(self, G1):
        cov = unit_covering(G1, 0.505)
        assert cov.height_bound == 2

    def test_full_coverage(self, Gani):
        r0 = compute_r0(Gani, 0.01)
        cov = unit_covering(Gani, r0)
        rng = np.random.default_rng(3)
        z = rng.uniform(-3, 3, size=(500, 2))
        assert np.all(cov.cover_count(z) >= 1)

    def test_cell_translation_identity(self, Gani):
        r0 = compute_r0(Gani, 0.01)
        cov = unit_covering(Gani, r0)
        rng = np.random.default_rng(4)
        z = rng.uniform(-2, 2, size=(200, 2))
        k = np.array([1.0, -2.0])
        in_k = cov.cell(k).contains(Gani, z)
        in_0_shifted = cov.cell(np.zeros(2)).contains(Gani, z - k)
        assert np.array_equal(in_k, in_0_shifted)


@pytest.fixture(scope="module")
def cov8(G1):
    return build_structured_covering(G1, c=0.5, max_norm=8.0, seed=11)


class TestStructuredCovering:

    def test_radii_by_construction(self, cov8, G1):
        assert np.allclose(cov8.radii, cov8.c * (1.0 + np.abs(cov8.centers[:, 0])))
        assert np.allclose(cov8.t, G1.bracket(cov8.centers))

    def test_interval_coverage_oracle(self, cov8):
        # in one dimension with A=(1) the balls are literal intervals
        lo = cov8.centers[:, 0] - cov8.radii
        hi = cov8.centers[:, 0] + cov8.radii
        order = np.argsort(lo)
        lo, hi = lo[order], hi[order]
        assert lo[0] < -8.0 and np.max(hi) > 8.0
        reach = hi[0]
        for a, b in zip(lo[1:], hi[1:]):
            if a >= reach:
                pytest.fail(f"gap before {a}")
            reach = max(reach, b)
            if reach > 8.0:
                break
        assert reach > 8.0

    def test_shrunk_disjoint_oracle(self, cov8):
        rad = cov8.shrink_factor * cov8.t
        lo = cov8.centers[:, 0] - rad
        hi = cov8.centers[:, 0] + rad
        order = np.argsort(lo)
        lo, hi = lo[order], hi[order]
        assert np.all(lo[1:] >= hi[:-1] - 1e-12)

    def test_geometric_shell_structure(self, cov8):
        # dyadic shells keep a bounded number of balls each
        for start, end in cov8.shells:
            assert 1 <= end - start <= 60
        pos = np.sort(cov8.centers[cov8.centers[:, 0] > 1.0, 0])
        gaps = np.diff(pos)
        assert np.all(gaps > 0)

    def test_validated_height(self, cov8):
        assert 1 <= cov8.height <= 64

    def test_neighbor_count_stable_under_truncation(self, G1):
        c_a = build_structured_covering(G1, c=0.5, max_norm=8.0, seed=11)
        c_b = build_structured_covering(G1, c=0.5, max_norm=64.0, seed=11)
        n_a, r_a = covering_intersection_stats(c_a, c_a)
        n_b, r_b = covering_intersection_stats(c_b, c_b)
        assert n_a >= 1 and n_b >= 1
        assert n_a == n_b
        assert r_a >= 1.0 and r_b >= 1.0

    def test_cross_parameter_stats(self, G1, cov8):
        other = build_structured_covering(G1, c=0.8, max_norm=8.0, seed=13)
        n, ratio = covering_intersection_stats(cov8, other)
        assert n >= 1
        assert ratio >= 1.0

    def test_two_dimensional_small(self, Gani):
        cov = build_structured_covering(
            Gani, c=0.9, max_norm=2.0, seed=5, validation_samples=512
        )
        assert len(cov) >= 3
        assert cov.height >= 1
