"""
Tests for the split potentials and the sand construction.

Verifies:
1. Every analytic gradient agrees with a central finite difference (< 1e-6 relative)
2. The Dyson surrogate is continuous at the cutoff and phi1 + phi2 = phi
3. The double-well landmarks and the smoothness of U1 at the seam
4. The GMM posterior potential, sand identity U1 + U2 = U and sand placement
"""

import math

import numpy as np
import pytest

from app.core.errors import DiagnosticsError
from app.core.rng import single_stream
from app.services.potentials import (
    DoubleWellTarget,
    DysonKernel,
    DysonTarget,
    GmmPosteriorTarget,
    ParticleSystemTarget,
    SmoothLogKernel,
    SmoothPairTarget,
    double_well_U,
    dyson_phi1_grad,
    estimate_sand_centers,
    generate_gmm_data,
    gmm_potential,
    residual_barriers,
    sand_height,
    well_geometry,
)


def finite_difference(energy, x, h=1e-6):
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up = x.copy()
        down = x.copy()
        up[idx] += h
        down[idx] -= h
        grad[idx] = (energy(up) - energy(down)) / (2 * h)
    return grad


def relative_gap(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


@pytest.fixture
def gmm_data():
    """100 observations from the two-location mixture at theta = (0, 2)."""
    return generate_gmm_data(single_stream(2024), 100, (0.0, 2.0), 0.5)


class TestDysonKernel:
    """Test suite for the Dyson log kernel and its linear surrogate."""

    def test_surrogate_constants(self):
        """
        Test: Default cutoff 0.01
        Expected: Offset ln(100) + 1 and slope 100
        """
        kernel = DysonKernel()
        assert kernel.offset == pytest.approx(math.log(100.0) + 1.0)
        assert kernel.slope == pytest.approx(100.0)

    def test_continuous_at_cutoff(self):
        """
        Test: phi1 just below and at the cutoff
        Expected: Both equal ln(100) up to the distance moved
        """
        kernel = DysonKernel(0.01)
        below = float(kernel.phi1(0.01 - 1e-12))
        at = float(kernel.phi1(0.01))
        assert below == pytest.approx(math.log(100.0), abs=1e-9)
        assert at == pytest.approx(math.log(100.0), abs=1e-12)

    def test_value_at_zero(self):
        """
        Test: phi1(0)
        Expected: ln(100) + 1, finite
        """
        assert float(DysonKernel(0.01).phi1(0.0)) == pytest.approx(math.log(100.0) + 1.0)

    def test_split_sums_to_phi(self):
        """
        Test: phi1 + phi2 on both sides of the cutoff
        Expected: Equal to -ln r; phi2 vanishes beyond the cutoff
        """
        kernel = DysonKernel(0.01)
        r = np.array([0.001, 0.005, 0.0099, 0.02, 0.5, 3.0])
        assert np.allclose(kernel.phi1(r) + kernel.phi2(r), -np.log(r), rtol=1e-13, atol=1e-13)
        assert np.all(kernel.phi2(r[r >= 0.01]) == 0.0)
        assert np.all(kernel.phi2(r[r < 0.01]) > 0.0)

    @pytest.mark.parametrize("r, expected", [(0.5, -2.0), (0.005, -100.0), (-0.005, 100.0), (-0.5, 2.0)])
    def test_signed_gradient(self, r, expected):
        """
        Test: d phi1 / dr at points inside and outside the cutoff
        Expected: -1/r outside, -sign(r)/delta0 inside
        """
        assert dyson_phi1_grad(r) == pytest.approx(expected)

    def test_gradient_at_zero_is_sentinel(self):
        """
        Test: r = 0
        Expected: +inf, which downstream code turns into a rejection
        """
        assert dyson_phi1_grad(0.0) == math.inf

    def test_invalid_cutoff(self):
        """
        Test: delta0 = 0
        Expected: ValueError
        """
        with pytest.raises(ValueError):
            DysonKernel(0.0)


class TestParticleGradients:
    """Finite-difference checks for the particle systems."""

    def test_smooth_pair_target(self):
        """
        Test: grad U1 of the smooth 1-D system at a random configuration
        Expected: Matches the finite difference of U1
        """
        target = SmoothPairTarget(n_particles=6, alpha=1.3, beta=1.0)
        q = single_stream(1).uniform(-3, 3, size=(1, 6))
        assert relative_gap(target.grad_u1(q), finite_difference(target.energy_u1, q)) < 1e-6
        assert relative_gap(target.grad_u(q), finite_difference(target.energy, q)) < 1e-6

    def test_two_dimensional_system(self):
        """
        Test: grad U1 of a 2-D system with the smooth kernel
        Expected: Matches the finite difference of U1
        """
        target = ParticleSystemTarget(SmoothLogKernel(), n_particles=5, dimension=2, confinement=0.7)
        q = single_stream(2).normal(size=(2, 5))
        assert relative_gap(target.grad_u1(q), finite_difference(target.energy_u1, q)) < 1e-6

    def test_dyson_target_away_from_kinks(self):
        """
        Test: Dyson grad U1 and grad U at a configuration with one pair inside the cutoff
        Expected: Both match finite differences (no pair within 1e-3 of a kink)
        """
        target = DysonTarget(n_particles=5, delta0=0.01)
        q = np.array([[-0.8, -0.3, 0.1, 0.105, 0.7]])
        assert relative_gap(target.grad_u1(q), finite_difference(target.energy_u1, q)) < 1e-6
        assert relative_gap(target.grad_u(q), finite_difference(target.energy, q)) < 1e-6

    def test_dyson_beta(self):
        """
        Test: Dyson target with N=500 at weight 1 and in the mean-field regime
        Expected: beta = w^2 (N - 1)
        """
        assert DysonTarget(500).beta == pytest.approx(499.0)
        assert DysonTarget(500, weight=1 / 500).beta == pytest.approx(499.0 / 500 ** 2)
        assert DysonTarget(500, weight=1 / 500).confinement == pytest.approx(500.0)

    @pytest.mark.parametrize("weight", [1.0, 0.5, 0.05])
    def test_dyson_log_density_ratio(self, weight):
        """
        Test: -beta [U(q') - U(q)] for two 20-particle configurations at weight w
        Expected: Equals -[w (N-1)/2 d(sum x^2) - w^2 d(sum_{i<j} ln|x_i - x_j|)]
        """
        n = 20
        target = DysonTarget(n_particles=n, weight=weight)
        generator = single_stream(5)
        q = generator.uniform(-1.5, 1.5, size=(1, n))
        q_new = generator.uniform(-1.5, 1.5, size=(1, n))

        def log_gas(x):
            logs = sum(math.log(abs(x[0, i] - x[0, j])) for i in range(n) for j in range(i + 1, n))
            return weight * (n - 1) / 2 * float(np.sum(x * x)) - weight ** 2 * logs

        expected = -(log_gas(q_new) - log_gas(q))
        assert -target.beta * (target.energy(q_new) - target.energy(q)) == pytest.approx(expected, rel=1e-9)

    def test_coincident_pair_gives_infinite_gradient(self):
        """
        Test: Two Dyson particles at the same point, exact kernel
        Expected: Non-finite grad U entries
        """
        target = DysonTarget(n_particles=3)
        q = np.array([[0.2, 0.2, -0.4]])
        assert not np.all(np.isfinite(target.grad_u(q)))

    def test_particle_energy_difference(self):
        """
        Test: Difference of particle_energy for a move of particle 2
        Expected: Equals the change of the total U1
        """
        target = SmoothPairTarget(n_particles=5)
        q = single_stream(3).uniform(-2, 2, size=(1, 5))
        moved = q.copy()
        moved[0, 2] += 0.37
        local = target.particle_energy(2, moved[:, 2], q, "u1") - target.particle_energy(2, q[:, 2], q, "u1")
        assert local == pytest.approx(target.energy_u1(moved) - target.energy_u1(q), rel=1e-10)


class TestDoubleWell:
    """Test suite for the 1-D double well."""

    def test_landmarks(self):
        """
        Test: U at the wells and at the barrier with H=20, W=1
        Expected: U(+-1) = 0 and U(0) = 20
        """
        assert double_well_U(1.0, 20.0, 1.0) == 0.0
        assert double_well_U(-1.0, 20.0, 1.0) == 0.0
        assert double_well_U(0.0, 20.0, 1.0) == pytest.approx(20.0)

    def test_invalid_parameters(self):
        """
        Test: Non-positive barrier height
        Expected: ValueError
        """
        with pytest.raises(ValueError):
            double_well_U(0.0, 0.0, 1.0)

    def test_split_adds_up(self):
        """
        Test: U1 + U2 at points inside and outside the wells
        Expected: Equal to U; U1 barrier is lambda * H
        """
        target = DoubleWellTarget(beta=1.0, barrier_scale=20.0, split_fraction=0.05)
        for x in (-1.7, -0.4, 0.0, 0.9, 1.3):
            q = np.array([[x]])
            assert target.energy_u1(q) + target.energy_u2(q) == pytest.approx(target.potential(x))
        assert target.energy_u1(np.zeros((1, 1))) == pytest.approx(1.0)

    @pytest.mark.parametrize("x", [-1.5, -0.6, 0.3, 1.2])
    def test_gradients(self, x):
        """
        Test: grad U1 and grad U away from the seam
        Expected: Match finite differences
        """
        target = DoubleWellTarget(beta=2.0)
        q = np.array([[x]])
        assert relative_gap(target.grad_u1(q), finite_difference(target.energy_u1, q)) < 1e-6

        def potential(point):
            return float(np.sum(target.potential(point)))

        assert relative_gap(target.grad_u(q), finite_difference(potential, q)) < 1e-6

    def test_u1_smooth_at_seam(self):
        """
        Test: grad U1 just inside and just outside |x| = W
        Expected: Both vanish, so U1 has no gradient jump at the seam
        """
        target = DoubleWellTarget()
        inside = float(target.grad_u1(np.array([[1.0 - 1e-9]]))[0, 0])
        outside = float(target.grad_u1(np.array([[1.0 + 1e-9]]))[0, 0])
        assert abs(inside) < 1e-6 and abs(outside) < 1e-6

    def test_initial_position(self, rng):
        """
        Test: A fixed initial position and the default uniform start
        Expected: The fixed value, or a point inside [-W, W]
        """
        assert DoubleWellTarget(initial_position=-1.0).sample_initial(rng)[0, 0] == -1.0
        start = DoubleWellTarget().sample_initial(rng)[0, 0]
        assert -1.0 <= start <= 1.0


class TestGmmPosterior:
    """Test suite for the Gaussian mixture posterior."""

    def test_single_observation_closed_form(self):
        """
        Test: theta = (0, 0), one observation y = 0, beta = 1
        Expected: U = -ln 2 (both components equal, zero prior term)
        """
        assert gmm_potential(np.array([0.0, 0.0]), np.array([0.0]), 1.0) == pytest.approx(-math.log(2.0))

    def test_empty_data(self):
        """
        Test: No observations
        Expected: ValueError
        """
        with pytest.raises(ValueError):
            gmm_potential(np.zeros(2), np.array([]), 1.0)

    def test_vectorized_columns(self, gmm_data):
        """
        Test: Evaluate three parameter columns at once
        Expected: Same values as one-by-one evaluation
        """
        thetas = np.array([[0.0, 1.0, -0.5], [2.0, -2.0, 0.3]])
        batch = gmm_potential(thetas, gmm_data, 100.0)
        single = [gmm_potential(thetas[:, k], gmm_data, 100.0) for k in range(3)]
        assert np.allclose(batch, single, rtol=1e-13)

    def test_beta_is_data_size(self, gmm_data):
        """
        Test: Posterior target over 100 observations
        Expected: beta = 100
        """
        assert GmmPosteriorTarget(gmm_data).beta == 100.0

    def test_gradients_with_sand(self, gmm_data):
        """
        Test: grad U and grad U1 (with sand) at an arbitrary theta
        Expected: Match finite differences of U and U + S
        """
        target = GmmPosteriorTarget(gmm_data, sand_centers=np.array([[0.0, 2.0], [2.0, -2.0]]), sand_height=0.5)
        theta = np.array([[0.7], [0.4]])
        assert relative_gap(target.grad_u(theta), finite_difference(target.potential, theta)) < 1e-6
        assert relative_gap(target.grad_u1(theta), finite_difference(target.energy_u1, theta)) < 1e-6

    def test_sand_split_identity(self, gmm_data):
        """
        Test: U1 + U2 with sand
        Expected: Equals U; U2 = -S <= 0
        """
        target = GmmPosteriorTarget(gmm_data, sand_centers=np.array([[0.0, 2.0]]), sand_height=0.3)
        theta = np.array([[0.1], [1.8]])
        assert target.energy_u1(theta) + target.energy_u2(theta) == pytest.approx(target.potential(theta))
        assert target.energy_u2(theta) <= 0.0

    def test_without_sand_u2_vanishes(self, gmm_data):
        """
        Test: Posterior target without sand
        Expected: No short-range part and U2 = 0
        """
        target = GmmPosteriorTarget(gmm_data)
        assert not target.has_short_range
        assert target.energy_u2(np.zeros((2, 1))) == 0.0

    def test_likelihood_gradients_average_to_full(self, gmm_data):
        """
        Test: Mean of per-observation gradients over all data plus the scaled prior term
        Expected: Equals grad U
        """
        target = GmmPosteriorTarget(gmm_data)
        theta = np.array([[0.2], [1.1]])
        per_point = target.likelihood_gradients(theta, np.arange(target.n_data))
        manual = per_point.mean(axis=1).reshape(2, 1) + target.prior_gradient(theta) / target.beta
        assert np.allclose(manual, target.grad_u(theta), rtol=1e-13)


class TestSand:
    """Test suite for the sand placement."""

    def test_height_formula(self):
        """
        Test: h_b = 0.4054 with beta = 100
        Expected: h_G = 0.4054 + 0.1
        """
        assert sand_height(0.4054, 100.0) == pytest.approx(0.5054)

    def test_symmetric_synthetic_density(self):
        """
        Test: Two Gaussian bumps at (-1, -1) and (1, 1)
        Expected: Centers recovered at the bumps, paired by joint density
        """
        bumps = np.array([[-1.0, -1.0], [1.0, 1.0]])

        def log_density(points):
            d2 = ((points[None, :, :] - bumps[:, :, None]) ** 2).sum(axis=1)
            top = (-d2 / 0.2).max(axis=0)
            return top + np.log(np.exp(-d2 / 0.2 - top).sum(axis=0))

        found = estimate_sand_centers(log_density, (-3.0, 3.0), (-3.0, 3.0), resolution=0.01, inner_points=201)
        assert np.allclose(found.centers, bumps, atol=0.011)

    def test_crossed_pairing(self):
        """
        Test: Bumps at (0, 2) and (2, -2), where pairing marginal modes in order would be wrong
        Expected: Centers (0, 2) and (2, -2)
        """
        bumps = np.array([[0.0, 2.0], [2.0, -2.0]])

        def log_density(points):
            d2 = ((points[None, :, :] - bumps[:, :, None]) ** 2).sum(axis=1)
            top = (-d2 / 0.2).max(axis=0)
            return top + np.log(np.exp(-d2 / 0.2 - top).sum(axis=0))

        found = estimate_sand_centers(log_density, (-3.0, 5.0), (-5.0, 5.0), resolution=0.01, inner_points=201)
        assert np.allclose(found.centers, bumps, atol=0.011)

    def test_single_mode_is_reported(self):
        """
        Test: A unimodal density
        Expected: DiagnosticsError asking for manual centers
        """
        def log_density(points):
            return -0.5 * (points ** 2).sum(axis=0)

        with pytest.raises(DiagnosticsError, match="manually"):
            estimate_sand_centers(log_density, (-3.0, 3.0), (-3.0, 3.0), resolution=0.01, inner_points=101)

    def test_posterior_wells_and_residual_barrier(self, gmm_data):
        """
        Test: Estimate centers on the posterior, refine the wells, add sand of height h_b + 10/beta
        Expected: Wells near (0, 2) and (2, -2), positive h_b, residual barriers below h_b
        """
        target = GmmPosteriorTarget(gmm_data)
        centers = estimate_sand_centers(target.log_density, (-3.0, 5.0), (-5.0, 5.0),
                                        resolution=0.01, inner_points=201).centers
        geometry = well_geometry(target, centers)
        ordered = geometry.minima[np.argsort(geometry.minima[:, 0])]
        assert np.allclose(ordered, [[0.0, 2.0], [2.0, -2.0]], atol=0.5)
        assert geometry.barrier_height > 0.0
        assert geometry.distance == pytest.approx(np.linalg.norm(ordered[0] - ordered[1]))

        sanded = target.with_sand(centers, sand_height(geometry.barrier_height, target.beta))
        barriers = residual_barriers(sanded, geometry.minima)
        assert max(barriers) < geometry.barrier_height
