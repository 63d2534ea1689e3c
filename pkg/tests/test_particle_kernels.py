"""
Tests for the compiled single-particle kernels.

Verifies:
1. Compiled forces and energies agree with the numpy force and energy code
2. Partner draws are distinct, never the moving particle, and leave the pool intact
3. The linked cell list gives the same U2 differences as the set-based cell list
4. Bin slots, the Metropolis rule and the evolution-time clock match their Python counterparts
5. The block runner validates batch sizes and only accepts kernels with a compiled form
"""

import math

import numpy as np
import pytest

from app.core.rng import single_stream
from app.schemas.sampler_schemas import SamplerKind
from app.services.diagnostics import Binning
from app.services.forces import BatchDraw, CellList, batch_force_on_particle, full_force_on_particle, short_range_U2_delta
from app.services.particle_kernels import (
    KERNEL_DYSON,
    KERNEL_SMOOTH_LOG,
    ParticleBlockRunner,
    bin_slot,
    clock_iterations,
    compiled_moves_available,
    draw_partners,
    kernel_code,
    metropolis,
    particle_energy,
    particle_force,
    relink,
    short_range_sum,
)
from app.services.potentials import DysonTarget, ParticleSystemTarget, SmoothLogKernel, SmoothPairTarget
from tests.targets import HarmonicKernel


def compiled_force(target, positions, i, x, partners=None, unsplit=False):
    code, delta0 = kernel_code(target.kernel)
    out = np.empty(target.dimension)
    chosen = np.zeros(1, dtype=np.int64) if partners is None else np.asarray(partners, dtype=np.int64)
    n_partners = 0 if partners is None else len(partners)
    ok = particle_force(np.array(x, dtype=float), i, positions, chosen, n_partners, code, delta0,
                        target.confinement, unsplit, out)
    return ok, out


@pytest.fixture
def dyson_system():
    """Dyson N=8 with particles 3 and 4 inside the cutoff of each other."""
    target = DysonTarget(n_particles=8)
    positions = np.array([[-0.9, -0.5, -0.2, 0.1, 0.106, 0.4, 0.7, 1.1]])
    return target, positions


@pytest.fixture
def crowded():
    """Dyson N=12 packed into [0, 0.05]."""
    target = DysonTarget(n_particles=12)
    positions = single_stream(21).uniform(0.0, 0.05, size=(1, 12))
    return target, positions


class TestCompiledForces:
    """Compiled forces against the numpy implementations."""

    def test_full_force_dyson(self, dyson_system):
        """
        Test: Full U1 force on every particle, including the pair inside the cutoff
        Expected: Matches full_force_on_particle to 1e-12
        """
        target, positions = dyson_system
        for i in range(target.n_particles):
            ok, force = compiled_force(target, positions, i, positions[:, i])
            assert ok
            assert np.allclose(force, full_force_on_particle(i, positions, target), rtol=1e-12, atol=1e-12)

    def test_trial_position_two_dimensions(self):
        """
        Test: Smooth kernel in 2-D, force on particle 1 at a trial point
        Expected: Matches full_force_on_particle with x given
        """
        target = ParticleSystemTarget(SmoothLogKernel(), n_particles=6, dimension=2, confinement=0.7)
        positions = single_stream(22).normal(size=(2, 6))
        x = np.array([0.3, -1.2])
        ok, force = compiled_force(target, positions, 1, x)
        assert ok
        assert np.allclose(force, full_force_on_particle(1, positions, target, x=x), rtol=1e-12, atol=1e-12)

    def test_batch_force(self, dyson_system):
        """
        Test: Force on particle 2 from the batch {0, 4, 6}
        Expected: Matches batch_force_on_particle
        """
        target, positions = dyson_system
        partners = [0, 4, 6]
        ok, force = compiled_force(target, positions, 2, positions[:, 2], partners)
        expected = batch_force_on_particle(2, positions, target, BatchDraw(np.array(partners), 2))
        assert ok
        assert np.allclose(force, expected, rtol=1e-12, atol=1e-12)

    def test_unsplit_force(self, dyson_system):
        """
        Test: Force with the exact kernel on particle 3, whose neighbour sits inside the cutoff
        Expected: Equals -grad U of the full configuration at particle 3
        """
        target, positions = dyson_system
        ok, force = compiled_force(target, positions, 3, positions[:, 3], unsplit=True)
        assert ok
        assert np.allclose(force, -target.grad_u(positions)[:, 3], rtol=1e-12, atol=1e-12)

    def test_coincident_pair_fails(self, dyson_system):
        """
        Test: Particle 0 placed exactly on particle 5
        Expected: The force call reports failure
        """
        target, positions = dyson_system
        ok, _ = compiled_force(target, positions, 0, positions[:, 5])
        assert not ok

    def test_particle_energy(self, dyson_system):
        """
        Test: Energy terms of particle 4 at its position and at a trial point
        Expected: Match target.particle_energy with the unsplit U
        """
        target, positions = dyson_system
        for x in (positions[:, 4], np.array([0.25])):
            compiled = particle_energy(np.array(x, dtype=float), 4, positions, KERNEL_DYSON, target.confinement,
                                       target.pair_scale)
            assert compiled == pytest.approx(target.particle_energy(4, x, positions, "u"), rel=1e-12)


class TestDrawPartners:
    """Partial Fisher-Yates partner draws."""

    def test_distinct_and_excluding_moving_particle(self):
        """
        Test: 500 draws of s=4 partners for particle 3 among N=9
        Expected: Distinct partners, never 3, pool restored after every draw
        """
        n, s, i = 9, 4, 3
        pool = np.arange(n - 1)
        picks = np.empty(s, dtype=np.int64)
        out = np.empty(s, dtype=np.int64)
        generator = single_stream(23)
        for _ in range(500):
            draw_partners(generator.random(s), i, pool, picks, out)
            assert np.unique(out).size == s
            assert i not in out
            assert out.min() >= 0 and out.max() < n
            assert np.array_equal(pool, np.arange(n - 1))

    def test_every_partner_reachable(self):
        """
        Test: 2000 single-partner draws for particle 0 among N=5
        Expected: Each of 1..4 drawn with frequency near 1/4
        """
        pool = np.arange(4)
        picks = np.empty(1, dtype=np.int64)
        out = np.empty(1, dtype=np.int64)
        generator = single_stream(24)
        seen = []
        for _ in range(2000):
            draw_partners(generator.random(1), 0, pool, picks, out)
            seen.append(int(out[0]))
        frequencies = np.bincount(seen, minlength=5) / 2000
        assert frequencies[0] == 0.0
        assert np.all(np.abs(frequencies[1:] - 0.25) < 0.04)


class TestLinkedCells:
    """Linked cell list of the block runner."""

    def test_delta_matches_cell_list(self, crowded):
        """
        Test: Random small moves of random particles, committed one after another
        Expected: pair_scale * (sum at new - sum at old) matches short_range_U2_delta to 1e-12
        """
        target, positions = crowded
        runner = ParticleBlockRunner(SamplerKind.SHMC, target, positions, None)
        cells = CellList(positions, target.cutoff_radius)
        generator = single_stream(25)
        for _ in range(30):
            i = int(generator.integers(target.n_particles))
            old_x = positions[:, i].copy()
            new_x = old_x + generator.uniform(-0.008, 0.008, size=1)
            expected = short_range_U2_delta(i, old_x, new_x, positions, target, cells)
            new_sum, coincident = short_range_sum(new_x, i, positions, runner.head, runner.nxt, runner.cell_lo,
                                                  runner.cell_width, runner.cells, target.delta0)
            old_sum, _ = short_range_sum(old_x, i, positions, runner.head, runner.nxt, runner.cell_lo,
                                         runner.cell_width, runner.cells, target.delta0)
            assert not coincident
            assert target.pair_scale * (new_sum - old_sum) == pytest.approx(expected, rel=1e-12, abs=1e-12)
            positions[:, i] = new_x
            cells.move(i, new_x)
            relink(i, new_x, runner.cell_lo, runner.cell_width, runner.cells, runner.head, runner.nxt, runner.prv,
                   runner.owner)

    def test_coincident_detected(self, crowded):
        """
        Test: Sum for particle 0 evaluated at the position of particle 7
        Expected: The coincident flag is set
        """
        target, positions = crowded
        runner = ParticleBlockRunner(SamplerKind.SHMC, target, positions, None)
        _, coincident = short_range_sum(positions[:, 7].copy(), 0, positions, runner.head, runner.nxt,
                                        runner.cell_lo, runner.cell_width, runner.cells, target.delta0)
        assert coincident


class TestScalarHelpers:
    """Bins, acceptance and the evolution-time clock."""

    def test_bin_slot_matches_binning(self):
        """
        Test: Values on edges, inside, outside and non-finite
        Expected: Same slot as Binning.index
        """
        binning = Binning(-1.6, 1.6, 16)
        values = [-2.0, -1.6, -1.2, -0.0001, 0.0, 0.35, 1.5999, 1.6, 1.7, math.inf, -math.inf, math.nan]
        expected = binning.index(values)
        for value, slot in zip(values, expected):
            assert bin_slot(value, binning.lo, binning.hi, binning.width, binning.n_bins) == slot

    @pytest.mark.parametrize("delta,u,expected", [
        (-0.5, 0.99, 1),
        (0.0, 0.5, 1),
        (math.inf, 0.0, 0),
        (math.nan, 0.5, -1),
        (2.0, 0.0, 1),
        (2.0, math.exp(-4.0) * 0.999, 1),
        (2.0, math.exp(-4.0) * 1.001, 0),
    ])
    def test_metropolis(self, delta, u, expected):
        """
        Test: Energy changes with beta = 2 against chosen uniforms
        Expected: Accept iff log u <= -beta delta; NaN flagged with -1
        """
        assert metropolis(delta, 2.0, u) == expected

    def test_clock_strict_and_inclusive(self):
        """
        Test: Increments of 0.25 towards a threshold of 1.0
        Expected: Reaching takes 4 iterations, passing takes 5, and the limit caps both
        """
        assert clock_iterations(0.0, 0.25, 1.0, False, 100) == 4
        assert clock_iterations(0.0, 0.25, 1.0, True, 100) == 5
        assert clock_iterations(0.0, 0.25, 1.0, True, 3) == 3


class TestBlockRunner:
    """Construction rules of ParticleBlockRunner."""

    def test_kernel_codes(self):
        """
        Test: Kernel codes of the built-in and a test kernel
        Expected: Dyson and smooth-log have codes, the harmonic test kernel has none
        """
        assert kernel_code(DysonTarget(4).kernel) == (KERNEL_DYSON, 0.01)
        assert kernel_code(SmoothLogKernel()) == (KERNEL_SMOOTH_LOG, 0.0)
        assert kernel_code(HarmonicKernel()) is None

    def test_compiled_moves_available(self):
        """
        Test: Sampler kinds and targets
        Expected: Particle kinds on built-in kernels only
        """
        assert compiled_moves_available(SamplerKind.RB_SHMC_PARTICLE, DysonTarget(4))
        assert compiled_moves_available(SamplerKind.HMC, SmoothPairTarget(4))
        assert not compiled_moves_available(SamplerKind.RB_SHMC_BAYES, DysonTarget(4))
        assert not compiled_moves_available(SamplerKind.SHMC, ParticleSystemTarget(HarmonicKernel(), 4))

    def test_batch_sizes(self):
        """
        Test: RB-SHMC runners on N=6 with s = 2, s = N-1 and s = N
        Expected: s kept, full batch stored as 0, oversized batch refused
        """
        target = DysonTarget(6)
        positions = target.sample_initial(single_stream(26))
        assert ParticleBlockRunner(SamplerKind.RB_SHMC_PARTICLE, target, positions, 2).batch_size == 2
        assert ParticleBlockRunner(SamplerKind.RB_SHMC_PARTICLE, target, positions, 5).batch_size == 0
        with pytest.raises(ValueError, match="batch_size 6"):
            ParticleBlockRunner(SamplerKind.RB_SHMC_PARTICLE, target, positions, 6)

    def test_block_capacity(self):
        """
        Test: Block sizes for short and long trajectories
        Expected: Longer trajectories get fewer iterations per block, never zero
        """
        target = DysonTarget(10)
        runner = ParticleBlockRunner(SamplerKind.RB_SHMC_PARTICLE, target, target.sample_initial(single_stream(27)), 1)
        assert runner.block_capacity(100) < runner.block_capacity(10)
        assert runner.block_capacity(10 ** 9) == 1
