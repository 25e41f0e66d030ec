import math
import warnings
from dataclasses import replace

import numpy as np
import pytest
from scipy import integrate

from lgr.core import PeriodicBox, min_image_displacement, wrap_position
from lgr.errors import Diverged, NotACube, RadiusTooLarge, ZeroDistance
from lgr.neighbor import build_neighbor_list
from lgr.sph import (
    CaseConfig,
    KernelSpec,
    SphParams,
    SphState,
    check_cfl,
    density_summation,
    eos_pressure,
    init_reverse_poiseuille,
    init_taylor_green,
    initial_state,
    kernel_dwdr,
    kernel_grad,
    kernel_w,
    lattice,
    momentum_rhs,
    run_simulation,
    symplectic_euler_step,
    taylor_green_velocity,
)

UNIT = KernelSpec(1.0)


def spline(q):
    """Closed-form quintic spline written independently of the package."""
    q = np.asarray(q, dtype=float)
    t = lambda a: np.where(q < a, (a - q) ** 5, 0.0)  # noqa: E731
    return (t(3) - 6 * t(2) + 15 * t(1)) / (120 * math.pi)


class TestKernel:
    def test_value_at_origin(self):
        assert kernel_w(0.0, UNIT) == pytest.approx(66 / (120 * math.pi), rel=1e-12)
        assert kernel_w(0.0, UNIT) == pytest.approx(0.1750704, abs=1e-7)

    def test_compact_support(self):
        assert kernel_w(3.0, UNIT) == 0.0
        assert kernel_w(7.0, UNIT) == 0.0

    def test_matches_closed_form(self):
        r = np.linspace(0, 3.5, 301)
        np.testing.assert_allclose(kernel_w(r, UNIT), spline(r), rtol=1e-12, atol=1e-15)

    def test_monotone(self):
        w = kernel_w(np.linspace(0, 3, 1000), KernelSpec(0.7))
        assert np.all(np.diff(w) <= 1e-15)

    @pytest.mark.parametrize("h", [1.0, 0.05])
    def test_normalized(self, h):
        spec = KernelSpec(h)
        val, _ = integrate.quad(lambda r: 4 * math.pi * r * r * kernel_w(r, spec), 0, 3 * h,
                                points=[h, 2 * h], epsabs=1e-13)
        assert abs(val - 1.0) < 1e-3

    def test_derivative_against_finite_differences(self):
        r = np.linspace(0.05, 2.95, 59)
        eps = 1e-5
        fd = (kernel_w(r + eps, UNIT) - kernel_w(r - eps, UNIT)) / (2 * eps)
        np.testing.assert_allclose(kernel_dwdr(r, UNIT), fd, atol=1e-6)

    def test_gradient_direction_and_antisymmetry(self, rng):
        for _ in range(20):
            r = rng.normal(size=3)
            g = kernel_grad(r, UNIT)
            n = np.linalg.norm(r)
            np.testing.assert_allclose(g, kernel_dwdr(n, UNIT) * r / n, rtol=1e-12)
            np.testing.assert_array_equal(kernel_grad(-r, UNIT), -g)

    def test_gradient_at_support_is_zero(self):
        np.testing.assert_array_equal(kernel_grad(np.array([3.0, 0, 0]), UNIT), 0.0)

    def test_coincident_points(self):
        with pytest.raises(ZeroDistance):
            kernel_grad(np.zeros(3), UNIT)


class TestDensityAndPressure:
    def test_isolated_particle(self):
        box = PeriodicBox((10, 10, 10))
        pos = np.array([[5.0, 5.0, 5.0]])
        nl = build_neighbor_list(pos, box, 3.0)
        rho = density_summation(pos, np.ones(1), nl, UNIT, box)
        assert rho[0] == pytest.approx(0.1750704, abs=1e-7)

    def test_lattice_density(self, unit_box):
        pos = lattice((20, 20, 20), unit_box)
        spec = KernelSpec(0.05)
        nl = build_neighbor_list(pos, unit_box, spec.support_radius)
        rho = density_summation(pos, 1.0 / 8000, nl, spec, unit_box)
        assert np.max(np.abs(rho - 1.0)) < 0.02

    def test_linear_in_mass(self, unit_box, rng):
        pos = rng.random((300, 3))
        spec = KernelSpec(0.08)
        nl = build_neighbor_list(pos, unit_box, spec.support_radius)
        m = rng.random(300)
        rho = density_summation(pos, m, nl, spec, unit_box)
        np.testing.assert_array_equal(density_summation(pos, 2 * m, nl, spec, unit_box), 2 * rho)
        assert np.all(rho > 0)

    def test_eos(self):
        params = SphParams()
        assert eos_pressure(1.0, params) == 0.0
        assert eos_pressure(2.0, params) == pytest.approx(100.0)
        rho = np.linspace(0.9, 1.1, 50)
        assert np.all(np.diff(eos_pressure(rho, params)) > 0)


def _state(pos, vel, box, n=None):
    n = len(pos) if n is None else n
    return SphState(pos, vel, np.full(n, box.volume / n), box)


class TestMomentum:
    def test_equilibrium_lattice_has_no_forces(self, unit_box):
        pos = lattice((12, 12, 12), unit_box)
        vel = np.tile([0.3, -0.2, 0.1], (len(pos), 1))
        spec = KernelSpec(1 / 12)
        nl = build_neighbor_list(pos, unit_box, spec.support_radius)
        a, b, _ = momentum_rhs(_state(pos, vel, unit_box), nl, SphParams(), spec)
        assert np.max(np.abs(a)) < 1e-8
        assert np.max(np.abs(b)) < 1e-8

    def test_galilean_at_equilibrium(self, unit_box):
        pos = lattice((10, 10, 10), unit_box)
        spec = KernelSpec(0.1)
        nl = build_neighbor_list(pos, unit_box, spec.support_radius)
        v = np.zeros_like(pos)
        a0, _, _ = momentum_rhs(_state(pos, v, unit_box), nl, SphParams(), spec)
        a1, _, _ = momentum_rhs(_state(pos, v + [2.0, -1.0, 0.5], unit_box), nl, SphParams(), spec)
        np.testing.assert_allclose(a1, a0, atol=1e-10)

    def test_pair_forces_cancel(self, unit_box, rng):
        frame = init_taylor_green(1000, seed=5, jitter=0.3)
        spec = KernelSpec(0.1)
        nl = build_neighbor_list(frame.positions, unit_box, spec.support_radius)
        st = _state(frame.positions, frame.velocities + 0.1 * rng.normal(size=(1000, 3)), unit_box)
        a, b, _ = momentum_rhs(st, nl, SphParams(), spec)
        m = st.masses[:, None]
        total = np.abs((m * a).sum(0)).max()
        assert total < 1e-9 * np.sum(m[:, 0] * np.linalg.norm(a, axis=1))
        assert np.abs((m * b).sum(0)).max() < 1e-9 * np.sum(m[:, 0] * np.linalg.norm(b, axis=1))

    def test_rpf_force_added(self):
        box = PeriodicBox((1, 2, 0.5))
        pos = np.array([[0.5, 0.5, 0.25], [0.5, 1.5, 0.25]])
        st = _state(pos, np.zeros((2, 3)), box)
        spec = KernelSpec(0.05)
        nl = build_neighbor_list(pos, box, spec.support_radius)
        a, _, _ = momentum_rhs(st, nl, SphParams(f0=1.0), spec)
        np.testing.assert_allclose(a, [[1, 0, 0], [-1, 0, 0]], atol=1e-12)


class TestStep:
    def test_pure_advection(self, unit_box):
        pos = np.array([[0.5, 0.5, 0.5]])
        vel = np.array([[1.0, -2.0, 0.5]])
        params = SphParams(p_background=0.0, nu=0.0)
        out = symplectic_euler_step(_state(pos, vel, unit_box), params, KernelSpec(0.05))
        np.testing.assert_allclose(out.positions, pos + 0.001 * vel, atol=1e-15)
        np.testing.assert_array_equal(out.velocities, vel)
        assert out.time == pytest.approx(0.001)

    def test_constant_body_force(self):
        box = PeriodicBox((1, 2, 0.5))
        st = _state(np.array([[0.5, 0.5, 0.25]]), np.zeros((1, 3)), box)
        for k in range(3):
            st = symplectic_euler_step(st, SphParams(f0=1.0), KernelSpec(0.05))
            np.testing.assert_allclose(st.velocities, [[0.001 * (k + 1), 0, 0]], atol=1e-15)

    def test_blow_up_detected(self, unit_box):
        st = _state(np.array([[0.5, 0.5, 0.5]]), np.array([[2000.0, 0, 0]]), unit_box)
        with pytest.raises(Diverged):
            symplectic_euler_step(st, SphParams(), KernelSpec(0.05))

    def test_cfl_warning(self):
        with pytest.warns(RuntimeWarning):
            assert not check_cfl(SphParams(dt=0.01), KernelSpec(0.05))
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            assert check_cfl(SphParams(), KernelSpec(0.05))


class TestInitialConditions:
    def test_printed_field_values(self):
        v = taylor_green_velocity(np.array([[0, 0, 0], [0.25, 0, 0]], dtype=float))
        np.testing.assert_allclose(v, [[-1, 0, 0], [0, 1, 0]], atol=1e-15)

    def test_divergence_free_variant(self, rng):
        p = rng.random((50, 3))
        k, eps = 2 * math.pi, 1e-6
        div = np.zeros(50)
        for ax in range(2):
            e = np.zeros(3)
            e[ax] = eps
            div += (taylor_green_velocity(p + e, k, True)[:, ax]
                    - taylor_green_velocity(p - e, k, True)[:, ax]) / (2 * eps)
        assert np.max(np.abs(div)) < 1e-6

    def test_tgv_frame(self):
        f = init_taylor_green(1000, seed=1)
        assert f.positions.shape == (1000, 3)
        assert np.all(f.velocities[:, 2] == 0)
        assert np.all((f.positions >= 0) & (f.positions < 1))

    def test_seeds_differ(self):
        a = init_taylor_green(1000, seed=1).positions
        b = init_taylor_green(1000, seed=2).positions
        assert not np.array_equal(a, b)
        np.testing.assert_array_equal(a, init_taylor_green(1000, seed=1).positions)

    def test_not_a_cube(self):
        with pytest.raises(NotACube):
            init_taylor_green(999)

    def test_rpf_lattice(self):
        frame, f0 = init_reverse_poiseuille(8000)
        assert f0 == 1.0
        box = PeriodicBox((1, 2, 0.5))
        np.testing.assert_allclose(np.ptp(frame.positions, axis=0), np.asarray(box.extents) - 0.05)
        assert np.all(frame.velocities == 0)
        lower = np.sum(frame.positions[:, 1] < 1.0)
        assert lower == 4000
        assert CaseConfig("rpf").dx == pytest.approx(0.05)

    def test_rpf_jitter_is_seeded(self):
        cfg = CaseConfig("rpf", n_particles=1728)
        a, b = initial_state(cfg, seed=0), initial_state(cfg, seed=1)
        assert not np.array_equal(a.positions, b.positions)
        np.testing.assert_array_equal(a.positions, initial_state(cfg, seed=0).positions)
        ref = lattice((12, 24, 6), cfg.box)
        d = min_image_displacement(a.positions, ref, cfg.box)
        assert np.abs(d).max() <= 0.05 * cfg.dx + 1e-15

    def test_rpf_needs_even_root(self):
        with pytest.raises(NotACube):
            init_reverse_poiseuille(27)


class TestCaseConfig:
    def test_paper_defaults(self):
        tgv, rpf = CaseConfig("tgv"), CaseConfig("rpf")
        assert (tgv.steps, tgv.stride, tgv.n_particles) == (1000, 1, 8000)
        assert (rpf.steps, rpf.stride) == (120000, 10)
        assert tgv.params().nu == pytest.approx(0.01)
        assert rpf.force == 1.0 and tgv.force == 0.0
        assert tgv.kernel().h == pytest.approx(0.05)

    def test_unknown_case(self):
        with pytest.raises(ValueError):
            CaseConfig("channel")

    def test_check_rejects_coarse_rpf(self):
        with pytest.raises(RadiusTooLarge):
            CaseConfig("rpf", n_particles=1000).check()


class TestRunSimulation:
    def test_frame_count_and_spacing(self):
        traj = run_simulation(CaseConfig("tgv", n_particles=1000), n_steps=6, subsample_every=2)
        assert traj.n_frames == 3
        assert traj.dt == pytest.approx(0.002)
        np.testing.assert_allclose([f.time for f in traj.frames], [0.002, 0.004, 0.006])

    def test_single_step_matches_manual_step(self):
        from lgr.sph import initial_state
        cfg = CaseConfig("tgv", n_particles=1000)
        traj = run_simulation(cfg, seed=4, n_steps=1)
        manual = symplectic_euler_step(initial_state(cfg, 4), cfg.params(), cfg.kernel())
        assert traj.n_frames == 1
        np.testing.assert_array_equal(traj.frames[0].positions, manual.positions)

    def test_deterministic(self):
        cfg = CaseConfig("rpf", n_particles=1728)
        a = run_simulation(cfg, seed=0, n_steps=20)
        b = run_simulation(cfg, seed=0, n_steps=20)
        np.testing.assert_array_equal(a.positions(), b.positions())
        assert a.n_frames == 2 and a.dt == pytest.approx(0.01)

    def test_momentum_short_run(self):
        cfg = CaseConfig("tgv", n_particles=1000)
        traj = run_simulation(cfg, n_steps=20)
        m = traj.masses[:, None]
        p = [(m * f.velocities).sum(0) for f in traj.frames]
        scale = np.sum(traj.masses * np.linalg.norm(traj.frames[0].velocities, axis=1))
        assert np.max(np.abs(np.array(p) - p[0])) < 1e-8 * scale
