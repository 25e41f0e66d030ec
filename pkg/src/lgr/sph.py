"""Weakly-compressible SPH in the transport-velocity formulation.

Generates the ground-truth Taylor-Green vortex (TGV) and reverse Poiseuille
flow (RPF) trajectories.  Pair sums run over a CSR neighbor list built with
the kernel support radius; every pair force is evaluated in the same
floating-point order from both ends, so interparticle forces cancel exactly
and momentum is conserved to reduction round-off.

Scheme per step (symplectic Euler):

1. density by summation, linear equation of state;
2. background-pressure transport acceleration ``b_i``;
3. momentum: symmetric pressure gradient, laminar viscosity, artificial
   stress ``A = rho v (x) (v_transport - v)``, body force;
4. ``v += dt a``, ``v_transport = v + dt b``, ``x = wrap(x + dt v_transport)``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numba as nb
import numpy as np

from .core import CASE_IDS, Frame, PeriodicBox, Trajectory, rpf_force, wrap_position
from .errors import Diverged, NotACube, RadiusTooLarge, ZeroDistance
from .neighbor import NeighborList, build_neighbor_list

log = logging.getLogger(__name__)

TGV_BOX = (1.0, 1.0, 1.0)
RPF_BOX = (1.0, 2.0, 0.5)


@dataclass(frozen=True)
class KernelSpec:
    """Quintic spline with compact support ``3h``."""

    h: float

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("smoothing length must be positive")

    @property
    def support_radius(self) -> float:
        return 3.0 * self.h

    @property
    def sigma(self) -> float:
        return 1.0 / (120.0 * math.pi * self.h**3)


@dataclass(frozen=True)
class SphParams:
    rho0: float = 1.0
    c0: float = 10.0
    nu: float = 0.01
    p_background: float = 5.0
    dt: float = 0.001
    f0: float = 0.0  # RPF body-force magnitude; 0 means no external force
    artificial_stress: bool = True

    def __post_init__(self):
        if not (self.rho0 > 0 and self.c0 > 0 and self.dt > 0):
            raise ValueError("rho0, c0 and dt must be positive")
        if self.nu < 0 or self.p_background < 0:
            raise ValueError("nu and p_background must be non-negative")

    @property
    def eta(self) -> float:
        """Dynamic viscosity."""
        return self.rho0 * self.nu


@dataclass
class SphState:
    positions: np.ndarray
    velocities: np.ndarray
    masses: np.ndarray
    box: PeriodicBox
    time: float = 0.0
    case: str = "tgv"
    extra: dict = field(default_factory=dict)


# -- kernel ----------------------------------------------------------------

@nb.njit(cache=True, inline="always")
def _w(r, h, sigma):
    q = r / h
    if q >= 3.0:
        return 0.0
    s = (3.0 - q) ** 5
    if q < 2.0:
        s -= 6.0 * (2.0 - q) ** 5
    if q < 1.0:
        s += 15.0 * (1.0 - q) ** 5
    return sigma * s


@nb.njit(cache=True, inline="always")
def _dwdr(r, h, sigma):
    q = r / h
    if q >= 3.0:
        return 0.0
    s = -5.0 * (3.0 - q) ** 4
    if q < 2.0:
        s += 30.0 * (2.0 - q) ** 4
    if q < 1.0:
        s -= 75.0 * (1.0 - q) ** 4
    return sigma * s / h


def kernel_w(r, spec: KernelSpec):
    """Kernel value at distance(s) ``r``; zero at and beyond ``3h``."""
    q = np.asarray(r, dtype=np.float64) / spec.h
    w = np.where(q < 3.0, np.clip(3.0 - q, 0, None) ** 5, 0.0)
    w = w - 6.0 * np.clip(2.0 - q, 0, None) ** 5 + 15.0 * np.clip(1.0 - q, 0, None) ** 5
    w = spec.sigma * np.where(q < 3.0, w, 0.0)
    return float(w) if w.ndim == 0 else w


def kernel_dwdr(r, spec: KernelSpec):
    q = np.asarray(r, dtype=np.float64) / spec.h
    d = (-5.0 * np.clip(3.0 - q, 0, None) ** 4 + 30.0 * np.clip(2.0 - q, 0, None) ** 4
         - 75.0 * np.clip(1.0 - q, 0, None) ** 4)
    d = spec.sigma / spec.h * np.where(q < 3.0, d, 0.0)
    return float(d) if d.ndim == 0 else d


def kernel_grad(r_vec, spec: KernelSpec) -> np.ndarray:
    """Gradient ``dW/dr * r_vec / |r_vec|`` for one or many vectors."""
    rv = np.asarray(r_vec, dtype=np.float64)
    r = np.linalg.norm(rv, axis=-1)
    if np.any(r < 1e-12 * spec.h):
        raise ZeroDistance("kernel gradient undefined for coincident particles")
    return (kernel_dwdr(r, spec) / r)[..., None] * rv


# -- pair sums -------------------------------------------------------------

@nb.njit(cache=True)
def _density(pos, L, m, offsets, idx, h, sigma):
    n = pos.shape[0]
    inv_l = 1.0 / L
    rho = np.empty(n)
    w0 = _w(0.0, h, sigma)
    for i in range(n):
        acc = m[i] * w0
        for s in range(offsets[i], offsets[i + 1]):
            j = idx[s]
            r2 = 0.0
            for k in range(3):
                d = pos[i, k] - pos[j, k]
                d -= L[k] * np.rint(d * inv_l[k])
                r2 += d * d
            acc += m[j] * _w(math.sqrt(r2), h, sigma)
        rho[i] = acc
    return rho


@nb.njit(cache=True)
def _transport(pos, L, m, rho, offsets, idx, h, sigma, p_b):
    """Background-pressure acceleration; returns (b, status)."""
    n = pos.shape[0]
    inv_l = 1.0 / L
    b = np.zeros((n, 3))
    eps = 1e-12 * h
    d = np.empty(3)
    for i in range(n):
        vi = m[i] / rho[i]
        for s in range(offsets[i], offsets[i + 1]):
            j = idx[s]
            r2 = 0.0
            for k in range(3):
                dk = pos[i, k] - pos[j, k]
                dk -= L[k] * np.rint(dk * inv_l[k])
                d[k] = dk
                r2 += dk * dk
            r = math.sqrt(r2)
            if r < eps:
                return b, 1
            vj = m[j] / rho[j]
            f = (vi * vi + vj * vj) * _dwdr(r, h, sigma) / r
            for k in range(3):
                b[i, k] += f * d[k]
        for k in range(3):
            b[i, k] *= -p_b / m[i]
    return b, 0


@nb.njit(cache=True)
def _momentum(pos, vel, L, m, rho, p, dv, offsets, idx, h, sigma, eta, stress):
    """Internal accelerations; ``dv`` is ``v_transport - v`` (artificial stress)."""
    n = pos.shape[0]
    inv_l = 1.0 / L
    a = np.zeros((n, 3))
    eps = 1e-12 * h
    d = np.empty(3)
    for i in range(n):
        vi = m[i] / rho[i]
        for s in range(offsets[i], offsets[i + 1]):
            j = idx[s]
            r2 = 0.0
            for k in range(3):
                dk = pos[i, k] - pos[j, k]
                dk -= L[k] * np.rint(dk * inv_l[k])
                d[k] = dk
                r2 += dk * dk
            r = math.sqrt(r2)
            if r < eps:
                return a, 1
            vj = m[j] / rho[j]
            vol2 = vi * vi + vj * vj
            dwdr = _dwdr(r, h, sigma)
            gw = dwdr / r  # grad W = gw * d
            p_ij = (rho[j] * p[i] + rho[i] * p[j]) / (rho[i] + rho[j])
            visc = eta * dwdr / r
            if stress:
                # 0.5 (A_i + A_j) . gradW with A = rho v (x) dv
                ai_g = 0.0
                aj_g = 0.0
                for k in range(3):
                    ai_g += dv[i, k] * d[k]
                    aj_g += dv[j, k] * d[k]
                ai_g *= rho[i] * gw
                aj_g *= rho[j] * gw
            for k in range(3):
                f = -p_ij * gw * d[k] + visc * (vel[i, k] - vel[j, k])
                if stress:
                    f += 0.5 * (vel[i, k] * ai_g + vel[j, k] * aj_g)
                a[i, k] += vol2 * f
        for k in range(3):
            a[i, k] /= m[i]
    return a, 0


def density_summation(positions, masses, neighbors: NeighborList, spec: KernelSpec,
                      box: PeriodicBox) -> np.ndarray:
    """``rho_i = sum_{j in N(i) + {i}} m_j W(|x_ij|)``."""
    pos = np.ascontiguousarray(positions, dtype=np.float64)
    m = np.broadcast_to(np.asarray(masses, dtype=np.float64), (pos.shape[0],)).copy()
    return _density(pos, box.extents, m, neighbors.offsets, neighbors.indices,
                    spec.h, spec.sigma)


def eos_pressure(rho, params: SphParams):
    """Linear weakly-compressible closure ``p = c0^2 (rho - rho0)``."""
    return params.c0**2 * (np.asarray(rho, dtype=np.float64) - params.rho0)


def momentum_rhs(state: SphState, neighbors: NeighborList, params: SphParams,
                 spec: KernelSpec, rho=None):
    """Accelerations and the transport (background-pressure) acceleration.

    Returns ``(accel, transport_accel, rho)``.  ``accel`` includes the body
    force of the case when ``params.f0`` is non-zero.
    """
    pos = np.ascontiguousarray(state.positions, dtype=np.float64)
    vel = np.ascontiguousarray(state.velocities, dtype=np.float64)
    m = np.broadcast_to(np.asarray(state.masses, dtype=np.float64), (pos.shape[0],)).copy()
    L = state.box.extents
    off, idx = neighbors.offsets, neighbors.indices
    if rho is None:
        rho = _density(pos, L, m, off, idx, spec.h, spec.sigma)
    p = eos_pressure(rho, params)
    b, err = _transport(pos, L, m, rho, off, idx, spec.h, spec.sigma, params.p_background)
    if err:
        raise ZeroDistance("coincident particles in transport-velocity sum")
    dv = params.dt * b
    a, err = _momentum(pos, vel, L, m, rho, p, dv, off, idx, spec.h, spec.sigma,
                       params.eta, params.artificial_stress)
    if err:
        raise ZeroDistance("coincident particles in momentum sum")
    if params.f0 != 0.0:
        a += rpf_force(pos, params.f0, state.box)
    return a, b, rho


def check_cfl(params: SphParams, spec: KernelSpec) -> bool:
    ok = params.dt <= 0.25 * spec.h / params.c0
    if not ok:
        warnings.warn(
            f"dt={params.dt} violates the acoustic CFL limit 0.25 h / c0 = "
            f"{0.25 * spec.h / params.c0:.3g}", RuntimeWarning, stacklevel=2)
    return ok


def symplectic_euler_step(state: SphState, params: SphParams, spec: KernelSpec) -> SphState:
    nl = build_neighbor_list(state.positions, state.box, spec.support_radius)
    a, b, _ = momentum_rhs(state, nl, params, spec)
    v = state.velocities + params.dt * a
    speed = np.sqrt(np.max(np.einsum("ij,ij->i", v, v)))
    if not np.isfinite(speed) or speed > 100.0 * params.c0:
        raise Diverged(f"max speed {speed:.3g} exceeds 100 c0 at t={state.time:.4f}")
    v_transport = v + params.dt * b
    x = wrap_position(state.positions + params.dt * v_transport, state.box)
    return replace(state, positions=x, velocities=v, time=state.time + params.dt)


# -- initial conditions ----------------------------------------------------

def _cube_root(n: int) -> int:
    c = int(round(n ** (1.0 / 3.0)))
    if c < 1 or c**3 != n:
        raise NotACube(f"{n} particles cannot fill a cubic lattice")
    return c


def lattice(counts, box: PeriodicBox) -> np.ndarray:
    """Cell-centred lattice with ``counts`` points per axis."""
    axes = [(np.arange(c) + 0.5) * (box.extents[k] / c) for k, c in enumerate(counts)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)


def taylor_green_velocity(positions, k: float = 2 * math.pi,
                          divergence_free: bool = False) -> np.ndarray:
    """TGV initial field.

    Default is ``u = -cos kx cos ky cos kz, v = sin kx cos ky cos kz, w = 0``.
    With ``divergence_free`` the classical solenoidal field
    ``u = sin kx cos ky cos kz, v = -cos kx sin ky cos kz, w = 0`` is used.
    """
    p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    cx, cy, cz = np.cos(k * p[:, 0]), np.cos(k * p[:, 1]), np.cos(k * p[:, 2])
    sx, sy = np.sin(k * p[:, 0]), np.sin(k * p[:, 1])
    v = np.zeros_like(p)
    if divergence_free:
        v[:, 0] = sx * cy * cz
        v[:, 1] = -cx * sy * cz
    else:
        v[:, 0] = -cx * cy * cz
        v[:, 1] = sx * cy * cz
    return v


def init_taylor_green(n: int, k: float = 2 * math.pi, seed=0, jitter: float = 0.05,
                      divergence_free: bool = False) -> Frame:
    """Jittered lattice in the unit cube with the TGV velocity field."""
    c = _cube_root(n)
    box = PeriodicBox(TGV_BOX)
    dx = 1.0 / c
    rng = np.random.default_rng(seed)
    x = lattice((c, c, c), box) + rng.uniform(-jitter * dx, jitter * dx, (n, 3))
    x = wrap_position(x, box)
    return Frame(0.0, x, taylor_green_velocity(x, k, divergence_free))


def init_reverse_poiseuille(n: int, seed=0, f0: float = 1.0, jitter: float = 0.0,
                            velocity_noise: float = 0.0):
    """Lattice filling the (1, 2, 0.5) box at rest; returns ``(frame, f0)``.

    ``n`` must be a cube ``c^3`` with ``c`` even; the lattice is
    ``c x 2c x c/2`` so the spacing is ``1/c`` on every axis.
    """
    c = _cube_root(n)
    if c % 2:
        raise NotACube(f"RPF lattice needs an even cube root, got {c}")
    box = PeriodicBox(RPF_BOX)
    rng = np.random.default_rng(seed)
    dx = 1.0 / c
    x = lattice((c, 2 * c, c // 2), box)
    if jitter:
        x = wrap_position(x + rng.uniform(-jitter * dx, jitter * dx, x.shape), box)
    v = velocity_noise * rng.standard_normal(x.shape) if velocity_noise else np.zeros_like(x)
    return Frame(0.0, x, v), f0


# -- case setup and driver -------------------------------------------------

@dataclass(frozen=True)
class CaseConfig:
    """Everything needed to reproduce one ground-truth run."""

    case: str = "tgv"
    n_particles: int = 8000
    dt: float = 0.001
    n_steps: int | None = None
    subsample_every: int | None = None
    re: float | None = None
    f0: float | None = None
    rho0: float = 1.0
    u_ref: float = 1.0
    c0_factor: float = 10.0
    h_factor: float = 1.0
    p_background_factor: float = 5.0
    k_multiple: int = 1
    jitter: float = 0.05
    divergence_free_variant: bool = False
    artificial_stress: bool = True
    relax_steps: int = 50
    relax_damping: float = 0.1

    def __post_init__(self):
        if self.case not in CASE_IDS:
            raise ValueError(f"unknown case {self.case!r}; expected one of {sorted(CASE_IDS)}")

    @property
    def box(self) -> PeriodicBox:
        return PeriodicBox(TGV_BOX if self.case == "tgv" else RPF_BOX)

    @property
    def dx(self) -> float:
        return (self.box.volume / self.n_particles) ** (1.0 / 3.0)

    @property
    def steps(self) -> int:
        if self.n_steps is not None:
            return self.n_steps
        return 1000 if self.case == "tgv" else 120000

    @property
    def stride(self) -> int:
        if self.subsample_every is not None:
            return self.subsample_every
        return 1 if self.case == "tgv" else 10

    @property
    def reynolds(self) -> float:
        if self.re is not None:
            return self.re
        return 100.0 if self.case == "tgv" else 10.0

    @property
    def force(self) -> float:
        if self.case != "rpf":
            return 0.0
        return 1.0 if self.f0 is None else self.f0

    def kernel(self) -> KernelSpec:
        return KernelSpec(self.h_factor * self.dx)

    def check(self) -> None:
        """Fail fast on settings the solver cannot run."""
        c = _cube_root(self.n_particles)
        if self.case == "rpf" and c % 2:
            raise NotACube(f"RPF lattice needs an even cube root, got {c}")
        support = self.kernel().support_radius
        if support > 0.5 * min(self.box.extents):
            raise RadiusTooLarge(
                f"kernel support {support:.4g} exceeds half the smallest box extent "
                f"{0.5 * min(self.box.extents):.4g}; use more particles or a smaller h_factor")

    def params(self) -> SphParams:
        L_ref = 1.0
        return SphParams(
            rho0=self.rho0,
            c0=self.c0_factor * self.u_ref,
            nu=self.u_ref * L_ref / self.reynolds,
            p_background=self.p_background_factor * self.rho0 * self.u_ref**2,
            dt=self.dt,
            f0=self.force,
            artificial_stress=self.artificial_stress,
        )


def relax_positions(state: SphState, params: SphParams, spec: KernelSpec, n_steps: int,
                    damping: float) -> SphState:
    """Damped zero-velocity run that bleeds off the pressure noise of a jittered lattice.

    Without it the stored compression energy of the jitter converts to
    kinetic energy during the first few steps of the real run.
    """
    st = replace(state, velocities=np.zeros_like(state.velocities))
    relax = replace(params, f0=0.0)
    for _ in range(n_steps):
        st = symplectic_euler_step(st, relax, spec)
        st.velocities *= 1.0 - damping
    return replace(st, velocities=np.zeros_like(st.velocities), time=state.time)


def initial_state(cfg: CaseConfig, seed=0) -> SphState:
    box = cfg.box
    k = 2 * math.pi * cfg.k_multiple
    if cfg.case == "tgv":
        frame = init_taylor_green(cfg.n_particles, k, seed, cfg.jitter,
                                  cfg.divergence_free_variant)
    else:
        frame, _ = init_reverse_poiseuille(cfg.n_particles, seed, cfg.force, cfg.jitter)
    mass = cfg.rho0 * box.volume / cfg.n_particles
    state = SphState(frame.positions, frame.velocities, np.full(cfg.n_particles, mass), box,
                     0.0, cfg.case)
    if cfg.case == "tgv" and cfg.jitter > 0 and cfg.relax_steps > 0:
        state = relax_positions(state, cfg.params(), cfg.kernel(), cfg.relax_steps,
                                cfg.relax_damping)
        state.velocities = taylor_green_velocity(state.positions, k,
                                                 cfg.divergence_free_variant)
    return state


def run_simulation(cfg: CaseConfig, seed=0, n_steps: int | None = None,
                   subsample_every: int | None = None, state: SphState | None = None,
                   progress=None) -> Trajectory:
    """Integrate the case and keep every ``subsample_every``-th state.

    The initial state is not stored, so ``n_steps // subsample_every``
    frames come back with spacing ``dt * subsample_every``.
    """
    n_steps = cfg.steps if n_steps is None else n_steps
    stride = cfg.stride if subsample_every is None else subsample_every
    if n_steps < 0 or stride < 1:
        raise ValueError("n_steps must be >= 0 and subsample_every >= 1")
    cfg.check()
    params = cfg.params()
    spec = cfg.kernel()
    check_cfl(params, spec)
    if state is None:
        state = initial_state(cfg, seed)
    traj = Trajectory(state.box, params.dt * stride, state.masses, [], cfg.case, cfg.force)
    for step in range(1, n_steps + 1):
        state = symplectic_euler_step(state, params, spec)
        if step % stride == 0:
            traj.frames.append(Frame(state.time, state.positions, state.velocities))
        if progress is not None:
            progress(step, state)
    return traj
