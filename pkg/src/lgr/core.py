"""Periodic box arithmetic, particle state containers and kinetic energy.

Vectors are plain ``numpy`` arrays: a single ``Vec3`` is shape ``(3,)`` and a
particle set is ``(N, 3)``.  Everything is computed in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class PeriodicBox:
    """Orthogonal, fully periodic box ``[0, Lx) x [0, Ly) x [0, Lz)``."""

    extents: np.ndarray

    def __post_init__(self):
        ext = np.asarray(self.extents, dtype=np.float64).reshape(3)
        if not np.all(ext > 0) or not np.all(np.isfinite(ext)):
            raise ValueError(f"box extents must be positive and finite, got {ext}")
        object.__setattr__(self, "extents", ext)

    @classmethod
    def cube(cls, side: float = 1.0) -> "PeriodicBox":
        return cls(np.full(3, float(side)))

    @property
    def volume(self) -> float:
        return float(np.prod(self.extents))

    def __eq__(self, other):
        return isinstance(other, PeriodicBox) and np.array_equal(self.extents, other.extents)

    def __hash__(self):
        return hash(tuple(self.extents))


def wrap_position(p, box: PeriodicBox) -> np.ndarray:
    """Map positions into ``[0, L)`` along every axis.

    Works on a single vector or an ``(N, 3)`` array.
    """
    L = box.extents
    out = np.mod(np.asarray(p, dtype=np.float64), L)
    # np.mod can return exactly L for tiny negative inputs
    return np.where(out >= L, out - L, out)


def min_image_displacement(p_i, p_j, box: PeriodicBox) -> np.ndarray:
    """Displacement ``p_i - p_j`` reduced to the nearest periodic image.

    Components land in ``[-L/2, L/2]``; rounding is half-to-even, so the
    result is exactly antisymmetric under swapping the arguments.
    """
    L = box.extents
    d = np.asarray(p_i, dtype=np.float64) - np.asarray(p_j, dtype=np.float64)
    return d - L * np.rint(d / L)


def kinetic_energy(velocities, masses) -> float:
    """Total kinetic energy ``sum_i 0.5 m_i |v_i|^2``.

    ``velocities`` may also be a :class:`Frame`; ``masses`` a scalar or a
    per-particle array.
    """
    if isinstance(velocities, Frame):
        velocities = velocities.velocities
    v = np.asarray(velocities, dtype=np.float64).reshape(-1, 3)
    m = np.broadcast_to(np.asarray(masses, dtype=np.float64), (v.shape[0],))
    return float(0.5 * np.sum(m * np.einsum("ij,ij->i", v, v)))


@dataclass
class Frame:
    time: float
    positions: np.ndarray
    velocities: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.velocities = np.asarray(self.velocities, dtype=np.float64).reshape(-1, 3)
        if self.positions.shape != self.velocities.shape:
            raise ValueError("positions and velocities must have the same shape")

    @property
    def n_particles(self) -> int:
        return self.positions.shape[0]


CASE_IDS = {"tgv": 0, "rpf": 1}
CASE_NAMES = {v: k for k, v in CASE_IDS.items()}


@dataclass
class Trajectory:
    """Ordered frames of one particle system in a periodic box.

    ``dt`` is the spacing between *stored* frames (solver dt times the
    subsampling stride).
    """

    box: PeriodicBox
    dt: float
    masses: np.ndarray
    frames: list = field(default_factory=list)
    case: str = "tgv"
    force_f0: float = 0.0

    def __post_init__(self):
        self.masses = np.asarray(self.masses, dtype=np.float64).reshape(-1)
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def n_particles(self) -> int:
        return self.masses.shape[0]

    def positions(self) -> np.ndarray:
        """All positions stacked as ``(T, N, 3)``."""
        return np.stack([f.positions for f in self.frames])

    def velocities(self) -> np.ndarray:
        return np.stack([f.velocities for f in self.frames])

    def kinetic_energies(self) -> np.ndarray:
        return np.array([kinetic_energy(f.velocities, self.masses) for f in self.frames])

    def external_force(self, positions=None) -> np.ndarray:
        """Per-particle body force (acceleration) field of the case, ``(N, 3)``."""
        n = self.n_particles
        if self.case != "rpf" or self.force_f0 == 0.0:
            return np.zeros((n, 3))
        if positions is None:
            positions = self.frames[-1].positions
        return rpf_force(positions, self.force_f0, self.box)


def rpf_force(positions, f0: float, box: PeriodicBox) -> np.ndarray:
    """Opposing body forces: ``+f0 x`` in the lower half, ``-f0 x`` in the upper."""
    p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    half = 0.5 * box.extents[1]
    f = np.zeros_like(p)
    f[:, 0] = np.where(p[:, 1] < half, f0, -f0)
    return f
