"""Training samples from trajectory windows.

All learned quantities live in *finite-difference units*: a velocity is the
position change per stored frame, ``v~^t = minimage(p^t - p^{t-1})``, and an
acceleration is ``v~^{t+1} - v~^t``.  Rollouts integrate in the same units,
so a learned step is ``v~ += a; p = wrap(p + v~)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .core import PeriodicBox, Trajectory, min_image_displacement, wrap_position
from .errors import EmptySplit, FrameOutOfRange
from .neighbor import build_neighbor_list

STD_FLOOR = 1e-8
DEFAULT_NOISE_STD = 6.7e-4


@dataclass
class NormStats:
    vel_mean: np.ndarray
    vel_std: np.ndarray
    acc_mean: np.ndarray
    acc_std: np.ndarray

    def __post_init__(self):
        for name in ("vel_mean", "vel_std", "acc_mean", "acc_std"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(3))
        self.vel_std = np.maximum(self.vel_std, STD_FLOOR)
        self.acc_std = np.maximum(self.acc_std, STD_FLOOR)

    @classmethod
    def identity(cls) -> "NormStats":
        return cls(np.zeros(3), np.ones(3), np.zeros(3), np.ones(3))

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("vel_mean", "vel_std", "acc_mean", "acc_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(**{k: np.asarray(v) for k, v in d.items()})


def fd_velocities(positions: np.ndarray, box: PeriodicBox) -> np.ndarray:
    """``(T, N, 3)`` positions -> ``(T - 1, N, 3)`` per-frame displacements."""
    return min_image_displacement(positions[1:], positions[:-1], box)


def compute_norm_stats(trajectories) -> NormStats:
    """Per-component mean/std of velocities and accelerations over a split."""
    vels, accs = [], []
    for traj in trajectories:
        if traj.n_frames < 3:
            continue
        v = fd_velocities(traj.positions(), traj.box)
        vels.append(v.reshape(-1, 3))
        accs.append((v[1:] - v[:-1]).reshape(-1, 3))
    if not vels:
        raise EmptySplit("need at least one trajectory with three or more frames")
    v = np.concatenate(vels)
    a = np.concatenate(accs)
    return NormStats(v.mean(0), v.std(0), a.mean(0), a.std(0))


@dataclass
class GraphSample:
    """One graph: nodes are particles, edges point sender -> receiver.

    ``offsets`` is the CSR row pointer over receivers (edges are grouped by
    receiver, senders ascending).  ``targets`` are normalized accelerations.
    """

    node_features: np.ndarray
    edge_features: np.ndarray
    senders: np.ndarray
    receivers: np.ndarray
    targets: np.ndarray | None = None
    positions: np.ndarray | None = None
    last_velocity: np.ndarray | None = None
    mean_velocity: np.ndarray | None = None
    case: str = "tgv"
    frame: int = -1
    mask: np.ndarray | None = None
    _ops: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def n_edges(self) -> int:
        return self.senders.shape[0]

    def scatter_matrix(self, which: str) -> sp.csr_matrix:
        """Sparse ``(N, E)`` incidence: ``S @ X`` sums edge rows into nodes."""
        if which not in self._ops:
            idx = self.receivers if which == "receivers" else self.senders
            e = idx.shape[0]
            self._ops[which] = sp.csr_matrix(
                (np.ones(e), (idx, np.arange(e))), shape=(self.n_nodes, e))
        return self._ops[which]


def random_walk_noise(rng: np.random.Generator, history: int, n: int, std) -> np.ndarray:
    """Velocity noise ``(H, n, 3)`` accumulated as a random walk.

    Increments have std ``std / sqrt(H)``, so the newest entry has std ``std``.
    ``std`` may be per-component.
    """
    step = np.asarray(std, dtype=np.float64) / math.sqrt(history)
    inc = rng.standard_normal((history, n, 3)) * step
    return np.cumsum(inc, axis=0)


def _edge_features(positions, senders, receivers, box, radius):
    disp = min_image_displacement(positions[receivers], positions[senders], box) / radius
    dist = np.linalg.norm(disp, axis=1, keepdims=True)
    return np.hstack([disp, dist]), disp * radius


def graph_from_window(window: np.ndarray, box: PeriodicBox, radius: float, stats: NormStats,
                      force=None) -> tuple:
    """Features from ``H + 1`` consecutive positions ``(H + 1, N, 3)``.

    Returns ``(node_features, edge_features, senders, receivers, offsets,
    velocities)``; ``velocities`` are the raw ``(H, N, 3)`` differences.
    """
    vel = fd_velocities(window, box)
    current = window[-1]
    nl = build_neighbor_list(current, box, radius)
    receivers = nl.rows()
    senders = nl.indices
    nodes = ((vel - stats.vel_mean) / stats.vel_std).transpose(1, 0, 2).reshape(len(current), -1)
    if force is not None:
        nodes = np.hstack([nodes, force])
    edges, _ = _edge_features(current, senders, receivers, box, radius)
    return nodes, edges, senders, receivers, nl.offsets, vel


def normalized_force(traj: Trajectory, positions, stats: NormStats) -> np.ndarray:
    """Body force per unit mass in normalized acceleration units."""
    f = traj.external_force(positions) * traj.dt**2
    return f / stats.acc_std


def build_sample(traj: Trajectory, t: int, history: int, radius: float,
                 noise_std: float = 0.0, stats: NormStats | None = None,
                 force_concat: bool = False, rng: np.random.Generator | None = None,
                 positions: np.ndarray | None = None) -> GraphSample:
    """Sample predicting the step ``t -> t + 1`` from ``H`` past velocities.

    Noise is added to the position history as a random walk on velocities
    (std ``noise_std`` in normalized velocity units at the newest entry); the
    target is taken relative to the noisy last position so the model learns to
    undo the perturbation.
    """
    stats = NormStats.identity() if stats is None else stats
    n_frames = traj.n_frames if positions is None else positions.shape[0]
    if not history <= t <= n_frames - 2:
        raise FrameOutOfRange(
            f"frame {t} needs {history} past and one future frame (have {n_frames})")
    P = traj.positions() if positions is None else positions
    box = traj.box
    window = P[t - history:t + 1].copy()
    n = window.shape[1]
    if noise_std > 0:
        if rng is None:
            raise ValueError("rng required when noise_std > 0")
        vnoise = random_walk_noise(rng, history, n, noise_std * stats.vel_std)
        window[1:] += np.cumsum(vnoise, axis=0)
        window = wrap_position(window, box)
    force = normalized_force(traj, window[-1], stats) if force_concat else None
    nodes, edges, senders, receivers, offsets, vel = graph_from_window(
        window, box, radius, stats, force)
    next_vel = min_image_displacement(P[t + 1], window[-1], box)
    acc = next_vel - vel[-1]
    targets = (acc - stats.acc_mean) / stats.acc_std
    return GraphSample(nodes, edges, senders, receivers, targets, window[-1], vel[-1],
                       vel.mean(0), traj.case, t)


def batch_samples(samples) -> GraphSample:
    """Disjoint union of several graphs."""
    if len(samples) == 1:
        return samples[0]
    shift = np.cumsum([0] + [s.n_nodes for s in samples[:-1]])
    cat = np.concatenate

    def opt(name):
        vals = [getattr(s, name) for s in samples]
        return None if any(v is None for v in vals) else cat(vals)

    masks = [s.mask if s.mask is not None else np.ones(s.n_nodes, bool) for s in samples]
    return GraphSample(
        cat([s.node_features for s in samples]),
        cat([s.edge_features for s in samples]),
        cat([s.senders + k for s, k in zip(samples, shift)]),
        cat([s.receivers + k for s, k in zip(samples, shift)]),
        opt("targets"), opt("positions"), opt("last_velocity"), opt("mean_velocity"),
        samples[0].case, -1,
        None if all(s.mask is None for s in samples) else cat(masks),
    )


# -- spherical harmonics ---------------------------------------------------

SH_ORDER = [(l, m) for l in range(3) for m in range(-l, l + 1)]
"""Coefficient layout: ``(0,0), (1,-1), (1,0), (1,1), (2,-2) ... (2,2)``."""


def sh_dim(l_max: int) -> int:
    return (l_max + 1) ** 2


def spherical_harmonics(v, l_max: int = 2) -> np.ndarray:
    """Real spherical harmonics of the direction of ``v``, component-normalized.

    Per degree ``l`` the squared coefficients sum to ``2l + 1``.  Degree 1 is
    ``sqrt(3) * (y, z, x)`` of the unit vector.  Zero vectors map to the
    degree-0 constant alone.  Accepts ``(3,)`` or ``(n, 3)``.
    """
    if l_max not in (0, 1, 2):
        raise ValueError("l_max must be 0, 1 or 2")
    arr = np.asarray(v, dtype=np.float64)
    single = arr.ndim == 1
    arr = arr.reshape(-1, 3)
    r = np.linalg.norm(arr, axis=1)
    nz = r > 0
    u = np.zeros_like(arr)
    u[nz] = arr[nz] / r[nz, None]
    x, y, z = u[:, 0], u[:, 1], u[:, 2]
    out = np.zeros((arr.shape[0], sh_dim(l_max)))
    out[:, 0] = 1.0
    if l_max >= 1:
        s3 = math.sqrt(3.0)
        out[:, 1], out[:, 2], out[:, 3] = s3 * y, s3 * z, s3 * x
    if l_max >= 2:
        s15, s5 = math.sqrt(15.0), math.sqrt(5.0)
        out[:, 4] = s15 * x * y
        out[:, 5] = s15 * y * z
        out[:, 6] = 0.5 * s5 * (2 * z * z - x * x - y * y)
        out[:, 7] = s15 * x * z
        out[:, 8] = 0.5 * s15 * (x * x - y * y)
        # direction undefined for zero vectors
        out[~nz, 1:] = 0.0
    elif l_max == 1:
        out[~nz, 1:] = 0.0
    return out[0] if single else out


def power_spectrum(coeffs: np.ndarray, l_max: int = 2) -> np.ndarray:
    """Per-degree sum of squared coefficients, shape ``(..., l_max + 1)``."""
    c = np.asarray(coeffs)
    return np.stack([np.sum(c[..., l * l:(l + 1) ** 2] ** 2, axis=-1) for l in range(l_max + 1)],
                    axis=-1)


def degree1_xyz(coeffs: np.ndarray) -> np.ndarray:
    """Reassemble the degree-1 block ``(y, z, x)`` into ``(x, y, z)`` order."""
    c = np.asarray(coeffs)
    return np.stack([c[..., 3], c[..., 1], c[..., 2]], axis=-1)


@dataclass
class SteerableAttributes:
    edge: np.ndarray
    node: np.ndarray
    l_max: int = 2


def steerable_node_attributes(positions, senders, receivers, mean_velocity, box: PeriodicBox,
                              l_max: int = 2) -> SteerableAttributes:
    """Edge attributes ``V(p_i - p_j)`` and node attributes
    ``V(mean past velocity) + sum of incident edge attributes``.

    ``i`` is the receiver of each edge.
    """
    p_ij = min_image_displacement(np.asarray(positions)[receivers],
                                  np.asarray(positions)[senders], box)
    edge = spherical_harmonics(p_ij, l_max).reshape(len(senders), sh_dim(l_max))
    node = spherical_harmonics(mean_velocity, l_max).reshape(-1, sh_dim(l_max)).copy()
    np.add.at(node, receivers, edge)
    return SteerableAttributes(edge, node, l_max)


def sample_attributes(sample: GraphSample, box: PeriodicBox, l_max: int = 2):
    return steerable_node_attributes(sample.positions, sample.senders, sample.receivers,
                                     sample.mean_velocity, box, l_max)


# -- sample sources --------------------------------------------------------

class SampleSource:
    """Uniformly samples ``(trajectory, frame)`` windows from a split."""

    def __init__(self, trajectories, history: int, radius: float, stats: NormStats,
                 noise_std: float = DEFAULT_NOISE_STD, force_concat: bool = False, seed=0):
        self.trajs = list(trajectories)
        self._pos = [t.positions() for t in self.trajs]
        self.history = history
        self.radius = radius
        self.stats = stats
        self.noise_std = noise_std
        self.force_concat = force_concat
        self.rng = np.random.default_rng(seed)
        self.windows = [(k, t) for k, tr in enumerate(self.trajs)
                        for t in range(history, tr.n_frames - 1)]
        if not self.windows:
            raise EmptySplit("no frame has enough history for a sample")

    def __len__(self):
        return len(self.windows)

    def sample(self, k: int | None = None) -> GraphSample:
        if k is None:
            k = int(self.rng.integers(len(self.windows)))
        ti, t = self.windows[k]
        return build_sample(self.trajs[ti], t, self.history, self.radius, self.noise_std,
                            self.stats, self.force_concat, self.rng, positions=self._pos[ti])

    def batch(self, size: int) -> GraphSample:
        return batch_samples([self.sample() for _ in range(size)])
