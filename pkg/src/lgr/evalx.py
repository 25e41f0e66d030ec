"""Autoregressive rollouts and the evaluation measures used to compare them.

A *predictor* is any callable ``GraphSample -> (N, 3)`` returning normalized
accelerations.  A predictor with attribute ``physical = True`` returns raw
finite-difference accelerations instead; the scripted baselines use this so
that "zero acceleration" is exactly zero.
"""

from __future__ import annotations

import csv
import math
import time
import warnings
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .core import Frame, PeriodicBox, Trajectory, min_image_displacement, wrap_position
from .errors import Diverged, NotConverged, ShapeMismatch
from .features import GraphSample, NormStats, graph_from_window, normalized_force

DIVERGENCE_FACTOR = 1e3


class ZeroAcceleration:
    """Baseline that keeps every particle at its last velocity."""

    physical = True

    def __call__(self, sample: GraphSample) -> np.ndarray:
        return np.zeros((sample.n_nodes, 3))


class GroundTruthOracle:
    """Reads the acceleration that lands exactly on the reference next frame.

    ``reference`` holds all positions ``(T, N, 3)``; the sample's ``frame``
    attribute is the index of its current (last history) frame.
    """

    physical = True

    def __init__(self, reference: np.ndarray, box: PeriodicBox):
        self.reference = np.asarray(reference, dtype=np.float64)
        self.box = box

    def __call__(self, sample: GraphSample) -> np.ndarray:
        target = self.reference[sample.frame + 1]
        step = min_image_displacement(target, sample.positions, self.box)
        return step - sample.last_velocity


def _physical_acceleration(predictor, sample: GraphSample, stats: NormStats) -> np.ndarray:
    out = np.asarray(predictor(sample), dtype=np.float64)
    if getattr(predictor, "physical", False):
        return out
    return out * stats.acc_std + stats.acc_mean


def rollout(predictor, history: np.ndarray, n_steps: int, radius: float, stats: NormStats,
            box: PeriodicBox, dt: float = 1.0, masses=None, case: str = "tgv",
            force_f0: float = 0.0, force_concat: bool = False, start_frame: int = 0,
            t0: float = 0.0) -> Trajectory:
    """Advance ``n_steps`` from a position history ``(H + 1, N, 3)``.

    Every step rebuilds the graph from the sliding window, applies
    ``v~ += a; p = wrap(p + v~)`` and appends a frame whose velocity is
    ``v~ / dt``.  ``start_frame`` labels the last history frame, so step ``k``
    passes ``frame = start_frame + k`` to the predictor.
    """
    window = np.array(history, dtype=np.float64)
    if window.ndim != 3 or window.shape[0] < 2 or window.shape[2] != 3:
        raise ShapeMismatch(f"history must be (H + 1, N, 3), got {window.shape}")
    n = window.shape[1]
    masses = np.ones(n) if masses is None else np.broadcast_to(np.asarray(masses, float), (n,))
    template = Trajectory(box, dt, masses, [], case, force_f0)
    limit = DIVERGENCE_FACTOR * float(np.max(stats.vel_std))
    frames = []
    for k in range(n_steps):
        force = normalized_force(template, window[-1], stats) if force_concat else None
        nodes, edges, senders, receivers, _, vel = graph_from_window(window, box, radius, stats, force)
        sample = GraphSample(nodes, edges, senders, receivers, None, window[-1], vel[-1],
                             vel.mean(0), case, start_frame + k)
        acc = _physical_acceleration(predictor, sample, stats)
        v_new = vel[-1] + acc
        if not np.all(np.isfinite(v_new)) or np.max(np.linalg.norm(v_new, axis=1)) > limit:
            raise Diverged(f"rollout diverged at step {k + 1}: |v~| above {limit:.3g}")
        p_new = wrap_position(window[-1] + v_new, box)
        frames.append(Frame(t0 + (k + 1) * dt, p_new, v_new / dt))
        window = np.concatenate([window[1:], p_new[None]])
    return Trajectory(box, dt, masses, frames, case, force_f0)


def rollout_from_trajectory(predictor, traj: Trajectory, start: int, history: int, n_steps: int,
                            radius: float, stats: NormStats, force_concat: bool = False):
    """Roll out from frame ``start`` of ``traj``; returns ``(predicted, reference)``.

    The reference holds frames ``start + 1 ... start + n_steps``.
    """
    if not history <= start <= traj.n_frames - 1 - n_steps:
        raise IndexError(
            f"start {start} needs {history} past and {n_steps} future frames (have {traj.n_frames})")
    pos = traj.positions()
    pred = rollout(predictor, pos[start - history:start + 1], n_steps, radius, stats, traj.box,
                   traj.dt, traj.masses, traj.case, traj.force_f0, force_concat, start,
                   traj.frames[start].time)
    ref = Trajectory(traj.box, traj.dt, traj.masses, traj.frames[start + 1:start + 1 + n_steps],
                     traj.case, traj.force_f0)
    return pred, ref


# -- metrics ---------------------------------------------------------------

def _positions(x) -> np.ndarray:
    return x.positions if isinstance(x, Frame) else np.asarray(x, dtype=np.float64)


def mse_positions(pred, ref, box: PeriodicBox) -> float:
    """Mean over particles and components of the squared min-image error."""
    p, r = _positions(pred), _positions(ref)
    if p.shape != r.shape:
        raise ShapeMismatch(f"prediction {p.shape} vs reference {r.shape}")
    d = min_image_displacement(p, r, box)
    return float(np.mean(d * d))


def position_errors(pred, ref, box: PeriodicBox) -> np.ndarray:
    """Per-particle min-image distance to the reference."""
    d = min_image_displacement(_positions(pred), _positions(ref), box)
    return np.linalg.norm(d, axis=-1)


def _energies(x, masses) -> np.ndarray:
    if isinstance(x, Trajectory):
        return x.kinetic_energies()
    return np.asarray(x, dtype=np.float64).reshape(-1)


def mse_kinetic_energy(pred, ref, masses=None) -> float:
    """Mean over steps of the squared kinetic-energy difference.

    Accepts trajectories or precomputed per-step energy arrays.
    """
    ep, er = _energies(pred, masses), _energies(ref, masses)
    if ep.shape != er.shape:
        raise ShapeMismatch(f"{ep.shape[0]} predicted steps vs {er.shape[0]} reference steps")
    return float(np.mean((ep - er) ** 2))


# -- Sinkhorn divergence ---------------------------------------------------

def cost_matrix(x, y, box: PeriodicBox) -> np.ndarray:
    """Squared min-image distances ``C_ij = |x_i - y_j|^2``."""
    d = min_image_displacement(x[:, None, :], y[None, :, :], box)
    return np.einsum("ijk,ijk->ij", d, d)


@nb.njit(cache=True, fastmath=True)
def _softmin(C, logw, pot, eps, out):
    """``out_i = -eps * log sum_j exp(logw_j + (pot_j - C_ij) / eps)``."""
    n, m = C.shape
    z = np.empty(m)
    inv = 1.0 / eps
    for i in range(n):
        best = -np.inf
        for j in range(m):
            zj = logw[j] + (pot[j] - C[i, j]) * inv
            z[j] = zj
            if zj > best:
                best = zj
        s = 0.0
        for j in range(m):
            s += np.exp(z[j] - best)
        out[i] = -eps * (best + np.log(s))


@nb.njit(cache=True, fastmath=True)
def _marginal_error(C, loga, logb, f, g, eps):
    """L1 violations of the row and column marginals of the current plan."""
    n, m = C.shape
    rows = np.zeros(n)
    cols = np.zeros(m)
    inv = 1.0 / eps
    for i in range(n):
        for j in range(m):
            pij = np.exp(loga[i] + logb[j] + (f[i] + g[j] - C[i, j]) * inv)
            rows[i] += pij
            cols[j] += pij
    er = 0.0
    for i in range(n):
        er += abs(rows[i] - np.exp(loga[i]))
    ec = 0.0
    for j in range(m):
        ec += abs(cols[j] - np.exp(logb[j]))
    return max(er, ec)


@dataclass
class OtResult:
    value: float
    violation: float
    iterations: int
    converged: bool


def _eps_schedule(C_max: float, eps: float, scaling: float) -> list:
    out = []
    e = max(C_max, eps)
    while e > eps:
        out.append(e)
        e *= scaling
    return out


def entropic_ot(x, y, box: PeriodicBox, eps: float, max_iter: int = 1000, tol: float = 1e-9,
                scaling: float = 0.5, check_every: int = 5) -> OtResult:
    """Entropic OT cost between two uniform clouds, log-domain Sinkhorn.

    Both dual potentials are updated simultaneously from the previous pair
    and averaged with it, so swapping ``x`` and ``y`` runs the very same
    arithmetic (plain simultaneous updates would oscillate between two
    interleaved sequences).  ``eps`` is annealed geometrically from the
    largest cost down to the target, then iterations continue at the target
    until the L1 marginal violation drops below ``tol`` or ``max_iter`` is
    reached.  The
    returned value is the dual objective ``<a, f> + <b, g>``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    y = np.asarray(y, dtype=np.float64).reshape(-1, 3)
    n, m = len(x), len(y)
    C = cost_matrix(x, y, box)
    CT = np.ascontiguousarray(C.T)
    loga = np.full(n, -math.log(n))
    logb = np.full(m, -math.log(m))
    f, g = np.zeros(n), np.zeros(m)
    f_new, g_new = np.empty(n), np.empty(m)

    def sweep(e):
        _softmin(C, logb, g, e, f_new)
        _softmin(CT, loga, f, e, g_new)
        f[:] = 0.5 * (f + f_new)
        g[:] = 0.5 * (g + g_new)

    schedule = _eps_schedule(float(C.max()), eps, scaling)
    for e in schedule:
        sweep(e)
    it, violation = len(schedule), math.inf
    while it < max_iter:
        sweep(eps)
        it += 1
        if it % check_every == 0 or it >= max_iter:
            violation = _marginal_error(C, loga, logb, f, g, eps)
            if violation < tol:
                break
    value = float(np.exp(loga) @ f + np.exp(logb) @ g)
    return OtResult(value, float(violation), it, violation < tol)


def entropic_ot_self(x, box: PeriodicBox, eps: float, max_iter: int = 1000, tol: float = 1e-9,
                     scaling: float = 0.5, check_every: int = 5) -> OtResult:
    """``OT(x, x)`` via the symmetric fixed point ``f <- (f + T(f)) / 2``.

    The self-transport potential is unique and this averaged iteration
    converges far faster than the two-sided one.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    n = len(x)
    C = cost_matrix(x, x, box)
    loga = np.full(n, -math.log(n))
    f, f_new = np.zeros(n), np.empty(n)
    schedule = _eps_schedule(float(C.max()), eps, scaling)
    for e in schedule:
        _softmin(C, loga, f, e, f_new)
        f[:] = 0.5 * (f + f_new)
    it, violation = len(schedule), math.inf
    while it < max_iter:
        _softmin(C, loga, f, eps, f_new)
        f[:] = 0.5 * (f + f_new)
        it += 1
        if it % check_every == 0 or it >= max_iter:
            violation = _marginal_error(C, loga, loga, f, f, eps)
            if violation < tol:
                break
    value = float(2.0 * np.exp(loga) @ f)
    return OtResult(value, float(violation), it, violation < tol)


def mean_nn_distance(x, box: PeriodicBox) -> float:
    """Mean distance from each point to its nearest other point (min-image)."""
    from scipy.spatial import cKDTree

    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(x) < 2:
        return 0.0
    L = np.asarray(box.extents)
    tree = cKDTree(wrap_position(x, box) % L, boxsize=L)
    d, _ = tree.query(wrap_position(x, box) % L, k=2)
    return float(d[:, 1].mean())


def default_eps(x, box: PeriodicBox) -> float:
    nn = mean_nn_distance(x, box)
    if nn == 0.0:
        nn = 0.1 * min(box.extents)
    return 0.01 * nn * nn


def sinkhorn_divergence(x, y, box: PeriodicBox, eps: float | None = None, max_iter: int = 1000,
                        tol: float = 1e-9, raw: bool = False) -> float:
    """Debiased ``S(X, Y) = OT(X, Y) - OT(X, X)/2 - OT(Y, Y)/2`` (or raw ``OT``).

    Squared min-image cost, uniform weights.  ``eps`` defaults to one hundredth
    of the squared mean nearest-neighbour distance, averaged over both clouds
    so that the result is symmetric in its arguments.  If any of the
    transport problems stops at ``max_iter`` a :class:`NotConverged` warning
    carries the worst violation; the value is still returned.
    """
    eps = 0.5 * (default_eps(x, box) + default_eps(y, box)) if eps is None else float(eps)
    runs = [entropic_ot(x, y, box, eps, max_iter, tol)]
    if not raw:
        runs.append(entropic_ot_self(x, box, eps, max_iter, tol))
        runs.append(entropic_ot_self(y, box, eps, max_iter, tol))
        value = runs[0].value - 0.5 * runs[1].value - 0.5 * runs[2].value
    else:
        value = runs[0].value
    bad = [r for r in runs if not r.converged]
    if bad:
        worst = max(r.violation for r in bad)
        warnings.warn(NotConverged(
            f"Sinkhorn stopped after {max_iter} iterations, marginal violation {worst:.3g}",
            worst, value), stacklevel=2)
    return float(value)


# -- reports ---------------------------------------------------------------

@dataclass
class RolloutReport:
    mse_p: np.ndarray
    e_kin_pred: np.ndarray
    e_kin_ref: np.ndarray
    sinkhorn: np.ndarray  # NaN where not evaluated
    time_ms: float = float("nan")
    n_params: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return len(self.mse_p)

    @property
    def MSE_p(self) -> float:
        return float(np.mean(self.mse_p))

    @property
    def MSE_Ekin(self) -> float:
        return float(np.mean((self.e_kin_pred - self.e_kin_ref) ** 2))

    @property
    def sinkhorn_mean(self) -> float:
        s = self.sinkhorn[np.isfinite(self.sinkhorn)]
        return float(s.mean()) if s.size else float("nan")

    def summary(self) -> dict:
        return {"MSE_p": self.MSE_p, "MSE_Ekin": self.MSE_Ekin, "Sinkhorn": self.sinkhorn_mean,
                "Time [ms]": self.time_ms, "# params": self.n_params}


def evaluate(pred: Trajectory, ref: Trajectory, sinkhorn_every: int = 10, eps: float | None = None,
             sinkhorn_points: int | None = None, seed=0, max_iter: int = 1000,
             tol: float = 1e-9) -> RolloutReport:
    """Per-step metrics of a rollout against its reference.

    Sinkhorn is evaluated on steps ``sinkhorn_every, 2 * sinkhorn_every, ...``
    (``0`` disables it).  ``sinkhorn_points`` restricts it to a fixed random
    subset of particle ids, identical on both sides.
    """
    if pred.n_frames != ref.n_frames or pred.n_particles != ref.n_particles:
        raise ShapeMismatch(
            f"prediction {pred.n_frames}x{pred.n_particles} vs reference {ref.n_frames}x{ref.n_particles}")
    box = ref.box
    mse = np.array([mse_positions(a, b, box) for a, b in zip(pred.frames, ref.frames)])
    sink = np.full(pred.n_frames, np.nan)
    if sinkhorn_every:
        ids = slice(None)
        if sinkhorn_points is not None and sinkhorn_points < pred.n_particles:
            ids = np.sort(np.random.default_rng(seed).choice(pred.n_particles, sinkhorn_points,
                                                             replace=False))
        for k in range(sinkhorn_every - 1, pred.n_frames, sinkhorn_every):
            sink[k] = sinkhorn_divergence(pred.frames[k].positions[ids],
                                          ref.frames[k].positions[ids], box, eps, max_iter, tol)
    return RolloutReport(mse, pred.kinetic_energies(), ref.kinetic_energies(), sink)


def combine_reports(reports) -> RolloutReport:
    """Per-step means over several equally long rollouts."""
    def mean(name):
        arr = np.stack([getattr(r, name) for r in reports])
        if name == "sinkhorn":
            out = np.full(arr.shape[1], np.nan)
            seen = np.isfinite(arr).any(axis=0)
            out[seen] = np.nanmean(arr[:, seen], axis=0)
            return out
        return arr.mean(axis=0)

    return RolloutReport(mean("mse_p"), mean("e_kin_pred"), mean("e_kin_ref"), mean("sinkhorn"),
                         reports[0].time_ms, reports[0].n_params)


METRIC_COLUMNS = ("step", "mse_p", "e_kin_pred", "e_kin_ref", "sinkhorn")
FIELD_COLUMNS = ("x", "y", "z", "vx", "vy", "vz", "|v|", "pos_error")


def export_csv(obj, path, what: str = "metrics", ref: Frame | None = None,
               box: PeriodicBox | None = None) -> None:
    """Write a metrics table (one row per step) or a per-particle field slice.

    ``what="metrics"`` expects a :class:`RolloutReport`; ``what="field"``
    expects a :class:`Frame` plus its reference frame and box for the
    ``pos_error`` column.  Sinkhorn cells are empty on unsampled steps.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if what == "metrics":
            w.writerow(METRIC_COLUMNS)
            for k in range(obj.n_steps):
                s = obj.sinkhorn[k]
                w.writerow([k + 1, repr(float(obj.mse_p[k])), repr(float(obj.e_kin_pred[k])),
                            repr(float(obj.e_kin_ref[k])), "" if not np.isfinite(s) else repr(float(s))])
        elif what == "field":
            if ref is None or box is None:
                raise ValueError("field export needs the reference frame and box")
            err = position_errors(obj, ref, box)
            speed = np.linalg.norm(obj.velocities, axis=1)
            w.writerow(FIELD_COLUMNS)
            for p, v, s, e in zip(obj.positions, obj.velocities, speed, err):
                w.writerow([repr(float(c)) for c in (*p, *v, s, e)])
        else:
            raise ValueError(f"unknown export kind {what!r}")


def measure_inference_time(predictor, window: np.ndarray, box: PeriodicBox, radius: float,
                           stats: NormStats, n_repeats: int = 10, warmup: int = 3) -> float:
    """Median milliseconds for one rollout step: graph rebuild plus forward pass."""
    window = np.asarray(window, dtype=np.float64)
    times = []
    for k in range(max(warmup, 3) + n_repeats):
        t0 = time.perf_counter()
        nodes, edges, senders, receivers, _, vel = graph_from_window(window, box, radius, stats)
        sample = GraphSample(nodes, edges, senders, receivers, None, window[-1], vel[-1],
                             vel.mean(0))
        predictor(sample)
        dt = time.perf_counter() - t0
        if k >= max(warmup, 3):
            times.append(dt)
    return 1e3 * float(np.median(times))


__all__ = [
    "ZeroAcceleration", "GroundTruthOracle", "rollout", "rollout_from_trajectory",
    "mse_positions", "position_errors", "mse_kinetic_energy", "entropic_ot", "entropic_ot_self", "OtResult", "cost_matrix",
    "sinkhorn_divergence", "default_eps", "mean_nn_distance", "RolloutReport", "evaluate", "combine_reports",
    "export_csv", "measure_inference_time",
]
