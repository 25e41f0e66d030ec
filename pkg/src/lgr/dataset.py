"""Trajectory files, split manifests and dataset generation.

File layout (little-endian)::

    offset  type     field
    0       4s       magic "LGRT"
    4       u32      version
    8       u32      n_particles
    12      u32      n_frames
    16      u32      dims (= 3)
    20      f64      dt_stored
    28      3 x f64  box extents
    52      f64      particle mass
    60      u32      case id (0 = TGV, 1 = RPF)
    64      f64      force f0
    72      ...      zero padding up to 96 bytes
    96      f32      positions, frame-major, then particle, then xyz

Velocities are not stored; readers rebuild them from minimum-image position
differences.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import CASE_IDS, CASE_NAMES, Frame, PeriodicBox, Trajectory, min_image_displacement
from .errors import BadMagic, InsufficientData, TruncatedFile, VersionMismatch

MAGIC = b"LGRT"
VERSION = 1
_HEADER = struct.Struct("<4sIIIId3ddId")
HEADER_SIZE = 96  # _HEADER.size rounded up to a multiple of 32

TGV_COUNTS = (8, 2, 2)
RPF_COUNTS = (8000, 2000, 2000)
SPLITS = ("train", "valid", "test")


@dataclass(frozen=True)
class TrajectoryFileHeader:
    n_particles: int
    n_frames: int
    dt_stored: float
    box: tuple
    mass: float
    case_id: int
    force_f0: float
    dims: int = 3
    version: int = VERSION

    @property
    def case(self) -> str:
        return CASE_NAMES[self.case_id]

    @property
    def payload_bytes(self) -> int:
        return self.n_particles * self.n_frames * self.dims * 4

    def pack(self) -> bytes:
        raw = _HEADER.pack(MAGIC, self.version, self.n_particles, self.n_frames, self.dims,
                           self.dt_stored, *self.box, self.mass, self.case_id, self.force_f0)
        return raw.ljust(HEADER_SIZE, b"\0")

    @classmethod
    def unpack(cls, raw: bytes) -> "TrajectoryFileHeader":
        if len(raw) < HEADER_SIZE:
            raise TruncatedFile(f"header needs {HEADER_SIZE} bytes, got {len(raw)}")
        magic, version, n, t, dims, dt, bx, by, bz, mass, case_id, f0 = _HEADER.unpack(
            raw[:_HEADER.size])
        if magic != MAGIC:
            raise BadMagic(f"expected magic {MAGIC!r}, found {magic!r}")
        if version != VERSION:
            raise VersionMismatch(f"file version {version}, reader supports {VERSION}")
        if dims != 3:
            raise VersionMismatch(f"only 3D files are supported (dims={dims})")
        return cls(n, t, dt, (bx, by, bz), mass, case_id, f0, dims, version)


def write_trajectory(traj: Trajectory, path) -> None:
    masses = np.asarray(traj.masses)
    if traj.n_frames and not np.all(masses == masses[0]):
        raise ValueError("the file format stores a single uniform particle mass")
    header = TrajectoryFileHeader(
        n_particles=traj.n_particles,
        n_frames=traj.n_frames,
        dt_stored=float(traj.dt),
        box=tuple(float(x) for x in traj.box.extents),
        mass=float(masses[0]) if masses.size else 0.0,
        case_id=CASE_IDS[traj.case],
        force_f0=float(traj.force_f0),
    )
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(header.pack())
        for frame in traj.frames:
            fh.write(np.ascontiguousarray(frame.positions, dtype="<f4").tobytes())


def read_header(path) -> TrajectoryFileHeader:
    path = Path(path)
    with open(path, "rb") as fh:
        header = TrajectoryFileHeader.unpack(fh.read(HEADER_SIZE))
    size = path.stat().st_size
    if size < HEADER_SIZE + header.payload_bytes:
        raise TruncatedFile(
            f"{path}: expected {HEADER_SIZE + header.payload_bytes} bytes, found {size}")
    return header


def read_positions(path, start: int = 0, stop: int | None = None) -> tuple:
    """Raw float64 positions ``(stop - start, N, 3)`` plus the header."""
    header = read_header(path)
    stop = header.n_frames if stop is None else stop
    if not 0 <= start <= stop <= header.n_frames:
        raise IndexError(f"frame range [{start}, {stop}) outside [0, {header.n_frames})")
    frame_bytes = header.n_particles * 12
    with open(path, "rb") as fh:
        fh.seek(HEADER_SIZE + start * frame_bytes)
        buf = fh.read((stop - start) * frame_bytes)
    pos = np.frombuffer(buf, dtype="<f4").astype(np.float64)
    return pos.reshape(stop - start, header.n_particles, 3), header


def finite_difference_velocities(positions: np.ndarray, box: PeriodicBox, dt: float) -> np.ndarray:
    """``v^t = minimage(p^t - p^{t-1}) / dt``; the first frame copies the second."""
    v = np.zeros_like(positions)
    if positions.shape[0] > 1:
        v[1:] = min_image_displacement(positions[1:], positions[:-1], box) / dt
        v[0] = v[1]
    return v


def read_trajectory(path, start: int = 0, stop: int | None = None) -> Trajectory:
    """Load frames ``[start, stop)``; velocities come from position differences.

    When ``start > 0`` the preceding frame is read as well so that the first
    returned velocity is a real difference rather than the edge copy.
    """
    header = read_header(path)
    stop = header.n_frames if stop is None else stop
    lead = 1 if start > 0 else 0
    pos, _ = read_positions(path, start - lead, stop)
    box = PeriodicBox(header.box)
    vel = finite_difference_velocities(pos, box, header.dt_stored)
    frames = [Frame((start + k + 1) * header.dt_stored, pos[k + lead], vel[k + lead])
              for k in range(stop - start)]
    return Trajectory(box, header.dt_stored, np.full(header.n_particles, header.mass), frames,
                      header.case, header.force_f0)


# -- splits ----------------------------------------------------------------

@dataclass
class SplitManifest:
    entries: list = field(default_factory=list)  # (split, file, start, end)

    def split(self, name: str) -> list:
        return [(f, s, e) for sp, f, s, e in self.entries if sp == name]

    def files(self, name: str) -> list:
        return [f for f, _, _ in self.split(name)]

    def validate(self, root=None) -> None:
        by_file: dict = {}
        for _, f, s, e in self.entries:
            if not 0 <= s < e:
                raise ValueError(f"bad frame range [{s}, {e}) for {f}")
            by_file.setdefault(f, []).append((s, e))
            if root is not None:
                n = read_header(Path(root) / f).n_frames
                if e > n:
                    raise ValueError(f"{f} has {n} frames, manifest asks for {e}")
        for f, ranges in by_file.items():
            ranges.sort()
            for (s0, e0), (s1, _) in zip(ranges, ranges[1:]):
                if s1 < e0:
                    raise ValueError(f"overlapping ranges in {f}")

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for sp, f, s, e in self.entries:
                fh.write(f"{sp} {f} {s} {e}\n")

    @classmethod
    def read(cls, path) -> "SplitManifest":
        entries = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                sp, f, s, e = line.split()
                entries.append((sp, f, int(s), int(e)))
        return cls(entries)


def make_splits(case: str, files, counts=None) -> SplitManifest:
    """Whole-trajectory splits for TGV, contiguous frame ranges for RPF.

    ``files`` are paths (headers are read for frame counts).  Entries keep
    file *names* relative to the manifest directory.
    """
    files = [Path(f) for f in files]
    if case == "tgv":
        counts = TGV_COUNTS if counts is None else counts
        need = sum(counts)
        if len(files) < need:
            raise InsufficientData(f"TGV splits need {need} trajectories, got {len(files)}")
        entries, k = [], 0
        for sp, c in zip(SPLITS, counts):
            for f in files[k:k + c]:
                entries.append((sp, f.name, 0, read_header(f).n_frames))
            k += c
        return SplitManifest(entries)
    if case == "rpf":
        counts = RPF_COUNTS if counts is None else counts
        if len(files) != 1:
            raise InsufficientData(f"RPF splits expect one long trajectory, got {len(files)}")
        n = read_header(files[0]).n_frames
        if n < sum(counts):
            raise InsufficientData(f"RPF splits need {sum(counts)} frames, file has {n}")
        entries, s = [], 0
        for sp, c in zip(SPLITS, counts):
            entries.append((sp, files[0].name, s, s + c))
            s += c
        return SplitManifest(entries)
    raise ValueError(f"unknown case {case!r}")


def load_split(manifest: SplitManifest, root, split: str) -> list:
    """Trajectories for one split, each restricted to its frame range."""
    return [read_trajectory(Path(root) / f, s, e) for f, s, e in manifest.split(split)]


# -- generation ------------------------------------------------------------

TGV_SEEDS = tuple(range(12))
RPF_SEED = 100


def dataset_plan(tgv_cfg, rpf_cfg, tgv_seeds=TGV_SEEDS, rpf_seed=RPF_SEED) -> list:
    """Files the generator will write: ``(name, case_cfg, seed)``."""
    plan = [(f"tgv_{s:03d}.lgrt", tgv_cfg, s) for s in tgv_seeds]
    if rpf_cfg is not None:
        plan.append((f"rpf_{rpf_seed:03d}.lgrt", rpf_cfg, rpf_seed))
    return plan


def generate_dataset(out_dir, tgv_cfg, rpf_cfg, tgv_seeds=TGV_SEEDS, rpf_seed=RPF_SEED,
                     overwrite: bool = False, tgv_counts=None, rpf_counts=None,
                     log=None) -> dict:
    """Simulate every planned trajectory and write the two manifests.

    Refuses to touch a directory that already holds any planned file unless
    ``overwrite`` is set.
    """
    from .sph import run_simulation

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plan = dataset_plan(tgv_cfg, rpf_cfg, tgv_seeds, rpf_seed)
    for _, cfg, _ in plan:
        cfg.check()
    existing = [name for name, _, _ in plan if (out / name).exists()]
    existing += [m for m in ("tgv_manifest.txt", "rpf_manifest.txt") if (out / m).exists()]
    if existing and not overwrite:
        raise FileExistsError(
            f"{out} already contains {len(existing)} dataset file(s), e.g. {existing[0]}; "
            "pass overwrite to regenerate")
    written = {}
    for name, cfg, seed in plan:
        traj = run_simulation(cfg, seed)
        tmp = out / (name + ".part")
        write_trajectory(traj, tmp)
        os.replace(tmp, out / name)
        written[name] = traj.n_frames
        if log is not None:
            log(f"wrote {name}: N={traj.n_particles} T={traj.n_frames}")
    tgv_files = [out / n for n, c, _ in plan if c is tgv_cfg]
    manifests = {"tgv": make_splits("tgv", tgv_files, tgv_counts)}
    manifests["tgv"].write(out / "tgv_manifest.txt")
    if rpf_cfg is not None:
        rpf_files = [out / n for n, c, _ in plan if c is rpf_cfg]
        manifests["rpf"] = make_splits("rpf", rpf_files, rpf_counts)
        manifests["rpf"].write(out / "rpf_manifest.txt")
    return manifests
