"""Procedural skeleton motion and the binary/CSV motion file formats."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import MotionSequence
from .rng import stream

_AXES = np.eye(3)


@dataclass(frozen=True)
class SkeletonSpec:
    """Kinematic tree; ``direction[j]`` is the rest-pose unit offset from the parent."""

    parent: tuple[int, ...]
    bone_length: tuple[float, ...]
    direction: tuple[tuple[float, float, float], ...]

    def __post_init__(self):
        J = len(self.parent)
        if J < 1 or len(self.bone_length) != J or len(self.direction) != J:
            raise ValueError("parent, bone_length and direction must have one entry per joint")
        if self.parent[0] != 0:
            raise ValueError("joint 0 must be the root (its own parent)")
        for j in range(1, J):
            if not 0 <= self.parent[j] < j:
                raise ValueError(f"joint {j}: parent {self.parent[j]} must precede it")
            if self.bone_length[j] <= 0:
                raise ValueError(f"joint {j}: bone length must be positive")
            if abs(np.linalg.norm(self.direction[j]) - 1.0) > 1e-12:
                raise ValueError(f"joint {j}: direction must be a unit vector")

    @property
    def J(self) -> int:
        return len(self.parent)

    @property
    def offsets(self) -> np.ndarray:
        return np.asarray(self.direction) * np.asarray(self.bone_length)[:, None]


def default_skeleton() -> SkeletonSpec:
    """Nine joints: a three-joint spine plus an arm and a leg of three joints each."""
    up, down = (0.0, 0.0, 1.0), (0.0, 0.0, -1.0)
    return SkeletonSpec(
        parent=(0, 0, 1, 1, 3, 4, 0, 6, 7),
        bone_length=(0.0, 250.0, 200.0, 150.0, 280.0, 250.0, 100.0, 420.0, 400.0),
        direction=(up, up, up, (1.0, 0.0, 0.0), down, down, (-1.0, 0.0, 0.0), down, down),
    )


def chain_skeleton(J: int) -> SkeletonSpec:
    """Generic skeleton for other joint counts: three chains hanging off the root."""
    if J == 9:
        return default_skeleton()
    parent, length, direction = [0], [0.0], [(0.0, 0.0, 1.0)]
    heads = [0, 0, 0]
    dirs = [(0.0, 0.0, 1.0), (1.0, 0.0, 0.0), (-1.0, 0.0, 0.0)]
    for j in range(1, J):
        c = (j - 1) % 3
        parent.append(heads[c])
        length.append(150.0 + 25.0 * (j % 4))
        direction.append(dirs[c])
        heads[c] = j
    return SkeletonSpec(tuple(parent), tuple(length), tuple(direction))


@dataclass(frozen=True)
class SynthConfig:
    J: int = 9
    t_past: int = 10
    t_future: int = 10
    frame_rate: float = 25.0
    freq_band: tuple[float, float] = (0.3, 1.5)
    amp_band: tuple[float, float] = (0.1, 0.6)
    speed_band: tuple[float, float] = (0.0, 500.0)
    seed: int = 0
    n_samples: int = 1000

    def __post_init__(self):
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be positive")
        if self.t_past < 1 or self.t_future < 1:
            raise ValueError("t_past and t_future must be >= 1")
        for name in ("freq_band", "amp_band", "speed_band"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} must satisfy 0 <= low <= high, got {(lo, hi)}")

    @property
    def T(self) -> int:
        return self.t_past + self.t_future


def _rotation(axis: int, theta: np.ndarray) -> np.ndarray:
    """Stack of rotation matrices about a coordinate axis, shape ``(len(theta), 3, 3)``."""
    c, s = np.cos(theta), np.sin(theta)
    i, k = [a for a in range(3) if a != axis]
    R = np.zeros(theta.shape + (3, 3))
    R[:, axis, axis] = 1.0
    R[:, i, i] = c
    R[:, k, k] = c
    R[:, i, k] = -s
    R[:, k, i] = s
    return R


def generate_motion(spec: SkeletonSpec, cfg: SynthConfig, seed: int) -> MotionSequence:
    """Sinusoidal joint angles composed by forward kinematics; root moves linearly."""
    if spec.J != cfg.J:
        raise ValueError(f"skeleton has {spec.J} joints, config asks for {cfg.J}")
    rng = stream(seed, "motion")
    T = cfg.T
    t = np.arange(T) / cfg.frame_rate
    heading = rng.uniform(0.0, 2.0 * np.pi)
    speed = rng.uniform(*cfg.speed_band)
    velocity = speed * np.array([np.cos(heading), np.sin(heading), 0.0])

    pos = np.zeros((T, spec.J, 3))
    rot = np.zeros((T, spec.J, 3, 3))
    pos[:, 0] = t[:, None] * velocity
    rot[:, 0] = np.eye(3)
    offsets = spec.offsets
    for j in range(1, spec.J):
        amp = rng.uniform(*cfg.amp_band)
        freq = rng.uniform(*cfg.freq_band)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        axis = int(rng.integers(3))
        theta = amp * np.sin(2.0 * np.pi * freq * t + phase)
        p = spec.parent[j]
        rot[:, j] = rot[:, p] @ _rotation(axis, theta)
        pos[:, j] = pos[:, p] + rot[:, j] @ offsets[j]
    return MotionSequence(pos, cfg.t_past, cfg.t_future)


def generate_dataset(spec: SkeletonSpec, cfg: SynthConfig, n: int, seed: int, purpose: str) -> list[MotionSequence]:
    out = []
    for i in range(n):
        s = int(stream(seed, "dataset", purpose, i).integers(2**63))
        out.append(generate_motion(spec, cfg, s))
    return out


# ---------------------------------------------------------------------------
# motion files

MOTION_MAGIC = b"MOTN1"
_HEADER = struct.Struct("<5sIII")
MAX_ELEMENTS = 1 << 28


class MotionFileError(ValueError):
    """Base class for unreadable motion files."""


class MotionHeaderError(MotionFileError):
    pass


class MotionTruncatedError(MotionFileError):
    pass


class MotionDimensionError(MotionFileError):
    pass


def write_motion(path: str | Path, x: MotionSequence) -> None:
    path = Path(path)
    payload = np.ascontiguousarray(x.coords, dtype="<f8").tobytes()
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(_HEADER.pack(MOTION_MAGIC, x.T, x.J, x.t_past) + payload)
    tmp.replace(path)


def read_motion(path: str | Path) -> MotionSequence:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise MotionHeaderError(f"{path}: {len(buf)} bytes is shorter than the header")
    magic, T, J, t_past = _HEADER.unpack_from(buf)
    if magic != MOTION_MAGIC:
        raise MotionHeaderError(f"{path}: bad magic {magic!r}")
    if T < 2 or J < 1 or not 1 <= t_past < T:
        raise MotionHeaderError(f"{path}: invalid dimensions T={T}, J={J}, T_p={t_past}")
    n = T * J * 3
    if n > MAX_ELEMENTS:
        raise MotionDimensionError(f"{path}: T*J*3={n} exceeds {MAX_ELEMENTS}")
    have = len(buf) - _HEADER.size
    if have < 8 * n:
        raise MotionTruncatedError(f"{path}: payload has {have // 8} floats, expected {n}")
    if have > 8 * n:
        raise MotionFileError(f"{path}: {have - 8 * n} trailing bytes")
    coords = np.frombuffer(buf, dtype="<f8", count=n, offset=_HEADER.size).reshape(T, J, 3)
    return MotionSequence(coords.astype(np.float64), t_past, T - t_past)


def read_motion_csv(path: str | Path, t_past: int) -> MotionSequence:
    """Rows ``t,j,x,y,z`` in any order; every (t, j) must appear exactly once."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["t", "j", "x", "y", "z"]:
            raise MotionHeaderError(f"{path}: expected header t,j,x,y,z")
        rows = [r for r in reader if r]
    if not rows:
        raise MotionTruncatedError(f"{path}: no coordinate rows")
    idx = np.array([[int(r[0]), int(r[1])] for r in rows])
    vals = np.array([[float(v) for v in r[2:5]] for r in rows])
    if idx.min() < 0:
        raise MotionFileError(f"{path}: negative frame or joint index")
    T, J = idx[:, 0].max() + 1, idx[:, 1].max() + 1
    if T * J * 3 > MAX_ELEMENTS:
        raise MotionDimensionError(f"{path}: T*J*3={T * J * 3} exceeds {MAX_ELEMENTS}")
    coords = np.full((T, J, 3), np.nan)
    seen = np.zeros((T, J), dtype=bool)
    for (t, j), v in zip(idx, vals):
        if seen[t, j]:
            raise MotionFileError(f"{path}: duplicate row for t={t}, j={j}")
        seen[t, j] = True
        coords[t, j] = v
    if not seen.all():
        raise MotionTruncatedError(f"{path}: {int((~seen).sum())} (t, j) pairs missing")
    return MotionSequence(coords, t_past, T - t_past)


def write_motion_csv(path: str | Path, x: MotionSequence) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "j", "x", "y", "z"])
        for t in range(x.T):
            for j in range(x.J):
                w.writerow([t, j, *(repr(float(v)) for v in x.coords[t, j])])
    tmp.replace(path)
