"""Deterministic overhead-camera world with exact multimodal ground truth.

The agent drives along a procedurally generated road painted on a large
texture map. Each frame is a rotated ``crop_size`` window of that map centred
on the agent, so optical flow and the obstacle distance field are closed-form
functions of the pose.

Coordinates: world units, ``x`` along the map columns and ``y`` along the map
rows. A crop pixel at array index ``[r, c]`` sits at body-frame offset
``(c - S/2, r - S/2)`` pixels from the agent, rotated by the heading.
"""

from __future__ import annotations

import dataclasses
import functools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from . import _rawio
from .errors import FormatError, OutOfBoundsError

DATASET_FORMAT = "compass-synth/1"
LABEL_COLUMNS = ("steering", "vx", "vy", "vz", "vyaw", "dx", "dy", "dtheta")
MODALITIES = ("rgb", "depth", "flow")

# lateral distance (units) over which a centreline offset maps to one radian of correction
LOOKAHEAD = 4.0
ROAD_HALF_WIDTH = 1.5
OBSTACLE_RADIUS = 0.6
OBSTACLE_BAND = 14.0


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


def rot2(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class WorldConfig:
    map_size: int = 768
    crop_size: int = 32
    n_obstacles: int = 120
    track_curvature_scale: float = 1.0
    texture_seed: int = 0
    environment_id: int = 0
    pixels_per_unit: float = 4.0
    speed: float = 1.0
    noise_scale: float = 1.0
    d_min: float = 0.05
    d_max: float = 10.0
    steering_gain: float = 1.0

    def __post_init__(self):
        if not 0 < self.crop_size < self.map_size:
            raise ValueError(f"need 0 < crop_size < map_size, got {self.crop_size}, {self.map_size}")
        if self.n_obstacles < 0:
            raise ValueError("n_obstacles must be >= 0")
        if self.pixels_per_unit <= 0 or self.speed < 0 or self.noise_scale < 0:
            raise ValueError("pixels_per_unit must be > 0; speed and noise_scale >= 0")
        if not 0 < self.d_min < self.d_max:
            raise ValueError("need 0 < d_min < d_max")

    @property
    def extent(self) -> float:
        """Side length of the map in world units."""
        return self.map_size / self.pixels_per_unit

    @property
    def margin(self) -> float:
        """Minimum distance from the map edge that keeps a rotated crop inside."""
        return (self.crop_size / 2 * math.sqrt(2) + 2) / self.pixels_per_unit

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def is_seen(environment_id: int) -> bool:
    """Default seen/unseen rule: even environments are seen during finetuning."""
    return environment_id % 2 == 0


@dataclass(frozen=True)
class Track:
    """Road centreline ``y = y_mid + scale * sum_k A_k sin(2 pi f_k x / L + phi_k)``."""

    y_mid: float
    length: float
    amplitudes: tuple
    frequencies: tuple
    phases: tuple
    scale: float

    def _terms(self, x):
        x = np.asarray(x, dtype=np.float64)[..., None]
        w = 2 * np.pi * np.asarray(self.frequencies) / self.length
        return np.asarray(self.amplitudes), w, w * x + np.asarray(self.phases)

    def center(self, x):
        a, _, arg = self._terms(x)
        return self.y_mid + self.scale * (a * np.sin(arg)).sum(-1)

    def slope(self, x):
        a, w, arg = self._terms(x)
        return self.scale * (a * w * np.cos(arg)).sum(-1)

    def heading(self, x):
        return np.arctan(self.slope(x))


def make_track(config: WorldConfig) -> Track:
    rng = np.random.default_rng([config.texture_seed, config.environment_id, 1])
    amps = rng.uniform(0.7, 1.0, 3) * np.array([4.0, 2.5, 1.5])
    freqs = rng.integers([1, 2, 4], [3, 5, 7]).astype(np.float64)
    phases = rng.uniform(0, 2 * np.pi, 3)
    return Track(
        y_mid=config.extent / 2,
        length=config.extent,
        amplitudes=tuple(amps),
        frequencies=tuple(freqs),
        phases=tuple(phases),
        scale=float(config.track_curvature_scale),
    )


@dataclass(frozen=True, eq=False)
class WorldMap:
    texture: np.ndarray  # (map_size, map_size, 3) float32 in [0, 1]
    obstacles: np.ndarray  # (n, 2) world units
    track: Track
    tree: cKDTree | None = field(repr=False, default=None)


def _unit(noise: np.ndarray) -> np.ndarray:
    return (noise - noise.mean()) / (noise.std() + 1e-12)


@functools.lru_cache(maxsize=8)
def build_world(config: WorldConfig) -> WorldMap:
    """Texture, obstacles and road for one environment (cached per config)."""
    rng = np.random.default_rng([config.texture_seed, config.environment_id, 0])
    n = config.map_size
    ppu = config.pixels_per_unit
    track = make_track(config)

    palette = rng.uniform(0.2, 0.9, size=(2, 3))
    road_color = rng.uniform(0.25, 0.45, size=3)
    obstacle_color = rng.uniform(0.0, 0.2, size=3)
    fine = np.tanh(_unit(ndimage.gaussian_filter(rng.standard_normal((n, n)), 1.5)))
    coarse = 1 / (1 + np.exp(-2 * _unit(ndimage.gaussian_filter(rng.standard_normal((n, n)), 16))))
    tex = palette[0] * (1 - coarse[..., None]) + palette[1] * coarse[..., None]
    tex = tex * (0.8 + 0.2 * fine[..., None])

    centers = (np.arange(n) + 0.5) / ppu
    yc = track.center(centers)  # per column
    dist = np.abs(centers[:, None] - yc[None, :])  # rows x cols, vertical distance to centreline
    road = dist < ROAD_HALF_WIDTH
    tex[road] = road_color * (0.9 + 0.1 * fine[road][:, None])
    edge = np.abs(dist - ROAD_HALF_WIDTH) < 0.2
    tex[edge] = 0.95

    ox = rng.uniform(0, config.extent, config.n_obstacles)
    oy = track.center(ox) + rng.uniform(-OBSTACLE_BAND, OBSTACLE_BAND, config.n_obstacles)
    obstacles = np.stack([ox, oy], axis=-1) if config.n_obstacles else np.zeros((0, 2))
    r_px = OBSTACLE_RADIUS * ppu
    for x, y in obstacles:
        cx, cy = x * ppu - 0.5, y * ppu - 0.5
        r0, r1 = max(int(cy - r_px) - 1, 0), min(int(cy + r_px) + 2, n)
        c0, c1 = max(int(cx - r_px) - 1, 0), min(int(cx + r_px) + 2, n)
        if r0 >= r1 or c0 >= c1:
            continue
        rr, cc = np.mgrid[r0:r1, c0:c1]
        disc = (rr - cy) ** 2 + (cc - cx) ** 2 <= r_px**2
        tex[r0:r1, c0:c1][disc] = obstacle_color

    tex = np.clip(tex, 0.0, 1.0).astype(np.float32)
    tree = cKDTree(obstacles) if len(obstacles) else None
    return WorldMap(texture=tex, obstacles=obstacles, track=track, tree=tree)


@dataclass(eq=False)
class AgentTrajectory:
    poses: np.ndarray  # (T, 3): x, y, theta
    altitude: np.ndarray  # (T,)
    centerline_offset: np.ndarray  # (T,) signed lateral offset from the road centre
    track_heading: np.ndarray  # (T,) road direction at the agent

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def commands(self) -> np.ndarray:
        """(T-1, 4) per-step (vx, vy, vz, vyaw) as finite differences."""
        d = np.diff(self.poses, axis=0)
        vz = np.diff(self.altitude)
        return np.stack([d[:, 0], d[:, 1], vz, wrap_angle(d[:, 2])], axis=-1)

    def arrays(self) -> dict:
        return {
            "poses": self.poses,
            "altitude": self.altitude,
            "centerline_offset": self.centerline_offset,
            "track_heading": self.track_heading,
        }

    @classmethod
    def stationary(cls, T: int, pose=(0.0, 0.0, 0.0)) -> "AgentTrajectory":
        return cls(
            poses=np.tile(np.asarray(pose, dtype=np.float64), (T, 1)),
            altitude=np.zeros(T),
            centerline_offset=np.zeros(T),
            track_heading=np.full(T, float(pose[2])),
        )


def _smooth_signal(rng: np.random.Generator, t: np.ndarray) -> np.ndarray:
    amps = rng.uniform(0.5, 1.0, 3) * rng.choice([-1.0, 1.0], 3)
    omega = rng.uniform(0.05, 0.3, 3)
    phase = rng.uniform(0, 2 * np.pi, 3)
    return (amps[:, None] * np.sin(omega[:, None] * t + phase[:, None])).sum(0) / 3


def generate_trajectory(config: WorldConfig, seed: int, T: int) -> AgentTrajectory:
    """Smooth agent motion along the environment's road."""
    if T < 2:
        raise ValueError(f"trajectory length T must be >= 2, got {T}")
    rng = np.random.default_rng([seed, config.environment_id, config.texture_seed, 2])
    track = make_track(config)
    noise = config.noise_scale
    t = np.arange(T + 1, dtype=np.float64)
    d_off, d_yaw, d_alt, d_speed = (_smooth_signal(rng, t) for _ in range(4))
    u0, o0, h0 = rng.uniform(0, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)

    u = config.speed * (1 + noise * 0.25 * d_speed)
    x = np.empty(T + 1)
    advance = float(u[:T].sum())
    room = config.extent - 2 * config.margin - advance
    if room < 0:
        raise ValueError(f"T={T} steps do not fit in a map of extent {config.extent:.1f}")
    x[0] = config.margin + u0 * room
    x[1:] = x[0] + np.cumsum(u[:T])

    o = np.empty(T + 1)
    h = np.empty(T + 1)
    o[0], h[0] = noise * o0, noise * h0
    for s in range(T):
        o[s + 1] = o[s] - 0.08 * o[s] + noise * 0.08 * d_off[s]
        h[s + 1] = h[s] - 0.15 * h[s] + noise * 0.12 * d_alt[s]

    slope = track.slope(x)
    theta = np.arctan2(slope[:T] * u[:T] + np.diff(o), u[:T]) + noise * 0.2 * d_yaw[:T]
    poses = np.stack([x[:T], track.center(x[:T]) + o[:T], wrap_angle(theta)], axis=-1)
    return AgentTrajectory(
        poses=poses,
        altitude=h[:T].copy(),
        centerline_offset=o[:T].copy(),
        track_heading=np.arctan(slope[:T]),
    )


def _crop_offsets(crop_size: int) -> np.ndarray:
    """(S, S, 2) body-frame pixel offsets (u along columns, v along rows)."""
    idx = np.arange(crop_size, dtype=np.float64) - crop_size / 2
    v, u = np.meshgrid(idx, idx, indexing="ij")
    return np.stack([u, v], axis=-1)


def crop_world_coords(config: WorldConfig, pose) -> np.ndarray:
    """(S, S, 2) world coordinates seen by each crop pixel at ``pose``."""
    x, y, theta = (float(p) for p in pose)
    p = _crop_offsets(config.crop_size) / config.pixels_per_unit
    return p @ rot2(theta).T + np.array([x, y])


def _check_bounds(config: WorldConfig, pose) -> None:
    x, y = float(pose[0]), float(pose[1])
    lo, hi = config.margin, config.extent - config.margin
    if not (lo <= x <= hi and lo <= y <= hi) or not np.isfinite([x, y]).all():
        raise OutOfBoundsError(f"pose ({x:.3f}, {y:.3f}) outside [{lo:.3f}, {hi:.3f}]^2")


def depth_at(config: WorldConfig, world: WorldMap, points: np.ndarray) -> np.ndarray:
    if world.tree is None:
        return np.full(points.shape[:-1], config.d_max)
    dist, _ = world.tree.query(points.reshape(-1, 2))
    return np.clip(dist.reshape(points.shape[:-1]), config.d_min, config.d_max)


def render_frame(config: WorldConfig, world: WorldMap, pose, altitude: float = 0.0):
    """Return ``(rgb, depth)`` for the camera crop at ``pose``.

    Altitude modulates overall brightness so the vertical channel is observable.
    """
    _check_bounds(config, pose)
    coords = crop_world_coords(config, pose)
    ppu = config.pixels_per_unit
    rows = coords[..., 1] * ppu - 0.5
    cols = coords[..., 0] * ppu - 0.5
    rgb = np.stack(
        [ndimage.map_coordinates(world.texture[..., ch], [rows, cols], order=1, mode="nearest") for ch in range(3)],
        axis=-1,
    ).astype(np.float64)
    rgb = np.clip(rgb * (1 + 0.25 * np.tanh(altitude)), 0.0, 1.0)
    return rgb, depth_at(config, world, coords)


def compute_flow(pose_t, pose_t1, crop_size: int = 32, pixels_per_unit: float = 4.0) -> np.ndarray:
    """Rigid flow (pixels/step) mapping each frame-t pixel to its frame-t+1 location."""
    x0, y0, th0 = (float(p) for p in pose_t)
    x1, y1, th1 = (float(p) for p in pose_t1)
    dth = th1 - th0
    shift = pixels_per_unit * (rot2(-th0) @ np.array([x1 - x0, y1 - y0]))
    p = _crop_offsets(crop_size)
    return (p - shift) @ rot2(-dth).T - p


def relative_pose(pose_a, pose_b) -> np.ndarray:
    """Pose of ``b`` expressed in the body frame of ``a``."""
    d = rot2(-float(pose_a[2])) @ (np.asarray(pose_b[:2], dtype=np.float64) - np.asarray(pose_a[:2]))
    return np.array([d[0], d[1], wrap_angle(float(pose_b[2]) - float(pose_a[2]))])


def task_labels(trajectory: AgentTrajectory, t: int, steering_gain: float = 1.0):
    """``(steering, velocity4, relpose)`` for step ``t`` -> ``t+1``."""
    T = len(trajectory)
    if not 0 <= t < T - 1:
        raise ValueError(f"label index t={t} outside [0, {T - 1})")
    pose = trajectory.poses[t]
    correction = wrap_angle(trajectory.track_heading[t] - pose[2]) - trajectory.centerline_offset[t] / LOOKAHEAD
    steering = 0.5 + float(np.clip(steering_gain * correction, -0.5, 0.5))
    velocity = trajectory.commands[t]
    return steering, velocity, relative_pose(pose, trajectory.poses[t + 1])


@dataclass
class FrameBundle:
    rgb: np.ndarray
    depth: np.ndarray
    flow: np.ndarray | None
    steering: float | None
    velocity: np.ndarray | None
    relpose: np.ndarray | None


@dataclass(eq=False)
class SequenceRecord:
    config: WorldConfig
    seed: int
    trajectory: AgentTrajectory
    rgb: np.ndarray  # (T, S, S, 3) float32
    depth: np.ndarray  # (T, S, S) float32
    flow: np.ndarray  # (T-1, S, S, 2) float32
    labels: np.ndarray  # (T-1, 8) float32, columns LABEL_COLUMNS

    def __len__(self) -> int:
        return len(self.rgb)

    @property
    def manifest(self) -> dict:
        return {
            "modalities": {name: list(getattr(self, name).shape) for name in MODALITIES},
            "labels": list(self.labels.shape),
            "label_columns": list(LABEL_COLUMNS),
            "dtype": "float32-le",
            "length": len(self),
        }

    def modality(self, name: str) -> np.ndarray:
        if name not in MODALITIES:
            raise KeyError(f"unknown modality {name!r}")
        return getattr(self, name)

    @property
    def frames(self) -> list[FrameBundle]:
        out = []
        for t in range(len(self)):
            has = t < len(self) - 1
            lab = self.labels[t] if has else None
            out.append(
                FrameBundle(
                    rgb=self.rgb[t],
                    depth=self.depth[t],
                    flow=self.flow[t] if has else None,
                    steering=float(lab[0]) if has else None,
                    velocity=lab[1:5] if has else None,
                    relpose=lab[5:8] if has else None,
                )
            )
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, SequenceRecord):
            return NotImplemented
        if self.config != other.config or self.seed != other.seed:
            return False
        mine = [self.rgb, self.depth, self.flow, self.labels, *self.trajectory.arrays().values()]
        theirs = [other.rgb, other.depth, other.flow, other.labels, *other.trajectory.arrays().values()]
        return all(a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in zip(mine, theirs))


def generate_sequence(config: WorldConfig, seed: int, T: int) -> SequenceRecord:
    traj = generate_trajectory(config, seed, T)
    world = build_world(config)
    S = config.crop_size
    rgb = np.empty((T, S, S, 3), dtype=np.float32)
    depth = np.empty((T, S, S), dtype=np.float32)
    for t in range(T):
        rgb[t], depth[t] = render_frame(config, world, traj.poses[t], traj.altitude[t])
    flow = np.empty((T - 1, S, S, 2), dtype=np.float32)
    labels = np.empty((T - 1, len(LABEL_COLUMNS)), dtype=np.float32)
    for t in range(T - 1):
        flow[t] = compute_flow(traj.poses[t], traj.poses[t + 1], S, config.pixels_per_unit)
        steering, vel, rel = task_labels(traj, t, config.steering_gain)
        labels[t] = [steering, *vel, *rel]
    return SequenceRecord(config, seed, traj, rgb, depth, flow, labels)


def _generate_job(job):
    config, seed, T = job
    return generate_sequence(config, seed, T)


def generate_dataset(jobs: Iterable[tuple[WorldConfig, int]], T: int, workers: int = 1) -> list[SequenceRecord]:
    """Generate one sequence per ``(config, seed)``; output order follows ``jobs``."""
    work = [(cfg, seed, T) for cfg, seed in jobs]
    if workers <= 1:
        return [_generate_job(j) for j in work]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_generate_job, work))


def environment_jobs(env_ids: Sequence[int], per_env: int, seed: int, base: WorldConfig | None = None):
    """``per_env`` sequence jobs for each environment id, seeds derived from ``seed``."""
    base = base or WorldConfig()
    jobs = []
    for env in env_ids:
        cfg = dataclasses.replace(base, environment_id=int(env))
        for k in range(per_env):
            jobs.append((cfg, seed * 100_003 + int(env) * 1009 + k))
    return jobs


# ---------------------------------------------------------------- dataset io

def write_dataset(records: Sequence[SequenceRecord], path) -> Path:
    if not records:
        raise ValueError("cannot write an empty dataset")
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    names = []
    for k, rec in enumerate(records):
        name = f"seq_{k:05d}"
        d = root / name
        d.mkdir(exist_ok=True)
        manifest = {
            "format": DATASET_FORMAT,
            "length": len(rec),
            "seed": rec.seed,
            "config": rec.config.to_dict(),
            "label_columns": list(LABEL_COLUMNS),
            "modalities": {m: _rawio.write_array(d / f"{m}.f32", rec.modality(m)) for m in MODALITIES},
            "labels": _rawio.write_array(d / "labels.f32", rec.labels),
            "trajectory": {k2: _rawio.write_array(d / f"{k2}.f64", v) for k2, v in rec.trajectory.arrays().items()},
        }
        _rawio.write_json(d / "manifest.json", manifest)
        names.append(name)
    _rawio.write_json(root / "index.json", {"format": DATASET_FORMAT, "sequences": names})
    return root


def _expected_shapes(m: dict) -> dict:
    T = int(m["length"])
    S = int(m["config"]["crop_size"])
    return {
        ("modalities", "rgb"): [T, S, S, 3],
        ("modalities", "depth"): [T, S, S],
        ("modalities", "flow"): [T - 1, S, S, 2],
        ("labels", None): [T - 1, len(LABEL_COLUMNS)],
        ("trajectory", "poses"): [T, 3],
        ("trajectory", "altitude"): [T],
        ("trajectory", "centerline_offset"): [T],
        ("trajectory", "track_heading"): [T],
    }


def read_sequence(seq_dir) -> SequenceRecord:
    d = Path(seq_dir)
    m = _rawio.read_json(d / "manifest.json")
    try:
        if m.get("format") != DATASET_FORMAT:
            raise FormatError(f"{d / 'manifest.json'}: unsupported format {m.get('format')!r}")
        entries = {}
        for (group, key), shape in _expected_shapes(m).items():
            entry = m[group] if key is None else m[group][key]
            if list(entry["shape"]) != shape:
                raise FormatError(f"{d / entry['file']}: manifest shape {entry['shape']} inconsistent with expected {shape}")
            entries[(group, key)] = entry
        config = WorldConfig.from_dict(m["config"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{d / 'manifest.json'}: missing field {exc}") from exc
    for entry in entries.values():
        _rawio.check_entry(d, entry)
    arr = {k: _rawio.read_array(d, e) for k, e in entries.items()}
    traj = AgentTrajectory(**{k: arr[("trajectory", k)] for k in ("poses", "altitude", "centerline_offset", "track_heading")})
    return SequenceRecord(
        config=config,
        seed=int(m["seed"]),
        trajectory=traj,
        rgb=arr[("modalities", "rgb")],
        depth=arr[("modalities", "depth")],
        flow=arr[("modalities", "flow")],
        labels=arr[("labels", None)],
    )


def read_dataset(path) -> list[SequenceRecord]:
    root = Path(path)
    index = _rawio.read_json(root / "index.json")
    if index.get("format") != DATASET_FORMAT or "sequences" not in index:
        raise FormatError(f"{root / 'index.json'}: not a {DATASET_FORMAT} dataset index")
    return [read_sequence(root / name) for name in index["sequences"]]
