"""Ground-truth trajectories and noisy beacon-distance measurements.

Datasets are stored as ``.npz`` archives (one per split) plus a JSON
manifest. Every trajectory carries its own 64-bit seed; rebuilding a
``Philox`` generator from that seed reproduces the trajectory exactly.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .environment import K_MEASURE
from .errors import DataError, SimulationError, ValidationError

TWO_PI = 2.0 * math.pi
SPLITS = ("train", "val", "test")


def wrap_angle(a):
    """Wrap into [0, 2*pi)."""
    w = np.mod(a, TWO_PI)
    # np.mod returns exactly 2*pi for tiny negative inputs
    if np.ndim(w):
        w[w >= TWO_PI] = 0.0
        return w
    return 0.0 if w >= TWO_PI else float(w)


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    alpha: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "alpha", wrap_angle(float(self.alpha)))

    @property
    def c(self):
        return np.array([self.x, self.y])

    def as_array(self):
        return np.array([self.x, self.y, self.alpha])


@dataclass(frozen=True)
class MotionNoiseConfig:
    speed_min: float = 0.0
    speed_max: float = 0.2
    speed_noise_halfwidth: float = 0.02
    heading_noise_fraction: float = 0.01
    measurement_noise_halfwidth: float = 0.1
    k_measure: int = K_MEASURE
    object_radius: float = 0.0
    max_retries: int = 100

    def __post_init__(self):
        for name in ("speed_noise_halfwidth", "heading_noise_fraction",
                     "measurement_noise_halfwidth", "object_radius"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if self.speed_min > self.speed_max:
            raise ValidationError("speed_min must not exceed speed_max")
        if self.k_measure < 1:
            raise ValidationError("k_measure must be >= 1")

    @classmethod
    def noiseless(cls, **kw):
        base = dict(speed_noise_halfwidth=0.0, heading_noise_fraction=0.0, measurement_noise_halfwidth=0.0)
        base.update(kw)
        return cls(**base)


@dataclass
class Step:
    pose_true: Pose
    control_speed: float
    measurement: np.ndarray


@dataclass
class Trajectory:
    env_id: str
    initial_pose: Pose
    steps: list = field(default_factory=list)
    seed: int | None = None

    def __len__(self):
        return len(self.steps)

    @property
    def poses(self):
        return np.array([s.pose_true.as_array() for s in self.steps])

    @property
    def measurements(self):
        return np.array([s.measurement for s in self.steps])

    @property
    def speeds(self):
        return np.array([s.control_speed for s in self.steps])


def make_rng(seed):
    """Counter-based generator used for every random stream in the package."""
    return np.random.Generator(np.random.Philox(seed))


def substream_seed(seed, *key):
    """Independent 64-bit seed for the substream ``key`` of ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0])


def motion_step(env, pose, speed, rng, cfg=MotionNoiseConfig()):
    alpha = wrap_angle(pose.alpha + TWO_PI * rng.uniform(-cfg.heading_noise_fraction, cfg.heading_noise_fraction))
    dist = speed + rng.uniform(-cfg.speed_noise_halfwidth, cfg.speed_noise_halfwidth)
    x = pose.x + dist * math.cos(alpha)
    y = pose.y + dist * math.sin(alpha)
    if not env.is_colliding((x, y), cfg.object_radius):
        return Pose(x, y, alpha)
    for _ in range(cfg.max_retries):
        alpha = rng.uniform(0.0, TWO_PI)
        x = pose.x + dist * math.cos(alpha)
        y = pose.y + dist * math.sin(alpha)
        if not env.is_colliding((x, y), cfg.object_radius):
            return Pose(x, y, alpha)
    raise SimulationError(f"object wedged at ({pose.x:.3f}, {pose.y:.3f}) after {cfg.max_retries} retries")


def measure(env, pose, rng, cfg=MotionNoiseConfig()):
    true = env.k_nearest_beacon_distances((pose.x, pose.y), cfg.k_measure)
    m = cfg.measurement_noise_halfwidth
    return true + rng.uniform(-m, m, size=cfg.k_measure)


def generate_trajectory(env, rng, cfg=MotionNoiseConfig(), n_steps=100, env_id=None, initial_pose=None, speed=None):
    """Simulate one trajectory; speed is drawn once and held for all steps."""
    if n_steps < 1:
        raise ValidationError("trajectory must have at least one step")
    if env.n_beacons < cfg.k_measure:
        raise ValidationError(f"environment has {env.n_beacons} beacons, need {cfg.k_measure}")
    if initial_pose is None:
        c = env.sample_free_position(rng, cfg.object_radius)
        initial_pose = Pose(c[0], c[1], rng.uniform(0.0, TWO_PI))
    elif not isinstance(initial_pose, Pose):
        initial_pose = Pose(*initial_pose)
    if env.is_colliding(initial_pose.c, cfg.object_radius):
        raise ValidationError("initial pose collides with an obstacle")
    if speed is None:
        speed = float(rng.uniform(cfg.speed_min, cfg.speed_max))
    traj = Trajectory(env_id=env_id or env.name or "", initial_pose=initial_pose)
    pose = initial_pose
    for _ in range(n_steps):
        pose = motion_step(env, pose, speed, rng, cfg)
        traj.steps.append(Step(pose, speed, measure(env, pose, rng, cfg)))
    return traj


class TrajectoryDataset:
    """Stacked trajectories of one split.

    Attributes
    ----------
    initial : ndarray (T, 3)
    poses : ndarray (T, N, 3)
    speeds : ndarray (T, N)
    measurements : ndarray (T, N, k)
    seeds : ndarray (T,) uint64
    """

    def __init__(self, env_id, initial, poses, speeds, measurements, seeds, meta=None):
        self.env_id = env_id
        self.initial = np.asarray(initial, dtype=np.float64)
        self.poses = np.asarray(poses, dtype=np.float64)
        self.speeds = np.asarray(speeds, dtype=np.float64)
        self.measurements = np.asarray(measurements, dtype=np.float64)
        self.seeds = np.asarray(seeds, dtype=np.uint64)
        self.meta = dict(meta or {})
        t, n = self.poses.shape[:2]
        if self.speeds.shape != (t, n) or self.measurements.shape[:2] != (t, n) or self.initial.shape != (t, 3):
            raise DataError("inconsistent dataset array shapes")

    def __len__(self):
        return len(self.poses)

    @property
    def n_steps(self):
        return self.poses.shape[1]

    @property
    def k_measure(self):
        return self.measurements.shape[2]

    def subset(self, idx):
        idx = np.asarray(idx)
        return TrajectoryDataset(self.env_id, self.initial[idx], self.poses[idx], self.speeds[idx],
                                 self.measurements[idx], self.seeds[idx], self.meta)

    def trajectory(self, i):
        steps = [Step(Pose(*p), float(u), m.copy())
                 for p, u, m in zip(self.poses[i], self.speeds[i], self.measurements[i])]
        return Trajectory(self.env_id, Pose(*self.initial[i]), steps, seed=int(self.seeds[i]))

    @classmethod
    def from_trajectories(cls, trajs, meta=None):
        if not trajs:
            raise DataError("no trajectories")
        return cls(
            trajs[0].env_id,
            [t.initial_pose.as_array() for t in trajs],
            [t.poses for t in trajs],
            [t.speeds for t in trajs],
            [t.measurements for t in trajs],
            [t.seed if t.seed is not None else 0 for t in trajs],
            meta,
        )

    def equals(self, other):
        return (
            self.env_id == other.env_id
            and all(np.array_equal(getattr(self, a), getattr(other, a))
                    for a in ("initial", "poses", "speeds", "measurements", "seeds"))
        )

    def save(self, path):
        path = Path(path)
        np.savez(path, initial=self.initial, poses=self.poses, speeds=self.speeds,
                 measurements=self.measurements, seeds=self.seeds,
                 env_id=np.array(self.env_id), meta=np.array(json.dumps(self.meta, sort_keys=True)))
        return path

    @classmethod
    def load(cls, path):
        try:
            with np.load(path, allow_pickle=False) as z:
                return cls(str(z["env_id"]), z["initial"], z["poses"], z["speeds"],
                           z["measurements"], z["seeds"], json.loads(str(z["meta"])))
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"cannot read dataset {path}: {exc}") from exc


def simulate_split(env, cfg, count, seed, split=0, n_steps=100, env_id=None):
    trajs = []
    for i in range(count):
        s = substream_seed(seed, split, i)
        t = generate_trajectory(env, make_rng(s), cfg, n_steps, env_id=env_id)
        t.seed = s
        trajs.append(t)
    meta = {"seed": int(seed), "split": int(split), "cfg": asdict(cfg), "version": __version__}
    return TrajectoryDataset.from_trajectories(trajs, meta)


def generate_dataset(env, cfg, counts, seed, out_dir, n_steps=100, env_id=None, provenance=None):
    """Write train/val/test archives and ``manifest.json`` into ``out_dir``."""
    counts = dict(counts)
    if set(counts) != set(SPLITS) or any(int(v) < 1 for v in counts.values()):
        raise ValidationError(f"counts must give positive train/val/test sizes, got {counts}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    env_id = env_id or env.name or "env"
    manifest = {"env_id": env_id, "seed": int(seed), "n_steps": int(n_steps),
                "cfg": asdict(cfg), "version": __version__, "splits": {}}
    if provenance:
        manifest["provenance"] = provenance
    for split_idx, split in enumerate(SPLITS):
        ds = simulate_split(env, cfg, int(counts[split]), seed, split_idx, n_steps, env_id)
        path = ds.save(out / f"{split}.npz")
        manifest["splits"][split] = {"path": path.name, "count": int(counts[split])}
    mpath = out / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return mpath


def load_manifest(path):
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    manifest["_root"] = str(path.parent)
    return manifest


def load_split(manifest, split):
    if isinstance(manifest, (str, Path)):
        manifest = load_manifest(manifest)
    try:
        entry = manifest["splits"][split]
    except KeyError:
        raise DataError(f"manifest has no split {split!r}") from None
    return TrajectoryDataset.load(Path(manifest["_root"]) / entry["path"])


def noise_config_from_dict(d):
    return MotionNoiseConfig(**d)
