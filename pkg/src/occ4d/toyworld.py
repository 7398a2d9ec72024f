"""
Deterministic synthetic driving world.

The world is an infinite plane of cells: a straight road corridor along +x with
sidewalks on both edges, static buildings and vegetation off-road, pedestrians on
the sidewalks, barriers on the road edge and a few cars driving along the road.
Static content is generated lazily per world tile from a seed derived from
(seed, tile), so any window of the world is a pure function of the config.
Scenes are rendered ego-centrically: the ego stays at the grid centre and the
world is shifted by the nearest-cell rounding of its displacement.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .occupancy import TOY_VOCAB, OccupancySequence, Trajectory, write_clip

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.csv"

ROAD = TOY_VOCAB.index("road")
SIDEWALK = TOY_VOCAB.index("sidewalk")
CAR = TOY_VOCAB.index("car")
BUILDING = TOY_VOCAB.index("building")
VEGETATION = TOY_VOCAB.index("vegetation")
PEDESTRIAN = TOY_VOCAB.index("pedestrian")
BARRIER = TOY_VOCAB.index("barrier")

CAR_SIZE = (4, 2, 1)  # cells along H, W, D

# RNG stream tags
_STATIC_STREAM = 1
_CORRIDOR_STREAM = 2
_CAR_STREAM = 3
_OFFSET = 2**31


@dataclass(frozen=True)
class WorldConfig:
    dims: tuple[int, int, int, int] = (8, 16, 16, 4)
    cell_size: float = 0.5
    n_static_obstacles: int = 3
    n_dynamic_cars: int = 2
    seed: int = 0
    dt: float = 0.5
    road_half_width: int = 3
    sidewalk_width: int = 2
    n_pedestrians: int = 2
    n_barriers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        if len(self.dims) != 4 or min(self.dims) < 1:
            raise ConfigError(f"world.dims must be four positive integers, got {self.dims}")
        if self.dims[0] < 2:
            raise ConfigError(f"world.dims.T must be >= 2, got {self.dims[0]}")
        if not self.cell_size > 0:
            raise ConfigError(f"world.cell_size must be > 0, got {self.cell_size}")
        if not self.dt > 0:
            raise ConfigError(f"world.dt must be > 0, got {self.dt}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"world.seed must be a 64-bit unsigned integer, got {self.seed}")
        for name in ("n_static_obstacles", "n_dynamic_cars", "n_pedestrians", "n_barriers",
                     "road_half_width", "sidewalk_width"):
            if getattr(self, name) < 0:
                raise ConfigError(f"world.{name} must be >= 0, got {getattr(self, name)}")

    @property
    def corridor_half_width(self) -> int:
        return self.road_half_width + self.sidewalk_width


@dataclass(frozen=True)
class TrajectoryKind:
    """One of the ego-motion families: straight, turn_right, motionless, accelerate."""

    name: str
    speed: float = 0.0
    yaw_rate: float = 0.0
    a0: float = 0.0
    rate: float = 0.0

    NAMES = ("straight", "turn_right", "motionless", "accelerate")

    def __post_init__(self):
        if self.name not in self.NAMES:
            raise ValueError(f"Unknown trajectory kind {self.name!r}; expected one of {self.NAMES}")
        for key in ("speed", "yaw_rate", "a0", "rate"):
            if not math.isfinite(getattr(self, key)):
                raise ValueError(f"Trajectory parameter {key} must be finite, got {getattr(self, key)}")

    @classmethod
    def straight(cls, speed: float = 2.0) -> "TrajectoryKind":
        return cls("straight", speed=speed)

    @classmethod
    def turn_right(cls, speed: float = 2.0, yaw_rate: float = 0.4) -> "TrajectoryKind":
        return cls("turn_right", speed=speed, yaw_rate=yaw_rate)

    @classmethod
    def motionless(cls) -> "TrajectoryKind":
        return cls("motionless")

    @classmethod
    def accelerate(cls, a0: float = 0.5, rate: float = 1.0) -> "TrajectoryKind":
        return cls("accelerate", a0=a0, rate=rate)

    @classmethod
    def parse(cls, text: str) -> "TrajectoryKind":
        """
        Parses ``name`` or ``name:key=value,...``, e.g. ``turn_right:speed=3,yaw_rate=0.5``.
        Missing parameters take the family defaults.
        """
        name, _, params = text.strip().partition(":")
        factories = {
            "straight": cls.straight,
            "turn_right": cls.turn_right,
            "motionless": cls.motionless,
            "accelerate": cls.accelerate,
        }
        if name not in factories:
            raise ValueError(f"Unknown trajectory kind {name!r}; expected one of {cls.NAMES}")
        kwargs = {}
        for item in filter(None, params.split(",")):
            key, _, value = item.partition("=")
            kwargs[key.strip()] = float(value)
        try:
            return factories[name](**kwargs)
        except TypeError:
            raise ValueError(f"Bad parameters for trajectory kind {name!r}: {params!r}") from None

    @property
    def label(self) -> str:
        return self.name


DEFAULT_KINDS = (
    TrajectoryKind.straight(),
    TrajectoryKind.turn_right(),
    TrajectoryKind.motionless(),
    TrajectoryKind.accelerate(),
)


def make_trajectory(kind: TrajectoryKind, T: int, dt: float) -> Trajectory:
    """Ego positions for ``T`` frames spaced ``dt`` seconds apart, starting at (0, 0)."""
    if T < 2:
        raise ValueError(f"A trajectory needs T >= 2 frames, got {T}")
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    t = np.arange(T, dtype=np.float64) * dt
    x = np.zeros(T)
    y = np.zeros(T)
    if kind.name == "straight":
        x = kind.speed * t
    elif kind.name == "accelerate":
        x = kind.a0 * t + 0.5 * kind.rate * t**2
    elif kind.name == "turn_right":
        if kind.yaw_rate == 0:
            x = kind.speed * t
        else:
            # heading(t) = -yaw_rate * t, starting along +x
            radius = kind.speed / kind.yaw_rate
            x = radius * np.sin(kind.yaw_rate * t)
            y = radius * (np.cos(kind.yaw_rate * t) - 1.0)
    return Trajectory(np.stack([x, y], axis=1))


def ego_offsets(traj: Trajectory, cell_size: float) -> np.ndarray:
    """Per-frame ego displacement from frame 0 in whole cells (nearest cell), shape (T, 2)."""
    rel = traj.positions.astype(np.float64) - traj.positions[0].astype(np.float64)
    return np.floor(rel / cell_size + 0.5).astype(np.int64)


# (h0, w0, d0, dh, dw, dd, label) in world cells
Box = tuple[int, int, int, int, int, int, int]


class _World:
    """Lazily generated static content plus the dynamic cars of one scene."""

    def __init__(self, cfg: WorldConfig):
        self.cfg = cfg
        _, self.H, self.W, self.D = cfg.dims
        self._tiles: dict[tuple[int, int], list[Box]] = {}
        self._corridor: dict[int, list[Box]] = {}
        self.cars = self._spawn_cars()

    def _rng(self, stream: int, *coords: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, stream, *(c + _OFFSET for c in coords)])

    def _tile(self, i: int, j: int) -> list[Box]:
        """Off-road buildings and vegetation of world tile (i, j)."""
        if (i, j) in self._tiles:
            return self._tiles[i, j]
        rng = self._rng(_STATIC_STREAM, i, j)
        edge = self.cfg.corridor_half_width
        boxes = []
        for _ in range(self.cfg.n_static_obstacles):
            h0 = i * self.H + int(rng.integers(0, self.H))
            w0 = j * self.W + int(rng.integers(0, self.W))
            dh, dw = (int(n) for n in rng.integers(2, 5, size=2))
            is_building = bool(rng.random() < 0.5)
            if is_building:
                height = int(rng.integers(min(2, self.D), self.D + 1))
            else:
                height = int(rng.integers(1, max(2, self.D)))
            # keep clear of the corridor
            if w0 + dw - 1 >= -edge and w0 <= edge:
                continue
            boxes.append((h0, w0, 0, dh, dw, height, BUILDING if is_building else VEGETATION))
        self._tiles[i, j] = boxes
        return boxes

    def _corridor_tile(self, i: int) -> list[Box]:
        """Pedestrians on the sidewalks and barriers on the road edge, per tile along x."""
        if i in self._corridor:
            return self._corridor[i]
        rng = self._rng(_CORRIDOR_STREAM, i)
        rw, sw = self.cfg.road_half_width, self.cfg.sidewalk_width
        boxes = []
        for _ in range(self.cfg.n_pedestrians):
            h0 = i * self.H + int(rng.integers(0, self.H))
            side = 1 if rng.random() < 0.5 else -1
            w0 = side * (rw + int(rng.integers(1, sw + 1))) if sw > 0 else side * (rw + 1)
            boxes.append((h0, w0, 1, 1, 1, 2, PEDESTRIAN))
        for _ in range(self.cfg.n_barriers):
            h0 = i * self.H + int(rng.integers(0, self.H))
            side = 1 if rng.random() < 0.5 else -1
            boxes.append((h0, side * rw, 1, 2, 1, 1, BARRIER))
        self._corridor[i] = boxes
        return boxes

    def _spawn_cars(self) -> list[tuple[float, int, float]]:
        """(initial h in metres, lane w0 in cells, velocity in m/s) per car."""
        rng = self._rng(_CAR_STREAM)
        rw = self.cfg.road_half_width
        cars = []
        for _ in range(self.cfg.n_dynamic_cars):
            h0 = float(rng.uniform(-self.H / 2, self.H / 2)) * self.cfg.cell_size
            w0 = int(rng.integers(-rw, max(-rw + 1, rw)))
            velocity = float(rng.uniform(-3.0, 3.0))
            cars.append((h0, w0, velocity))
        return cars

    def static_boxes(self, lo_h: int, lo_w: int) -> list[Box]:
        """Static boxes that can intersect the window starting at world cell (lo_h, lo_w)."""
        boxes = []
        i_lo, i_hi = lo_h // self.H - 1, (lo_h + self.H - 1) // self.H
        j_lo, j_hi = lo_w // self.W - 1, (lo_w + self.W - 1) // self.W
        for i in range(i_lo, i_hi + 1):
            for j in range(j_lo, j_hi + 1):
                boxes.extend(self._tile(i, j))
            boxes.extend(self._corridor_tile(i))
        return boxes

    def car_boxes(self, frame: int) -> list[Box]:
        t = frame * self.cfg.dt
        boxes = []
        for h_m, w0, velocity in self.cars:
            h0 = math.floor((h_m + velocity * t) / self.cfg.cell_size + 0.5)
            boxes.append((h0, w0, 1, *CAR_SIZE, CAR))
        return boxes

    def render(self, frame: int, offset: np.ndarray) -> np.ndarray:
        H, W, D = self.H, self.W, self.D
        lo_h = int(offset[0]) - H // 2
        lo_w = int(offset[1]) - W // 2
        grid = np.zeros((H, W, D), dtype=np.uint8)

        lateral = np.abs(np.arange(lo_w, lo_w + W))
        ground = np.zeros(W, dtype=np.uint8)
        ground[lateral <= self.cfg.corridor_half_width] = SIDEWALK
        ground[lateral <= self.cfg.road_half_width] = ROAD
        grid[:, :, 0] = ground[None, :]

        for h0, w0, d0, dh, dw, dd, label in self.static_boxes(lo_h, lo_w) + self.car_boxes(frame):
            hs, he = max(h0 - lo_h, 0), min(h0 + dh - lo_h, H)
            ws, we = max(w0 - lo_w, 0), min(w0 + dw - lo_w, W)
            ds, de = d0, min(d0 + dd, D)
            if hs < he and ws < we and ds < de:
                grid[hs:he, ws:we, ds:de] = label
        return grid


def generate_scene(cfg: WorldConfig, traj: Trajectory) -> OccupancySequence:
    """Ego-centric occupancy clip of the world seen along ``traj``."""
    T = cfg.dims[0]
    if len(traj) != T:
        raise DataError(f"Trajectory has {len(traj)} positions, world config expects T={T}")
    world = _World(cfg)
    offsets = ego_offsets(traj, cfg.cell_size)
    frames = [world.render(t, offsets[t]) for t in range(T)]
    return OccupancySequence(np.stack(frames), TOY_VOCAB)


@dataclass(frozen=True)
class ManifestRow:
    file: str
    kind: str
    seed: int


def write_manifest(rows: list[ManifestRow], path: Path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["file", "kind", "seed"])
        for row in rows:
            writer.writerow([row.file, row.kind, row.seed])
    return path


def read_manifest(path: Path) -> list[ManifestRow]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Manifest not found: {path}")
    with path.open(encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["file", "kind", "seed"]:
            raise DataError(f"{path}: expected header file,kind,seed, got {reader.fieldnames}")
        return [ManifestRow(r["file"], r["kind"], int(r["seed"])) for r in reader]


def generate_dataset(
    cfg: WorldConfig,
    kinds: list[TrajectoryKind],
    clips_per_kind: int,
    out_dir: Path,
    max_workers: int = 1,
) -> list[ManifestRow]:
    """
    Writes ``len(kinds) * clips_per_kind`` OCCV clips plus ``manifest.csv``.

    Clip ``i`` (kind-major order) uses seed ``cfg.seed + i``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    T = cfg.dims[0]
    jobs = [
        (k * clips_per_kind + n, kind)
        for k, kind in enumerate(kinds)
        for n in range(clips_per_kind)
    ]

    def _make(job):
        i, kind = job
        clip_cfg = replace(cfg, seed=cfg.seed + i)
        traj = make_trajectory(kind, T, cfg.dt)
        name = f"clip_{i:05d}.occv"
        write_clip(generate_scene(clip_cfg, traj), traj, out_dir / name)
        return ManifestRow(name, kind.label, clip_cfg.seed)

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        rows = list(pool.map(_make, jobs))

    write_manifest(rows, out_dir / MANIFEST_NAME)
    logger.info(f"Wrote {len(rows)} clips and {MANIFEST_NAME} to {out_dir}")
    return rows
