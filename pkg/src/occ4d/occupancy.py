"""
Occupancy data model: class vocabularies, 4D label grids, ego trajectories,
the OCCV clip file format and bird's-eye-view rendering.
"""
from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ClipFormatError, DataError

logger = logging.getLogger(__name__)

OCCV_MAGIC = b"OCCV"
OCCV_VERSION = 1
# magic | version | T | H | W | D | num_classes
_HEADER = struct.Struct("<4s6I")
HEADER_SIZE = _HEADER.size

BACKGROUND_RGB = (128, 128, 128)


@dataclass(frozen=True)
class ClassVocabulary:
    """Ordered class names with one RGB colour each. Index 0 is always empty."""

    names: tuple[str, ...]
    palette: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "palette", tuple(tuple(int(c) for c in rgb) for rgb in self.palette))
        if not self.names or self.names[0] != "empty":
            raise ValueError(f"Class 0 must be 'empty', got {self.names[:1]}")
        if len(self.palette) != len(self.names):
            raise ValueError(f"Palette has {len(self.palette)} entries for {len(self.names)} classes")
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"Class names must be unique: {self.names}")
        for name, rgb in zip(self.names, self.palette):
            if len(rgb) != 3 or any(not 0 <= c <= 255 for c in rgb):
                raise ValueError(f"Bad RGB triple for class {name!r}: {rgb}")

    def __len__(self) -> int:
        return len(self.names)

    @property
    def size(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"Unknown class {name!r}") from None

    @classmethod
    def generic(cls, num_classes: int) -> "ClassVocabulary":
        """Placeholder vocabulary for files whose class names are unknown."""
        names = ("empty",) + tuple(f"class_{k}" for k in range(1, num_classes))
        rng = np.random.default_rng(num_classes)
        palette = [(0, 0, 0)] + [tuple(int(c) for c in rng.integers(0, 256, 3)) for _ in range(1, num_classes)]
        return cls(names, tuple(palette))


# Table-1 colour boxes of the nuScenes occupancy classes.
NUSCENES_VOCAB = ClassVocabulary(
    names=(
        "empty", "others", "barrier", "bicycle", "bus", "car", "construction_vehicle",
        "motorcycle", "pedestrian", "traffic_cone", "trailer", "truck", "driveable_surface",
        "other_flat", "sidewalk", "terrain", "manmade", "vegetation",
    ),
    palette=(
        (255, 255, 255), (0, 0, 0), (255, 120, 50), (255, 192, 203), (252, 254, 88),
        (87, 149, 237), (140, 251, 253), (193, 180, 61), (222, 51, 35), (249, 240, 162),
        (120, 64, 21), (145, 52, 231), (226, 59, 246), (138, 137, 137), (65, 10, 72),
        (176, 237, 107), (83, 112, 152), (90, 172, 52),
    ),
)

TOY_VOCAB = ClassVocabulary(
    names=("empty", "road", "sidewalk", "car", "building", "vegetation", "pedestrian", "barrier"),
    palette=(
        (255, 255, 255), (226, 59, 246), (65, 10, 72), (87, 149, 237),
        (83, 112, 152), (90, 172, 52), (222, 51, 35), (255, 120, 50),
    ),
)

VOCABULARIES = {"toy": TOY_VOCAB, "nuscenes": NUSCENES_VOCAB}


def vocabulary_for(num_classes: int) -> ClassVocabulary:
    """Best known vocabulary with exactly ``num_classes`` entries."""
    for vocab in VOCABULARIES.values():
        if vocab.size == num_classes:
            return vocab
    return ClassVocabulary.generic(num_classes)


@dataclass(frozen=True, eq=False)
class OccupancySequence:
    """
    A (T, H, W, D) grid of class indices over a vocabulary.

    Labels are stored row-major in (t, h, w, d) order as a read-only uint8 array.
    """

    labels: np.ndarray
    vocab: ClassVocabulary = field(default=TOY_VOCAB)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 4 or min(labels.shape) < 1:
            raise DataError(f"Occupancy labels must be a non-empty rank-4 array, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.vocab.size):
            raise DataError(
                f"Label {int(labels.max())} out of range for a {self.vocab.size}-class vocabulary"
            )
        labels = np.ascontiguousarray(labels, dtype=np.uint8)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(int(n) for n in self.labels.shape)

    @property
    def num_frames(self) -> int:
        return self.labels.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, OccupancySequence):
            return NotImplemented
        return self.vocab == other.vocab and np.array_equal(self.labels, other.labels)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Ego positions (x, y) in metres, one per frame, absolute planar frame."""

    positions: np.ndarray

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=np.float32)
        if positions.ndim != 2 or positions.shape[1] != 2 or positions.shape[0] < 1:
            raise DataError(f"Trajectory must have shape (T, 2), got {positions.shape}")
        if not np.isfinite(positions).all():
            raise DataError("Trajectory contains non-finite coordinates")
        positions = np.ascontiguousarray(positions)
        positions.setflags(write=False)
        object.__setattr__(self, "positions", positions)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return np.array_equal(self.positions, other.positions)

    @classmethod
    def from_csv(cls, path: Path) -> "Trajectory":
        """Reads ``x,y`` rows (an optional ``x,y`` header line is skipped)."""
        path = Path(path)
        if not path.exists():
            raise DataError(f"Trajectory file not found: {path}")
        rows = []
        with path.open(newline="", encoding="utf-8") as f:
            for record in csv.reader(f, skipinitialspace=True):
                fields = [v.strip() for v in record]
                if not any(fields) or [v.lower() for v in fields] == ["x", "y"]:
                    continue
                try:
                    x, y = (float(v) for v in fields)
                except ValueError:
                    raise DataError(f"Bad trajectory row in {path}: {','.join(record)!r}") from None
                rows.append((x, y))
        if not rows:
            raise DataError(f"No trajectory rows in {path}")
        return cls(np.array(rows))


def check_pair(seq: OccupancySequence, traj: Trajectory) -> None:
    if len(traj) != seq.num_frames:
        raise DataError(f"Trajectory has {len(traj)} positions but the clip has {seq.num_frames} frames")


def clip_size(dims: tuple[int, int, int, int]) -> int:
    """Exact OCCV file size in bytes for a clip of the given dims."""
    t, h, w, d = dims
    return HEADER_SIZE + t * h * w * d + 8 * t


def write_clip(seq: OccupancySequence, traj: Trajectory, path: Path) -> Path:
    """
    Writes an OCCV file: little-endian header, uint8 labels in (t,h,w,d) order,
    then T float32 (x, y) pairs.
    """
    check_pair(seq, traj)
    path = Path(path)
    t, h, w, d = seq.dims
    header = _HEADER.pack(OCCV_MAGIC, OCCV_VERSION, t, h, w, d, seq.vocab.size)
    payload = seq.labels.astype("<u1").tobytes() + traj.positions.astype("<f4").tobytes()
    path.write_bytes(header + payload)
    return path


def read_clip(path: Path, vocab: ClassVocabulary | None = None) -> tuple[OccupancySequence, Trajectory]:
    """Inverse of :func:`write_clip`."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Clip not found: {path}")
    raw = path.read_bytes()
    if len(raw) < HEADER_SIZE:
        raise ClipFormatError(f"{path.name}: truncated header ({len(raw)} bytes)")
    magic, version, t, h, w, d, num_classes = _HEADER.unpack_from(raw)
    if magic != OCCV_MAGIC:
        raise ClipFormatError(f"{path.name}: bad magic {magic!r}")
    if version != OCCV_VERSION:
        raise ClipFormatError(f"{path.name}: unsupported version {version}")
    if min(t, h, w, d) < 1 or num_classes < 1:
        raise ClipFormatError(f"{path.name}: degenerate header dims {(t, h, w, d)} / {num_classes} classes")
    expected = clip_size((t, h, w, d))
    if len(raw) != expected:
        kind = "truncated payload" if len(raw) < expected else "trailing bytes"
        raise ClipFormatError(f"{path.name}: {kind}, expected {expected} bytes, got {len(raw)}")

    n = t * h * w * d
    labels = np.frombuffer(raw, dtype="<u1", count=n, offset=HEADER_SIZE).reshape(t, h, w, d)
    if labels.max() >= num_classes:
        raise ClipFormatError(f"{path.name}: label {int(labels.max())} >= declared class count {num_classes}")
    positions = np.frombuffer(raw, dtype="<f4", count=2 * t, offset=HEADER_SIZE + n).reshape(t, 2)

    if vocab is None:
        vocab = vocabulary_for(num_classes)
    elif vocab.size != num_classes:
        raise ClipFormatError(f"{path.name}: declares {num_classes} classes, vocabulary has {vocab.size}")
    return OccupancySequence(labels.copy(), vocab), Trajectory(positions.astype(np.float32))


def render_bev(seq: OccupancySequence, frame: int) -> np.ndarray:
    """
    Bird's-eye view of one frame as an (H, W, 3) uint8 image.

    Each column is coloured by its highest non-empty voxel; empty columns are gray.
    """
    if not 0 <= frame < seq.num_frames:
        raise IndexError(f"Frame {frame} out of range for a {seq.num_frames}-frame clip")
    labels = seq.labels[frame]
    depth = labels.shape[-1]
    occupied = labels != 0
    # first occupied voxel scanning from the top (largest d) down
    top = depth - 1 - np.argmax(occupied[..., ::-1], axis=-1)
    top_label = np.take_along_axis(labels, top[..., None], axis=-1)[..., 0]

    palette = np.asarray(seq.vocab.palette, dtype=np.uint8)
    image = palette[top_label]
    image[~occupied.any(axis=-1)] = BACKGROUND_RGB
    return image


def write_ppm(image: np.ndarray, path: Path) -> Path:
    """Binary PPM (P6)."""
    path = Path(path)
    h, w, _ = image.shape
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(image, dtype=np.uint8).tobytes())
    return path


def render_frames(seq: OccupancySequence, out_dir: Path) -> list[Path]:
    """Writes ``frame_{t:04}.ppm`` for every frame of the clip."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [write_ppm(render_bev(seq, t), out_dir / f"frame_{t:04}.ppm") for t in range(seq.num_frames)]
    logger.info(f"Rendered {len(paths)} frames to {out_dir}")
    return paths
