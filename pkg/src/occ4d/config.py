"""
Environment and experiment configuration.

Environment variables come from the process and an optional ``.env`` file.
Experiments are described by one YAML file whose sections map onto the
frozen config dataclasses of each module, aggregated in :class:`RunConfig`.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml
from dotenv import load_dotenv

from .diffusion import DenoiserConfig, ScheduleConfig
from .errors import ConfigError
from .occupancy import TOY_VOCAB
from .tokenizer import TokenizerConfig
from .toyworld import DEFAULT_KINDS, TrajectoryKind, WorldConfig

logger = logging.getLogger(__name__)

# Load environment variables
load_dotenv()

# Output folder (created on first use)
OUTPUT_DIR = Path(os.getenv("OCC4D_OUTPUT_DIR", "outputs")).resolve()

SECTIONS = ("seed", "world", "data", "tokenizer", "diffusion", "schedule", "optim", "paths")
# diffusion fields that follow from the tokenizer and world sections
_DERIVED_DIFFUSION = ("token_channels", "token_grid", "traj_len")


def get_env(name: str, default: str | None = None) -> str | None:
    return os.getenv(name, default)


def worker_count() -> int:
    raw = get_env("OCC4D_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"OCC4D_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"OCC4D_THREADS must be >= 1, got {n}")
    return n


def log_level() -> str:
    return get_env("LOG_LEVEL", "INFO").upper()


@dataclass(frozen=True)
class DataConfig:
    kinds: tuple[str, ...] = tuple(k.label for k in DEFAULT_KINDS)
    clips_per_kind: int = 50
    holdout_fraction: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(str(k) for k in self.kinds))
        if not self.kinds:
            raise ConfigError("data.kinds must name at least one trajectory kind")
        self.trajectory_kinds()
        if self.clips_per_kind < 1:
            raise ConfigError(f"data.clips_per_kind must be >= 1, got {self.clips_per_kind}")
        if not 0 <= self.holdout_fraction < 1:
            raise ConfigError(f"data.holdout_fraction must lie in [0, 1), got {self.holdout_fraction}")

    def trajectory_kinds(self) -> list[TrajectoryKind]:
        out = []
        for i, text in enumerate(self.kinds):
            try:
                out.append(TrajectoryKind.parse(text))
            except ValueError as e:
                raise ConfigError(f"data.kinds[{i}]: {e}") from None
        return out


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-5
    weight_decay: float = 0.01
    batch_size: int = 2
    tokenizer_steps: int = 2000
    diffusion_steps: int = 5000
    simple_fraction: float = 0.8
    vlb_weight: float = 1e-3
    eval_interval: int = 200
    checkpoint_interval: int = 500

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError(f"optim.lr must be >= 0, got {self.lr}")
        if not self.weight_decay >= 0:
            raise ConfigError(f"optim.weight_decay must be >= 0, got {self.weight_decay}")
        for name in ("batch_size", "eval_interval", "checkpoint_interval"):
            if getattr(self, name) < 1:
                raise ConfigError(f"optim.{name} must be >= 1, got {getattr(self, name)}")
        for name in ("tokenizer_steps", "diffusion_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"optim.{name} must be >= 0, got {getattr(self, name)}")
        if not 0 <= self.simple_fraction <= 1:
            raise ConfigError(f"optim.simple_fraction must lie in [0, 1], got {self.simple_fraction}")
        if not self.vlb_weight >= 0:
            raise ConfigError(f"optim.vlb_weight must be >= 0, got {self.vlb_weight}")

    @property
    def simple_steps(self) -> int:
        """Steps of the L_simple-only stage; the rest train on the combined loss."""
        return round(self.diffusion_steps * self.simple_fraction)


@dataclass(frozen=True)
class PathsConfig:
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    output_dir: str = ""

    def resolved(self, base: Path) -> "PathsConfig":
        """Relative entries resolved against ``base``; an empty output dir means the env default."""
        def _abs(p: str) -> str:
            path = Path(p).expanduser()
            return str(path if path.is_absolute() else (base / path).resolve())

        return PathsConfig(
            data_dir=_abs(self.data_dir),
            checkpoint_dir=_abs(self.checkpoint_dir),
            output_dir=_abs(self.output_dir) if self.output_dir else str(OUTPUT_DIR),
        )

    @property
    def output_root(self) -> Path:
        return Path(self.output_dir) if self.output_dir else OUTPUT_DIR

    @property
    def tokenizer_checkpoint(self) -> Path:
        return Path(self.checkpoint_dir) / "tokenizer.otk"

    @property
    def denoiser_checkpoint(self) -> Path:
        return Path(self.checkpoint_dir) / "denoiser.odm"


@dataclass(frozen=True)
class RunConfig:
    seed: int
    world: WorldConfig = field(default_factory=WorldConfig)
    data: DataConfig = field(default_factory=DataConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    diffusion: DenoiserConfig = field(default_factory=DenoiserConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        _check_divisible(self.world, self.tokenizer)
        D = self.world.dims[3]
        if self.tokenizer.depth != D:
            raise ConfigError(f"tokenizer.depth={self.tokenizer.depth} must equal world.dims.D={D}")
        if self.tokenizer.num_classes < TOY_VOCAB.size:
            raise ConfigError(
                f"tokenizer.num_classes={self.tokenizer.num_classes} is smaller than the "
                f"{TOY_VOCAB.size} classes the toy world emits"
            )

    @property
    def token_dims(self) -> tuple[int, int, int, int]:
        return self.tokenizer.token_shape(self.world.dims)

    def config_hash(self) -> str:
        """SHA-256 of the tokenizer and world sections; identifies token caches and checkpoints."""
        payload = json.dumps(
            {"tokenizer": asdict(self.tokenizer), "world": asdict(self.world)},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "world": asdict(self.world),
            "data": asdict(self.data),
            "tokenizer": asdict(self.tokenizer),
            "diffusion": {k: v for k, v in asdict(self.diffusion).items() if k not in _DERIVED_DIFFUSION},
            "schedule": asdict(self.schedule),
            "optim": asdict(self.optim),
            "paths": asdict(self.paths),
        }


def _check_divisible(world: WorldConfig, tokenizer: TokenizerConfig) -> None:
    factor = 2**tokenizer.levels
    for axis, n in zip("THW", world.dims[:3]):
        if n % factor:
            raise ConfigError(f"world.dims.{axis}={n} is not divisible by 2^tokenizer.levels={factor}")


def _check_value(path: str, value, default):
    """Validates ``value`` against the type of the field's default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be true or false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string, got {value!r}")
    elif isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path} must be a list, got {value!r}")
        if default and isinstance(default[0], int):
            for i, item in enumerate(value):
                if isinstance(item, bool) or not isinstance(item, int):
                    raise ConfigError(f"{path}[{i}] must be an integer, got {item!r}")
        value = tuple(value)
    return value


def _build_section(cls, section: str, raw, skip: tuple[str, ...] = (), **derived):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{section} must be a mapping, got {type(raw).__name__}")
    defaults = {f.name: f.default for f in fields(cls)}
    values = {}
    for key, value in raw.items():
        if key not in defaults or key in skip:
            raise ConfigError(f"{section}.{key} is not a known setting")
        values[key] = _check_value(f"{section}.{key}", value, defaults[key])
    return cls(**{**derived, **values})


def build_config(raw: dict, base_dir: Path | None = None) -> RunConfig:
    """Builds a :class:`RunConfig` from a parsed YAML mapping."""
    if not isinstance(raw, dict):
        raise ConfigError("Config file must contain a mapping at the top level")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]} is not a known config section")
    if "seed" not in raw:
        raise ConfigError("seed is mandatory")
    seed = _check_value("seed", raw["seed"], 0)
    if not 0 <= seed < 2**63:
        raise ConfigError(f"seed must be a non-negative 64-bit integer, got {seed}")

    world = _build_section(WorldConfig, "world", raw.get("world"), seed=seed)
    data = _build_section(DataConfig, "data", raw.get("data"))
    tokenizer = _build_section(
        TokenizerConfig, "tokenizer", raw.get("tokenizer"), depth=world.dims[3]
    )
    schedule = _build_section(ScheduleConfig, "schedule", raw.get("schedule"))
    optim = _build_section(OptimConfig, "optim", raw.get("optim"))
    paths = _build_section(PathsConfig, "paths", raw.get("paths"))

    _check_divisible(world, tokenizer)
    c, *grid = tokenizer.token_shape(world.dims)
    diffusion = _build_section(
        DenoiserConfig,
        "diffusion",
        raw.get("diffusion"),
        skip=_DERIVED_DIFFUSION,
        token_channels=c,
        token_grid=tuple(grid),
        traj_len=world.dims[0],
    )
    if base_dir is not None:
        paths = paths.resolved(base_dir)
    return RunConfig(seed, world, data, tokenizer, diffusion, schedule, optim, paths)


def load_config(path: Path) -> RunConfig:
    """Reads an experiment YAML file; relative paths resolve against its directory."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"{path.name}: invalid YAML: {e}") from e
    cfg = build_config(raw, base_dir=path.resolve().parent)
    logger.info(f"Loaded config {path.name} (hash {cfg.config_hash()[:12]})")
    return cfg
