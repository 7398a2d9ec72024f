"""
Tensor container used for tokenizer ("OTK1") and denoiser ("ODM1") checkpoints.

Layout: 4-byte magic | u32 header length | UTF-8 JSON header | tensor payload.
The header carries the config, run metadata, RNG states, optimizer hyperparameters
and a table of tensors (name, dtype, shape, byte offset). Floating tensors are
stored little-endian float32, integer tensors little-endian int64.
"""
from __future__ import annotations

import base64
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import DataError

logger = logging.getLogger(__name__)

TOKENIZER_MAGIC = b"OTK1"
DENOISER_MAGIC = b"ODM1"
_PREFIX = struct.Struct("<4sI")
_OPTIM_PREFIX = "optim/"


@dataclass
class Checkpoint:
    magic: bytes
    config: dict
    meta: dict = field(default_factory=dict)
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)
    rng: dict[str, bytes] = field(default_factory=dict)
    param_groups: list[dict] = field(default_factory=list)

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    def model_state(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.tensors.items() if not k.startswith(_OPTIM_PREFIX)}

    def optimizer_state(self) -> dict | None:
        if not self.param_groups:
            return None
        state: dict[int, dict] = {}
        for name, tensor in self.tensors.items():
            if not name.startswith(_OPTIM_PREFIX):
                continue
            idx, key = name[len(_OPTIM_PREFIX):].split("/", 1)
            state.setdefault(int(idx), {})[key] = tensor
        return {"state": state, "param_groups": self.param_groups}


def _encode_tensor(tensor: torch.Tensor) -> tuple[str, bytes]:
    array = tensor.detach().cpu().numpy()
    if np.issubdtype(array.dtype, np.floating):
        return "f4", array.astype("<f4").tobytes()
    if np.issubdtype(array.dtype, np.integer) or array.dtype == np.bool_:
        return "i8", array.astype("<i8").tobytes()
    raise DataError(f"Cannot store tensor of dtype {array.dtype}")


def save_checkpoint(
    path: Path,
    magic: bytes,
    model: nn.Module,
    config: dict,
    optimizer: torch.optim.Optimizer | None = None,
    meta: dict | None = None,
    generator: torch.Generator | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = dict(model.state_dict())
    param_groups = []
    if optimizer is not None:
        optim_state = optimizer.state_dict()
        param_groups = optim_state["param_groups"]
        for idx, entries in optim_state["state"].items():
            for key, value in entries.items():
                tensors[f"{_OPTIM_PREFIX}{idx}/{key}"] = torch.as_tensor(value)

    rng = {"torch": torch.get_rng_state().numpy().tobytes()}
    if generator is not None:
        rng["generator"] = generator.get_state().numpy().tobytes()

    table = []
    chunks = []
    offset = 0
    for name, tensor in tensors.items():
        dtype, data = _encode_tensor(tensor)
        table.append({"name": name, "dtype": dtype, "shape": list(tensor.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)

    header = json.dumps(
        {
            "config": config,
            "meta": meta or {},
            "rng": {k: base64.b64encode(v).decode("ascii") for k, v in rng.items()},
            "param_groups": param_groups,
            "tensors": table,
        },
        sort_keys=True,
    ).encode("utf-8")

    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as f:
        f.write(_PREFIX.pack(magic, len(header)))
        f.write(header)
        for chunk in chunks:
            f.write(chunk)
    tmp.replace(path)
    logger.info(f"Saved checkpoint {path.name} ({len(table)} tensors)")
    return path


def load_checkpoint(path: Path, expected_magic: bytes) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _PREFIX.size:
        raise DataError(f"{path.name}: truncated checkpoint")
    magic, header_len = _PREFIX.unpack_from(raw)
    if magic != expected_magic:
        raise DataError(f"{path.name}: expected magic {expected_magic!r}, found {magic!r}")
    start = _PREFIX.size + header_len
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path.name}: corrupt header: {e}") from e

    tensors = {}
    for entry in header["tensors"]:
        begin = start + entry["offset"]
        if begin + entry["nbytes"] > len(raw):
            raise DataError(f"{path.name}: truncated tensor {entry['name']}")
        dtype = "<f4" if entry["dtype"] == "f4" else "<i8"
        array = np.frombuffer(raw, dtype=dtype, count=entry["nbytes"] // np.dtype(dtype).itemsize, offset=begin)
        tensors[entry["name"]] = torch.from_numpy(array.reshape(entry["shape"]).copy())

    rng = {k: base64.b64decode(v) for k, v in header.get("rng", {}).items()}
    return Checkpoint(magic, header["config"], header.get("meta", {}), tensors, rng, header.get("param_groups", []))


def restore(
    ckpt: Checkpoint,
    model: nn.Module,
    optimizer: torch.optim.Optimizer | None = None,
    generator: torch.Generator | None = None,
    restore_rng: bool = False,
) -> None:
    """Loads model (and optionally optimizer and RNG) state from a checkpoint."""
    state = model.state_dict()
    loaded = ckpt.model_state()
    missing = set(state) - set(loaded)
    if missing:
        raise DataError(f"Checkpoint is missing tensors: {sorted(missing)[:5]}")
    for name, tensor in loaded.items():
        if name in state and tuple(state[name].shape) != tuple(tensor.shape):
            raise DataError(f"Shape mismatch for {name}: checkpoint {tuple(tensor.shape)}, model {tuple(state[name].shape)}")
    model.load_state_dict({k: v.to(state[k].dtype) for k, v in loaded.items() if k in state})

    if optimizer is not None:
        optim_state = ckpt.optimizer_state()
        if optim_state is not None:
            optimizer.load_state_dict(optim_state)
    if restore_rng and "torch" in ckpt.rng:
        torch.set_rng_state(torch.from_numpy(np.frombuffer(ckpt.rng["torch"], dtype=np.uint8).copy()))
    if generator is not None and "generator" in ckpt.rng:
        generator.set_state(torch.from_numpy(np.frombuffer(ckpt.rng["generator"], dtype=np.uint8).copy()))
