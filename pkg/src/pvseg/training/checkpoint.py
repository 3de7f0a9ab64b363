"""
Binary checkpoint format, little-endian throughout:

    magic       8 bytes  b"PVSEGCKP"
    version     u32
    config      u64 length + UTF-8 JSON (resolved run config echo)
    step        u64
    parameters  u32 count, then per tensor:
                u16 name length + UTF-8 name, u8 ndim, u32 * ndim shape,
                float32 values
    optimizer   u8 present flag; when set:
                u64 length + UTF-8 JSON (param groups)
                u32 count, then per state entry:
                u16 name length + UTF-8 name, f64 step, exp_avg, exp_avg_sq
                (float32, shaped like the parameter)

Writes go to a temporary file in the destination directory and are moved
into place with ``os.replace``.
"""

import io
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, BinaryIO

import numpy as np
import orjson
import torch
from torch import nn

from pvseg.errors import CheckpointError
from pvseg.utils.log import get_logger

logger = get_logger(__name__)

MAGIC = b"PVSEGCKP"
FORMAT_VERSION = 1
_F32 = np.dtype("<f4")


@dataclass(frozen=True)
class Checkpoint:
    config: dict[str, Any]
    step: int
    parameters: dict[str, np.ndarray]
    # {"param_groups": [...], "state": {name: {"step", "exp_avg", "exp_avg_sq"}}}
    optimizer: dict[str, Any] | None = field(default=None)

    def load_into(self, model: nn.Module) -> None:
        expected = model.state_dict()
        missing = set(expected) - set(self.parameters)
        unexpected = set(self.parameters) - set(expected)
        if missing or unexpected:
            raise CheckpointError(
                f"checkpoint does not fit the model: missing {sorted(missing)}, "
                f"unexpected {sorted(unexpected)}"
            )
        state = {}
        for name, ref in expected.items():
            value = self.parameters[name]
            if tuple(value.shape) != tuple(ref.shape):
                raise CheckpointError(
                    f"{name}: checkpoint shape {value.shape} != model shape {tuple(ref.shape)}"
                )
            state[name] = torch.from_numpy(value.astype(np.float32)).to(ref.dtype)
        model.load_state_dict(state)

    def load_optimizer(self, optimizer: torch.optim.Optimizer, model: nn.Module) -> None:
        if self.optimizer is None:
            return
        names = [name for name, _ in model.named_parameters()]
        state = {}
        for idx, name in enumerate(names):
            entry = self.optimizer["state"].get(name)
            if entry is None:
                continue
            state[idx] = {
                "step": torch.tensor(entry["step"], dtype=torch.float32),
                "exp_avg": torch.from_numpy(entry["exp_avg"].copy()),
                "exp_avg_sq": torch.from_numpy(entry["exp_avg_sq"].copy()),
            }
        optimizer.load_state_dict(
            {"state": state, "param_groups": self.optimizer["param_groups"]}
        )


##############################################################################
# encoding helpers
##############################################################################
def _write_str(f: BinaryIO, text: str, width: str) -> None:
    data = text.encode("utf-8")
    f.write(struct.pack(f"<{width}", len(data)))
    f.write(data)


def _write_array(f: BinaryIO, array: np.ndarray) -> None:
    f.write(np.ascontiguousarray(array, dtype=_F32).tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError("checkpoint is truncated")
    return data


def _read(f: BinaryIO, fmt: str) -> tuple:
    return struct.unpack(fmt, _read_exact(f, struct.calcsize(fmt)))


def _read_str(f: BinaryIO, width: str) -> str:
    (length,) = _read(f, f"<{width}")
    return _read_exact(f, length).decode("utf-8")


def _read_array(f: BinaryIO, shape: tuple[int, ...]) -> np.ndarray:
    count = int(np.prod(shape, dtype=np.int64))
    data = _read_exact(f, count * _F32.itemsize)
    return np.frombuffer(data, dtype=_F32).reshape(shape).astype(np.float32)


##############################################################################
# save / load
##############################################################################
def encode_checkpoint(
    model: nn.Module,
    step: int,
    config: dict[str, Any],
    optimizer: torch.optim.Optimizer | None = None,
) -> bytes:
    f = io.BytesIO()
    f.write(MAGIC)
    f.write(struct.pack("<I", FORMAT_VERSION))
    _write_str(f, orjson.dumps(config, option=orjson.OPT_SORT_KEYS).decode(), "Q")
    f.write(struct.pack("<Q", step))

    tensors = model.state_dict()
    f.write(struct.pack("<I", len(tensors)))
    for name, tensor in tensors.items():
        array = tensor.detach().cpu().numpy()
        _write_str(f, name, "H")
        f.write(struct.pack("<B", array.ndim))
        f.write(struct.pack(f"<{array.ndim}I", *array.shape))
        _write_array(f, array)

    if optimizer is None:
        f.write(struct.pack("<B", 0))
        return f.getvalue()

    f.write(struct.pack("<B", 1))
    opt_state = optimizer.state_dict()
    _write_str(f, orjson.dumps(opt_state["param_groups"]).decode(), "Q")
    names = [name for name, _ in model.named_parameters()]
    entries = [(names[idx], s) for idx, s in sorted(opt_state["state"].items())]
    f.write(struct.pack("<I", len(entries)))
    for name, s in entries:
        _write_str(f, name, "H")
        f.write(struct.pack("<d", float(s["step"])))
        _write_array(f, s["exp_avg"].detach().cpu().numpy())
        _write_array(f, s["exp_avg_sq"].detach().cpu().numpy())
    return f.getvalue()


def save_checkpoint(
    path: str | Path,
    model: nn.Module,
    step: int,
    config: dict[str, Any],
    optimizer: torch.optim.Optimizer | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_checkpoint(model, step, config, optimizer)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    logger.info(f"Saved checkpoint {path} at step {step}")
    return path


def decode_checkpoint(f: BinaryIO) -> Checkpoint:
    if _read_exact(f, len(MAGIC)) != MAGIC:
        raise CheckpointError("not a pvseg checkpoint (bad magic)")
    (version,) = _read(f, "<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
        )
    try:
        config = orjson.loads(_read_str(f, "Q"))
    except orjson.JSONDecodeError as e:
        raise CheckpointError(f"checkpoint config is not valid JSON: {e}") from e
    (step,) = _read(f, "<Q")

    parameters = {}
    shapes = {}
    (count,) = _read(f, "<I")
    for _ in range(count):
        name = _read_str(f, "H")
        (ndim,) = _read(f, "<B")
        shape = _read(f, f"<{ndim}I") if ndim else ()
        parameters[name] = _read_array(f, shape)
        shapes[name] = shape

    (has_optimizer,) = _read(f, "<B")
    optimizer = None
    if has_optimizer:
        param_groups = orjson.loads(_read_str(f, "Q"))
        state = {}
        (count,) = _read(f, "<I")
        for _ in range(count):
            name = _read_str(f, "H")
            if name not in shapes:
                raise CheckpointError(f"optimizer state for unknown parameter {name}")
            (opt_step,) = _read(f, "<d")
            state[name] = {
                "step": opt_step,
                "exp_avg": _read_array(f, shapes[name]),
                "exp_avg_sq": _read_array(f, shapes[name]),
            }
        optimizer = {"param_groups": param_groups, "state": state}

    if f.read(1):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(config=config, step=step, parameters=parameters, optimizer=optimizer)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            return decode_checkpoint(f)
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint not found: {path}") from e
