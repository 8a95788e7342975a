"""Binary checkpoint container.

Layout: magic "LAVACKPT", format version (u32 LE), then entries of
{name-length u32, UTF-8 name, dtype tag u8 (0=f32, 1=f64, 2=i64), rank u32,
dims u32 x rank, raw little-endian data}.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np
import torch

from .errors import CheckpointError
from .models import ModelStack, StackConfig, TeacherStudentPair

MAGIC = b"LAVACKPT"
VERSION = 1

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAGS_BY_KIND = {("f", 4): 0, ("f", 8): 1, ("i", 8): 2}

_CONFIG_FIELDS = ("n_classes", "in_channels", "feature_dim", "projection_dim",
                  "semantic_dim", "ssl_dim", "hidden_dim")


def _tag_for(arr: np.ndarray) -> int:
    key = (arr.dtype.kind, arr.dtype.itemsize)
    if key not in _TAGS_BY_KIND:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for checkpoint entry")
    return _TAGS_BY_KIND[key]


def write_entries(path: str, entries: dict[str, np.ndarray]) -> None:
    """Write entries atomically (temp file then rename)."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", VERSION))
            for name, arr in entries.items():
                # ascontiguousarray promotes 0-d to 1-d; restore the true shape
                arr = np.ascontiguousarray(arr).reshape(np.shape(arr))
                tag = _tag_for(arr)
                name_b = name.encode("utf-8")
                f.write(struct.pack("<I", len(name_b)))
                f.write(name_b)
                f.write(struct.pack("<B", tag))
                f.write(struct.pack("<I", arr.ndim))
                for dim in arr.shape:
                    f.write(struct.pack("<I", dim))
                f.write(arr.astype(_DTYPE_TAGS[tag], copy=False).tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_entries(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    entries: dict[str, np.ndarray] = {}
    off = 12
    while off < len(data):
        (name_len,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + name_len].decode("utf-8")
        off += name_len
        (tag,) = struct.unpack_from("<B", data, off)
        off += 1
        if tag not in _DTYPE_TAGS:
            raise CheckpointError(f"{path}: unknown dtype tag {tag} for {name!r}")
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        dtype = _DTYPE_TAGS[tag]
        count = int(np.prod(dims)) if rank else 1
        nbytes = count * dtype.itemsize
        arr = np.frombuffer(data[off:off + nbytes], dtype=dtype).reshape(dims)
        off += nbytes
        entries[name] = arr
    return entries


def pair_to_entries(pair: TeacherStudentPair,
                    schedule_positions: dict[str, int] | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    entries: dict[str, np.ndarray] = {}
    for f_name in _CONFIG_FIELDS:
        entries[f"config/{f_name}"] = np.array(getattr(pair.student.config, f_name),
                                               dtype="<i8")
    for prefix, stack in (("student", pair.student), ("teacher", pair.teacher)):
        for name, tensor in stack.state_dict().items():
            entries[f"{prefix}/{name}"] = tensor.detach().cpu().numpy()
    entries["step"] = np.array(pair.step, dtype="<i8")
    entries["center"] = pair.center.detach().cpu().numpy()
    for key, pos in (schedule_positions or {}).items():
        entries[f"schedule/{key}"] = np.array(pos, dtype="<i8")
    for key, arr in (extra or {}).items():
        entries[key] = arr
    return entries


def save_pair(path: str, pair: TeacherStudentPair,
              schedule_positions: dict[str, int] | None = None,
              extra: dict[str, np.ndarray] | None = None) -> None:
    write_entries(path, pair_to_entries(pair, schedule_positions, extra))


def load_pair(path: str):
    """Return (pair, schedule_positions, extra_entries)."""
    entries = read_entries(path)
    missing = [f"config/{f}" for f in _CONFIG_FIELDS if f"config/{f}" not in entries]
    if missing:
        raise CheckpointError(f"{path}: missing entries {missing}")
    config = StackConfig(**{f: int(entries[f"config/{f}"]) for f in _CONFIG_FIELDS})
    # Building the fresh stacks consumes torch RNG for weight init; fork so
    # loading a checkpoint never perturbs the caller's random stream.
    with torch.random.fork_rng(devices=[]):
        pair = TeacherStudentPair.create(config, seed=None)
    dtype = torch.float64 if entries["center"].dtype == np.float64 else torch.float32
    pair.to(dtype)
    for prefix, stack in (("student", pair.student), ("teacher", pair.teacher)):
        state = {}
        for name, tensor in stack.state_dict().items():
            key = f"{prefix}/{name}"
            if key not in entries:
                raise CheckpointError(f"{path}: missing parameter entry {key!r}")
            state[name] = torch.from_numpy(entries[key].copy()).to(tensor.dtype)
        stack.load_state_dict(state)
    pair.teacher.requires_grad_(False)
    pair.step = int(entries["step"])
    pair.center = torch.from_numpy(entries["center"].copy()).to(dtype)
    schedule_positions = {k[len("schedule/"):]: int(v) for k, v in entries.items()
                          if k.startswith("schedule/")}
    extra = {k: v for k, v in entries.items()
             if not (k.startswith(("config/", "student/", "teacher/", "schedule/"))
                     or k in ("step", "center"))}
    return pair, schedule_positions, extra
