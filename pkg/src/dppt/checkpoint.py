"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DPPT" | u32 version=1 | u32 layer_count
    per layer: u16 name_len | utf-8 name | u8 frozen | u8 rank | u64 dims[rank]
               | f64 values[prod(dims)] (row-major)

The squared-gradient accumulator from warm-start is stored in a sidecar file
(``<path>.sqgrad``) in the same format, with one extra rank-0 layer
``__steps_seen__`` holding the step count.
"""

from __future__ import annotations

import io
import os
import struct
from pathlib import Path

import numpy as np

from dppt.errors import FormatError
from dppt.params import Layer, ParamTree

MAGIC = b"DPPT"
VERSION = 1
SIDECAR_SUFFIX = ".sqgrad"
STEPS_KEY = "__steps_seen__"


def encode_tree(tree: ParamTree) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tree)))
    for layer in tree:
        name = layer.name.encode("utf-8")
        value = np.asarray(layer.value, dtype="<f8", order="C")  # keeps rank 0
        buf.write(struct.pack("<H", len(name)))
        buf.write(name)
        buf.write(struct.pack("<BB", int(layer.frozen), value.ndim))
        buf.write(struct.pack(f"<{value.ndim}Q", *value.shape))
        buf.write(value.tobytes(order="C"))
    return buf.getvalue()


def decode_tree(data: bytes) -> ParamTree:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("truncated checkpoint")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise FormatError("bad magic; not a DPPT checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    layers = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        frozen, rank = struct.unpack("<BB", take(2))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        values = np.frombuffer(bytes(take(8 * size)), dtype="<f8").astype(np.float64)
        layers.append(Layer(name, values.reshape(dims), bool(frozen)))
    if pos != len(view):
        raise FormatError("trailing bytes after last layer")
    return ParamTree(layers)


def write_tree(path, tree: ParamTree) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_tree(tree))
    os.replace(tmp, path)


def read_tree(path) -> ParamTree:
    return decode_tree(Path(path).read_bytes())


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + SIDECAR_SUFFIX)


def save_checkpoint(path, tree: ParamTree, accumulator=None) -> None:
    write_tree(path, tree)
    if accumulator is not None:
        layers = [Layer(name, u) for name, u in accumulator.u.items()]
        layers.append(Layer(STEPS_KEY, np.array(float(accumulator.steps_seen))))
        write_tree(sidecar_path(path), ParamTree(layers))
    else:
        # a stale sidecar from an earlier save would be picked up on load
        sidecar_path(path).unlink(missing_ok=True)


def load_checkpoint(path):
    """Return ``(tree, accumulator_or_None)``."""
    from dppt.freeze import SqGradAccumulator

    tree = read_tree(path)
    side = sidecar_path(path)
    acc = None
    if side.exists():
        raw = read_tree(side)
        if STEPS_KEY not in raw:
            raise FormatError("sidecar missing step count")
        steps = int(raw[STEPS_KEY].value)
        acc = SqGradAccumulator(
            {l.name: l.value for l in raw if l.name != STEPS_KEY}, steps
        )
    return tree, acc
