"""Binary checkpoint format.

Layout (all integers little-endian)::

    "SEXP" | version u32 | layer count u32
    per layer: kind u8 | rank u8 | extents u32 * rank | f32 parameter data
    metadata: byte length u32 | UTF-8 ``key=value`` lines

Parameter data per kind: conv stores its (C_out, C_in, k, k) weight then
C_out biases; fc stores its (out, in) weight then ``out`` biases; se
stores w1 (B, C) then w2 (C, B). relu, maxpool and gap have rank 0 and
no data.
"""
from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

from .model import GAP, SE, Conv2d, Dense, MaxPool2, ModelGraph, ModelShapeError, ReLU
from .se import SEBlockParams

MAGIC = b"SEXP"
VERSION = 1

KIND_TAGS = {"conv": 1, "relu": 2, "maxpool": 3, "se": 4, "gap": 5, "fc": 6}
_TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}
_RANKS = {"conv": 4, "fc": 2, "se": 2, "relu": 0, "maxpool": 0, "gap": 0}


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class CheckpointFormatError(CheckpointError):
    pass


def _f32le(a):
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _fmt_floats(values):
    return ",".join(repr(float(v)) for v in values)


def dumps(model: ModelGraph) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(model.layers))]
    meta = {
        "input_shape": ",".join(str(v) for v in model.input_shape),
        "num_classes": str(model.num_classes),
        "mean": _fmt_floats(model.mean),
        "std": _fmt_floats(model.std),
    }
    for i, layer in enumerate(model.layers):
        kind = layer.kind
        if kind == "conv":
            shape = layer.weight.shape
            data = _f32le(layer.weight) + _f32le(layer.bias)
            meta[f"conv{i}"] = f"{layer.stride},{layer.padding}"
        elif kind == "fc":
            shape = layer.weight.shape
            data = _f32le(layer.weight) + _f32le(layer.bias)
        elif kind == "se":
            shape = layer.se.w1.shape
            data = _f32le(layer.se.w1) + _f32le(layer.se.w2)
            meta["reduction"] = str(layer.se.reduction)
        else:
            shape, data = (), b""
        out.append(struct.pack("<BB", KIND_TAGS[kind], len(shape)))
        out.append(struct.pack(f"<{len(shape)}I", *shape))
        out.append(data)
    for key, value in model.metadata.items():
        meta.setdefault(str(key), str(value))
    for key, value in meta.items():
        if "\n" in key or "=" in key or "\n" in value:
            raise ValueError(f"metadata entry {key!r} cannot be encoded")
    blob = "".join(f"{k}={v}\n" for k, v in meta.items()).encode("utf-8")
    out.append(struct.pack("<I", len(blob)))
    out.append(blob)
    return b"".join(out)


def save_checkpoint(model: ModelGraph, path) -> None:
    Path(path).write_bytes(dumps(model))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what, layer=None):
        if n > len(self.buf) - self.pos:
            where = f" in layer {layer}" if layer is not None else ""
            raise TruncatedCheckpointError(
                f"checkpoint truncated{where}: need {n} bytes for {what} at offset {self.pos}, "
                f"{len(self.buf) - self.pos} left",
                layer=layer,
            )
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what, layer=None):
        return struct.unpack("<I", self.take(4, what, layer))[0]

    def floats(self, count, what, layer):
        raw = self.take(4 * count, what, layer)
        return np.frombuffer(raw, dtype="<f4").astype(np.float32)


def _parse_floats(text, key):
    try:
        return np.array([float(v) for v in text.split(",")], dtype=np.float32)
    except ValueError:
        raise CheckpointFormatError(f"bad float list for {key!r}") from None


def loads(buf: bytes) -> ModelGraph:
    r = _Reader(bytes(buf))
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32("version")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads {VERSION}")
    n_layers = r.u32("layer count")

    raw_layers = []
    for i in range(n_layers):
        tag, rank = struct.unpack("<BB", r.take(2, "layer header", i))
        kind = _TAG_KINDS.get(tag)
        if kind is None:
            raise CheckpointFormatError(f"unknown layer tag {tag} in layer {i}")
        if rank != _RANKS[kind]:
            raise CheckpointFormatError(f"layer {i} ({kind}) has rank {rank}, expected {_RANKS[kind]}")
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank, "extents", i))
        if any(e == 0 for e in shape):
            raise CheckpointFormatError(f"layer {i} ({kind}) has a zero extent")
        size = math.prod(shape) if rank else 0
        label = f"{i} ({kind})"
        if kind in ("conv", "fc"):
            w = r.floats(size, "weights", label).reshape(shape)
            b = r.floats(shape[0], "bias", label)
            raw_layers.append((kind, w, b))
        elif kind == "se":
            w1 = r.floats(size, "w1", label).reshape(shape)
            w2 = r.floats(size, "w2", label).reshape(shape[1], shape[0])
            raw_layers.append((kind, w1, w2))
        else:
            raw_layers.append((kind,))

    meta_len = r.u32("metadata length")
    try:
        text = r.take(meta_len, "metadata").decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointFormatError("metadata is not valid UTF-8") from None
    if r.pos != len(r.buf):
        raise CheckpointFormatError(f"{len(r.buf) - r.pos} trailing bytes after metadata")
    meta = {}
    for line in text.splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointFormatError(f"malformed metadata line {line!r}")
        meta[key] = value

    try:
        input_shape = tuple(int(v) for v in meta.pop("input_shape").split(","))
        num_classes = int(meta.pop("num_classes"))
        mean = _parse_floats(meta.pop("mean"), "mean")
        std = _parse_floats(meta.pop("std"), "std")
        reduction = int(meta.pop("reduction", "16"))
        layers = []
        for i, entry in enumerate(raw_layers):
            kind = entry[0]
            if kind == "conv":
                stride, padding = (int(v) for v in meta.pop(f"conv{i}", "1,1").split(","))
                layers.append(Conv2d(entry[1], entry[2], stride, padding))
            elif kind == "fc":
                layers.append(Dense(entry[1], entry[2]))
            elif kind == "se":
                layers.append(SE(SEBlockParams(entry[1], entry[2], reduction)))
            else:
                layers.append({"relu": ReLU, "maxpool": MaxPool2, "gap": GAP}[kind]())
        if len(input_shape) != 3 or len(mean) != input_shape[0] or len(std) != input_shape[0]:
            raise CheckpointFormatError("input shape and normalisation stats disagree")
        meta["reduction"] = str(reduction)
        return ModelGraph(layers, num_classes, input_shape, mean, std, metadata=meta)
    except KeyError as exc:
        raise CheckpointFormatError(f"missing metadata key {exc}") from None
    except (ValueError, ModelShapeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointFormatError(f"inconsistent architecture: {exc}") from None


def load_checkpoint(path) -> ModelGraph:
    return loads(Path(path).read_bytes())
