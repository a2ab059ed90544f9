"""This module contains the binary checkpoint formats.

Every format is little endian and stores floats as 32-bit values.

    VQFB  tensor blob: magic, u32 rank, u64 dims, f32 payload.
    VQFC  codebook: magic, u32 version, u64 K, u64 D, f32 entries (K x D), f32 ema_counts (K),
          f32 ema_sums (K x D), f32 decay, f32 smoothing_eps.
    VQFT  codec: magic, u32 version, u32 patch_size, u32 channels, f64 learning_rate, f64 beta, u32 matrix count,
          then per matrix u32 name length, name, u64 rows, u64 cols, f32 payload.
    VQFK  model container: magic, u32 version, u32 entry count, then per entry u32 name length, name,
          u64 payload length, payload. The `manifest.json` entry describes the model.

Arrays are float64 in memory, so loading yields the float32-rounded values and saving a loaded
checkpoint reproduces the file byte for byte.
"""
import json
import struct
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from ..errors import ParseError
from ..tasks.codebook import Codebook, UsageWindow
from ..tasks.pipeline import HIER, SINGLE, BudgetSpec, HierarchicalModel, Model, SingleLevelModel, TopStage
from ..tasks.transform import LinearCodec

TENSOR_MAGIC = b"VQFB"
CODEBOOK_MAGIC = b"VQFC"
CODEC_MAGIC = b"VQFT"
CONTAINER_MAGIC = b"VQFK"
FORMAT_VERSION = 1

MANIFEST_ENTRY = "manifest.json"
CODEC_ENTRY = "codec.vqft"
TOP_ENCODER_ENTRY = "top_encoder.vqfb"
TOP_PROJECTION_ENTRY = "top_projection.vqfb"
CODEC_MATRICES = ("analysis", "synthesis", "projection", "unprojection")

FLOAT32 = np.dtype("<f4")


class _Reader:
    """Cursor over a byte string that raises `ParseError` instead of reading past the end."""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    @property
    def remaining(self) -> int:
        return len(self.data) - self.offset

    def take(self, size: int, what: str) -> bytes:
        if size > self.remaining:
            raise ParseError(f"truncated {what}, needs {size} bytes but {self.remaining} remain", self.offset)
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size

        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def magic(self, expected: bytes) -> None:
        found = self.take(len(expected), "magic")
        if found != expected:
            raise ParseError(f"bad magic {found!r}, expected {expected!r}", 0)

    def version(self) -> None:
        start = self.offset
        (version,) = self.unpack("<I", "format version")
        if version != FORMAT_VERSION:
            raise ParseError(f"unsupported format version {version}", start)

    def floats(self, count: int, what: str) -> np.ndarray:
        payload = self.take(count * FLOAT32.itemsize, what)

        return np.frombuffer(payload, dtype=FLOAT32).astype(np.float64)

    def name(self, what: str) -> str:
        start = self.offset
        (length,) = self.unpack("<I", f"{what} name length")
        try:
            return self.take(length, f"{what} name").decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError(f"{what} name is not valid UTF-8", start) from None

    def finish(self) -> None:
        if self.remaining:
            raise ParseError(f"{self.remaining} trailing bytes", self.offset)


def _f32(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array, dtype=FLOAT32).tobytes()


def _name(name: str) -> bytes:
    encoded = name.encode("utf-8")

    return struct.pack("<I", len(encoded)) + encoded


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)

    return TENSOR_MAGIC + struct.pack("<I", array.ndim) + struct.pack(f"<{array.ndim}Q", *array.shape) + _f32(array)


def decode_tensor(data: bytes) -> np.ndarray:
    reader = _Reader(data)
    reader.magic(TENSOR_MAGIC)
    (rank,) = reader.unpack("<I", "rank")
    dims = reader.unpack(f"<{rank}Q", "dimensions")
    payload = reader.floats(int(np.prod(dims, dtype=object)), "tensor payload")
    reader.finish()

    return payload.reshape(dims)


def encode_codebook(codebook: Codebook) -> bytes:
    return b"".join(
        [
            CODEBOOK_MAGIC,
            struct.pack("<IQQ", FORMAT_VERSION, codebook.size, codebook.dim),
            _f32(codebook.entries),
            _f32(codebook.ema_counts),
            _f32(codebook.ema_sums),
            struct.pack("<ff", codebook.decay, codebook.smoothing_eps),
        ]
    )


def decode_codebook(data: bytes) -> Codebook:
    reader = _Reader(data)
    reader.magic(CODEBOOK_MAGIC)
    reader.version()
    size, dim = reader.unpack("<QQ", "codebook shape")
    entries = reader.floats(size * dim, "entries").reshape(size, dim)
    ema_counts = reader.floats(size, "ema_counts")
    ema_sums = reader.floats(size * dim, "ema_sums").reshape(size, dim)
    decay, smoothing_eps = reader.unpack("<ff", "decay and smoothing_eps")
    reader.finish()

    return Codebook(entries, ema_counts, ema_sums, decay, smoothing_eps)


def encode_codec(codec: LinearCodec) -> bytes:
    parts = [
        CODEC_MAGIC,
        struct.pack("<III", FORMAT_VERSION, codec.patch_size, codec.channels),
        struct.pack("<dd", codec.learning_rate, codec.beta),
        struct.pack("<I", len(CODEC_MATRICES)),
    ]
    for name in CODEC_MATRICES:
        matrix = getattr(codec, name)
        parts += [_name(name), struct.pack("<QQ", *matrix.shape), _f32(matrix)]

    return b"".join(parts)


def decode_codec(data: bytes) -> LinearCodec:
    reader = _Reader(data)
    reader.magic(CODEC_MAGIC)
    reader.version()
    patch_size, channels = reader.unpack("<II", "codec header")
    learning_rate, beta = reader.unpack("<dd", "codec hyperparameters")
    start = reader.offset
    (count,) = reader.unpack("<I", "matrix count")

    matrices: Dict[str, np.ndarray] = {}
    for _ in range(count):
        name = reader.name("matrix")
        rows, cols = reader.unpack("<QQ", f"{name} shape")
        matrices[name] = reader.floats(rows * cols, name).reshape(rows, cols)
    reader.finish()

    if sorted(matrices) != sorted(CODEC_MATRICES):
        raise ParseError(f"codec matrices {sorted(matrices)} differ from {sorted(CODEC_MATRICES)}", start)

    return LinearCodec(patch_size, channels, learning_rate=learning_rate, beta=beta, **matrices)


def encode_container(entries: List[Tuple[str, bytes]]) -> bytes:
    parts = [CONTAINER_MAGIC, struct.pack("<II", FORMAT_VERSION, len(entries))]
    for name, payload in entries:
        parts += [_name(name), struct.pack("<Q", len(payload)), payload]

    return b"".join(parts)


def decode_container(data: bytes) -> Dict[str, bytes]:
    reader = _Reader(data)
    reader.magic(CONTAINER_MAGIC)
    reader.version()
    (count,) = reader.unpack("<I", "entry count")

    entries: Dict[str, bytes] = {}
    for _ in range(count):
        start = reader.offset
        name = reader.name("entry")
        if name in entries:
            raise ParseError(f"duplicate entry {name!r}", start)
        (length,) = reader.unpack("<Q", f"{name} length")
        entries[name] = reader.take(length, name)
    reader.finish()

    return entries


def _codebook_entry(level: str) -> str:
    return f"codebook.{level}.vqfc"


def _dumps(manifest: dict) -> bytes:
    return (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8")


def encode_model(model: Model, budget: BudgetSpec, manifest: dict) -> bytes:
    """Serialize a model with a manifest holding its budget, grid and usage window settings."""
    window = model.usages[0]
    manifest = dict(
        manifest,
        architecture=SINGLE if isinstance(model, SingleLevelModel) else HIER,
        budget=budget.to_dict(),
        grid_shape=list(model.grid_shape),
        window_len=window.window_len,
        threshold=window.threshold,
    )
    entries = [(MANIFEST_ENTRY, _dumps(manifest)), (CODEC_ENTRY, encode_codec(model.codec))]
    if isinstance(model, SingleLevelModel):
        entries.append((_codebook_entry("single"), encode_codebook(model.codebook)))
    else:
        entries += [
            (TOP_ENCODER_ENTRY, encode_tensor(model.top.encoder)),
            (TOP_PROJECTION_ENTRY, encode_tensor(model.top.projection)),
            (_codebook_entry("bottom"), encode_codebook(model.bottom_codebook)),
            (_codebook_entry("top"), encode_codebook(model.top_codebook)),
        ]

    return encode_container(entries)


def _entry(entries: Dict[str, bytes], name: str) -> bytes:
    if name not in entries:
        raise ParseError(f"model container has no {name!r} entry", 0)

    return entries[name]


def decode_model(data: bytes) -> Tuple[Model, dict]:
    """Inverse of `encode_model`; usage windows start empty. Returns the model and its manifest."""
    entries = decode_container(data)
    try:
        manifest = json.loads(_entry(entries, MANIFEST_ENTRY).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as error:
        raise ParseError(f"manifest is not valid JSON: {error}", 0) from None

    missing = [key for key in ("architecture", "grid_shape", "window_len", "threshold") if key not in manifest]
    if missing:
        raise ParseError(f"manifest lacks {missing}", 0)

    codec = decode_codec(_entry(entries, CODEC_ENTRY))
    grid_shape = tuple(manifest["grid_shape"])
    window_len, threshold = manifest["window_len"], manifest["threshold"]

    if manifest["architecture"] == SINGLE:
        codebook = decode_codebook(_entry(entries, _codebook_entry("single")))
        model: Model = SingleLevelModel(codec, codebook, UsageWindow(codebook.size, window_len, threshold), grid_shape)
    elif manifest["architecture"] == HIER:
        bottom = decode_codebook(_entry(entries, _codebook_entry("bottom")))
        top = decode_codebook(_entry(entries, _codebook_entry("top")))
        model = HierarchicalModel(
            codec=codec,
            top=TopStage(
                encoder=decode_tensor(_entry(entries, TOP_ENCODER_ENTRY)),
                projection=decode_tensor(_entry(entries, TOP_PROJECTION_ENTRY)),
            ),
            bottom_codebook=bottom,
            top_codebook=top,
            bottom_usage=UsageWindow(bottom.size, window_len, threshold),
            top_usage=UsageWindow(top.size, window_len, threshold),
            grid_shape=grid_shape,
        )
    else:
        raise ParseError(f"unknown architecture {manifest['architecture']!r} in manifest", 0)

    return model, manifest


def save_model(model: Model, budget: BudgetSpec, manifest: dict, path: Union[str, Path]) -> None:
    Path(path).write_bytes(encode_model(model, budget, manifest))


def load_model(path: Union[str, Path]) -> Tuple[Model, dict]:
    return decode_model(Path(path).read_bytes())
