"""This module contains a reader and a writer for binary portable pixmaps (P5 grayscale, P6 color, maxval 255).

Images are float arrays of shape (H, W, C) in [0, 1]. Files written here use the header
`P5\\n<width> <height>\\n255\\n`, so reading then writing such a file reproduces it byte for byte.
"""
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from ..errors import InputError, ParseError

MAGIC_CHANNELS = {b"P5": 1, b"P6": 3}
CHANNELS_MAGIC = {channels: magic for magic, channels in MAGIC_CHANNELS.items()}
MAX_VALUE = 255
WHITESPACE = b" \t\n\r\v\f"
DIGITS = b"0123456789"


def _skip_separators(data: bytes, pos: int) -> int:
    """Skip whitespace and `#` comments that run to the end of the line."""
    while pos < len(data):
        if data[pos] in WHITESPACE:
            pos += 1
        elif data[pos] == ord("#"):
            while pos < len(data) and data[pos] not in b"\r\n":
                pos += 1
        else:
            break

    return pos


def _read_header(data: bytes) -> Tuple[int, int, int, int]:
    """Returns width, height, channels and the offset of the first payload byte."""
    if len(data) < 2:
        raise ParseError("file too short for a magic number", 0)
    magic = data[:2]
    if magic not in MAGIC_CHANNELS:
        raise ParseError(f"unsupported magic {magic.decode('latin-1')!r}, expected P5 or P6", 0)

    pos = 2
    fields: List[int] = []
    field_offsets: List[int] = []
    for name in ("width", "height", "maxval"):
        if pos < len(data) and data[pos] not in WHITESPACE and data[pos] != ord("#"):
            raise ParseError(f"expected whitespace before {name}", pos)
        pos = _skip_separators(data, pos)
        start = pos
        while pos < len(data) and data[pos] in DIGITS:
            pos += 1
        if start == pos:
            raise ParseError(f"expected a decimal {name}", pos)
        fields.append(int(data[start:pos]))
        field_offsets.append(start)

    if pos >= len(data) or data[pos] not in WHITESPACE:
        raise ParseError("expected one whitespace byte after maxval", pos)

    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ParseError(f"image size {width}x{height} must be positive", field_offsets[0])
    if maxval != MAX_VALUE:
        raise ParseError(f"unsupported maxval {maxval}, only {MAX_VALUE} is read", field_offsets[2])

    return width, height, MAGIC_CHANNELS[magic], pos + 1


def parse_pnm(data: bytes) -> np.ndarray:
    width, height, channels, start = _read_header(data)
    expected = width * height * channels
    available = len(data) - start
    if available < expected:
        raise ParseError(f"truncated payload, expected {expected} bytes but {available} remain", len(data))
    if available > expected:
        raise ParseError(f"{available - expected} trailing bytes after the payload", start + expected)

    pixels = np.frombuffer(data, dtype=np.uint8, count=expected, offset=start)

    return pixels.reshape(height, width, channels).astype(np.float64) / MAX_VALUE


def to_bytes(image: np.ndarray) -> np.ndarray:
    """Quantize [0, 1] pixels to u8, rounding half up; values outside [0, 1] are clamped."""
    image = np.asarray(image, dtype=np.float64)
    if not np.isfinite(image).all():
        raise InputError("image contains non-finite pixels")

    return np.clip(np.floor(image * MAX_VALUE + 0.5), 0, MAX_VALUE).astype(np.uint8)


def format_pnm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[..., None]
    if image.ndim != 3 or image.shape[2] not in CHANNELS_MAGIC or min(image.shape[:2]) < 1:
        raise InputError(f"cannot store an image of shape {image.shape} as P5 or P6")

    height, width, channels = image.shape
    header = b"%s\n%d %d\n%d\n" % (CHANNELS_MAGIC[channels], width, height, MAX_VALUE)

    return header + to_bytes(image).tobytes()


def read_image(path: Union[str, Path]) -> np.ndarray:
    return parse_pnm(Path(path).read_bytes())


def write_image(image: np.ndarray, path: Union[str, Path]) -> None:
    Path(path).write_bytes(format_pnm(image))


def read_corpus(directory: Union[str, Path]) -> np.ndarray:
    """Stack every `.pgm`/`.ppm`/`.pnm` file of a directory, in file name order, into one batch."""
    paths = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in (".pgm", ".ppm", ".pnm"))
    if not paths:
        raise InputError(f"no portable pixmaps found in {directory}")

    images = [read_image(p) for p in paths]
    shapes = {image.shape for image in images}
    if len(shapes) != 1:
        raise InputError(f"corpus images in {directory} have differing shapes {sorted(shapes)}")

    return np.stack(images)
