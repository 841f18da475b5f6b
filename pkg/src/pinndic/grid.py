"""Field containers and their on-disk formats.

Grids are stored as 2-D numpy arrays indexed ``[y, x]`` (row-major), so
``values[y, x]`` is the pixel at column ``x`` and row ``y``.  Grayscale stays in
native 0-255 units everywhere; nothing is rescaled on load.

File formats
------------
DICF (lossless container)::

    b"DICF" | u16 version=1 | u16 channels (1|2) | u32 width | u32 height
    | channels*width*height f64 values, row-major, channel-planar

all integers and floats little-endian.

PGM: binary ``P5`` with maxval 255.

CSV: one line per grid row, comma separated, LF endings.  Two-channel fields
write the ``u`` block, one empty line, then the ``v`` block.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DICF_MAGIC = b"DICF"
DICF_VERSION = 1
_DICF_HEADER = struct.Struct("<4sHHII")


class FormatError(ValueError):
    """A file could not be decoded; ``offset`` is the byte where decoding failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DimensionError(ValueError):
    pass


class EmptyRoiError(ValueError):
    pass


def _frozen(a, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    if out.ndim != 2 or out.shape[0] < 1 or out.shape[1] < 1:
        raise DimensionError(f"expected a non-empty 2-D grid, got shape {out.shape}")
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class ScalarField:
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def at(self, x: int, y: int) -> float:
        return float(self.values[y, x])


@dataclass(frozen=True, eq=False)
class VectorField2:
    """Per-pixel displacement; ``u`` runs along x (columns), ``v`` along y (rows)."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u, v = _frozen(self.u), _frozen(self.v)
        if u.shape != v.shape:
            raise DimensionError(f"u {u.shape} and v {v.shape} differ")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    @classmethod
    def zeros(cls, width: int, height: int) -> "VectorField2":
        z = np.zeros((height, width))
        return cls(z, z)


@dataclass(frozen=True, eq=False)
class RoiMask:
    inside: np.ndarray

    def __post_init__(self):
        inside = _frozen(self.inside, dtype=bool)
        if not inside.any():
            raise EmptyRoiError("ROI mask selects no pixels")
        object.__setattr__(self, "inside", inside)

    @property
    def width(self) -> int:
        return self.inside.shape[1]

    @property
    def height(self) -> int:
        return self.inside.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.inside.shape

    @property
    def count(self) -> int:
        return int(self.inside.sum())

    @classmethod
    def full(cls, width: int, height: int) -> "RoiMask":
        return cls(np.ones((height, width), dtype=bool))

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates (x, y) of inside pixels, enumerated row-major."""
        ys, xs = np.nonzero(self.inside)
        return xs.astype(np.float64), ys.astype(np.float64)

    def check_shape(self, shape: tuple[int, int], what: str = "image") -> None:
        if tuple(shape) != self.shape:
            raise DimensionError(
                f"mask is {self.width}x{self.height} but {what} is {shape[1]}x{shape[0]}"
            )


def check_same_shape(*items) -> tuple[int, int]:
    shapes = {tuple(it.shape) for it in items if it is not None}
    if len(shapes) != 1:
        raise DimensionError(f"dimension mismatch: {sorted(shapes)}")
    return shapes.pop()


# -- PGM ---------------------------------------------------------------------

_WS = b" \t\r\n\v\f"


def _pgm_tokens(data: bytes, count: int) -> tuple[list[tuple[bytes, int]], int]:
    """Read ``count`` header tokens after the magic; return them and the payload offset."""
    pos = 2
    tokens = []
    while len(tokens) < count:
        if pos >= len(data):
            raise FormatError("truncated PGM header", pos)
        c = data[pos:pos + 1]
        if c in _WS and c:
            pos += 1
            continue
        if c == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1] not in _WS and data[pos:pos + 1] != b"#":
            pos += 1
        tokens.append((data[start:pos], start))
    if pos >= len(data) or data[pos:pos + 1] not in _WS:
        raise FormatError("expected a single whitespace byte after maxval", pos)
    return tokens, pos + 1


def decode_pgm(data: bytes) -> np.ndarray:
    if data[:2] != b"P5":
        raise FormatError("not a binary PGM (magic must be P5)", 0)
    tokens, payload = _pgm_tokens(data, 3)
    nums = []
    for tok, off in tokens:
        if not tok.isdigit():
            raise FormatError(f"malformed PGM header token {tok!r}", off)
        nums.append(int(tok))
    width, height, maxval = nums
    if width < 1 or height < 1:
        raise FormatError("PGM dimensions must be positive", tokens[0][1])
    if maxval != 255:
        raise FormatError(f"unsupported PGM maxval {maxval} (only 255)", tokens[2][1])
    need = width * height
    have = len(data) - payload
    if have < need:
        raise FormatError(
            f"truncated PGM payload: need {need} bytes, found {have}", payload + have
        )
    pix = np.frombuffer(data, dtype=np.uint8, count=need, offset=payload)
    return pix.reshape(height, width).astype(np.float64)


def encode_pgm(values: np.ndarray) -> bytes:
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 255.0)
    # non-negative after the clamp, so floor(x + 0.5) is round-half-away-from-zero
    pix = np.floor(v + 0.5).astype(np.uint8)
    h, w = pix.shape
    return b"P5\n%d %d\n255\n" % (w, h) + pix.tobytes()


# -- DICF --------------------------------------------------------------------

def encode_dicf(channels: list[np.ndarray]) -> bytes:
    h, w = channels[0].shape
    head = _DICF_HEADER.pack(DICF_MAGIC, DICF_VERSION, len(channels), w, h)
    body = b"".join(np.ascontiguousarray(c, dtype="<f8").tobytes() for c in channels)
    return head + body


def decode_dicf(data: bytes) -> list[np.ndarray]:
    if len(data) < _DICF_HEADER.size:
        raise FormatError("truncated DICF header", len(data))
    magic, version, channels, w, h = _DICF_HEADER.unpack_from(data)
    if magic != DICF_MAGIC:
        raise FormatError("bad DICF magic", 0)
    if version != DICF_VERSION:
        raise FormatError(f"unsupported DICF version {version}", 4)
    if channels not in (1, 2):
        raise FormatError(f"unsupported DICF channel count {channels}", 6)
    if w < 1 or h < 1:
        raise FormatError("DICF dimensions must be positive", 8)
    need = channels * w * h * 8
    have = len(data) - _DICF_HEADER.size
    if have < need:
        raise FormatError(
            f"truncated DICF payload: need {need} bytes, found {have}",
            _DICF_HEADER.size + have,
        )
    flat = np.frombuffer(data, dtype="<f8", count=channels * w * h, offset=_DICF_HEADER.size)
    return [flat[i * w * h:(i + 1) * w * h].reshape(h, w).astype(np.float64) for i in range(channels)]


# -- CSV ---------------------------------------------------------------------

def _csv_block(values: np.ndarray) -> str:
    return "".join(",".join(repr(float(x)) for x in row) + "\n" for row in values)


def encode_csv(channels: list[np.ndarray]) -> bytes:
    return "\n".join(_csv_block(c) for c in channels).encode("ascii")


def decode_csv(data: bytes) -> list[np.ndarray]:
    text = data.decode("ascii")
    blocks, cur = [], []
    for i, line in enumerate(text.split("\n")):
        if line.strip() == "":
            if cur:
                blocks.append(cur)
                cur = []
            continue
        try:
            cur.append([float(t) for t in line.split(",")])
        except ValueError as exc:
            offset = len("\n".join(text.split("\n")[:i])) + (1 if i else 0)
            raise FormatError(f"bad CSV number on line {i + 1}: {exc}", offset) from None
    if cur:
        blocks.append(cur)
    if len(blocks) not in (1, 2):
        raise FormatError(f"expected 1 or 2 CSV blocks, found {len(blocks)}", 0)
    out = []
    for b in blocks:
        widths = {len(r) for r in b}
        if len(widths) != 1:
            raise FormatError("ragged CSV rows", 0)
        out.append(np.array(b, dtype=np.float64))
    return out


# -- public load/save ----------------------------------------------------------

def _channels(field) -> list[np.ndarray]:
    if isinstance(field, VectorField2):
        return [field.u, field.v]
    if isinstance(field, ScalarField):
        return [field.values]
    if isinstance(field, RoiMask):
        return [field.inside.astype(np.float64) * 255.0]
    raise TypeError(f"cannot save {type(field).__name__}")


def _format_for(path: Path, fmt: str | None) -> str:
    if fmt:
        return fmt.lower()
    ext = path.suffix.lower().lstrip(".")
    return {"pgm": "pgm", "dicf": "dicf", "csv": "csv"}.get(ext, "dicf")


def save_field(field, path, format: str | None = None) -> None:
    """Write ``field`` as pgm, dicf or csv (inferred from the extension if not given)."""
    path = Path(path)
    fmt = _format_for(path, format)
    chans = _channels(field)
    if fmt == "pgm":
        if len(chans) != 1:
            raise ValueError("pgm output holds one channel; save vector fields as dicf or csv")
        data = encode_pgm(chans[0])
    elif fmt == "dicf":
        data = encode_dicf(chans)
    elif fmt == "csv":
        data = encode_csv(chans)
    else:
        raise ValueError(f"unknown field format {fmt!r}")
    path.write_bytes(data)


def _decode_any(data: bytes, path: Path) -> list[np.ndarray]:
    if data[:4] == DICF_MAGIC:
        return decode_dicf(data)
    if data[:2] == b"P5":
        return [decode_pgm(data)]
    if path.suffix.lower() == ".csv":
        return decode_csv(data)
    raise FormatError("unrecognised file (expected P5 PGM, DICF or .csv)", 0)


def load_field(path) -> ScalarField | VectorField2:
    path = Path(path)
    chans = _decode_any(path.read_bytes(), path)
    if len(chans) == 1:
        return ScalarField(chans[0])
    return VectorField2(chans[0], chans[1])


def load_image(path) -> ScalarField:
    """Load a grayscale image (P5 PGM or single-channel DICF/CSV) in 0-255 units."""
    field = load_field(path)
    if not isinstance(field, ScalarField):
        raise FormatError("expected a single-channel image, found two channels", 6)
    return field


def load_mask(path, shape: tuple[int, int] | None = None) -> RoiMask:
    """Nonzero pixels are inside.  ``shape`` is (height, width) of the target image."""
    img = load_image(path)
    if shape is not None and tuple(shape) != img.shape:
        raise DimensionError(
            f"mask is {img.width}x{img.height} but image is {shape[1]}x{shape[0]}"
        )
    return RoiMask(img.values > 0)
