"""Procedural captioned shapes, PPM output and the binary checkpoint container."""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "purple": (1.0, 0.0, 1.0),
    "cyan": (0.0, 1.0, 1.0),
}
POSITIONS = ("top-left", "top-right", "bottom-left", "bottom-right")
SIZES = (2.5, 3.5)
DEFAULT_SIZE = 3.5

CAPTION_WORDS = ("a", "in", "the", *SHAPES, *COLORS, "top", "bottom", "left", "right")


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    color: str
    position: str
    size: float = DEFAULT_SIZE

    def __post_init__(self):
        if self.shape not in SHAPES or self.color not in COLORS or self.position not in POSITIONS:
            raise ValueError(f"attribute outside the closed sets: {self}")
        if self.size not in SIZES:
            raise ValueError(f"size must be one of {SIZES}")

    @property
    def caption(self) -> str:
        return f"a {self.color} {self.shape} in the {self.position}"


def parse_caption(caption: str) -> tuple[str, str, str]:
    """(shape, color, position) of a grammar caption; ValueError otherwise."""
    try:
        a, color, shape, in_, rest = caption.strip().lower().split(" ", 4)
    except ValueError:
        raise ValueError(f"unparseable caption {caption!r}") from None
    pos = rest[len("the "):] if rest.startswith("the ") else None
    if a != "a" or in_ != "in" or color not in COLORS or shape not in SHAPES \
            or pos not in POSITIONS:
        raise ValueError(f"unparseable caption {caption!r}")
    return shape, color, pos


def all_scene_specs(size: float = DEFAULT_SIZE) -> list[SceneSpec]:
    return [SceneSpec(s, c, p, size) for s in SHAPES for c in COLORS for p in POSITIONS]


def quadrant_center(position: str, H: int = 16, W: int = 16) -> tuple[float, float]:
    """Centre of the pixel nearest the quadrant middle, so shapes sit on the lattice."""
    row = H / 4 - 0.5 if position.startswith("top") else 3 * H / 4 - 0.5
    col = W / 4 - 0.5 if position.endswith("left") else 3 * W / 4 - 0.5
    return row, col


def shape_mask(shape: str, size: float, center: tuple[float, float],
               H: int = 16, W: int = 16) -> np.ndarray:
    """Boolean coverage, testing pixel centres (i + 0.5, j + 0.5) against the shape."""
    ii, jj = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    dy, dx = ii - center[0], jj - center[1]
    if shape == "circle":
        return dx * dx + dy * dy <= size * size
    if shape == "square":
        half = size - 0.5
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if shape == "triangle":
        # apex up; width grows linearly from the apex to the base
        inside_rows = (dy >= -size) & (dy <= size)
        return inside_rows & (np.abs(dx) <= (dy + size) / 2.0)
    if shape == "cross":
        arm = size / 3.0
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= size)) | \
               ((np.abs(dy) <= arm) & (np.abs(dx) <= size))
    raise ValueError(f"unknown shape {shape!r}")


def render_scene(spec: SceneSpec, H: int = 16, W: int = 16) -> np.ndarray:
    """(3, H, W) image in [-1, 1]: background -1, shape at the colour's RGB."""
    mask = shape_mask(spec.shape, spec.size, quadrant_center(spec.position, H, W), H, W)
    rgb = np.asarray(COLORS[spec.color]) * 2.0 - 1.0
    img = np.full((3, H, W), -1.0)
    img[:, mask] = rgb[:, None]
    return img


def gen_dataset(n: int, rng: np.random.Generator, H: int = 16, W: int = 16):
    """``n`` uniformly sampled scenes as (images, captions, specs)."""
    if n < 1:
        raise ValueError("dataset size must be >= 1")
    s = rng.integers(len(SHAPES), size=n)
    c = rng.integers(len(COLORS), size=n)
    p = rng.integers(len(POSITIONS), size=n)
    z = rng.integers(len(SIZES), size=n)
    colors = list(COLORS)
    specs = [SceneSpec(SHAPES[a], colors[b], POSITIONS[d], SIZES[e])
             for a, b, d, e in zip(s, c, p, z)]
    images = np.stack([render_scene(sp, H, W) for sp in specs])
    captions = [sp.caption for sp in specs]
    return images, captions, specs


def save_dataset(path, images, captions) -> None:
    path = Path(path)
    with _atomic(path) as tmp:
        with open(tmp, "wb") as f:
            np.savez(f, images=images, captions=np.asarray(captions, dtype=str))


def load_dataset(path):
    with np.load(path, allow_pickle=False) as z:
        return z["images"].astype(np.float64), [str(c) for c in z["captions"]]


# -- PPM --------------------------------------------------------------------

def to_bytes(img: np.ndarray) -> np.ndarray:
    """Map [-1, 1] to 0..255 with round-half-away-from-zero."""
    v = (np.clip(img, -1.0, 1.0) + 1.0) * 127.5
    return np.floor(v + 0.5).astype(np.uint8)


def write_image(path, img: np.ndarray) -> None:
    C, H, W = img.shape
    if C != 3:
        raise ValueError("PPM output needs 3 channels")
    payload = to_bytes(img).transpose(1, 2, 0).tobytes()
    with open(path, "wb") as f:
        f.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        f.write(payload)


def read_image(path) -> np.ndarray:
    """Read a binary P6 file back to a (3, H, W) uint8 array."""
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    pos += 1
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ValueError("not an 8-bit binary PPM")
    W, H = int(fields[1]), int(fields[2])
    data = np.frombuffer(raw[pos:pos + 3 * W * H], dtype=np.uint8)
    return data.reshape(H, W, 3).transpose(2, 0, 1)


# -- external embeddings ----------------------------------------------------

def load_external_embeddings(path, vocab, init_table: np.ndarray):
    """Align a ``token v1 ... vd`` text file to ``vocab``.

    Returns ``(table, n_fallback)``: rows for tokens absent from the file keep
    their value from ``init_table``. Lines starting with ``#`` are skipped.
    """
    table = np.array(init_table, dtype=np.float64, copy=True)
    d = table.shape[1]
    found = set()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tok, *vals = line.split()
        if len(vals) != d:
            raise ValueError(f"{path}:{lineno}: expected {d} values, got {len(vals)}")
        if tok in vocab:
            idx = vocab.index(tok)
            table[idx] = np.array([float(v) for v in vals])
            found.add(idx)
    return table, len(vocab) - len(found)


# -- checkpoint container ---------------------------------------------------

MAGIC = b"KLDF"
FORMAT_VERSION = 1

_DTYPES = {"f8": np.dtype("<f8"), "f4": np.dtype("<f4"), "i8": np.dtype("<i8"),
           "i4": np.dtype("<i4"), "u1": np.dtype("u1"), "b1": np.dtype("?")}
_TAGS = {v: k for k, v in _DTYPES.items()}


class CheckpointError(Exception):
    code = 10


class BadMagicError(CheckpointError):
    code = 11


class VersionError(CheckpointError):
    code = 12


class TruncatedError(CheckpointError):
    code = 13


@dataclass
class Checkpoint:
    metadata: dict
    arrays: dict

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (self.metadata == other.metadata and list(self.arrays) == list(other.arrays)
                and all(self.arrays[k].dtype == other.arrays[k].dtype
                        and self.arrays[k].tobytes() == other.arrays[k].tobytes()
                        and self.arrays[k].shape == other.arrays[k].shape
                        for k in self.arrays))


class _atomic:
    def __init__(self, path: Path):
        self.path = Path(path)

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd, self.tmp = tempfile.mkstemp(dir=self.path.parent, prefix=".tmp-")
        os.close(fd)
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            os.replace(self.tmp, self.path)
        elif os.path.exists(self.tmp):
            os.unlink(self.tmp)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.metadata, sort_keys=True, indent=1).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<Q", len(meta)), meta,
             struct.pack("<I", len(ckpt.arrays))]
    for name, arr in ckpt.arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        tag = _TAGS.get(np.dtype(dt))
        if tag is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        key = name.encode("utf-8")
        parts += [struct.pack("<I", len(key)), key, tag.encode("ascii"),
                  struct.pack("<I", arr.ndim), struct.pack(f"<{arr.ndim}Q", *arr.shape),
                  np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()]
    return b"".join(parts)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    data = checkpoint_bytes(ckpt)
    with _atomic(Path(path)) as tmp:
        with open(tmp, "wb") as f:
            f.write(data)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"checkpoint truncated at byte {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError("not a KLDF checkpoint")
    r.take(4)
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    (mlen,) = r.unpack("<Q")
    metadata = json.loads(r.take(mlen).decode("utf-8"))
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (klen,) = r.unpack("<I")
        name = r.take(klen).decode("utf-8")
        tag = r.take(2).decode("ascii")
        if tag not in _DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag!r}")
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        dt = _DTYPES[tag]
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(shape).copy()
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after last array")
    return Checkpoint(metadata, arrays)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
