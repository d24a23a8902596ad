"""Procedural multi-object datasets with ground-truth masks and factors.

Every record is generated from its own RNG stream derived from
``(seed, kind, index)``, so records can be produced in any order or in
parallel with identical results.

Binary file layout (little endian)::

    header: "MOBD" | version u32 | kind u8 | H u16 | W u16 | C u16
            | max_objects u8 | record_count u64 | seed u64
    record: image u8[H*W*C] | object_count u8 | masks u8[max_objects*H*W]
            | background u8[H*W] | factors u16[max_objects*6]

Factor fields per object: shape_id, color_id, x px, y px, scale (per-mille),
angle (centidegrees); unused fields are 0.
"""

from __future__ import annotations

import hashlib
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterator

import numpy as np

MAGIC = b"MOBD"
VERSION = 1
HEADER = struct.Struct("<4sIBHHHBQQ")

KINDS = {"tetris": 0, "multi-dsprites": 1, "multi-dsprites-bin": 2, "shapes": 3}
KIND_NAMES = {v: k for k, v in KINDS.items()}

BLOCK = 5
MAX_PLACEMENT_RETRIES = 1000
TETRIS_COLORS = np.array(
    [[255, 0, 0], [0, 255, 0], [0, 0, 255], [0, 255, 255], [255, 0, 255], [255, 255, 0]],
    dtype=np.uint8,
)
SPRITE_SHAPES = ("square", "ellipse", "heart")
SPRITE_HUES = 12
SPRITE_BASE_RADIUS = 10.0
SHAPES_KINDS = ("triangle_up", "triangle_down", "square")


class DatasetError(IOError):
    pass


@dataclass
class SceneRecord:
    image: np.ndarray  # u8 [H, W, C]
    object_count: int
    masks: np.ndarray  # u8 [max_objects, H, W], 0 or 255
    background_mask: np.ndarray  # u8 [H, W]
    factors: np.ndarray  # u16 [max_objects, 6]

    def __eq__(self, other):
        if not isinstance(other, SceneRecord):
            return NotImplemented
        return (
            self.object_count == other.object_count
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.masks, other.masks)
            and np.array_equal(self.background_mask, other.background_mask)
            and np.array_equal(self.factors, other.factors)
        )


@dataclass(frozen=True)
class DatasetHeader:
    kind: int
    height: int
    width: int
    channels: int
    max_objects: int
    record_count: int
    seed: int
    version: int = VERSION

    @property
    def kind_name(self) -> str:
        return KIND_NAMES[self.kind]

    def record_dtype(self) -> np.dtype:
        h, w, c, n = self.height, self.width, self.channels, self.max_objects
        return np.dtype(
            [
                ("image", "u1", (h, w, c)),
                ("count", "u1"),
                ("masks", "u1", (n, h, w)),
                ("background", "u1", (h, w)),
                ("factors", "<u2", (n, 6)),
            ]
        )

    @property
    def record_size(self) -> int:
        return self.record_dtype().itemsize


def record_rng(seed: int, kind: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), kind, index]))


# ------------------------------------------------------------------ tetris

@lru_cache(maxsize=None)
def tetromino_variants() -> tuple[tuple[tuple[int, int], ...], ...]:
    """Every distinct 4-block polyomino up to translation (rotations counted,
    reflections distinct), as sorted (row, col) cells anchored at (0, 0)."""

    def normalise(cells):
        r0 = min(r for r, _ in cells)
        c0 = min(c for _, c in cells)
        return tuple(sorted((r - r0, c - c0) for r, c in cells))

    shapes = {((0, 0),)}
    for _ in range(3):
        grown = set()
        for shape in shapes:
            for r, c in shape:
                for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    cell = (r + dr, c + dc)
                    if cell not in shape:
                        grown.add(normalise(shape + (cell,)))
        shapes = grown
    return tuple(sorted(shapes))


def _piece_mask(variant: int, x: int, y: int, h: int, w: int) -> np.ndarray:
    mask = np.zeros((h, w), dtype=bool)
    for r, c in tetromino_variants()[variant]:
        mask[y + r * BLOCK : y + (r + 1) * BLOCK, x + c * BLOCK : x + (c + 1) * BLOCK] = True
    return mask


def _tetris_factors(rng, canvas: int, pieces: int) -> np.ndarray:
    variants = tetromino_variants()
    while True:
        occupied = np.zeros((canvas, canvas), dtype=bool)
        rows = []
        attempts = 0
        while len(rows) < pieces and attempts < MAX_PLACEMENT_RETRIES:
            attempts += 1
            v = int(rng.integers(len(variants)))
            color = int(rng.integers(len(TETRIS_COLORS)))
            cells = variants[v]
            ph = (max(r for r, _ in cells) + 1) * BLOCK
            pw = (max(c for _, c in cells) + 1) * BLOCK
            if ph > canvas or pw > canvas:
                continue
            y = int(rng.integers((canvas - ph) // BLOCK + 1)) * BLOCK
            x = int(rng.integers((canvas - pw) // BLOCK + 1)) * BLOCK
            mask = _piece_mask(v, x, y, canvas, canvas)
            if (mask & occupied).any():
                continue
            occupied |= mask
            rows.append((v, color, x, y, 0, 0))
        if len(rows) == pieces:
            return np.array(rows, dtype=np.uint16)


def render_tetris(factors: np.ndarray, count: int, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    image = np.zeros((height, width, 3), dtype=np.uint8)
    masks = np.zeros((len(factors), height, width), dtype=bool)
    for i in range(count):
        v, color, x, y = (int(f) for f in factors[i, :4])
        mask = _piece_mask(v, x, y, height, width)
        image[mask] = TETRIS_COLORS[color]
        masks[i] = mask
    return image, masks


# ------------------------------------------------------------------ sprites

def _hue_rgb(hue_index: int) -> np.ndarray:
    hue = (hue_index % SPRITE_HUES) * 360.0 / SPRITE_HUES
    sector = hue / 60.0
    x = 1.0 - abs(sector % 2.0 - 1.0)
    table = [(1, x, 0), (x, 1, 0), (0, 1, x), (0, x, 1), (x, 0, 1), (1, 0, x)]
    rgb = np.array(table[int(sector) % 6], dtype=np.float64)
    return np.round(rgb * 255.0).astype(np.uint8)


def sprite_mask(shape_id: int, cx: int, cy: int, scale_pm: int, angle_cd: int, height: int, width: int) -> np.ndarray:
    """Hard-edged sprite coverage, tested at pixel centres."""
    radius = SPRITE_BASE_RADIUS * scale_pm / 1000.0
    theta = np.deg2rad(angle_cd / 100.0)
    yy, xx = np.mgrid[0:height, 0:width]
    dx = xx + 0.5 - (cx + 0.5)
    dy = yy + 0.5 - (cy + 0.5)
    cos, sin = np.cos(theta), np.sin(theta)
    u = (cos * dx + sin * dy) / radius
    v = (-sin * dx + cos * dy) / radius
    name = SPRITE_SHAPES[shape_id]
    if name == "square":
        return (np.abs(u) <= 0.8) & (np.abs(v) <= 0.8)
    if name == "ellipse":
        return u * u + (v / 0.5) ** 2 <= 1.0
    # heart, pointing down in image coordinates
    hu, hv = u * 1.15, -v * 1.15 + 0.15
    return (hu * hu + hv * hv - 1.0) ** 3 - hu * hu * hv**3 <= 0.0


def _sprite_factors(rng, binarized: bool) -> tuple[np.ndarray, int]:
    lo, hi = (2, 3) if binarized else (2, 5)
    count = int(rng.integers(lo, hi + 1))
    rows = []
    for _ in range(count):
        shape = int(rng.integers(len(SPRITE_SHAPES)))
        color = 0 if binarized else int(rng.integers(SPRITE_HUES))
        x = int(rng.integers(8, 57))
        y = int(rng.integers(8, 57))
        scale = int(rng.integers(500, 1001))
        angle = int(rng.integers(0, 36000))
        rows.append((shape, color, x, y, scale, angle))
    background = 0 if binarized else int(rng.integers(32, 225))
    return np.array(rows, dtype=np.uint16), background


def render_sprites(
    factors: np.ndarray, count: int, height: int, width: int, background: int, binarized: bool
) -> tuple[np.ndarray, np.ndarray]:
    """Later sprites occlude earlier ones; masks hold visible pixels only."""
    image = np.full((height, width, 3), background, dtype=np.uint8)
    owner = np.full((height, width), -1, dtype=np.int64)
    for i in range(count):
        shape, color, x, y, scale, angle = (int(f) for f in factors[i])
        cover = sprite_mask(shape, x, y, scale, angle, height, width)
        image[cover] = 255 if binarized else _hue_rgb(color)
        owner[cover] = i
    masks = np.stack([owner == i for i in range(len(factors))])
    return image, masks


# ------------------------------------------------------------------ shapes

def shape_mask(shape_id: int, x: int, y: int, height: int, width: int) -> np.ndarray:
    """Fixed-size glyphs anchored at top-left (x, y): triangles 11x6, square 6x6."""
    mask = np.zeros((height, width), dtype=bool)
    name = SHAPES_KINDS[shape_id]
    if name == "square":
        mask[y : y + 6, x : x + 6] = True
        return mask
    for r in range(6):
        half = r if name == "triangle_up" else 5 - r
        mask[y + r, x + 5 - half : x + 6 + half] = True
    return mask


def _shapes_factors(rng, size: int) -> np.ndarray:
    rows = []
    for _ in range(3):
        shape = int(rng.integers(len(SHAPES_KINDS)))
        w = 6 if SHAPES_KINDS[shape] == "square" else 11
        x = int(rng.integers(0, size - w + 1))
        y = int(rng.integers(0, size - 6 + 1))
        rows.append((shape, 0, x, y, 0, 0))
    return np.array(rows, dtype=np.uint16)


def render_shapes(factors: np.ndarray, count: int, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    image = np.zeros((height, width, 1), dtype=np.uint8)
    owner = np.full((height, width), -1, dtype=np.int64)
    for i in range(count):
        cover = shape_mask(int(factors[i, 0]), int(factors[i, 2]), int(factors[i, 3]), height, width)
        image[cover] = 255
        owner[cover] = i
    return image, np.stack([owner == i for i in range(len(factors))])


# ------------------------------------------------------------------ records

def _record(image, masks_bool, factors, count, max_objects) -> SceneRecord:
    h, w = image.shape[:2]
    masks = np.zeros((max_objects, h, w), dtype=np.uint8)
    masks[: len(masks_bool)] = masks_bool.astype(np.uint8) * 255
    fac = np.zeros((max_objects, 6), dtype=np.uint16)
    fac[: len(factors)] = factors
    background = np.where(masks.any(axis=0), 0, 255).astype(np.uint8)
    return SceneRecord(image=image, object_count=count, masks=masks, background_mask=background, factors=fac)


@dataclass(frozen=True)
class GeneratorSpec:
    kind: str
    canvas: int = 35
    pieces: int = 3

    def header(self, n: int, seed: int) -> DatasetHeader:
        if self.kind == "tetris":
            return DatasetHeader(KINDS["tetris"], self.canvas, self.canvas, 3, self.pieces, n, seed)
        if self.kind == "multi-dsprites":
            return DatasetHeader(KINDS[self.kind], 64, 64, 3, 5, n, seed)
        if self.kind == "multi-dsprites-bin":
            return DatasetHeader(KINDS[self.kind], 64, 64, 3, 3, n, seed)
        if self.kind == "shapes":
            return DatasetHeader(KINDS[self.kind], 28, 28, 1, 3, n, seed)
        raise ValueError(f"unknown dataset kind {self.kind!r}; choose from {', '.join(KINDS)}")

    def make(self, seed: int, index: int) -> SceneRecord:
        kind = KINDS[self.kind]
        rng = record_rng(seed, kind, index)
        if self.kind == "tetris":
            if self.canvas < 4 * BLOCK and self.pieces > 0:
                raise ValueError("canvas too small for a tetromino")
            factors = _tetris_factors(rng, self.canvas, self.pieces)
            image, masks = render_tetris(factors, self.pieces, self.canvas, self.canvas)
            return _record(image, masks, factors, self.pieces, self.pieces)
        if self.kind in ("multi-dsprites", "multi-dsprites-bin"):
            binarized = self.kind == "multi-dsprites-bin"
            factors, background = _sprite_factors(rng, binarized)
            image, masks = render_sprites(factors, len(factors), 64, 64, background, binarized)
            return _record(image, masks, factors, len(factors), 3 if binarized else 5)
        factors = _shapes_factors(rng, 28)
        image, masks = render_shapes(factors, 3, 28, 28)
        return _record(image, masks, factors, 3, 3)


def rerender(record: SceneRecord, kind: str) -> tuple[np.ndarray, np.ndarray]:
    """Image and visible masks recomputed from the stored factors alone
    (the sprite background level is read back from a background pixel)."""
    h, w = record.image.shape[:2]
    n = record.object_count
    fac = record.factors[:n]
    if kind == "tetris":
        image, masks = render_tetris(fac, n, h, w)
    elif kind in ("multi-dsprites", "multi-dsprites-bin"):
        bg_pixels = record.image[record.background_mask > 0]
        level = int(bg_pixels[0, 0]) if len(bg_pixels) else 0
        image, masks = render_sprites(fac, n, h, w, level, kind == "multi-dsprites-bin")
    elif kind == "shapes":
        image, masks = render_shapes(fac, n, h, w)
    else:
        raise ValueError(kind)
    full = np.zeros(record.masks.shape, dtype=np.uint8)
    full[:n] = masks.astype(np.uint8) * 255
    return image, full


def _make_chunk(args) -> list[SceneRecord]:
    spec, seed, start, stop = args
    return [spec.make(seed, i) for i in range(start, stop)]


def generate(spec: GeneratorSpec, n: int, seed: int, workers: int = 1) -> tuple[DatasetHeader, list[SceneRecord]]:
    header = spec.header(n, seed)
    if workers <= 1 or n < 64:
        return header, [spec.make(seed, i) for i in range(n)]
    chunk = -(-n // (workers * 4))
    jobs = [(spec, seed, s, min(s + chunk, n)) for s in range(0, n, chunk)]
    with ProcessPoolExecutor(workers) as pool:
        records = [r for part in pool.map(_make_chunk, jobs) for r in part]
    return header, records


def generate_tetris(n: int, seed: int, canvas: int = 35, pieces: int = 3, workers: int = 1):
    return generate(GeneratorSpec("tetris", canvas, pieces), n, seed, workers)


def generate_multi_dsprites(n: int, seed: int, binarized: bool = False, workers: int = 1):
    kind = "multi-dsprites-bin" if binarized else "multi-dsprites"
    return generate(GeneratorSpec(kind), n, seed, workers)


def generate_shapes(n: int, seed: int, workers: int = 1):
    return generate(GeneratorSpec("shapes"), n, seed, workers)


# ------------------------------------------------------------------ file io

def _pack_header(h: DatasetHeader) -> bytes:
    return HEADER.pack(MAGIC, h.version, h.kind, h.height, h.width, h.channels, h.max_objects, h.record_count, h.seed)


def _record_bytes(header: DatasetHeader, rec: SceneRecord) -> bytes:
    arr = np.zeros((), dtype=header.record_dtype())
    arr["image"] = rec.image.reshape(header.height, header.width, header.channels)
    arr["count"] = rec.object_count
    arr["masks"] = rec.masks
    arr["background"] = rec.background_mask
    arr["factors"] = rec.factors
    return arr.tobytes()


def save_dataset(path, header: DatasetHeader, records) -> str:
    """Write header and records sequentially; returns the SHA-256 of the file."""
    path = Path(path)
    digest = hashlib.sha256()
    count = 0
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        head = _pack_header(header)
        fh.write(head)
        digest.update(head)
        for rec in records:
            blob = _record_bytes(header, rec)
            fh.write(blob)
            digest.update(blob)
            count += 1
    if count != header.record_count:
        tmp.unlink()
        raise DatasetError(f"{path}: header says {header.record_count} records, got {count}")
    os.replace(tmp, path)
    return digest.hexdigest()


def read_header(path) -> DatasetHeader:
    with open(path, "rb") as fh:
        raw = fh.read(HEADER.size)
    return _unpack_header(raw, path)


def _unpack_header(raw: bytes, path) -> DatasetHeader:
    if len(raw) < HEADER.size:
        raise DatasetError(f"{path}: truncated header at byte offset {len(raw)}")
    magic, version, kind, h, w, c, max_obj, count, seed = HEADER.unpack(raw)
    if magic != MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    if kind not in KIND_NAMES:
        raise DatasetError(f"{path}: unknown dataset kind {kind}")
    return DatasetHeader(kind, h, w, c, max_obj, count, seed, version)


def _to_record(header: DatasetHeader, arr) -> SceneRecord:
    return SceneRecord(
        image=np.array(arr["image"]),
        object_count=int(arr["count"]),
        masks=np.array(arr["masks"]),
        background_mask=np.array(arr["background"]),
        factors=np.array(arr["factors"], dtype=np.uint16),
    )


def load_dataset(path) -> Iterator[SceneRecord]:
    """Stream records one at a time, validating sizes as it goes."""
    with open(path, "rb") as fh:
        header = _unpack_header(fh.read(HEADER.size), path)
        dtype = header.record_dtype()
        offset = HEADER.size
        for _ in range(header.record_count):
            blob = fh.read(dtype.itemsize)
            if len(blob) != dtype.itemsize:
                raise DatasetError(
                    f"{path}: truncated record at byte offset {offset + len(blob)} "
                    f"(expected {dtype.itemsize} bytes from offset {offset})"
                )
            offset += dtype.itemsize
            yield _to_record(header, np.frombuffer(blob, dtype=dtype)[0])
        if fh.read(1):
            raise DatasetError(f"{path}: trailing bytes after byte offset {offset}")


def load_arrays(path) -> tuple[DatasetHeader, np.ndarray]:
    """Memory-map all records as a structured array (fields as in the layout)."""
    header = read_header(path)
    dtype = header.record_dtype()
    expected = HEADER.size + header.record_count * dtype.itemsize
    actual = os.path.getsize(path)
    if actual < expected:
        done = (actual - HEADER.size) // dtype.itemsize
        raise DatasetError(
            f"{path}: truncated record at byte offset {HEADER.size + done * dtype.itemsize} "
            f"(file has {actual} bytes, expected {expected})"
        )
    if actual > expected:
        raise DatasetError(f"{path}: size mismatch, {actual - expected} trailing bytes")
    if header.record_count == 0:
        return header, np.zeros(0, dtype=dtype)
    data = np.memmap(path, dtype=dtype, mode="r", offset=HEADER.size, shape=(header.record_count,))
    return header, data


def images_as_float(records: np.ndarray) -> np.ndarray:
    """``[N, C, H, W]`` float32 in [0, 1] from the structured record array."""
    return (np.asarray(records["image"], dtype=np.float32) / 255.0).transpose(0, 3, 1, 2).copy()


def ambiguous_tetris_fixture(canvas: int = 20) -> SceneRecord:
    """Two same-coloured pieces forming a 2x4-block bar: splittable as two
    I pieces, two L/J pieces, or two O pieces. Stored as two I pieces."""
    variants = tetromino_variants()
    horizontal_i = variants.index(((0, 0), (0, 1), (0, 2), (0, 3)))
    y = (canvas // BLOCK // 2 - 1) * BLOCK
    factors = np.array([(horizontal_i, 3, 0, y, 0, 0), (horizontal_i, 3, 0, y + BLOCK, 0, 0)], dtype=np.uint16)
    image, masks = render_tetris(factors, 2, canvas, canvas)
    return _record(image, masks, factors, 2, 2)
