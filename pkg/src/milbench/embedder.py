"""Token embeddings per slide: a toy linear patch encoder and the MILE format.

A tile is split into L non-overlapping square patches (row-major); each
patch's pixels, scaled to [0, 1], are flattened and linearly projected to the
embedding dimension. Stacking over the K tiles of a bag gives the K x L x D
tensor the classification head consumes. Externally computed backbone
embeddings enter through the same MILE container, so the head is agnostic to
where the tokens came from.

MILE layout (little-endian): magic "MILE", u16 version = 1, u32 K, u32 L,
u32 D, then K*L*D float32 values row-major, then an optional u16
length-prefixed UTF-8 slide_id.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import binio
from .rng import SeededRng
from .tiler import TileBag

MILE_MAGIC = b"MILE"
MILE_VERSION = 1


@dataclass
class EmbeddingBag:
    slide_id: str
    data: np.ndarray = field(repr=False)  # (K, L, D) float32

    @property
    def k(self) -> int:
        return self.data.shape[0]

    @property
    def tokens_per_tile(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def validate(self) -> None:
        if self.data.ndim != 3:
            raise ValueError(f"embedding bag must be (K, L, D), got {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValueError(f"all bag dimensions must be >= 1, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise binio.PayloadError(f"bag {self.slide_id}: non-finite embedding values")


@dataclass
class ToyEncoderParams:
    patch_size: int
    projection: np.ndarray = field(repr=False)  # (3 * patch^2, D)
    bias: np.ndarray = field(repr=False)  # (D,)

    @property
    def dim(self) -> int:
        return self.projection.shape[1]

    def copy(self) -> "ToyEncoderParams":
        return ToyEncoderParams(self.patch_size, self.projection.copy(), self.bias.copy())


def init_toy_encoder(patch_size: int, dim: int, seed: int,
                     dtype=np.float64) -> ToyEncoderParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) projection, zero bias."""
    fan_in = 3 * patch_size * patch_size
    rng = SeededRng(seed)
    limit = 1.0 / np.sqrt(fan_in)
    projection = rng.uniform_array(fan_in * dim, -limit, limit).reshape(fan_in, dim)
    return ToyEncoderParams(patch_size, projection.astype(dtype),
                            np.zeros(dim, dtype=dtype))


def patch_tokens(tile: np.ndarray, patch_size: int) -> np.ndarray:
    """Flattened patches of a square tile, scaled to [0, 1]: (L, 3*patch^2).

    Patches are row-major over the grid; within a patch the flatten order is
    (row, column, channel). Float input is accepted for synthetic tests and
    is scaled the same way.
    """
    side = tile.shape[0]
    if side % patch_size != 0:
        raise ValueError(f"tile side {side} not divisible by patch_size {patch_size}")
    g = side // patch_size
    patches = (
        tile.reshape(g, patch_size, g, patch_size, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(g * g, 3 * patch_size * patch_size)
    )
    return patches.astype(np.float64) / 255.0


def encode_tile(tile: np.ndarray, params: ToyEncoderParams) -> np.ndarray:
    """Linear patch encoding of one tile: (L, D) token matrix.

    Arithmetic runs in the projection's dtype (float64 for training paths,
    float32 for large paper-shape encoders).
    """
    dtype = params.projection.dtype
    patches = patch_tokens(tile, params.patch_size).astype(dtype, copy=False)
    return patches @ params.projection + params.bias.astype(dtype, copy=False)


def encode_bag(bag: TileBag, params: ToyEncoderParams, jobs: int = 1) -> EmbeddingBag:
    """Stack encode_tile over the bag in bag order into a (K, L, D) float32 tensor."""
    if not bag.tiles:
        raise ValueError(f"bag {bag.slide_id} has no tiles")
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            tokens = list(pool.map(lambda t: encode_tile(t, params), bag.tiles))
    else:
        tokens = [encode_tile(t, params) for t in bag.tiles]
    out = EmbeddingBag(bag.slide_id, np.stack(tokens).astype(np.float32))
    out.validate()
    return out


def write_embedding_bag(bag: EmbeddingBag, path: str) -> None:
    bag.validate()
    k, l, d = bag.data.shape
    blob = binio.pack_header(MILE_MAGIC, MILE_VERSION, (k, l, d))
    blob += binio.f32_bytes(bag.data.reshape(-1))
    if bag.slide_id:
        encoded = bag.slide_id.encode("utf-8")
        blob += struct.pack("<H", len(encoded)) + encoded
    with open(path, "wb") as fh:
        fh.write(blob)


def read_embedding_bag(path: str) -> EmbeddingBag:
    with open(path, "rb") as fh:
        reader = binio.Reader(fh.read(), source=path)
    reader.expect_magic(MILE_MAGIC, MILE_VERSION)
    k, l, d = reader.read_u32s(3)
    if k < 1 or l < 1 or d < 1:
        raise binio.PayloadError(f"{path}: invalid dimensions {(k, l, d)}")
    data = reader.read_f32_array(k * l * d, "embedding payload").reshape(k, l, d)
    slide_id = reader.read_optional_string() or ""
    reader.expect_end()
    return EmbeddingBag(slide_id, data)
