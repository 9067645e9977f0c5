"""Gigapixel slide tiling: grid scoring, darkest-tile bags, box resize.

Darkness of a tile is ``255 - mean(R, G, B)`` over its pixels; tissue is dark
on a white background, so the darkest tiles carry the most material. Border
tiles are either virtually padded with white before scoring (``pad_white``)
or dropped (``discard_partial``). A bag is the top-K darkest tiles resized to
model input resolution, cycled from the top when the grid has fewer than K.

All heavy per-tile work (mean scoring, banded block-matmul resize) runs in
numpy with the GIL released, so the thread-pool map over grid chunks scales
on multi-core machines while workers share one read-only pixel buffer.
Results are reduced in grid order, which makes the output independent of the
worker count.
"""

from __future__ import annotations

import csv
import dataclasses
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from math import gcd

import numpy as np

from .slides import SlideImage

EDGE_POLICIES = ("pad_white", "discard_partial")
WHITE = 255

MANIFEST_HEADER = ["slide_id", "patient_id", "label", "row", "col", "darkness", "rank", "tile_path"]


class EmptyGridError(ValueError):
    """Slide smaller than one tile with edge_policy=discard_partial."""


@dataclass
class TilerConfig:
    tile_size: int = 1024
    bag_size: int = 16
    model_input_size: int = 384
    edge_policy: str = "pad_white"
    darkness_downsample: int = 4

    def validate(self) -> None:
        if self.tile_size <= 0:
            raise ValueError(f"tile_size must be positive, got {self.tile_size}")
        if self.bag_size <= 0:
            raise ValueError(f"bag_size must be positive, got {self.bag_size}")
        if not 0 < self.model_input_size <= self.tile_size:
            raise ValueError(
                f"model_input_size must be in (0, tile_size], got {self.model_input_size}"
            )
        if self.edge_policy not in EDGE_POLICIES:
            raise ValueError(f"edge_policy must be one of {EDGE_POLICIES}, got {self.edge_policy!r}")
        if self.darkness_downsample < 1:
            raise ValueError("darkness_downsample must be >= 1")


@dataclass
class TileRecord:
    slide_id: str
    row: int
    col: int
    darkness: float
    rank: int


@dataclass
class TileBag:
    slide_id: str
    patient_id: str
    label: str | None
    tiles: list[np.ndarray] = field(repr=False)
    records: list[TileRecord] = field(default_factory=list)


_EXECUTOR_LOCK = threading.Lock()
_EXECUTORS: dict[int, ThreadPoolExecutor] = {}


def _get_executor(jobs: int) -> ThreadPoolExecutor:
    # pools persist so worker threads keep warm allocator arenas and scratch
    with _EXECUTOR_LOCK:
        pool = _EXECUTORS.get(jobs)
        if pool is None:
            pool = _EXECUTORS[jobs] = ThreadPoolExecutor(max_workers=jobs)
        return pool


def _parallel_map(fn, items, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    return list(_get_executor(jobs).map(fn, items))


def _extract_padded(pixels: np.ndarray, row: int, col: int, tile_size: int) -> np.ndarray:
    """Tile (row, col) of the grid, white-padded to full size at borders."""
    y0, x0 = row * tile_size, col * tile_size
    region = pixels[y0 : y0 + tile_size, x0 : x0 + tile_size]
    if region.shape[0] == tile_size and region.shape[1] == tile_size:
        return region
    padded = np.full((tile_size, tile_size, 3), WHITE, dtype=np.uint8)
    padded[: region.shape[0], : region.shape[1]] = region
    return padded


def tile_darkness(pixels: np.ndarray, row: int, col: int, cfg: TilerConfig) -> float:
    """255 - mean intensity of the (padded) tile, sampled every
    darkness_downsample-th pixel along both axes starting at the corner."""
    tile = _extract_padded(pixels, row, col, cfg.tile_size)
    d = cfg.darkness_downsample
    sampled = tile[::d, ::d] if d > 1 else tile
    # uint8 sums are exact in float64, so this mean is exact
    return 255.0 - float(sampled.mean())


def grid_shape(slide: SlideImage, cfg: TilerConfig) -> tuple[int, int]:
    ts = cfg.tile_size
    if cfg.edge_policy == "pad_white":
        return (-(-slide.height // ts), -(-slide.width // ts))
    return (slide.height // ts, slide.width // ts)


def _score_row_chunk(pixels: np.ndarray, row: int, col_lo: int, col_hi: int,
                     cfg: TilerConfig) -> list[float]:
    """Darkness of tiles [col_lo, col_hi) in one grid row.

    Full-height runs of full-width tiles are scored with a single reshaped
    mean (one GIL-releasing reduction); border tiles fall back to the
    per-tile path. Values are bit-identical either way because uint8 sums are
    exact in float64.
    """
    ts, d = cfg.tile_size, cfg.darkness_downsample
    height, width = pixels.shape[:2]
    full_height = (row + 1) * ts <= height
    n_full = min(col_hi, width // ts)

    scores: list[float] = []
    if full_height and n_full > col_lo and ts % d == 0:
        sampled = pixels[row * ts : (row + 1) * ts : d, col_lo * ts : n_full * ts : d]
        per_tile = sampled.reshape(sampled.shape[0], n_full - col_lo,
                                   ts // d, 3).mean(axis=(0, 2, 3))
        scores = [255.0 - float(m) for m in per_tile]
    else:
        n_full = col_lo
    for col in range(n_full, col_hi):
        scores.append(tile_darkness(pixels, row, col, cfg))
    return scores


def grid_tiles(slide: SlideImage, cfg: TilerConfig, jobs: int = 1) -> list[TileRecord]:
    """Score every grid cell of the slide; ranks are descending-darkness
    positions over the whole grid, ties broken by (row, col) ascending."""
    slide.validate()
    cfg.validate()
    rows, cols = grid_shape(slide, cfg)
    if rows == 0 or cols == 0:
        raise EmptyGridError(
            f"slide {slide.slide_id} ({slide.width}x{slide.height}) has no complete "
            f"{cfg.tile_size}px tile under edge_policy=discard_partial"
        )

    # one task per row chunk; halving rows evens the load across workers
    chunk = cols if jobs <= 1 or cols < 4 else -(-cols // 2)
    spans = [(r, lo, min(lo + chunk, cols))
             for r in range(rows) for lo in range(0, cols, chunk)]
    chunk_scores = _parallel_map(
        lambda span: _score_row_chunk(slide.pixels, span[0], span[1], span[2], cfg),
        spans, jobs)
    scores = [s for chunk_result in chunk_scores for s in chunk_result]
    cells = [(r, c) for r in range(rows) for c in range(cols)]

    order = sorted(range(len(cells)), key=lambda i: (-scores[i], cells[i][0], cells[i][1]))
    ranks = [0] * len(cells)
    for rank, i in enumerate(order):
        ranks[i] = rank
    return [
        TileRecord(slide.slide_id, r, c, scores[i], ranks[i])
        for i, (r, c) in enumerate(cells)
    ]


def select_top_k(records: list[TileRecord], k: int) -> list[TileRecord]:
    """Top-k darkest records, ties by (row, col) ascending; cycles from the
    darkest again when fewer than k exist. Ranks are rewritten to bag position."""
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    if not records:
        raise ValueError("records must be non-empty")
    ordered = sorted(records, key=lambda t: (-t.darkness, t.row, t.col))
    return [
        dataclasses.replace(ordered[i % len(ordered)], rank=i)
        for i in range(k)
    ]


def _block_weights(src: int, dst: int) -> tuple[np.ndarray, int, int]:
    """Dense block of 1-D area-overlap weights for box downsampling dst <= src.

    The mapping repeats every dst/gcd output pixels over src/gcd source
    pixels, so one (tp, sp) block times tp covers the whole axis. Entries are
    tp * overlap, which is always an exact integer; a row sums to sp, so the
    2-D average is (block-weighted sum) / sp^2. The narrowest dtype that
    represents every intermediate integer exactly is chosen.
    """
    g = gcd(src, dst)
    tp, sp = dst // g, src // g
    scale = sp / tp
    j = np.arange(tp, dtype=np.float64)[:, None]
    i = np.arange(sp, dtype=np.float64)[None, :]
    overlap = np.clip(np.minimum(i + 1.0, (j + 1.0) * scale) - np.maximum(i, j * scale),
                      0.0, None)
    weights = np.rint(overlap * tp)
    # largest intermediate is 2*(255*sp^2) + sp^2 during half-up rounding
    peak = 511 * sp * sp
    if peak < 2**16:
        dtype = np.uint16  # integer matmul: half the traffic of float32
    elif peak < 2**24:
        dtype = np.float32
    else:
        dtype = np.float64
    return weights.astype(dtype), sp, tp


_RESIZE_SCRATCH = threading.local()


def _band_blocks(g: int, sp: int) -> int:
    """Largest divisor of g keeping a band at <= ~128 source rows."""
    limit = max(1, 128 // sp)
    best = 1
    for div in range(1, g + 1):
        if g % div == 0 and div <= limit:
            best = div
    return best


def _resize_scratch(src: int, target: int, dtype, nb: int, sp: int, tp: int, g: int):
    store = getattr(_RESIZE_SCRATCH, "bufs", None)
    if store is None:
        store = _RESIZE_SCRATCH.bufs = {}
    key = (src, target, np.dtype(dtype).str)
    bufs = store.get(key)
    if bufs is None:
        band_t = nb * tp
        bufs = store[key] = {
            "band": np.empty((nb, sp, src * 3), dtype),
            "rows": np.empty((nb, tp, src * 3), dtype),
            "rows_t": np.empty((src, band_t, 3), dtype),
            "cols": np.empty((g, tp, band_t * 3), dtype),
        }
    return bufs


def _resize_band(tile: np.ndarray, out: np.ndarray, b0: int, nb: int,
                 weights: np.ndarray, sp: int, tp: int, g: int) -> None:
    """One output band of the exact box resize, written into ``out``."""
    src = tile.shape[0]
    target = out.shape[0]
    den = sp * sp
    band_t = nb * tp
    bufs = _resize_scratch(src, target, weights.dtype, nb, sp, tp, g)

    np.copyto(bufs["band"].reshape(nb * sp, src * 3),
              tile[b0 * sp : (b0 + nb) * sp].reshape(nb * sp, src * 3),
              casting="unsafe")
    np.matmul(weights, bufs["band"], out=bufs["rows"])  # row pass
    np.copyto(bufs["rows_t"],
              bufs["rows"].reshape(band_t, src, 3).transpose(1, 0, 2))
    cols = bufs["cols"]
    np.matmul(weights, bufs["rows_t"].reshape(g, sp, band_t * 3),
              out=cols)  # column pass
    # round half-up in place; every value is an exact integer in `dtype`
    cols *= 2
    cols += den
    np.floor_divide(cols, 2 * den, out=cols)
    np.copyto(out[b0 * tp : b0 * tp + band_t],
              cols.reshape(target, band_t, 3).transpose(1, 0, 2),
              casting="unsafe")


def _box_resize_exact(tile: np.ndarray, target: int) -> np.ndarray:
    """Exact banded block-matmul box resize of a square (S, S, 3) uint8 array.

    All arithmetic is integer-valued (carried in a dtype that represents
    those integers exactly), so results equal the ideal area average rounded
    half-up, independent of platform, band size, or summation order. Only
    matmuls and copies are used (no fancy indexing, which would hold the
    GIL), and per-thread scratch buffers avoid repeated large allocations, so
    the thread pool scales.
    """
    src = tile.shape[0]
    weights, sp, tp = _block_weights(src, target)
    g = src // sp
    nb = _band_blocks(g, sp)
    out = np.empty((target, target, 3), dtype=np.uint8)
    for b0 in range(0, g, nb):
        _resize_band(tile, out, b0, nb, weights, sp, tp, g)
    return out


def resize_tile(tile: np.ndarray, target: int) -> np.ndarray:
    """Area-average (box) downsample of a square tile, rounded half-up to uint8."""
    if tile.ndim != 3 or tile.shape[0] != tile.shape[1]:
        raise ValueError(f"tile must be square (S, S, 3), got {tile.shape}")
    if target > tile.shape[0]:
        raise ValueError(f"target {target} exceeds source {tile.shape[0]}")
    if target <= 0:
        raise ValueError(f"target must be positive, got {target}")
    if target == tile.shape[0]:
        return np.ascontiguousarray(tile, dtype=np.uint8).copy()
    return _box_resize_exact(np.ascontiguousarray(tile, dtype=np.uint8), target)


def build_bag(slide: SlideImage, cfg: TilerConfig, jobs: int = 1) -> TileBag:
    """grid_tiles -> select_top_k -> resize_tile, deterministic for any jobs."""
    records = grid_tiles(slide, cfg, jobs=jobs)
    selected = select_top_k(records, cfg.bag_size)
    src, target = cfg.tile_size, cfg.model_input_size

    if jobs <= 1 or src == target:
        tiles = [
            resize_tile(_extract_padded(slide.pixels, rec.row, rec.col, src), target)
            for rec in selected
        ]
    else:
        # parallelize at (tile, band) granularity: finer tasks even the load
        # across workers; band outputs are disjoint slices, so no locking
        weights, sp, tp = _block_weights(src, target)
        g = src // sp
        nb = _band_blocks(g, sp)
        sources = [_extract_padded(slide.pixels, rec.row, rec.col, src)
                   for rec in selected]
        tiles = [np.empty((target, target, 3), dtype=np.uint8) for _ in selected]
        tasks = [(i, b0) for i in range(len(selected)) for b0 in range(0, g, nb)]
        _parallel_map(
            lambda task: _resize_band(sources[task[0]], tiles[task[0]],
                                      task[1], nb, weights, sp, tp, g),
            tasks, jobs)
    return TileBag(slide.slide_id, slide.patient_id, slide.label, tiles, selected)


@dataclass
class ManifestRow:
    slide_id: str
    patient_id: str
    label: str | None
    row: int
    col: int
    darkness: float
    rank: int
    tile_path: str


def write_manifest_rows(rows: list[ManifestRow], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in rows:
            writer.writerow(
                [r.slide_id, r.patient_id, r.label or "", r.row, r.col,
                 f"{r.darkness:.6f}", r.rank, r.tile_path]
            )


def write_manifest(bags: list[TileBag], path: str, jobs: int = 1) -> list[ManifestRow]:
    """Write the bag manifest CSV plus one PNG per tile next to it.

    Tiles are named ``<slide_id>_<rank>.png``; darkness is serialized with six
    decimal places. PNG encoding parallelizes over tiles; files land in bag
    order either way, so output bytes are independent of ``jobs``. Returns the
    rows written.
    """
    import io

    from PIL import Image

    if not bags:
        raise ValueError("bags must be non-empty")
    out_dir = os.path.dirname(os.path.abspath(path))

    def encode(tile: np.ndarray) -> bytes:
        buf = io.BytesIO()
        Image.fromarray(tile, "RGB").save(buf, format="PNG")
        return buf.getvalue()

    rows = []
    for bag in bags:
        encoded = _parallel_map(encode, bag.tiles, jobs)
        for blob, rec in zip(encoded, bag.records):
            tile_name = f"{bag.slide_id}_{rec.rank}.png"
            with open(os.path.join(out_dir, tile_name), "wb") as fh:
                fh.write(blob)
            rows.append(
                ManifestRow(bag.slide_id, bag.patient_id, bag.label,
                            rec.row, rec.col, rec.darkness, rec.rank, tile_name)
            )
    write_manifest_rows(rows, path)
    return rows


def read_manifest(path: str) -> list[ManifestRow]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != MANIFEST_HEADER:
            raise ValueError(f"unexpected manifest header {header} in {path}")
        return [
            ManifestRow(sid, pid, label or None, int(row), int(col),
                        float(dark), int(rank), tile_path)
            for sid, pid, label, row, col, dark, rank, tile_path in reader
        ]
