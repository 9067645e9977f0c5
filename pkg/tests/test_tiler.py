import dataclasses
from fractions import Fraction

import numpy as np
import pytest

from milbench.slides import SlideImage
from milbench.tiler import (
    EmptyGridError,
    ManifestRow,
    TileRecord,
    TilerConfig,
    build_bag,
    grid_tiles,
    read_manifest,
    resize_tile,
    select_top_k,
    tile_darkness,
    write_manifest,
    write_manifest_rows,
)

from conftest import constant_tile, random_tile


def _slide(pixels, slide_id="s", patient_id="p", label=None):
    return SlideImage(slide_id, patient_id, label, pixels)


def oracle_darkness(pixels, row, col, tile_size, stride):
    """Independent scoring: explicit integer accumulation over sample points,
    padding out-of-bounds samples with white."""
    total, count = 0, 0
    for yy in range(0, tile_size, stride):
        for xx in range(0, tile_size, stride):
            y, x = row * tile_size + yy, col * tile_size + xx
            if y < pixels.shape[0] and x < pixels.shape[1]:
                total += int(pixels[y, x, 0]) + int(pixels[y, x, 1]) + int(pixels[y, x, 2])
            else:
                total += 3 * 255
            count += 3
    return 255.0 - total / count


def oracle_box_resize(tile, target):
    """Straight-line 2-D area average in exact rational arithmetic.

    Each output pixel covers source window [o*scale, (o+1)*scale); weights
    are fractional coverage. Fractions make the half-up rounding exact, so
    ties are decided identically to the ideal definition.
    """
    src = tile.shape[0]
    scale = Fraction(src, target)
    out = np.zeros((target, target, 3), dtype=np.uint8)
    for oy in range(target):
        for ox in range(target):
            y0, y1 = oy * scale, (oy + 1) * scale
            x0, x1 = ox * scale, (ox + 1) * scale
            for c in range(3):
                acc = Fraction(0)
                for y in range(int(y0), -int(-y1 // 1)):
                    wy = min(Fraction(y + 1), y1) - max(Fraction(y), y0)
                    for x in range(int(x0), -int(-x1 // 1)):
                        wx = min(Fraction(x + 1), x1) - max(Fraction(x), x0)
                        acc += wy * wx * int(tile[y, x, c])
                mean = acc / (scale * scale)
                out[oy, ox, c] = int((mean + Fraction(1, 2)).__floor__())
    return out


# ---------------------------------------------------------------- grid_tiles

def test_all_white_slide_darkness_zero():
    cfg = TilerConfig(tile_size=1024, darkness_downsample=1)
    records = grid_tiles(_slide(constant_tile(2048, 255)), cfg)
    assert len(records) == 4
    assert all(r.darkness == 0.0 for r in records)


def test_all_black_slide_darkness_255():
    cfg = TilerConfig(tile_size=1024, darkness_downsample=1)
    records = grid_tiles(_slide(constant_tile(1024, 0)), cfg)
    assert len(records) == 1
    assert records[0].darkness == 255.0


def test_gradient_grid_matches_brute_force():
    # tile (r, c) filled with gray 16*(4r+c); oracle scores all 16 tiles
    ts = 8
    pixels = np.zeros((4 * ts, 4 * ts, 3), dtype=np.uint8)
    for r in range(4):
        for c in range(4):
            pixels[r * ts : (r + 1) * ts, c * ts : (c + 1) * ts] = 16 * (4 * r + c)
    cfg = TilerConfig(tile_size=ts, model_input_size=ts, darkness_downsample=1)
    records = grid_tiles(_slide(pixels), cfg)
    for rec in records:
        assert rec.darkness == oracle_darkness(pixels, rec.row, rec.col, ts, 1)
    by_rank = sorted(records, key=lambda r: r.rank)
    oracle_order = sorted(records, key=lambda r: (-r.darkness, r.row, r.col))
    assert [(r.row, r.col) for r in by_rank] == [(r.row, r.col) for r in oracle_order]


def test_downsampled_scoring_matches_strided_oracle(np_rng):
    pixels = random_tile(np_rng, 64)
    cfg = TilerConfig(tile_size=32, model_input_size=32, darkness_downsample=4)
    for rec in grid_tiles(_slide(pixels), cfg):
        assert rec.darkness == oracle_darkness(pixels, rec.row, rec.col, 32, 4)


def test_pad_white_scores_partial_tiles(np_rng):
    pixels = random_tile(np_rng, 48)  # 48 = 32 + 16: one partial column/row
    cfg = TilerConfig(tile_size=32, model_input_size=32, edge_policy="pad_white", darkness_downsample=1)
    records = grid_tiles(_slide(pixels), cfg)
    assert len(records) == 4
    for rec in records:
        assert rec.darkness == oracle_darkness(pixels, rec.row, rec.col, 32, 1)


def test_discard_partial_keeps_interior_only(np_rng):
    pixels = random_tile(np_rng, 48)
    cfg = TilerConfig(tile_size=32, model_input_size=32, edge_policy="discard_partial", darkness_downsample=1)
    records = grid_tiles(_slide(pixels), cfg)
    assert [(r.row, r.col) for r in records] == [(0, 0)]


def test_discard_partial_on_small_slide_is_empty_grid_error():
    cfg = TilerConfig(tile_size=64, model_input_size=64, edge_policy="discard_partial")
    with pytest.raises(EmptyGridError):
        grid_tiles(_slide(constant_tile(32, 0)), cfg)


def test_padding_never_increases_darkness(np_rng):
    # white padding can only decrease 255 - mean
    for _ in range(20):
        side = int(np_rng.integers(10, 40))
        pixels = random_tile(np_rng, side)
        cfg = TilerConfig(tile_size=32, model_input_size=32, edge_policy="pad_white", darkness_downsample=1)
        for rec in grid_tiles(_slide(pixels), cfg):
            y0, x0 = rec.row * 32, rec.col * 32
            region = pixels[y0 : y0 + 32, x0 : x0 + 32]
            unpadded = 255.0 - region.astype(np.float64).mean()
            assert rec.darkness <= unpadded + 1e-12


# ------------------------------------------------------------- select_top_k

def test_equal_darkness_ties_break_row_major():
    records = [TileRecord("s", r, c, 10.0, 0) for r in range(2) for c in range(2)]
    top = select_top_k(records, 3)
    assert [(t.row, t.col) for t in top] == [(0, 0), (0, 1), (1, 0)]
    assert [t.rank for t in top] == [0, 1, 2]


def test_repeat_policy_cycles_from_darkest():
    r1 = TileRecord("s", 0, 0, 50.0, 0)
    r2 = TileRecord("s", 0, 1, 20.0, 1)
    top = select_top_k([r2, r1], 4)
    assert [(t.row, t.col) for t in top] == [(0, 0), (0, 1), (0, 0), (0, 1)]
    assert [t.rank for t in top] == [0, 1, 2, 3]


def test_gradient_grid_top3():
    ts = 8
    pixels = np.zeros((4 * ts, 4 * ts, 3), dtype=np.uint8)
    for r in range(4):
        for c in range(4):
            pixels[r * ts : (r + 1) * ts, c * ts : (c + 1) * ts] = 16 * (4 * r + c)
    cfg = TilerConfig(tile_size=ts, model_input_size=ts, darkness_downsample=1)
    top = select_top_k(grid_tiles(_slide(pixels), cfg), 3)
    assert [(t.row, t.col) for t in top] == [(0, 0), (0, 1), (0, 2)]


def test_select_top_k_argument_errors():
    rec = [TileRecord("s", 0, 0, 1.0, 0)]
    with pytest.raises(ValueError):
        select_top_k(rec, 0)
    with pytest.raises(ValueError):
        select_top_k([], 2)


def test_selection_darkness_nonincreasing(np_rng):
    for _ in range(10):
        records = [
            TileRecord("s", int(r), int(c), float(np_rng.uniform(0, 255)), 0)
            for r in range(5) for c in range(5)
        ]
        top = select_top_k(records, 12)
        darks = [t.darkness for t in top]
        assert all(a >= b for a, b in zip(darks, darks[1:]))


# -------------------------------------------------------------- resize_tile

def test_resize_constant_tile_is_constant():
    out = resize_tile(constant_tile(8, 77), 4)
    assert np.all(out == 77)


def test_resize_2x2_half_rounds_up():
    tile = np.zeros((2, 2, 3), dtype=np.uint8)
    tile[1, :, :] = 255  # mean 127.5 -> rounds half-up to 128
    assert np.all(resize_tile(tile, 1) == 128)


def test_resize_8x8_to_4x4_matches_oracle(np_rng):
    for _ in range(10):
        tile = random_tile(np_rng, 8)
        assert np.array_equal(resize_tile(tile, 4), oracle_box_resize(tile, 4))


def test_resize_non_integer_ratio_matches_oracle(np_rng):
    for src, dst in [(6, 4), (10, 3), (16, 6)]:
        tile = random_tile(np_rng, src)
        assert np.array_equal(resize_tile(tile, dst), oracle_box_resize(tile, dst))


def test_resize_identity_and_errors(np_rng):
    tile = random_tile(np_rng, 8)
    assert np.array_equal(resize_tile(tile, 8), tile)
    with pytest.raises(ValueError):
        resize_tile(tile, 9)
    with pytest.raises(ValueError):
        resize_tile(tile, 0)


# ---------------------------------------------------------------- build_bag

def test_black_quadrant_wins_k1():
    pixels = np.full((2048, 2048, 3), 255, dtype=np.uint8)
    pixels[1024:, :1024] = 0  # black quadrant at grid (1, 0)
    cfg = TilerConfig(tile_size=1024, bag_size=1, model_input_size=64,
                      darkness_downsample=8)
    bag = build_bag(_slide(pixels), cfg)
    assert (bag.records[0].row, bag.records[0].col) == (1, 0)
    assert np.all(bag.tiles[0] == 0)


def test_uniform_slide_cycles_four_tiles():
    cfg = TilerConfig(tile_size=16, bag_size=16, model_input_size=8)
    bag = build_bag(_slide(constant_tile(32, 128)), cfg)
    assert len(bag.tiles) == 16
    assert [(r.row, r.col) for r in bag.records[:4]] * 4 == [
        (r.row, r.col) for r in bag.records
    ]


def test_default_bag_size_is_16():
    assert TilerConfig().bag_size == 16


def test_build_bag_deterministic_across_jobs(np_rng):
    pixels = random_tile(np_rng, 512)
    slide = _slide(pixels)
    cfg = TilerConfig(tile_size=128, bag_size=16, model_input_size=48,
                      darkness_downsample=1)
    ref = build_bag(slide, cfg, jobs=1)
    for jobs in (1, 4):
        bag = build_bag(slide, cfg, jobs=jobs)
        assert bag.records == ref.records
        for a, b in zip(bag.tiles, ref.tiles):
            assert np.array_equal(a, b)


# ----------------------------------------------------------------- manifest

def test_manifest_counts_and_roundtrip(tmp_path, np_rng):
    pixels = random_tile(np_rng, 64)
    cfg = TilerConfig(tile_size=32, bag_size=2, model_input_size=16,
                      darkness_downsample=1)
    bag = build_bag(_slide(pixels, "slideA", "pat1", "CE"), cfg)
    path = tmp_path / "manifest.csv"
    rows = write_manifest([bag], str(path))
    assert len(rows) == 2
    assert sorted(p.name for p in tmp_path.glob("*.png")) == [
        "slideA_0.png", "slideA_1.png",
    ]
    back = read_manifest(str(path))
    # records reproduce exactly, darkness to its serialized 6 decimals
    assert [dataclasses.replace(r, darkness=float(f"{r.darkness:.6f}")) for r in rows] == back
    for row, rec in zip(back, bag.records):
        assert (row.row, row.col, row.rank) == (rec.row, rec.col, rec.rank)
        assert abs(row.darkness - rec.darkness) < 1e-6


def test_manifest_darkness_six_decimals(tmp_path):
    row = ManifestRow("s", "p", "CE", 0, 0, 12.3456789, 0, "s_0.png")
    path = tmp_path / "m.csv"
    write_manifest_rows([row], str(path))
    line = path.read_text().splitlines()[1]
    assert line.split(",")[5] == "12.345679"


def test_manifest_write_read_write_byte_identical(tmp_path, np_rng):
    pixels = random_tile(np_rng, 64)
    cfg = TilerConfig(tile_size=32, bag_size=3, model_input_size=16)
    bag = build_bag(_slide(pixels, "sX", "pX", None), cfg)
    p1, p2 = tmp_path / "m1.csv", tmp_path / "m2.csv"
    write_manifest([bag], str(p1))
    write_manifest_rows(read_manifest(str(p1)), str(p2))
    assert p1.read_bytes() == p2.read_bytes()


def test_write_manifest_empty_bags_rejected(tmp_path):
    with pytest.raises(ValueError):
        write_manifest([], str(tmp_path / "m.csv"))


def test_config_validation():
    with pytest.raises(ValueError):
        TilerConfig(tile_size=0).validate()
    with pytest.raises(ValueError):
        TilerConfig(bag_size=0).validate()
    with pytest.raises(ValueError):
        TilerConfig(model_input_size=2048).validate()
    with pytest.raises(ValueError):
        TilerConfig(edge_policy="mirror").validate()
    with pytest.raises(ValueError):
        TilerConfig(darkness_downsample=0).validate()


def test_dataclass_replace_keeps_records_comparable():
    rec = TileRecord("s", 1, 2, 3.5, 4)
    assert dataclasses.replace(rec, rank=0) == TileRecord("s", 1, 2, 3.5, 0)
