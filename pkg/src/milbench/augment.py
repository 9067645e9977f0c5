"""Seeded image augmentations for contrastive view generation.

Every operation is a pure function of (tile, parameters) or of
(tile, parameters, rng state), so a view is fully determined by the tile, the
AugmentSpec, and the stream seed. Rotations are exact quarter turns (index
permutations, no interpolation); mask, cutout and shift fill vacated pixels
with the spec fill value (white by default, matching slide background).

Rounding is half-up everywhere a float intermediate is quantized back to
uint8, so identity parameters are exact identity maps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .rng import SeededRng


@dataclass
class AugmentSpec:
    brightness_delta_range: tuple[float, float] = (-32.0, 32.0)
    contrast_factor_range: tuple[float, float] = (0.75, 1.333)
    mask_fraction: float = 0.1
    blur_radius: int = 1
    cutout_size: int = 96
    rotation_set: tuple[int, ...] = (0, 90, 180, 270)
    shift_max: int = 32
    crop_size: int = 320
    fill_value: int = 255

    def validate(self) -> None:
        if self.brightness_delta_range[0] > self.brightness_delta_range[1]:
            raise ValueError("brightness_delta_range must be ordered")
        if self.contrast_factor_range[0] > self.contrast_factor_range[1]:
            raise ValueError("contrast_factor_range must be ordered")
        if not 0.0 <= self.mask_fraction < 1.0:
            raise ValueError(f"mask_fraction must be in [0, 1), got {self.mask_fraction}")
        if self.blur_radius < 0 or self.cutout_size < 0 or self.shift_max < 0:
            raise ValueError("blur_radius, cutout_size and shift_max must be >= 0")
        if self.crop_size <= 0:
            raise ValueError("crop_size must be positive")
        if any(r not in (0, 90, 180, 270) for r in self.rotation_set) or not self.rotation_set:
            raise ValueError(f"rotation_set must be a subset of quarter turns, got {self.rotation_set}")
        if not 0 <= self.fill_value <= 255:
            raise ValueError("fill_value must be an 8-bit value")

    def to_json(self) -> str:
        return json.dumps(
            {
                "brightness_delta_range": list(self.brightness_delta_range),
                "contrast_factor_range": list(self.contrast_factor_range),
                "mask_fraction": self.mask_fraction,
                "blur_radius": self.blur_radius,
                "cutout_size": self.cutout_size,
                "rotation_set": list(self.rotation_set),
                "shift_max": self.shift_max,
                "crop_size": self.crop_size,
                "fill_value": self.fill_value,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "AugmentSpec":
        raw = json.loads(text)
        spec = cls(
            brightness_delta_range=tuple(raw.get("brightness_delta_range", (-32.0, 32.0))),
            contrast_factor_range=tuple(raw.get("contrast_factor_range", (0.75, 1.333))),
            mask_fraction=raw.get("mask_fraction", 0.1),
            blur_radius=raw.get("blur_radius", 1),
            cutout_size=raw.get("cutout_size", 96),
            rotation_set=tuple(raw.get("rotation_set", (0, 90, 180, 270))),
            shift_max=raw.get("shift_max", 32),
            crop_size=raw.get("crop_size", 320),
            fill_value=raw.get("fill_value", 255),
        )
        spec.validate()
        return spec


def _quantize(values: np.ndarray) -> np.ndarray:
    """Clamp to [0, 255] and round half-up to uint8."""
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


def random_crop(tile: np.ndarray, crop_size: int, rng: SeededRng) -> np.ndarray:
    """Axis-aligned window at a uniform offset; draws row offset, then column."""
    h, w = tile.shape[:2]
    if crop_size > h or crop_size > w:
        raise ValueError(f"crop_size {crop_size} exceeds tile {h}x{w}")
    oy = rng.randint(h - crop_size + 1)
    ox = rng.randint(w - crop_size + 1)
    return tile[oy : oy + crop_size, ox : ox + crop_size].copy()


def adjust_brightness(tile: np.ndarray, delta: float) -> np.ndarray:
    return _quantize(np.clip(tile.astype(np.float64) + delta, 0, 255))


def adjust_contrast(tile: np.ndarray, factor: float) -> np.ndarray:
    return _quantize(np.clip(128.0 + factor * (tile.astype(np.float64) - 128.0), 0, 255))


def random_mask(tile: np.ndarray, mask_fraction: float, rng: SeededRng,
                fill_value: int = 255) -> np.ndarray:
    """Set a uniformly chosen round(mask_fraction * H * W) pixels to fill_value.

    Pixel selection is a partial Fisher-Yates over flat indices so exactly
    that many distinct pixels are masked.
    """
    if not 0.0 <= mask_fraction < 1.0:
        raise ValueError(f"mask_fraction must be in [0, 1), got {mask_fraction}")
    h, w = tile.shape[:2]
    n = h * w
    m = int(round(mask_fraction * n))
    out = tile.copy()
    if m == 0:
        return out
    idx = np.arange(n)
    draws = rng.next_array(m)
    for i in range(m):
        j = i + int(draws[i] % np.uint64(n - i))
        idx[i], idx[j] = idx[j], idx[i]
    flat = out.reshape(n, 3)
    flat[idx[:m]] = fill_value
    return out


def cutout(tile: np.ndarray, cutout_size: int, rng: SeededRng,
           fill_value: int = 255) -> np.ndarray:
    """One uniformly placed square of side cutout_size set to fill_value."""
    h, w = tile.shape[:2]
    if cutout_size > min(h, w):
        raise ValueError(f"cutout_size {cutout_size} exceeds tile {h}x{w}")
    oy = rng.randint(h - cutout_size + 1)
    ox = rng.randint(w - cutout_size + 1)
    out = tile.copy()
    out[oy : oy + cutout_size, ox : ox + cutout_size] = fill_value
    return out


def box_blur(tile: np.ndarray, radius: int) -> np.ndarray:
    """Mean over a (2r+1)^2 window per channel with clamped-edge padding."""
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    if radius == 0:
        return tile.copy()
    r, k = radius, 2 * radius + 1
    h, w = tile.shape[:2]
    padded = np.pad(tile, ((r, r), (r, r), (0, 0)), mode="edge").astype(np.int64)
    integral = np.pad(padded.cumsum(0).cumsum(1), ((1, 0), (1, 0), (0, 0)))
    sums = (
        integral[k : k + h, k : k + w]
        - integral[:h, k : k + w]
        - integral[k : k + h, :w]
        + integral[:h, :w]
    )
    return _quantize(sums / float(k * k))


def rotate_quarter(tile: np.ndarray, k: int) -> np.ndarray:
    """Rotation by k*90 degrees counterclockwise, exact index permutation."""
    if k not in (0, 1, 2, 3):
        raise ValueError(f"k must be in {{0, 1, 2, 3}}, got {k}")
    return np.rot90(tile, k).copy()


def shift(tile: np.ndarray, dx: int, dy: int, fill_value: int = 255) -> np.ndarray:
    """Translate by (dx right, dy down); vacated pixels take fill_value."""
    h, w = tile.shape[:2]
    out = np.full_like(tile, fill_value)
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    ys_src = slice(max(-dy, 0), h + min(-dy, 0))
    xs_src = slice(max(-dx, 0), w + min(-dx, 0))
    if ys.start < ys.stop and xs.start < xs.stop:
        out[ys, xs] = tile[ys_src, xs_src]
    return out


# Candidate augmentations after the mandatory crop, in draw order.
_OPTIONAL_OPS = ("brightness", "contrast", "mask", "blur", "cutout", "rotate", "shift")


def _apply_op(view: np.ndarray, op: str, spec: AugmentSpec, rng: SeededRng) -> np.ndarray:
    if op == "brightness":
        lo, hi = spec.brightness_delta_range
        return adjust_brightness(view, rng.uniform(lo, hi))
    if op == "contrast":
        lo, hi = spec.contrast_factor_range
        return adjust_contrast(view, rng.uniform(lo, hi))
    if op == "mask":
        return random_mask(view, spec.mask_fraction, rng, spec.fill_value)
    if op == "blur":
        return box_blur(view, spec.blur_radius)
    if op == "cutout":
        size = min(spec.cutout_size, min(view.shape[:2]))
        return cutout(view, size, rng, spec.fill_value)
    if op == "rotate":
        degrees = spec.rotation_set[rng.randint(len(spec.rotation_set))]
        return rotate_quarter(view, degrees // 90)
    if op == "shift":
        dx = rng.randint(2 * spec.shift_max + 1) - spec.shift_max
        dy = rng.randint(2 * spec.shift_max + 1) - spec.shift_max
        return shift(view, dx, dy, spec.fill_value)
    raise ValueError(f"unknown augmentation {op!r}")


def _one_view(tile: np.ndarray, spec: AugmentSpec, rng: SeededRng) -> np.ndarray:
    # Draw order per view: crop offsets, 7 inclusion flags (p = 0.5 each),
    # Fisher-Yates shuffle of the included ops, then per-op parameter draws
    # in application order.
    view = random_crop(tile, min(spec.crop_size, min(tile.shape[:2])), rng)
    included = [op for op in _OPTIONAL_OPS if rng.uniform() < 0.5]
    rng.shuffle(included)
    for op in included:
        view = _apply_op(view, op, spec, rng)
    return view


def make_two_views(tile: np.ndarray, spec: AugmentSpec,
                   rng: SeededRng) -> tuple[np.ndarray, np.ndarray]:
    """Two independently augmented views of the same tile (view_a draws first)."""
    spec.validate()
    return _one_view(tile, spec, rng), _one_view(tile, spec, rng)
