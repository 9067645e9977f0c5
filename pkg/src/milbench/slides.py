"""Slide image loading: 8-bit RGB rasters from PNG or binary PPM (P6).

Slides are plain row-major ``(H, W, 3)`` uint8 arrays. PNG goes through
Pillow; PPM has a small parser of its own so decode failures can report the
byte offset they occurred at.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError

LABELS = ("CE", "LAA")

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


class DecodeError(Exception):
    """Raised when a slide file is not a decodable PNG or P6 PPM."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class SlideImage:
    slide_id: str
    patient_id: str
    label: str | None
    pixels: np.ndarray = field(repr=False)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def validate(self) -> None:
        if not self.slide_id:
            raise ValueError("slide_id must be non-empty")
        if not self.patient_id:
            raise ValueError("patient_id must be non-empty")
        if self.label is not None and self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS} or None, got {self.label!r}")
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
            raise ValueError(f"pixels must be (H, W, 3) uint8, got {px.shape} {px.dtype}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("slide must be at least 1x1")


def _decode_ppm(data: bytes) -> np.ndarray:
    """Parse binary PPM (P6) with max value 255."""
    if data[:2] != b"P6":
        raise DecodeError("not a P6 PPM", 0)

    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":  # comment to end of line
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise DecodeError("truncated or malformed PPM header", pos)
        fields.append(int(data[start:pos]))

    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise DecodeError("missing whitespace after PPM maxval", pos)
    pos += 1

    width, height, maxval = fields
    if width < 1 or height < 1:
        raise DecodeError(f"invalid PPM dimensions {width}x{height}", 2)
    if maxval != 255:
        raise DecodeError(f"unsupported PPM maxval {maxval} (need 255)", 2)

    need = width * height * 3
    payload = data[pos : pos + need]
    if len(payload) != need:
        raise DecodeError(
            f"PPM payload truncated: need {need} bytes, have {len(payload)}",
            pos + len(payload),
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)


def _decode_png(path: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"PNG decode failed for {path}: {exc}", 0) from exc


def load_slide(path: str, slide_id: str, patient_id: str, label: str | None = None) -> SlideImage:
    """Load a PNG or binary-PPM slide file into a SlideImage.

    Unreadable paths raise OSError; unsupported or corrupt content raises
    DecodeError carrying the byte offset of the failure.
    """
    with open(path, "rb") as fh:
        head = fh.read(8)
        if head.startswith(_PNG_MAGIC):
            pixels = _decode_png(path)
        elif head[:2] == b"P6":
            pixels = _decode_ppm(head + fh.read())
        else:
            raise DecodeError(f"unsupported image format in {path}", 0)

    slide = SlideImage(slide_id=slide_id, patient_id=patient_id, label=label, pixels=pixels)
    slide.validate()
    return slide


def write_png(pixels: np.ndarray, path: str) -> None:
    Image.fromarray(pixels, "RGB").save(path, format="PNG")


def write_ppm(pixels: np.ndarray, path: str) -> None:
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())
