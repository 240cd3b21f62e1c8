"""Single-channel 8-bit images and PNG I/O.

Color sources are converted to grayscale on load with ITU-R 601 luma
weights (Pillow's ``convert("L")``).
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from servosim.errors import DimensionMismatch


class ImageBuffer:
    """Immutable single-channel 8-bit image backed by a (height, width) array."""

    __slots__ = ("_pixels",)

    def __init__(self, pixels):
        arr = np.asarray(pixels)
        if arr.ndim != 2:
            raise ValueError(f"expected a 2-D pixel array, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            arr = arr.astype(np.uint8)
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        self._pixels = arr

    @property
    def pixels(self) -> np.ndarray:
        return self._pixels

    @property
    def width(self) -> int:
        return self._pixels.shape[1]

    @property
    def height(self) -> int:
        return self._pixels.shape[0]

    @staticmethod
    def full(width: int, height: int, value: int) -> "ImageBuffer":
        return ImageBuffer(np.full((height, width), value, dtype=np.uint8))

    def as_float(self) -> np.ndarray:
        return self._pixels.astype(np.float64)

    def tobytes(self) -> bytes:
        """Raw row-major pixel bytes."""
        return self._pixels.tobytes()

    def __eq__(self, other) -> bool:
        if not isinstance(other, ImageBuffer):
            return NotImplemented
        return self._pixels.shape == other._pixels.shape and bool(
            np.array_equal(self._pixels, other._pixels)
        )

    def __hash__(self):
        return hash((self._pixels.shape, self._pixels.tobytes()))

    def __repr__(self):
        return f"ImageBuffer({self.width}x{self.height})"


def require_same_shape(a: ImageBuffer, b: ImageBuffer) -> None:
    if (a.width, a.height) != (b.width, b.height):
        raise DimensionMismatch(
            f"image dimensions differ: {a.width}x{a.height} vs {b.width}x{b.height}"
        )


def load_image(path: str | os.PathLike) -> ImageBuffer:
    """Load a PNG/JPEG as grayscale; color inputs are luma-converted."""
    with Image.open(path) as img:
        gray = img.convert("L")
        return ImageBuffer(np.asarray(gray, dtype=np.uint8))


def save_image(img: ImageBuffer, path: str | os.PathLike) -> None:
    """Write an 8-bit grayscale PNG."""
    Image.fromarray(img.pixels, mode="L").save(path, format="PNG")


def encode_png(img: ImageBuffer) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(img.pixels, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> ImageBuffer:
    import io

    with Image.open(io.BytesIO(data)) as img:
        return ImageBuffer(np.asarray(img.convert("L"), dtype=np.uint8))
