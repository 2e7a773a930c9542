"""Binary portable graymap/pixmap (P5/P6, maxval 255) reading and writing."""

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class PixmapError(ValueError):
    pass


@dataclass
class ImageBuffer:
    width: int
    height: int
    channels: int
    pixels: np.ndarray  # uint8, height x width x channels

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise PixmapError(f"channels must be 1 or 3, got {self.channels}")
        px = np.asarray(self.pixels, dtype=np.uint8)
        if px.size != self.width * self.height * self.channels:
            raise PixmapError("pixel count does not match width * height * channels")
        self.pixels = px.reshape(self.height, self.width, self.channels)

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        h, w, c = arr.shape
        return cls(w, h, c, arr.astype(np.uint8))

    def to_rgb(self):
        if self.channels == 3:
            return self
        return ImageBuffer(self.width, self.height, 3, np.repeat(self.pixels, 3, axis=2))


_WS = b" \t\n\r\v\f"


def _read_token(data, pos):
    """Next header token, skipping whitespace and ``#`` comments to end of line."""
    n = len(data)
    while pos < n:
        ch = data[pos:pos + 1]
        if ch in _WS:
            pos += 1
        elif ch == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    start = pos
    while pos < n and data[pos:pos + 1] not in _WS and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PixmapError("truncated header")
    return data[start:pos], pos


def decode_pixmap(data, rgb=False):
    """Decode P5/P6 bytes; ``rgb=True`` expands graymaps to three channels."""
    data = bytes(data)
    magic, pos = _read_token(data, 0)
    if magic not in (b"P5", b"P6"):
        raise PixmapError(f"bad magic {magic!r}: only binary P5/P6 are supported")
    fields = []
    for what in ("width", "height", "maxval"):
        tok, pos = _read_token(data, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise PixmapError(f"invalid {what} {tok!r}") from None
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise PixmapError(f"invalid size {width}x{height}")
    if maxval != 255:
        raise PixmapError(f"maxval must be 255, got {maxval}")
    if pos >= len(data) or data[pos:pos + 1] not in _WS:
        raise PixmapError("missing whitespace after header")
    pos += 1
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise PixmapError(f"truncated payload: need {need} bytes, got {len(payload)}")
    img = ImageBuffer(width, height, channels, np.frombuffer(payload, dtype=np.uint8))
    return img.to_rgb() if rgb else img


def encode_pixmap(img):
    magic = b"P5" if img.channels == 1 else b"P6"
    header = magic + f"\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(img.pixels, dtype=np.uint8).tobytes()


def read_pixmap(path, rgb=False):
    return decode_pixmap(Path(path).read_bytes(), rgb=rgb)


def write_pixmap(path, img):
    Path(path).write_bytes(encode_pixmap(img))
