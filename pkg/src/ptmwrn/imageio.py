"""Binary PGM (P5) / PPM (P6) reading and writing, 8-bit only."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd import Tensor


class ImageFormatError(ValueError):
    pass


@dataclass
class ImageFile:
    pixels: Tensor  # (1, C, H, W) in [0, 1]
    source_format: str = "P5"

    @property
    def channels(self) -> int:
        return self.pixels.shape[1]

    @property
    def array(self) -> np.ndarray:
        """(H, W) for gray, (H, W, 3) for color."""
        data = self.pixels.data[0]
        return data[0] if data.shape[0] == 1 else np.moveaxis(data, 0, -1)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ImageFile":
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim == 2:
            return cls(Tensor(arr[None, None]), "P5")
        if arr.ndim == 3 and arr.shape[2] == 3:
            return cls(Tensor(np.moveaxis(arr, -1, 0)[None]), "P6")
        raise ImageFormatError(f"expected (H, W) or (H, W, 3) array, got {arr.shape}")


def _header_tokens(buf: bytes, count: int):
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise ImageFormatError("truncated header")
        if buf[pos : pos + 1] == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise ImageFormatError("truncated header")
            pos = end + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise ImageFormatError("missing whitespace after header")
    return tokens, pos + 1


def decode_netpbm(buf: bytes) -> ImageFile:
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}; only P5/P6 are read")
    (_, w, h, maxval), offset = _header_tokens(buf, 4)
    try:
        width, height, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ImageFormatError("non-numeric header field") from exc
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval}; only 8-bit (255) files are read")
    if width < 1 or height < 1:
        raise ImageFormatError("image dims must be positive")
    channels = 1 if magic == b"P5" else 3
    size = width * height * channels
    payload = buf[offset : offset + size]
    if len(payload) < size:
        raise ImageFormatError(f"truncated payload: {len(payload)} of {size} bytes")
    raster = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    pixels = np.moveaxis(raster, -1, 0)[None].astype(np.float32) / 255.0
    return ImageFile(Tensor(pixels), magic.decode())


def read_image(path) -> ImageFile:
    return decode_netpbm(Path(path).read_bytes())


def quantize(pixels: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_netpbm(img: ImageFile) -> bytes:
    data = img.pixels.data
    if data.ndim != 4 or data.shape[0] != 1 or data.shape[1] not in (1, 3):
        raise ImageFormatError(f"cannot write tensor of shape {data.shape}")
    _, c, h, w = data.shape
    magic = "P5" if c == 1 else "P6"
    raster = np.moveaxis(quantize(data[0]), 0, -1)
    return f"{magic}\n{w} {h}\n255\n".encode("ascii") + raster.tobytes()


def write_image(img, path) -> None:
    if not isinstance(img, ImageFile):
        img = ImageFile(img if isinstance(img, Tensor) else Tensor(img))
    Path(path).write_bytes(encode_netpbm(img))


def list_images(directory) -> list:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in (".pgm", ".ppm"))
