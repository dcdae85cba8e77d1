"""Orthonormal 2-D Haar transforms as channel-packing, differentiable layers.

Every input channel ``c`` expands into four contiguous output channels
``4c + (LL, LH, HL, HH)``. For a 2x2 block ``[[a, b], [c, d]]``::

    LL = (a + b + c + d) / 2      LH = (a - b + c - d) / 2
    HL = (a + b - c - d) / 2      HH = (a - b - c + d) / 2

The transform is orthogonal, so the backward pass of ``dwt2`` is ``idwt2``
of the incoming gradient and vice versa.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, make_result

LEVELS = (1, 2, 3)


def haar_forward(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"dwt2 needs even spatial dims, got {h}x{w}")
    a = x[:, :, 0::2, 0::2]
    bb = x[:, :, 0::2, 1::2]
    cc = x[:, :, 1::2, 0::2]
    d = x[:, :, 1::2, 1::2]
    out = np.empty((b, c, 4, h // 2, w // 2), dtype=x.dtype)
    s, t = a + bb, cc + d
    u, v = a - bb, cc - d
    out[:, :, 0] = (s + t) * 0.5
    out[:, :, 1] = (u + v) * 0.5
    out[:, :, 2] = (s - t) * 0.5
    out[:, :, 3] = (u - v) * 0.5
    return out.reshape(b, 4 * c, h // 2, w // 2)


def haar_inverse(y: np.ndarray) -> np.ndarray:
    b, c4, h, w = y.shape
    if c4 % 4:
        raise ValueError(f"idwt2 needs a channel count divisible by 4, got {c4}")
    c = c4 // 4
    bands = y.reshape(b, c, 4, h, w)
    ll, lh, hl, hh = bands[:, :, 0], bands[:, :, 1], bands[:, :, 2], bands[:, :, 3]
    p, q = ll + hl, lh + hh
    r, s = ll - hl, lh - hh
    out = np.empty((b, c, 2 * h, 2 * w), dtype=y.dtype)
    out[:, :, 0::2, 0::2] = (p + q) * 0.5
    out[:, :, 0::2, 1::2] = (p - q) * 0.5
    out[:, :, 1::2, 0::2] = (r + s) * 0.5
    out[:, :, 1::2, 1::2] = (r - s) * 0.5
    return out


def dwt2(input: Tensor) -> Tensor:
    """One Haar level: (B, C, H, W) -> (B, 4C, H/2, W/2)."""
    if input.ndim != 4:
        raise ValueError("dwt2 expects a 4-D tensor")
    out = haar_forward(input.data)

    def backward(g):
        return (haar_inverse(g),)

    return make_result(out, (input,), backward, "dwt2")


def idwt2(subbands: Tensor) -> Tensor:
    """Inverse Haar level: (B, 4C, H, W) -> (B, C, 2H, 2W)."""
    if subbands.ndim != 4:
        raise ValueError("idwt2 expects a 4-D tensor")
    out = haar_inverse(subbands.data)

    def backward(g):
        return (haar_forward(g),)

    return make_result(out, (subbands,), backward, "idwt2")


@dataclass
class SubbandStack:
    """Full wavelet-packet coefficients at one level, channel packed."""

    level: int
    tensor: Tensor
    in_channels: int

    def __post_init__(self):
        expected = self.in_channels * 4**self.level
        if self.tensor.shape[1] != expected:
            raise ValueError(
                f"level-{self.level} stack needs {expected} channels, got {self.tensor.shape[1]}"
            )

    @property
    def n_subbands(self) -> int:
        return 4**self.level


def wavelet_packet(image: Tensor, level: int) -> SubbandStack:
    """Split every subband recursively ``level`` times (the full packet tree)."""
    if level not in LEVELS:
        raise ValueError(f"packet level must be one of {LEVELS}, got {level}")
    h, w = image.shape[2:]
    if h % 2**level or w % 2**level:
        raise ValueError(f"{h}x{w} image is not divisible by {2**level}")
    out = image
    for _ in range(level):
        out = dwt2(out)
    return SubbandStack(level, out, image.shape[1])


def inverse_wavelet_packet(stack: SubbandStack) -> Tensor:
    out = stack.tensor
    for _ in range(stack.level):
        out = idwt2(out)
    return out


@dataclass(frozen=True)
class CropRecord:
    height: int
    width: int
    pad_bottom: int = 0
    pad_right: int = 0

    @property
    def empty(self) -> bool:
        return self.pad_bottom == 0 and self.pad_right == 0


def reflect_pad_to_multiple(image: Tensor, m: int) -> tuple[Tensor, CropRecord]:
    """Reflect-pad bottom/right so both spatial dims are multiples of ``m``."""
    if m < 1:
        raise ValueError("multiple must be >= 1")
    h, w = image.shape[2:]
    pad_h = (-h) % m
    pad_w = (-w) % m
    record = CropRecord(h, w, pad_h, pad_w)
    if record.empty:
        return image, record
    padded = np.pad(image.data, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)), mode="reflect")
    return Tensor(padded, dtype=image.dtype), record


def crop(image: Tensor, record: CropRecord) -> Tensor:
    if record.empty:
        return image
    return Tensor(image.data[:, :, : record.height, : record.width].copy(), dtype=image.dtype)
