"""Reconstruction, scale-specific and combined objectives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .autograd import Tensor, elementwise_add, mse_half, scale
from .model import StageOutputs
from .wavelet import SubbandStack, wavelet_packet

LOG_FIELDS = ("iter", "stage", "l_r", "l_s2", "l_s3", "total", "lr")


@dataclass
class LossReport:
    l_r: float
    l_s2: float
    l_s3: float
    total: float
    lam: float
    # graph node for backward(); not serialized
    tensor: Optional[Tensor] = None

    def row(self, iteration: int, stage: int, lr: float) -> dict:
        return {
            "iter": iteration,
            "stage": stage,
            "l_r": self.l_r,
            "l_s2": self.l_s2,
            "l_s3": self.l_s3,
            "total": self.total,
            "lr": lr,
        }


def reconstruction_loss(pred_image: Tensor, clean_image: Tensor) -> Tensor:
    return mse_half(pred_image, clean_image)


def scale_loss(head_output: Tensor, noisy_subbands: SubbandStack, clean_subbands: SubbandStack) -> Tensor:
    """Half squared error of the residual prediction ``head + y`` against ``x``."""
    if noisy_subbands.level != clean_subbands.level:
        raise ValueError("noisy and clean subbands come from different levels")
    if head_output.shape != noisy_subbands.tensor.shape or head_output.shape != clean_subbands.tensor.shape:
        raise ValueError(
            f"shape mismatch: head {head_output.shape}, noisy {noisy_subbands.tensor.shape}, "
            f"clean {clean_subbands.tensor.shape}"
        )
    return mse_half(elementwise_add(head_output, noisy_subbands.tensor), clean_subbands.tensor)


def clean_targets(clean: Tensor, levels=(2, 3)) -> dict:
    return {level: wavelet_packet(clean, level) for level in levels}


def total_loss(
    stage: int,
    outputs: StageOutputs,
    targets: Mapping,
    lam: float = 1.0,
    use_scale_loss: bool = True,
) -> LossReport:
    """Stage objective.

    ``targets`` maps ``"image"`` to the clean image and levels ``2``/``3`` to
    clean :class:`SubbandStack` objects (missing levels are derived from the
    image when present).
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")

    def target(level: int) -> SubbandStack:
        if level in targets:
            return targets[level]
        if "image" in targets:
            return wavelet_packet(targets["image"], level)
        raise ValueError(f"no clean target for level {level}")

    def side(level: int) -> Tensor:
        if level not in outputs.heads:
            raise ValueError(f"stage {stage} output lacks the level-{level} prediction")
        return scale_loss(outputs.heads[level], outputs.noisy[level], target(level))

    terms = {}
    if stage == 1:
        terms["l_s3"] = side(3)
        total = terms["l_s3"]
    elif stage == 2:
        terms["l_s2"] = side(2)
        terms["l_s3"] = side(3)
        total = elementwise_add(terms["l_s2"], terms["l_s3"])
    elif stage == 3:
        if outputs.image is None or "image" not in targets:
            raise ValueError("stage 3 needs the predicted and clean images")
        terms["l_r"] = reconstruction_loss(outputs.image, targets["image"])
        total = terms["l_r"]
        if use_scale_loss:
            terms["l_s2"] = side(2)
            terms["l_s3"] = side(3)
            total = elementwise_add(total, scale(elementwise_add(terms["l_s2"], terms["l_s3"]), lam))
    else:
        raise ValueError(f"invalid stage {stage}")

    def value(name):
        t = terms.get(name)
        return 0.0 if t is None else float(t.data)

    return LossReport(value("l_r"), value("l_s2"), value("l_s3"), float(np.asarray(total.data)), lam, total)
