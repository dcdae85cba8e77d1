"""Patch sampling, noise synthesis, learning-rate bands and the training loops."""

from __future__ import annotations

import contextlib
import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from .autograd import AdamHyper, Tensor, adam_step, deterministic
from .checkpoint import save_checkpoint
from .losses import LOG_FIELDS, total_loss
from .model import MwrnConfig, StageNetwork, build_stage, carry_over, fold_batchnorm
from .wavelet import crop, reflect_pad_to_multiple

logger = logging.getLogger(__name__)

# learning rate per band of epochs, one row per stage; a stage stops after its last band
LR_BANDS: Dict[int, tuple] = {
    1: (1e-3, 1e-6),
    2: (1e-3, 1e-4, 1e-6),
    3: (1e-3, 1e-4, 1e-4, 1e-6),
}


class ScheduleError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LrSchedule:
    bands: Mapping[int, tuple] = field(default_factory=lambda: dict(LR_BANDS))
    band_epochs: int = 10

    def n_epochs(self, stage: int) -> int:
        if stage not in self.bands:
            raise ScheduleError(f"no schedule for stage {stage}")
        return len(self.bands[stage]) * self.band_epochs

    def lr_sequence(self, stage: int) -> list:
        return [lr_at(self, stage, e) for e in range(1, self.n_epochs(stage) + 1)]


def lr_at(schedule: LrSchedule, stage: int, epoch: int) -> float:
    """Learning rate for a 1-based epoch of ``stage``."""
    last = schedule.n_epochs(stage)
    if epoch < 1 or epoch > last:
        raise ScheduleError(f"stage {stage} runs epochs 1..{last}; epoch {epoch} is outside it")
    return schedule.bands[stage][(epoch - 1) // schedule.band_epochs]


@dataclass
class TrainConfig:
    model: MwrnConfig = field(default_factory=MwrnConfig.desk)
    preset: str = "desk"
    sigma: float = 25 / 255
    patch_size: int = 64
    batch_size: int = 4
    band_epochs: int = 1
    iters_per_epoch: int = 100
    finetune_epochs: int = 1
    finetune_lr: float = 1e-6
    seed: int = 0
    progressive: bool = True
    # without progressive training, stretch stage 3 to the same total iteration count
    equal_budget: bool = True
    deterministic: bool = False

    def __post_init__(self):
        if self.patch_size <= 0 or self.patch_size % 8:
            raise ValueError("patch_size must be a positive multiple of 8")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.batch_size < 1 or self.iters_per_epoch < 0 or self.band_epochs < 1:
            raise ValueError("batch_size, iters_per_epoch and band_epochs must be positive")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        model = overrides.pop("model", None) or MwrnConfig.desk()
        return cls(model=model, preset="desk", **overrides)

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        model = overrides.pop("model", None) or MwrnConfig.paper()
        base = dict(preset="paper", patch_size=240, batch_size=24, band_epochs=10, iters_per_epoch=6000)
        base.update(overrides)
        return cls(model=model, **base)

    @property
    def schedule(self) -> LrSchedule:
        return LrSchedule(band_epochs=self.band_epochs)

    def total_iterations(self) -> int:
        sched = self.schedule
        return sum(sched.n_epochs(s) for s in (1, 2, 3)) * self.iters_per_epoch


class TrainingLog:
    """Per-iteration loss rows, in memory and optionally streamed to CSV."""

    def __init__(self, path=None):
        self.rows: List[dict] = []
        self._fh = None
        self._writer = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._writer = csv.DictWriter(self._fh, fieldnames=LOG_FIELDS, extrasaction="ignore")
            self._writer.writeheader()

    def append(self, row: dict) -> None:
        self.rows.append(row)
        if self._writer is not None:
            self._writer.writerow({k: _fmt(row[k]) for k in LOG_FIELDS})

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __len__(self) -> int:
        return len(self.rows)

    def totals(self, phase: Optional[str] = None) -> np.ndarray:
        return np.array([r["total"] for r in self.rows if phase is None or r["phase"] == phase])

    def smoothed_final(self, window: int = 50, phase: Optional[str] = None) -> float:
        totals = self.totals(phase)
        if totals.size == 0:
            raise ValueError("log is empty")
        return float(totals[-window:].mean())


def _fmt(value):
    return repr(value) if isinstance(value, float) else value


# --------------------------------------------------------------------------
# data


def synthesize_awgn(clean: Tensor, sigma: float, rng: np.random.Generator) -> Tensor:
    """clean + sigma * N(0, 1) per pixel; no clipping."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return Tensor(clean.data.copy(), dtype=clean.dtype)
    noise = rng.standard_normal(clean.shape, dtype=np.float64)
    return Tensor(clean.data + (sigma * noise).astype(clean.dtype), dtype=clean.dtype)


def dihedral(patch: np.ndarray, k: int) -> np.ndarray:
    """One of the 8 square symmetries on the trailing two axes: k % 4 quarter turns, flipped if k >= 4."""
    out = np.rot90(patch, k % 4, axes=(-2, -1))
    if k >= 4:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def _as_chw(img) -> np.ndarray:
    data = img.pixels.data if hasattr(img, "pixels") else img.data if isinstance(img, Tensor) else np.asarray(img)
    if data.ndim == 4:
        if data.shape[0] != 1:
            raise ValueError("expected single images, got a batch")
        data = data[0]
    if data.ndim == 2:
        data = data[None]
    return data


def sample_patches(
    images: Sequence,
    config: TrainConfig,
    rng: np.random.Generator,
    return_transforms: bool = False,
):
    """Random crops with random dihedral augmentation, then AWGN.

    Returns ``(clean_batch, noisy_batch)`` and, when asked, the transform
    ids drawn for each patch.
    """
    p = config.patch_size
    pool = [_as_chw(img) for img in images]
    if not pool:
        raise ValueError("no training images")
    for img in pool:
        if img.shape[1] < p or img.shape[2] < p:
            raise ValueError(f"image {img.shape[1:]} is smaller than the {p}x{p} patch")
    dtype = np.dtype(config.model.dtype)
    batch = np.empty((config.batch_size, pool[0].shape[0], p, p), dtype=dtype)
    transforms = []
    for i in range(config.batch_size):
        img = pool[rng.integers(len(pool))]
        top = rng.integers(img.shape[1] - p + 1)
        left = rng.integers(img.shape[2] - p + 1)
        k = int(rng.integers(8))
        transforms.append(k)
        batch[i] = dihedral(img[:, top : top + p, left : left + p], k)
    clean = Tensor(batch)
    noisy = synthesize_awgn(clean, config.sigma, rng)
    if return_transforms:
        return clean, noisy, transforms
    return clean, noisy


# --------------------------------------------------------------------------
# loops


def train_stage(
    net: StageNetwork,
    images: Sequence,
    config: TrainConfig,
    schedule: LrSchedule,
    log: Optional[TrainingLog] = None,
    rng: Optional[np.random.Generator] = None,
    checkpoint_dir=None,
    iters_per_epoch=None,
    phase: str = "train",
) -> StageNetwork:
    """Run every epoch of ``net.stage`` under ``schedule``; parameters update in place.

    ``iters_per_epoch`` overrides the config; a sequence gives one count per epoch.
    """
    log = log if log is not None else TrainingLog()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    stage = net.stage
    n_epochs = schedule.n_epochs(stage)
    counts = config.iters_per_epoch if iters_per_epoch is None else iters_per_epoch
    counts = [int(counts)] * n_epochs if np.isscalar(counts) else [int(c) for c in counts]
    if len(counts) != n_epochs:
        raise ValueError(f"need {n_epochs} per-epoch iteration counts, got {len(counts)}")
    params = net.active_parameters()
    for epoch, iters in enumerate(counts, start=1):
        lr = lr_at(schedule, stage, epoch)
        hyper = AdamHyper(lr=lr)
        started = time.perf_counter()
        for _ in range(iters):
            clean, noisy = sample_patches(images, config, rng)
            outputs = net.forward(noisy, training=True)
            report = total_loss(stage, outputs, {"image": clean}, config.model.lam, config.model.use_scale_loss)
            if not math.isfinite(report.total):
                raise NonFiniteLossError(
                    f"stage {stage} epoch {epoch} iteration {len(log)}: loss is {report.total} "
                    f"(l_r={report.l_r}, l_s2={report.l_s2}, l_s3={report.l_s3}, lr={lr})"
                )
            report.tensor.backward()
            adam_step(params, hyper)
            row = report.row(len(log) + 1, stage, lr)
            row.update(phase=phase, epoch=epoch)
            log.append(row)
        logger.info(
            "%s stage %d epoch %d lr %.0e: loss %.4f (%.1fs)",
            phase, stage, epoch, lr, log.smoothed_final(max(iters, 1)) if iters else float("nan"),
            time.perf_counter() - started,
        )
        if checkpoint_dir is not None:
            save_checkpoint(
                net,
                {"phase": phase, "stage": stage, "epoch": epoch, "iteration": len(log)},
                Path(checkpoint_dir) / f"{phase}_stage{stage}_epoch{epoch:03d}.mwrn",
            )
    return net


def progressive_train(
    config: TrainConfig,
    images: Sequence,
    log: Optional[TrainingLog] = None,
    checkpoint_dir=None,
    callback: Optional[Callable[[str, StageNetwork], None]] = None,
) -> StageNetwork:
    """Stage 1 -> carry -> stage 2 -> carry -> stage 3, fold BN, short finetune.

    With ``config.progressive`` off the stage-3 network is trained from
    scratch instead. ``callback(event, net)`` fires after each step with
    events ``"stage1"``, ``"carry2"``, ``"stage2"``, ``"carry3"``, ``"stage3"``,
    ``"folded"`` and ``"final"``.
    """
    if not images:
        raise ValueError("training set is empty")
    log = log if log is not None else TrainingLog()
    notify = callback or (lambda event, net: None)
    ctx = deterministic() if config.deterministic else contextlib.nullcontext()
    with ctx:
        rng = np.random.default_rng(config.seed)
        schedule = config.schedule
        if config.progressive:
            net = build_stage(1, config.model, seed=config.seed)
            train_stage(net, images, config, schedule, log, rng, checkpoint_dir)
            notify("stage1", net)
            for stage in (2, 3):
                net = carry_over(net, build_stage(stage, config.model, seed=config.seed + stage - 1))
                notify(f"carry{stage}", net)
                train_stage(net, images, config, schedule, log, rng, checkpoint_dir)
                notify(f"stage{stage}", net)
        else:
            net = build_stage(3, config.model, seed=config.seed)
            iters = config.iters_per_epoch
            if config.equal_budget:
                # same total iteration count as the progressive run, remainder to the early epochs
                share, extra = divmod(config.total_iterations(), schedule.n_epochs(3))
                iters = [share + (e < extra) for e in range(schedule.n_epochs(3))]
            train_stage(net, images, config, schedule, log, rng, checkpoint_dir, iters_per_epoch=iters)
            notify("stage3", net)

        net = fold_batchnorm(net)
        notify("folded", net)
        if config.finetune_epochs > 0:
            finetune = LrSchedule(bands={3: (config.finetune_lr,)}, band_epochs=config.finetune_epochs)
            train_stage(net, images, config, finetune, log, rng, checkpoint_dir, phase="finetune")
        notify("final", net)
        if checkpoint_dir is not None:
            save_checkpoint(net, {"phase": "final", "iteration": len(log)}, Path(checkpoint_dir) / "final.mwrn")
    return net


def denoise(net: StageNetwork, noisy: Tensor, clip: bool = False) -> Tensor:
    """Eval-mode stage-3 inference on inputs of any size (reflect pad to 8, crop back)."""
    if net.stage != 3:
        raise ValueError("denoising needs a stage-3 network")
    padded, record = reflect_pad_to_multiple(noisy, 8)
    out = crop(net.forward(padded, training=False).image, record)
    if clip:
        out = Tensor(np.clip(out.data, 0.0, 1.0))
    return out
