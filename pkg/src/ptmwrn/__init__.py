"""PT-MWRN: a multi-level wavelet residual denoiser trained progressively, scale by scale."""

from .autograd import AdamHyper, Parameter, Tensor, adam_step, deterministic, finite_diff_check
from .checkpoint import CorruptCheckpointError, load_checkpoint, save_checkpoint
from .estimator import MWRNDenoiser, check_image, check_images
from .imageio import ImageFile, ImageFormatError, read_image, write_image
from .losses import LossReport, reconstruction_loss, scale_loss, total_loss
from .metrics import psnr, ssim
from .model import MwrnConfig, StageNetwork, build_stage, carry_over, fold_batchnorm, forward
from .trainer import LrSchedule, TrainConfig, TrainingLog, denoise, lr_at, progressive_train, train_stage
from .wavelet import dwt2, idwt2, inverse_wavelet_packet, wavelet_packet

__version__ = "0.1.0"

__all__ = [
    "AdamHyper",
    "CorruptCheckpointError",
    "ImageFile",
    "ImageFormatError",
    "LossReport",
    "LrSchedule",
    "MWRNDenoiser",
    "MwrnConfig",
    "Parameter",
    "StageNetwork",
    "Tensor",
    "TrainConfig",
    "TrainingLog",
    "adam_step",
    "build_stage",
    "carry_over",
    "check_image",
    "check_images",
    "denoise",
    "deterministic",
    "dwt2",
    "finite_diff_check",
    "fold_batchnorm",
    "forward",
    "idwt2",
    "inverse_wavelet_packet",
    "load_checkpoint",
    "lr_at",
    "progressive_train",
    "psnr",
    "read_image",
    "reconstruction_loss",
    "save_checkpoint",
    "scale_loss",
    "ssim",
    "total_loss",
    "train_stage",
    "wavelet_packet",
    "write_image",
]
