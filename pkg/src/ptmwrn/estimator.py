"""scikit-learn style wrapper: ``fit`` on clean images, ``transform`` noisy ones."""

from __future__ import annotations

from pathlib import Path
from typing import List, Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .autograd import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import psnr
from .model import MwrnConfig
from .trainer import TrainConfig, TrainingLog, denoise, progressive_train


def check_image(image, name: str = "image") -> np.ndarray:
    """Validate one image and return it as float32 (C, H, W) in [0, 1].

    Accepts (H, W) gray, (H, W, 3) color or an ImageFile / Tensor holding
    (1, C, H, W).
    """
    data = getattr(image, "pixels", image)
    data = data.data if isinstance(data, Tensor) else data
    arr = np.asarray(data)
    if arr.dtype == object or not np.issubdtype(arr.dtype, np.number):
        raise TypeError(f"{name} must be numeric, got dtype {arr.dtype}")
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    elif arr.ndim == 2:
        arr = arr[None]
    elif arr.ndim == 3 and arr.shape[2] == 3 and arr.shape[0] != 3:
        arr = np.moveaxis(arr, -1, 0)
    elif arr.ndim == 3 and arr.shape[0] not in (1, 3):
        raise ValueError(f"{name} has shape {arr.shape}; expected (H, W), (H, W, 3) or (C, H, W)")
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ValueError(f"{name} has shape {np.shape(data)}; expected a gray or RGB image")
    if min(arr.shape[1:]) < 1:
        raise ValueError(f"{name} is empty")
    arr = arr.astype(np.float32)
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def check_images(images, name: str = "X") -> List[np.ndarray]:
    """Validate a collection; all images must share a channel count."""
    if isinstance(images, np.ndarray) and images.ndim in (2, 3) and not (images.ndim == 3 and images.shape[0] > 3
                                                                         and images.shape[2] != 3):
        images = [images]
    out = [check_image(img, f"{name}[{i}]") for i, img in enumerate(images)]
    if not out:
        raise ValueError(f"{name} holds no images")
    channels = {img.shape[0] for img in out}
    if len(channels) > 1:
        raise ValueError(f"{name} mixes gray and color images")
    return out


def _restore_layout(chw: np.ndarray, like) -> np.ndarray:
    arr = np.asarray(getattr(like, "data", like))
    if arr.ndim == 2:
        return chw[0]
    if arr.ndim == 3 and arr.shape[-1] == 3 and arr.shape[0] != 3:
        return np.moveaxis(chw, 0, -1)
    if arr.ndim == 4:
        return chw[None]
    return chw


class MWRNDenoiser(TransformerMixin, BaseEstimator):
    """Multi-level wavelet residual network for additive Gaussian noise.

    ``fit`` receives clean images and trains on noisy patches synthesized
    at ``sigma`` (0-255 scale). ``transform`` denoises; ``predict`` is an
    alias, ``score`` is the mean PSNR in dB against clean references.
    """

    def __init__(
        self,
        preset: str = "desk",
        sigma: float = 25.0,
        lam: float = 1.0,
        rb_per_side: Optional[int] = None,
        use_scale_input: bool = True,
        use_scale_loss: bool = True,
        progressive: bool = True,
        iters_per_epoch: Optional[int] = None,
        seed: int = 0,
        deterministic: bool = False,
        clip: bool = True,
        checkpoint_dir=None,
    ):
        self.preset = preset
        self.sigma = sigma
        self.lam = lam
        self.rb_per_side = rb_per_side
        self.use_scale_input = use_scale_input
        self.use_scale_loss = use_scale_loss
        self.progressive = progressive
        self.iters_per_epoch = iters_per_epoch
        self.seed = seed
        self.deterministic = deterministic
        self.clip = clip
        self.checkpoint_dir = checkpoint_dir

    def _train_config(self, channels: int) -> TrainConfig:
        overrides = dict(
            in_channels=channels,
            lam=self.lam,
            use_scale_input=self.use_scale_input,
            use_scale_loss=self.use_scale_loss,
        )
        if self.rb_per_side is not None:
            overrides["rb_per_side"] = self.rb_per_side
        model = MwrnConfig.preset(self.preset, **overrides)
        factory = TrainConfig.paper if self.preset == "paper" else TrainConfig.desk
        extra = {} if self.iters_per_epoch is None else {"iters_per_epoch": self.iters_per_epoch}
        return factory(
            model=model,
            sigma=self.sigma / 255.0,
            seed=self.seed,
            progressive=self.progressive,
            deterministic=self.deterministic,
            **extra,
        )

    def fit(self, X, y=None):
        images = check_images(X)
        config = self._train_config(images[0].shape[0])
        if self.checkpoint_dir is not None:
            Path(self.checkpoint_dir).mkdir(parents=True, exist_ok=True)
        self.log_ = TrainingLog()
        self.network_ = progressive_train(config, images, self.log_, self.checkpoint_dir)
        self.n_channels_ = images[0].shape[0]
        return self

    def transform(self, X):
        check_is_fitted(self, "network_")
        single = isinstance(X, np.ndarray) and X.ndim in (2, 3) and len(check_images(X)) == 1
        images = check_images(X)
        if images[0].shape[0] != self.n_channels_:
            raise ValueError(f"model expects {self.n_channels_} channel(s), got {images[0].shape[0]}")
        outputs = []
        for img, original in zip(images, [X] if single else X):
            out = denoise(self.network_, Tensor(img[None]), clip=self.clip).data[0]
            outputs.append(_restore_layout(out, original))
        return outputs[0] if single else outputs

    def predict(self, X):
        return self.transform(X)

    def score(self, X, y):
        """Mean PSNR (dB) of ``transform(X)`` against the clean images ``y``."""
        denoised = self.transform(X)
        if isinstance(denoised, np.ndarray):
            denoised, y = [denoised], [y]
        clean = check_images(y, "y")
        return float(np.mean([psnr(check_image(d), c) for d, c in zip(denoised, clean)]))

    def save(self, path) -> None:
        check_is_fitted(self, "network_")
        save_checkpoint(self.network_, {"estimator": self.get_params()}, path)

    @classmethod
    def load(cls, path) -> "MWRNDenoiser":
        net, state = load_checkpoint(path)
        params = state.get("estimator", {})
        est = cls(**{k: v for k, v in params.items() if k in cls._get_param_names()})
        est.network_ = net
        est.n_channels_ = net.config.in_channels
        return est
