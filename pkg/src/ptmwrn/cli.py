"""Command-line entry point: ``ptmwrn {train,denoise,eval,dwt,gradcheck}``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical
failure (non-finite loss, failed gradient check).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autograd import NonFiniteError, Tensor
from .checkpoint import CorruptCheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import DEFAULT_TOLERANCE, run_suite
from .imageio import ImageFile, ImageFormatError, list_images, read_image, write_image
from .metrics import psnr, ssim
from .model import MwrnConfig
from .trainer import NonFiniteLossError, ScheduleError, TrainConfig, TrainingLog, denoise, progressive_train
from .wavelet import SubbandStack, dwt2, idwt2, inverse_wavelet_packet, wavelet_packet

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

logger = logging.getLogger("ptmwrn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; that code is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# train options that may also come from --config; the flag wins when both are given
TRAIN_KEYS = {
    "preset": str,
    "sigma": float,
    "seed": int,
    "lambda": float,
    "rb": int,
    "no_si": bool,
    "no_sl": bool,
    "no_pt": bool,
    "iters_per_epoch": int,
    "patch_size": int,
    "batch_size": int,
    "finetune_epochs": int,
    "deterministic": bool,
}
TRAIN_DEFAULTS = {
    "preset": "desk",
    "sigma": 25.0,
    "seed": 0,
    "lambda": 1.0,
    "no_si": False,
    "no_sl": False,
    "no_pt": False,
    "deterministic": False,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="ptmwrn",
        description="Progressively trained multi-level wavelet residual denoiser.",
        epilog="exit codes: 0 success, 1 usage error, 2 data or format error, "
        "3 numerical failure (non-finite loss, failed gradient check)",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    train = sub.add_parser("train", help="train a network on a directory of clean PGM/PPM images")
    train.add_argument("data", help="directory of clean training images (.pgm gray or .ppm color)")
    train.add_argument("-o", "--output", required=True, help="final checkpoint path")
    train.add_argument("--log", help="per-iteration CSV log (iter,stage,l_r,l_s2,l_s3,total,lr)")
    train.add_argument("--checkpoint-dir", help="also write a checkpoint at every epoch boundary")
    train.add_argument("--config", help="key = value file with a [train] section; flags override it")
    train.add_argument("--preset", choices=("desk", "paper"), default=None, help="size preset (default desk)")
    train.add_argument("--sigma", type=float, default=None, help="noise std on the 0-255 scale (default 25)")
    train.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    train.add_argument("--lambda", dest="lambda", type=float, default=None,
                       help="weight of the scale-specific losses in stage 3 (default 1.0)")
    train.add_argument("--rb", type=int, default=None, help="residual blocks per encoder/decoder side")
    train.add_argument("--no-si", action="store_true", default=None, help="disable scale-specific inputs")
    train.add_argument("--no-sl", action="store_true", default=None, help="disable scale-specific losses")
    train.add_argument("--no-pt", action="store_true", default=None,
                       help="train the full network from scratch instead of progressively")
    train.add_argument("--iters-per-epoch", type=int, default=None, help="override the preset's iterations per epoch")
    train.add_argument("--patch-size", type=int, default=None, help="override the training patch size")
    train.add_argument("--batch-size", type=int, default=None, help="override the batch size")
    train.add_argument("--finetune-epochs", type=int, default=None, help="epochs of post-fold finetuning")
    train.add_argument("--deterministic", action="store_true", default=None,
                       help="single-threaded BLAS so runs repeat bitwise")

    den = sub.add_parser("denoise", help="denoise one image with a trained checkpoint")
    den.add_argument("checkpoint")
    den.add_argument("input", help="noisy .pgm/.ppm image")
    den.add_argument("output", help="where to write the denoised image")
    den.add_argument("--add-noise", type=float, metavar="SIGMA",
                     help="first corrupt the input with AWGN of this std (0-255 scale)")
    den.add_argument("--noisy-output", help="with --add-noise, also save the corrupted image")
    den.add_argument("--seed", type=int, default=0, help="seed for --add-noise")

    ev = sub.add_parser("eval", help="PSNR/SSIM of denoised images against clean ones, as CSV")
    ev.add_argument("clean_dir")
    ev.add_argument("denoised_dir", help="files are matched to clean_dir by name")

    dwt = sub.add_parser("dwt", help="Haar transforms between images and .npy coefficient files")
    mode = dwt.add_mutually_exclusive_group(required=True)
    mode.add_argument("--forward", action="store_true", help="image -> (4C, H/2, W/2) subbands")
    mode.add_argument("--inverse", action="store_true", help="subbands -> image")
    mode.add_argument("--packet", type=int, choices=(1, 2, 3), metavar="LEVEL",
                      help="image -> full wavelet packet at LEVEL (1-3)")
    mode.add_argument("--inverse-packet", type=int, choices=(1, 2, 3), metavar="LEVEL",
                      help="packet coefficients at LEVEL -> image")
    dwt.add_argument("input")
    dwt.add_argument("output", help=".npy for coefficients, .pgm/.ppm for images")

    gc = sub.add_parser("gradcheck", help="run the 64-bit finite-difference gradient suite")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    return parser


# --------------------------------------------------------------------------
# train


def _read_config(path) -> dict:
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise UsageError(f"malformed config {path}: {exc}") from exc
    section = parser["train"] if parser.has_section("train") else parser["DEFAULT"]
    values = {}
    for raw_key in section:
        key = raw_key.replace("-", "_")
        if key not in TRAIN_KEYS:
            raise UsageError(f"unknown config key {raw_key!r} in {path}")
        kind = TRAIN_KEYS[key]
        try:
            values[key] = section.getboolean(raw_key) if kind is bool else kind(section[raw_key])
        except ValueError as exc:
            raise UsageError(f"bad value for {raw_key!r} in {path}: {exc}") from exc
    return values


def resolve_train_options(args: argparse.Namespace) -> dict:
    """Merge defaults < config file < command-line flags."""
    merged = dict(TRAIN_DEFAULTS)
    if args.config:
        merged.update(_read_config(args.config))
    for key in TRAIN_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    if merged["preset"] not in ("desk", "paper"):
        raise UsageError(f"preset must be desk or paper, got {merged['preset']!r}")
    if merged["sigma"] < 0:
        raise UsageError("sigma must be non-negative")
    if merged["lambda"] < 0:
        raise UsageError("lambda must be non-negative")
    if merged.get("rb") is not None and merged["rb"] < 0:
        raise UsageError("--rb must be >= 0")
    return merged


def make_train_config(opts: dict, in_channels: int) -> TrainConfig:
    model_kw = dict(
        in_channels=in_channels,
        lam=opts["lambda"],
        use_scale_input=not opts["no_si"],
        use_scale_loss=not opts["no_sl"],
    )
    if opts.get("rb") is not None:
        model_kw["rb_per_side"] = opts["rb"]
    model = MwrnConfig.preset(opts["preset"], **model_kw)
    train_kw = {
        key: opts[key]
        for key in ("iters_per_epoch", "patch_size", "batch_size", "finetune_epochs")
        if opts.get(key) is not None
    }
    factory = TrainConfig.paper if opts["preset"] == "paper" else TrainConfig.desk
    try:
        return factory(
            model=model,
            sigma=opts["sigma"] / 255.0,
            seed=opts["seed"],
            progressive=not opts["no_pt"],
            deterministic=opts["deterministic"],
            **train_kw,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _load_training_images(directory) -> list:
    path = Path(directory)
    if not path.is_dir():
        raise FileNotFoundError(f"training directory {directory} does not exist")
    files = list_images(path)
    if not files:
        raise ImageFormatError(f"no .pgm/.ppm images in {directory}")
    images = [read_image(f) for f in files]
    channels = {img.channels for img in images}
    if len(channels) != 1:
        raise ImageFormatError("training images mix gray (P5) and color (P6)")
    return images


def cmd_train(args) -> int:
    opts = resolve_train_options(args)
    images = _load_training_images(args.data)
    config = make_train_config(opts, images[0].channels)
    for img in images:
        _, _, h, w = img.pixels.shape
        if h < config.patch_size or w < config.patch_size:
            raise ImageFormatError(f"training image {h}x{w} is smaller than the {config.patch_size}px patch")
    if args.checkpoint_dir:
        Path(args.checkpoint_dir).mkdir(parents=True, exist_ok=True)
    log = TrainingLog(args.log)
    try:
        net = progressive_train(config, images, log, args.checkpoint_dir)
    finally:
        log.close()
    save_checkpoint(net, {"phase": "final", "iteration": len(log), "options": opts}, args.output)
    print(f"trained {len(log)} iterations; final smoothed loss {log.smoothed_final():.6g}; wrote {args.output}")
    return EXIT_OK


# --------------------------------------------------------------------------
# denoise / eval / dwt


def cmd_denoise(args) -> int:
    net, _ = load_checkpoint(args.checkpoint)
    img = read_image(args.input)
    if img.channels != net.config.in_channels:
        raise ImageFormatError(f"checkpoint expects {net.config.in_channels} channel(s), image has {img.channels}")
    noisy = img.pixels
    if args.add_noise is not None:
        rng = np.random.default_rng(args.seed)
        noise = rng.standard_normal(noisy.shape) * (args.add_noise / 255.0)
        noisy = Tensor((noisy.data + noise).astype(noisy.dtype))
        if args.noisy_output:
            write_image(ImageFile(noisy, img.source_format), args.noisy_output)
    out = denoise(net, Tensor(noisy.data, dtype=net.dtype), clip=True)
    write_image(ImageFile(Tensor(out.data.astype(np.float32)), img.source_format), args.output)
    return EXIT_OK


def cmd_eval(args) -> int:
    clean_dir, den_dir = Path(args.clean_dir), Path(args.denoised_dir)
    for d in (clean_dir, den_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"{d} is not a directory")
    files = list_images(clean_dir)
    if not files:
        raise ImageFormatError(f"no .pgm/.ppm images in {clean_dir}")
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["image", "psnr", "ssim"])
    scores = []
    for clean_path in files:
        other = den_dir / clean_path.name
        if not other.exists():
            raise FileNotFoundError(f"no denoised counterpart for {clean_path.name} in {den_dir}")
        a, b = read_image(clean_path), read_image(other)
        if a.pixels.shape != b.pixels.shape:
            raise ImageFormatError(f"{clean_path.name}: dims differ ({a.pixels.shape} vs {b.pixels.shape})")
        row = (psnr(a, b), ssim(a, b))
        scores.append(row)
        writer.writerow([clean_path.name, f"{row[0]:.4f}", f"{row[1]:.6f}"])
    mean = np.mean(np.array(scores), axis=0)
    writer.writerow(["mean", f"{mean[0]:.4f}", f"{mean[1]:.6f}"])
    return EXIT_OK


def _load_coefficients(path) -> Tensor:
    try:
        arr = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise ImageFormatError(f"cannot read coefficients from {path}: {exc}") from exc
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.dtype.kind != "f":
        raise ImageFormatError(f"{path}: expected float (C, H, W) or (1, C, H, W) coefficients")
    return Tensor(arr)


def _save_output(tensor: Tensor, path: str, source_format: str = "P5") -> None:
    if path.endswith(".npy"):
        np.save(path, tensor.data[0])
    else:
        write_image(ImageFile(Tensor(tensor.data.astype(np.float32)), source_format), path)


def _image_input(path) -> Tensor:
    if str(path).endswith(".npy"):
        return _load_coefficients(path)
    return read_image(path).pixels


def cmd_dwt(args) -> int:
    try:
        if args.forward:
            _save_output(dwt2(_image_input(args.input)), args.output)
        elif args.packet:
            _save_output(wavelet_packet(_image_input(args.input), args.packet).tensor, args.output)
        else:
            coeffs = _load_coefficients(args.input)
            if args.inverse:
                image = idwt2(coeffs)
            else:
                level = args.inverse_packet
                channels, rem = divmod(coeffs.shape[1], 4**level)
                if rem or channels not in (1, 3):
                    raise ImageFormatError(f"{coeffs.shape[1]} channels is not a level-{level} packet")
                image = inverse_wavelet_packet(SubbandStack(level, coeffs, channels))
            _save_output(image, args.output, "P5" if image.shape[1] == 1 else "P6")
    except ValueError as exc:
        if isinstance(exc, ImageFormatError):
            raise
        raise ImageFormatError(str(exc)) from exc
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(seed=args.seed, tolerance=args.tolerance)
    ok = True
    for name, report in results.items():
        status = "ok" if report.passed else "FAIL"
        ok &= report.passed
        print(f"{name:16s} max_rel_err={report.max_rel_error:.3e} checked={report.checked} "
              f"skipped={report.skipped_kinks} {status}")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {
    "train": cmd_train,
    "denoise": cmd_denoise,
    "eval": cmd_eval,
    "dwt": cmd_dwt,
    "gradcheck": cmd_gradcheck,
}


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"ptmwrn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLossError, NonFiniteError, FloatingPointError) as exc:
        print(f"ptmwrn {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ImageFormatError, CorruptCheckpointError, ScheduleError, FileNotFoundError, OSError) as exc:
        print(f"ptmwrn {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"ptmwrn {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
