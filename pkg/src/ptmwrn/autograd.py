"""Small reverse-mode autodiff engine over dense NCHW arrays.

Only the operations the wavelet residual network needs are provided:
3x3 same-padded convolution, ReLU, batch normalization, channel
concatenation, addition, scalar scaling, summation and the half squared
error loss. Wavelet layers live in :mod:`ptmwrn.wavelet` and plug into the
same graph through :func:`make_result`.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

logger = logging.getLogger(__name__)

BN_EPS = 1e-4
BN_DECAY = 0.9

_state = {"check_finite": False, "deterministic": False}
_relu_trace: Optional[list] = None
_blas_limiter = None


class NonFiniteError(FloatingPointError):
    """Raised in checked mode when an op produces NaN or Inf."""


class MissingGradientError(RuntimeError):
    pass


def set_check_finite(enabled: bool) -> None:
    _state["check_finite"] = bool(enabled)


def check_finite_enabled() -> bool:
    return _state["check_finite"]


def set_deterministic(enabled: bool) -> None:
    """Pin BLAS to one thread so every reduction runs in a fixed order."""
    global _blas_limiter
    if enabled and _blas_limiter is None:
        _blas_limiter = threadpool_limits(limits=1, user_api="blas")
    elif not enabled and _blas_limiter is not None:
        _blas_limiter.restore_original_limits()
        _blas_limiter = None
    _state["deterministic"] = bool(enabled)


def deterministic_enabled() -> bool:
    return _state["deterministic"]


@contextlib.contextmanager
def deterministic() -> Iterator[None]:
    previous = _state["deterministic"]
    set_deterministic(True)
    try:
        yield
    finally:
        set_deterministic(previous)


@contextlib.contextmanager
def checked() -> Iterator[None]:
    previous = _state["check_finite"]
    set_check_finite(True)
    try:
        yield
    finally:
        set_check_finite(previous)


def _assert_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    """Dense array with an optional gradient and a link to the op that made it."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        self.data = np.asarray(arr, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = ""

    @property
    def shape(self) -> tuple:
        return self.data.shape

    dims = shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad})"

    def backward(self, grad: Optional[np.ndarray] = None, retain_graph: bool = False) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if _state["check_finite"]:
                    _assert_finite(pg, f"backward of {node._op}")
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            if not retain_graph:
                node._parents = ()
                node._backward = None


def _topological_order(root: Tensor) -> list:
    order: list = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap an op's output, wiring it into the graph when any parent needs grad."""
    if _state["check_finite"]:
        _assert_finite(data, op)
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


class Parameter(Tensor):
    """Named trainable tensor carrying its own Adam moments."""

    def __init__(self, name: str, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    def reset_optimizer_state(self) -> None:
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


def adam_step(params: Sequence[Parameter], hyper: AdamHyper) -> None:
    """One bias-corrected Adam update; clears the gradients it consumed."""
    missing = [p.name for p in params if p.grad is None]
    if missing:
        raise MissingGradientError(f"no gradient for {missing[:5]}")
    b1, b2 = hyper.beta1, hyper.beta2
    for p in params:
        p.step_count += 1
        t = p.step_count
        g = p.grad
        p.adam_m *= b1
        p.adam_m += (1.0 - b1) * g
        p.adam_v *= b2
        p.adam_v += (1.0 - b2) * (g * g)
        m_hat = p.adam_m / (1.0 - b1**t)
        v_hat = p.adam_v / (1.0 - b2**t)
        p.data -= hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.epsilon)
        p.grad = None


# --------------------------------------------------------------------------
# ops

_OFFSETS = [(i, j) for i in range(3) for j in range(3)]


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (C*9, B*H*W): one row per (channel, tap), one column per output pixel."""
    b, c, h, w = x.shape
    xp = np.pad(x.transpose(1, 0, 2, 3), ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((c, 9, b, h, w), dtype=x.dtype)
    for k, (i, j) in enumerate(_OFFSETS):
        cols[:, k] = xp[:, :, i : i + h, j : j + w]
    return cols.reshape(c * 9, b * h * w)


def _col2im(cols: np.ndarray, b: int, c: int, h: int, w: int) -> np.ndarray:
    cols = cols.reshape(c, 9, b, h, w)
    out = np.zeros((c, b, h + 2, w + 2), dtype=cols.dtype)
    for k, (i, j) in enumerate(_OFFSETS):
        out[:, :, i : i + h, j : j + w] += cols[:, k]
    return np.ascontiguousarray(out[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3))


def _check_4d(t: Tensor, what: str) -> None:
    if t.ndim != 4:
        raise ValueError(f"{what} must be 4-D (batch, channels, height, width), got {t.shape}")


def conv2d(input: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1 (spatial size preserved)."""
    _check_4d(input, "conv2d input")
    b, c, h, w = input.shape
    out_c, in_c, kh, kw = weight.shape
    if (kh, kw) != (3, 3):
        raise ValueError(f"only 3x3 kernels are supported, got {kh}x{kw}")
    if in_c != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {in_c}")
    if h == 0 or w == 0:
        raise ValueError("conv2d needs non-empty spatial dims")
    if bias is not None and bias.shape != (out_c,):
        raise ValueError(f"bias shape {bias.shape} does not match {out_c} outputs")

    cols = _im2col(input.data)
    wm = weight.data.reshape(out_c, c * 9)
    out = wm @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(out_c, b, h, w).transpose(1, 0, 2, 3))

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(out_c, b * h * w)
        gx = _col2im(wm.T @ g2, b, c, h, w) if input.requires_grad else None
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (input, weight) if bias is None else (input, weight, bias)
    return make_result(out, parents, backward, "conv2d")


def relu(input: Tensor) -> Tensor:
    mask = input.data > 0
    if _relu_trace is not None:
        _relu_trace.append(mask)
    out = input.data * mask

    def backward(g):
        return (g * mask,)

    return make_result(out, (input,), backward, "relu")


def batch_norm(
    input: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool,
    eps: float = BN_EPS,
    decay: float = BN_DECAY,
) -> Tensor:
    """Per-channel batch normalization.

    Training mode uses the biased (population) batch variance and folds the
    batch statistics into the running estimates as
    ``running = decay * running + (1 - decay) * batch``. Eval mode is the
    per-channel affine map ``gamma * (x - mean) / sqrt(var + eps) + beta``.
    """
    _check_4d(input, "batch_norm input")
    b, c, h, w = input.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm expects {c} channels, got gamma {gamma.shape}")
    x = input.data
    shape = (1, c, 1, 1)
    if training:
        n = b * h * w
        if n < 2:
            raise ValueError("training-mode batch_norm needs at least 2 values per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean.data *= decay
        running_mean.data += (1.0 - decay) * mean
        running_var.data *= decay
        running_var.data += (1.0 - decay) * var
    else:
        mean = running_mean.data
        var = running_var.data
        n = None
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if input.requires_grad:
            gxhat = g * gamma.data.reshape(shape)
            if training:
                mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
                mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                gx = (gxhat - mean_g - xhat * mean_gx) * inv_std.reshape(shape)
            else:
                gx = gxhat * inv_std.reshape(shape)
        return gx, ggamma, gbeta

    return make_result(out, (input, gamma, beta), backward, "batch_norm")


def channel_concat(a: Tensor, b: Tensor) -> Tensor:
    _check_4d(a, "concat input")
    _check_4d(b, "concat input")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        return g[:, :ca], g[:, ca:]

    return make_result(out, (a, b), backward, "channel_concat")


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"cannot add tensors of shape {a.shape} and {b.shape}")

    def backward(g):
        return g, g

    return make_result(a.data + b.data, (a, b), backward, "add")


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def backward(g):
        return (g * factor,)

    return make_result(a.data * np.asarray(factor, a.dtype), (a,), backward, "scale")


def tensor_sum(a: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return make_result(np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward, "sum")


def weighted_sum(a: Tensor, weights: np.ndarray) -> Tensor:
    """sum(a * weights) for a constant weight array; handy as a gradcheck probe."""
    weights = np.asarray(weights, dtype=a.dtype)
    if weights.shape != a.shape:
        raise ValueError("weights must match the tensor shape")

    def backward(g):
        return (g * weights,)

    return make_result(np.asarray((a.data * weights).sum(), dtype=a.dtype), (a,), backward, "weighted_sum")


def mse_half(pred: Tensor, target: Tensor) -> Tensor:
    """0.5 * ||pred - target||^2 divided by the batch size (not the element count)."""
    if pred.shape != target.shape:
        raise ValueError(f"loss operands differ in shape: {pred.shape} vs {target.shape}")
    batch = pred.shape[0] if pred.ndim else 1
    diff = pred.data - target.data
    value = np.asarray(0.5 * np.sum(diff * diff) / batch, dtype=pred.dtype)

    def backward(g):
        d = g * diff / batch
        return d, -d

    return make_result(value, (pred, target), backward, "mse_half")


# --------------------------------------------------------------------------
# finite differences


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    checked: int
    skipped_kinks: int = 0
    per_input: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error < self.tolerance

    def __bool__(self) -> bool:
        return self.passed


def _evaluate(fn: Callable, inputs: Sequence[Tensor], trace: bool):
    global _relu_trace
    _relu_trace = [] if trace else None
    try:
        value = fn(*inputs)
        masks = _relu_trace
    finally:
        _relu_trace = None
    return value, masks


def _same_kinks(a: Optional[list], b: Optional[list]) -> bool:
    if a is None or b is None:
        return True
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def finite_diff_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-5,
    abs_floor: float = 1e-6,
    rel_floor: float = 1e-3,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """Compare autograd gradients of a scalar ``fn(*inputs)`` to central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)`` where
    ``floor = max(abs_floor, rel_floor * max|a|)`` over all inputs, so entries
    far below the gradient's scale (dominated by rounding in the difference
    quotient) are judged against that scale instead of their own size.
    Coordinates whose perturbation flips any ReLU gate are skipped, since the
    function is not differentiable across the kink. ``max_coords`` limits the
    number of coordinates sampled per input.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("finite-difference checks require 64-bit tensors")
    rng = rng if rng is not None else np.random.default_rng(0)

    for t in inputs:
        t.grad = None
    value, base_masks = _evaluate(fn, inputs, trace=True)
    if value.data.size != 1:
        raise ValueError("finite_diff_check needs a scalar-valued function")
    if not np.isfinite(value.data).all():
        raise NonFiniteError("function value is not finite")
    value.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    scale_ = max(float(np.max(np.abs(g), initial=0.0)) for g in analytic)
    floor = max(abs_floor, rel_floor * scale_)
    worst = 0.0
    checked = skipped = 0
    per_input = []
    for t, grad in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        local = 0.0
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + step
            plus, masks_p = _evaluate(fn, inputs, trace=True)
            flat[idx] = orig - step
            minus, masks_m = _evaluate(fn, inputs, trace=True)
            flat[idx] = orig
            if not (_same_kinks(base_masks, masks_p) and _same_kinks(base_masks, masks_m)):
                skipped += 1
                continue
            numeric = (float(plus.data) - float(minus.data)) / (2.0 * step)
            if not np.isfinite(numeric):
                raise NonFiniteError("non-finite finite-difference estimate")
            a = float(grad.reshape(-1)[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            local = max(local, err)
            checked += 1
        per_input.append(local)
        worst = max(worst, local)
    for t in inputs:
        t.grad = None
    return GradCheckReport(worst, tolerance, checked, skipped, per_input)
