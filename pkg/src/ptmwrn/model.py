"""Multi-level wavelet residual network and its progressive-training stages.

Layer names do not carry a stage prefix: a stage-``k`` network reuses the
exact names of every layer it shares with stage ``k - 1``, which is what
makes carry-over a plain name-for-name copy.

Layout (``n`` input channels, widths ``W1, W2, W3``, ``C`` blocks per side)::

    scale 1 (stage 3)   s1.input  4n -> W1        s1.enc_rb*   s1.down 4W1 -> W2
                        s2.up     W2 -> 4W1 (IDWT) + f1 -> s1.dec_rb* -> s1.head W1 -> 4n (IDWT)
    scale 2 (stage 2+)  s2.input 16n -> W2  ++ bridge -> s2.fuse 2W2 -> W2  s2.enc_rb*
                        s2.down  4W2 -> W3
                        s3.up     W3 -> 4W2 (IDWT) + f2 -> s2.dec_rb* -> s2.head W2 -> 16n
    scale 3 (always)    s3.input 64n -> W3  ++ bridge -> s3.fuse 2W3 -> W3  s3.rb* (2C)
                        s3.head  W3 -> 64n

``++`` is channel concatenation; the bridge is a zero placeholder until the
next-finer scale exists.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import numpy as np

from .autograd import (
    BN_EPS,
    Parameter,
    Tensor,
    batch_norm,
    channel_concat,
    conv2d,
    elementwise_add,
    relu,
)
from .wavelet import SubbandStack, dwt2, idwt2, wavelet_packet

STAGES = (1, 2, 3)
# the finer-scale bridge that feeds an already trained coarser path
INCOMING_BRIDGE = {2: "s2.down", 3: "s1.down"}


@dataclass
class MwrnConfig:
    in_channels: int = 1
    widths: tuple = (160, 256, 512)
    rb_per_side: int = 4
    use_scale_input: bool = True
    use_scale_loss: bool = True
    lam: float = 1.0
    global_residual: bool = True
    dtype: str = "float32"
    # "zero" starts every prediction head at the identity (output = noisy input)
    head_init: str = "zero"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.in_channels not in (1, 3):
            raise ValueError("in_channels must be 1 (gray) or 3 (color)")
        if len(self.widths) != 3 or any(w <= 0 or w % 4 for w in self.widths):
            raise ValueError(f"widths must be three positive multiples of 4, got {self.widths}")
        if self.rb_per_side < 0:
            raise ValueError("rb_per_side must be >= 0")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.head_init not in ("zero", "fan_in"):
            raise ValueError("head_init must be 'zero' or 'fan_in'")

    @classmethod
    def paper(cls, **overrides) -> "MwrnConfig":
        return cls(**{"widths": (160, 256, 512), "rb_per_side": 4, **overrides})

    @classmethod
    def desk(cls, **overrides) -> "MwrnConfig":
        return cls(**{"widths": (40, 64, 128), "rb_per_side": 2, **overrides})

    @classmethod
    def preset(cls, name: str, **overrides) -> "MwrnConfig":
        if name == "paper":
            return cls.paper(**overrides)
        if name == "desk":
            return cls.desk(**overrides)
        raise ValueError(f"unknown preset {name!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MwrnConfig":
        return cls(**d)


@dataclass(frozen=True)
class ConvSpec:
    name: str
    in_ch: int
    out_ch: int
    bn: bool = True
    relu: bool = True
    # prediction heads that only feed a scale-specific loss
    side_head: bool = False


def _layer_plan(stage: int, cfg: MwrnConfig) -> list:
    n = cfg.in_channels
    w1, w2, w3 = cfg.widths
    c = cfg.rb_per_side
    plan: list = []

    def blocks(prefix: str, width: int, count: int):
        for i in range(count):
            plan.append(ConvSpec(f"{prefix}{i}.conv1", width, width))
            plan.append(ConvSpec(f"{prefix}{i}.conv2", width, width, relu=False))

    if stage == 3:
        plan.append(ConvSpec("s1.input", 4 * n, w1))
        blocks("s1.enc_rb", w1, c)
        plan.append(ConvSpec("s1.down", 4 * w1, w2))
    if stage >= 2:
        plan.append(ConvSpec("s2.input", 16 * n, w2))
        plan.append(ConvSpec("s2.fuse", 2 * w2, w2))
        blocks("s2.enc_rb", w2, c)
        plan.append(ConvSpec("s2.down", 4 * w2, w3))
    plan.append(ConvSpec("s3.input", 64 * n, w3))
    plan.append(ConvSpec("s3.fuse", 2 * w3, w3))
    blocks("s3.rb", w3, 2 * c)
    plan.append(ConvSpec("s3.head", w3, 64 * n, bn=False, relu=False, side_head=stage > 1))
    if stage >= 2:
        plan.append(ConvSpec("s3.up", w3, 4 * w2))
        blocks("s2.dec_rb", w2, c)
        plan.append(ConvSpec("s2.head", w2, 16 * n, bn=False, relu=False, side_head=stage > 2))
    if stage == 3:
        plan.append(ConvSpec("s2.up", w2, 4 * w1))
        blocks("s1.dec_rb", w1, c)
        plan.append(ConvSpec("s1.head", w1, 4 * n, bn=False, relu=False))
    return plan


def conv_unit(x: Tensor, unit: Dict[str, Tensor], use_relu: bool, training: bool) -> Tensor:
    """conv -> (BN when the unit still has one) -> (ReLU)."""
    out = conv2d(x, unit["weight"], unit["bias"])
    if "bn.gamma" in unit:
        out = batch_norm(
            out,
            unit["bn.gamma"],
            unit["bn.beta"],
            unit["bn.running_mean"],
            unit["bn.running_var"],
            training,
        )
    return relu(out) if use_relu else out


def residual_block(x: Tensor, params: Dict[str, Tensor], training: bool = False) -> Tensor:
    """conv-BN-ReLU-conv-BN plus identity, then ReLU.

    ``params`` maps ``conv1.weight``, ``conv1.bias``, ``conv1.bn.gamma`` ...
    to tensors; BN entries may be absent after folding.
    """
    width = x.shape[1]
    w1 = params["conv1.weight"]
    if w1.shape[1] != width or params["conv2.weight"].shape[0] != width:
        raise ValueError(f"residual block width {w1.shape[1]} does not match input width {width}")
    units = {"conv1": {}, "conv2": {}}
    for key, value in params.items():
        head, _, rest = key.partition(".")
        units[head][rest] = value
    h = conv_unit(x, units["conv1"], True, training)
    h = conv_unit(h, units["conv2"], False, training)
    return relu(elementwise_add(h, x))


@dataclass
class StageOutputs:
    heads: Dict[int, Tensor] = field(default_factory=dict)
    predictions: Dict[int, Tensor] = field(default_factory=dict)
    noisy: Dict[int, SubbandStack] = field(default_factory=dict)
    image: Optional[Tensor] = None


class StageNetwork:
    """One progressive-training stage of the network with a named parameter store."""

    def __init__(self, stage: int, config: MwrnConfig, seed: Optional[int] = 0):
        if stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {stage}")
        self.stage = stage
        self.config = config
        self.bn_folded = False
        self.layers: Dict[str, ConvSpec] = {spec.name: spec for spec in _layer_plan(stage, config)}
        self.params: Dict[str, Parameter] = {}
        self.buffers: Dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))
        self._index()

    def _init_params(self, rng: np.random.Generator) -> None:
        dtype = np.dtype(self.config.dtype)
        for spec in self.layers.values():
            bound = np.sqrt(6.0 / (spec.in_ch * 9))
            w = rng.uniform(-bound, bound, size=(spec.out_ch, spec.in_ch, 3, 3))
            if spec.name.endswith(".head") and self.config.head_init == "zero":
                w[...] = 0
            self._add_param(f"{spec.name}.weight", w.astype(dtype))
            self._add_param(f"{spec.name}.bias", np.zeros(spec.out_ch, dtype))
            if spec.bn:
                self._add_param(f"{spec.name}.bn.gamma", np.ones(spec.out_ch, dtype))
                self._add_param(f"{spec.name}.bn.beta", np.zeros(spec.out_ch, dtype))
                self.buffers[f"{spec.name}.bn.running_mean"] = Tensor(np.zeros(spec.out_ch, dtype))
                self.buffers[f"{spec.name}.bn.running_var"] = Tensor(np.ones(spec.out_ch, dtype))

    def _add_param(self, name: str, data: np.ndarray) -> None:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name}")
        self.params[name] = Parameter(name, data)

    def _index(self) -> None:
        units: Dict[str, Dict[str, Tensor]] = {name: {} for name in self.layers}
        for store in (self.params, self.buffers):
            for key, value in store.items():
                layer = _owning_layer(key, units)
                units[layer][key[len(layer) + 1 :]] = value
        self._units = units

    # -- introspection ---------------------------------------------------

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def parameters(self) -> list:
        return list(self.params.values())

    def _unused_layers(self) -> set:
        if self.stage == 3 and not self.config.use_scale_loss:
            return {name for name, spec in self.layers.items() if spec.side_head}
        return set()

    def active_parameters(self) -> list:
        """Parameters that receive a gradient from this stage's objective."""
        unused = self._unused_layers()
        return [p for name, p in self.params.items() if _owning_layer(name, self._units) not in unused]

    def conv_layer_count(self, include_side_heads: bool = False) -> int:
        """Conv layers on the path to the stage's final output.

        Side heads (scale-specific predictions that feed only the auxiliary
        losses) are excluded unless ``include_side_heads``.
        """
        return sum(1 for s in self.layers.values() if include_side_heads or not s.side_head)

    def residual_block_count(self) -> int:
        return len({name.rsplit(".", 1)[0] for name in self.layers if "rb" in name.split(".")[1]})

    def bn_parameter_count(self) -> int:
        return sum(1 for name in self.params if ".bn." in name) + len(self.buffers)

    def named_arrays(self) -> Dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.params.items()}
        out.update({name: b.data for name, b in self.buffers.items()})
        return out

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- forward ---------------------------------------------------------

    def _conv(self, name: str, x: Tensor, training: bool) -> Tensor:
        return conv_unit(x, self._units[name], self.layers[name].relu, training)

    def _blocks(self, prefix: str, x: Tensor, count: int, training: bool) -> Tensor:
        for i in range(count):
            block = {}
            for conv in ("conv1", "conv2"):
                for key, value in self._units[f"{prefix}{i}.{conv}"].items():
                    block[f"{conv}.{key}"] = value
            x = residual_block(x, block, training)
        return x

    def forward(self, image: Tensor, training: bool = False) -> StageOutputs:
        return forward(self, image, training)

    __call__ = forward


def _owning_layer(key: str, layers) -> str:
    for suffix in (".bn.running_mean", ".bn.running_var", ".bn.gamma", ".bn.beta", ".weight", ".bias"):
        if key.endswith(suffix):
            layer = key[: -len(suffix)]
            if layer in layers:
                return layer
            if suffix.startswith(".bn."):
                raise ValueError(f"batch-norm entry {key} is not attached to a convolution")
    raise ValueError(f"cannot attribute {key} to a conv layer")


def build_stage(stage: int, config: MwrnConfig, seed: Optional[int] = 0) -> StageNetwork:
    return StageNetwork(stage, config, seed)


def _scales_for(stage: int) -> tuple:
    return {1: (3,), 2: (2, 3), 3: (1, 2, 3)}[stage]


def forward(net: StageNetwork, image: Tensor, training: bool = False) -> StageOutputs:
    cfg = net.config
    if image.ndim != 4:
        raise ValueError("image must be 4-D (batch, channels, height, width)")
    b, ch, h, w = image.shape
    if ch != cfg.in_channels:
        raise ValueError(f"network expects {cfg.in_channels} channels, got {ch}")
    if h % 8 or w % 8:
        raise ValueError(f"image dims {h}x{w} must be divisible by 8")
    if image.dtype != net.dtype:
        image = Tensor(image.data, dtype=net.dtype)
    w1, w2, w3 = cfg.widths
    c = cfg.rb_per_side
    stage = net.stage
    out = StageOutputs()
    for level in _scales_for(stage):
        out.noisy[level] = wavelet_packet(image, level)

    def scale_input(level: int) -> Tensor:
        stack = out.noisy[level].tensor
        if cfg.use_scale_input:
            return stack
        return Tensor(np.zeros(stack.shape, dtype=net.dtype))

    def zeros(width: int, level: int) -> Tensor:
        return Tensor(np.zeros((b, width, h >> level, w >> level), dtype=net.dtype))

    conv = net._conv
    if stage == 3:
        f1 = conv("s1.input", out.noisy[1].tensor, training)
        f1 = net._blocks("s1.enc_rb", f1, c, training)
        bridge2 = conv("s1.down", dwt2(f1), training)
    if stage >= 2:
        f2 = conv("s2.input", scale_input(2), training)
        f2 = conv("s2.fuse", channel_concat(f2, bridge2 if stage == 3 else zeros(w2, 2)), training)
        f2 = net._blocks("s2.enc_rb", f2, c, training)
        bridge3 = conv("s2.down", dwt2(f2), training)
    f3 = conv("s3.input", scale_input(3), training)
    f3 = conv("s3.fuse", channel_concat(f3, bridge3 if stage >= 2 else zeros(w3, 3)), training)
    f3 = net._blocks("s3.rb", f3, 2 * c, training)

    side = stage < 3 or cfg.use_scale_loss
    if side:
        out.heads[3] = conv("s3.head", f3, training)
    if stage >= 2:
        d2 = elementwise_add(idwt2(conv("s3.up", f3, training)), f2)
        d2 = net._blocks("s2.dec_rb", d2, c, training)
        if side:
            out.heads[2] = conv("s2.head", d2, training)
    if stage == 3:
        d1 = elementwise_add(idwt2(conv("s2.up", d2, training)), f1)
        d1 = net._blocks("s1.dec_rb", d1, c, training)
        restored = idwt2(conv("s1.head", d1, training))
        out.image = elementwise_add(image, restored) if cfg.global_residual else restored
    for level, head in out.heads.items():
        out.predictions[level] = elementwise_add(head, out.noisy[level].tensor)
    return out


def carry_over(lower: StageNetwork, upper: StageNetwork) -> StageNetwork:
    """Initialise ``upper`` from ``lower`` by parameter name.

    Shared parameters and BN running statistics are copied; Adam moments of
    the upper network are reset. The new bridge feeding the pretrained
    coarser path is zeroed so the upper stage starts out reproducing the
    lower stage on the shared path.
    """
    if upper.stage != lower.stage + 1:
        raise ValueError(f"cannot carry stage {lower.stage} into stage {upper.stage}")
    if lower.bn_folded != upper.bn_folded:
        raise ValueError("both networks must agree on batch-norm folding")
    shared = sorted(set(lower.params) & set(upper.params))
    if not shared:
        raise ValueError("networks share no parameter names; configs do not match")
    for store_l, store_u in ((lower.params, upper.params), (lower.buffers, upper.buffers)):
        for name in sorted(set(store_l) & set(store_u)):
            src, dst = store_l[name], store_u[name]
            if src.shape != dst.shape:
                raise ValueError(f"shape mismatch for {name}: {src.shape} vs {dst.shape}")
            dst.data[...] = src.data
    for p in upper.params.values():
        p.reset_optimizer_state()
        p.grad = None
    bridge = INCOMING_BRIDGE[upper.stage]
    upper.params[f"{bridge}.weight"].data[...] = 0
    upper.params[f"{bridge}.bias"].data[...] = 0
    return upper


def fold_batchnorm(net: StageNetwork) -> StageNetwork:
    """Return a copy whose convolutions absorb their eval-mode BN layers."""
    if net.bn_folded:
        raise ValueError("network is already folded")
    folded = copy.deepcopy(net)
    dtype = folded.dtype
    for name, spec in folded.layers.items():
        if not spec.bn:
            continue
        gamma = folded.params.pop(f"{name}.bn.gamma").data.astype(np.float64)
        beta = folded.params.pop(f"{name}.bn.beta").data.astype(np.float64)
        mean = folded.buffers.pop(f"{name}.bn.running_mean").data.astype(np.float64)
        var = folded.buffers.pop(f"{name}.bn.running_var").data.astype(np.float64)
        s = gamma / np.sqrt(var + BN_EPS)
        weight = folded.params[f"{name}.weight"]
        bias = folded.params[f"{name}.bias"]
        weight.data[...] = (weight.data.astype(np.float64) * s[:, None, None, None]).astype(dtype)
        bias.data[...] = ((bias.data.astype(np.float64) - mean) * s + beta).astype(dtype)
        folded.layers[name] = ConvSpec(spec.name, spec.in_ch, spec.out_ch, False, spec.relu, spec.side_head)
    leftovers = [k for k in list(folded.params) + list(folded.buffers) if ".bn." in k]
    if leftovers:
        raise ValueError(f"batch-norm entries without a convolution: {leftovers[:3]}")
    for p in folded.params.values():
        p.reset_optimizer_state()
        p.grad = None
    folded.bn_folded = True
    folded._index()
    return folded
