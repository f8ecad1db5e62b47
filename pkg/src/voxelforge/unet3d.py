"""Encoder-decoder segmentation network with dilated bottleneck and deep supervision.

Four encoder stages of two 3-cubed convolutions each (widths w, 2w, 4w,
8w) separated by 2-cubed max pooling. After stage 4 two dilation-2
convolutions run at the same width; their output is concatenated with
the stage-4 output and reduced by a single convolution, then three
decoder stages (upsample, concat skip, two convolutions) mirror the
encoder back to full resolution. Every 3-cubed convolution is followed
by a norm and a ReLU. Five sigmoid heads emit 3-channel region
probabilities: the main head at full resolution and four auxiliary
heads (dilated block, lowest decoder conv, quarter- and half-resolution
decoder stages), each a 1-cubed convolution plus sigmoid, trilinearly
upsampled to full resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .tensornet import (
    ConvSpec,
    Tensor,
    accumulate,
    add,
    concat_channels,
    conv3d,
    default_groups,
    group_norm,
    instance_norm,
    maxpool3d,
    relu,
    sigmoid,
    trilinear_upsample2x,
)
from .tensornet.tensor import result

STAGES = 4  # encoder depth is fixed; widths double per stage


class NormKind(Enum):
    GROUP = "group"
    INSTANCE = "instance"


class DiceVariant(Enum):
    SQUARED_DENOM = "squared_denom"
    PLAIN_DENOM = "plain_denom"


@dataclass(frozen=True)
class ArchConfig:
    base_width: int = 8
    norm: NormKind = NormKind.GROUP
    input_channels: int = 4
    output_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "norm", NormKind(self.norm))
        if self.base_width < 2:
            raise ValueError(f"base_width must be >= 2, got {self.base_width}")
        if self.input_channels < 1 or self.output_channels < 1:
            raise ValueError("channel counts must be positive")


@dataclass(frozen=True)
class DiceLossSpec:
    variant: DiceVariant = DiceVariant.SQUARED_DENOM
    epsilon: float = 1.0
    # the published formula omits the standard factor 2 on the overlap
    # term; keeping it on is the default, the printed form is a switch
    double_numerator: bool = True

    def __post_init__(self):
        object.__setattr__(self, "variant", DiceVariant(self.variant))
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")


class ModelParams:
    """Named parameter tensors plus the config that shaped them."""

    def __init__(self, cfg: ArchConfig, tensors: dict[str, Tensor]):
        self.cfg = cfg
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.tensors):
            missing = set(self.tensors) - set(state)
            extra = set(state) - set(self.tensors)
            raise ValueError(f"state mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, arr in state.items():
            t = self.tensors[name]
            if arr.shape != t.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.data.shape}")
            t.data = np.asarray(arr, dtype=t.data.dtype).copy()

    def train(self) -> None:
        for t in self.tensors.values():
            t.requires_grad = True

    def eval(self) -> None:
        for t in self.tensors.values():
            t.requires_grad = False
            t.grad = None

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


def _conv_block_specs(cfg: ArchConfig):
    """(name, cin, cout, kernel, dilation, has_norm) for every conv layer."""
    w = cfg.base_width
    layers = []
    cin = cfg.input_channels
    for stage in range(1, STAGES + 1):
        cout = w * 2 ** (stage - 1)
        layers.append((f"enc{stage}.a", cin, cout, 3, 1, True))
        layers.append((f"enc{stage}.b", cout, cout, 3, 1, True))
        cin = cout
    deep = w * 2 ** (STAGES - 1)
    layers.append(("dil.a", deep, deep, 3, 2, True))
    layers.append(("dil.b", deep, deep, 3, 2, True))
    layers.append(("low.a", 2 * deep, deep, 3, 1, True))
    skip = deep
    for stage, name in ((3, "up3"), (2, "up2"), (1, "up1")):
        cout = w * 2 ** (stage - 1)
        skip_ch = cout
        layers.append((f"{name}.a", skip + skip_ch, cout, 3, 1, True))
        layers.append((f"{name}.b", cout, cout, 3, 1, True))
        skip = cout
    out = cfg.output_channels
    layers.append(("head.main", w, out, 1, 1, False))
    layers.append(("head.aux_dil", deep, out, 1, 1, False))
    layers.append(("head.aux_low", deep, out, 1, 1, False))
    layers.append(("head.aux_up3", 4 * w, out, 1, 1, False))
    layers.append(("head.aux_up2", 2 * w, out, 1, 1, False))
    return layers


def build_model(cfg: ArchConfig, rng: np.random.Generator) -> ModelParams:
    """Allocate and initialize every parameter tensor.

    Conv weights draw from a fan-in-scaled uniform, biases start at
    zero, norm affines at identity. Draw order is fixed, so one seed
    gives one model.
    """
    tensors: dict[str, Tensor] = {}
    for name, cin, cout, kernel, _dil, has_norm in _conv_block_specs(cfg):
        fan_in = cin * kernel**3
        bound = 1.0 / np.sqrt(fan_in)
        wshape = (cout, cin, kernel, kernel, kernel)
        tensors[f"{name}.w"] = Tensor(
            rng.uniform(-bound, bound, size=wshape).astype(np.float32), requires_grad=True
        )
        tensors[f"{name}.b"] = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)
        if has_norm:
            tensors[f"{name}.gamma"] = Tensor(np.ones(cout, dtype=np.float32), requires_grad=True)
            tensors[f"{name}.beta"] = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)
    return ModelParams(cfg, tensors)


def _layer(params: ModelParams, name: str, x: Tensor, cin: int, cout: int, dilation: int) -> Tensor:
    spec = ConvSpec(cin, cout, kernel=3, dilation=dilation)
    out = conv3d(x, params[f"{name}.w"], params[f"{name}.b"], spec)
    gamma, beta = params[f"{name}.gamma"], params[f"{name}.beta"]
    if params.cfg.norm is NormKind.GROUP:
        out = group_norm(out, default_groups(cout), gamma, beta)
    else:
        out = instance_norm(out, gamma, beta)
    return relu(out)


def _head(params: ModelParams, name: str, x: Tensor, cin: int, up_times: int) -> Tensor:
    spec = ConvSpec(cin, params.cfg.output_channels, kernel=1)
    out = sigmoid(conv3d(x, params[f"{name}.w"], params[f"{name}.b"], spec))
    for _ in range(up_times):
        out = trilinear_upsample2x(out)
    return out


def forward(params: ModelParams, x: Tensor) -> tuple[Tensor, list[Tensor]]:
    """Run the network; returns the main head and the four auxiliary heads.

    Auxiliary order: dilated block, lowest decoder conv, quarter-res
    decoder stage, half-res decoder stage. All five outputs sit at full
    input resolution.
    """
    cfg = params.cfg
    w = cfg.base_width
    if x.ndim != 5:
        raise ValueError(f"input must have 5 axes, got {x.ndim}")
    if x.shape[1] != cfg.input_channels:
        raise ValueError(f"input has {x.shape[1]} channels, config wants {cfg.input_channels}")
    if any(d % 8 for d in x.shape[2:]):
        raise ValueError(f"spatial dims {x.shape[2:]} must be divisible by 8")

    skips = []
    h = x
    cin = cfg.input_channels
    for stage in range(1, STAGES + 1):
        cout = w * 2 ** (stage - 1)
        h = _layer(params, f"enc{stage}.a", h, cin, cout, 1)
        h = _layer(params, f"enc{stage}.b", h, cout, cout, 1)
        skips.append(h)
        if stage < STAGES:
            h = maxpool3d(h)
        cin = cout

    deep = w * 2 ** (STAGES - 1)
    d = _layer(params, "dil.a", skips[-1], deep, deep, 2)
    d = _layer(params, "dil.b", d, deep, deep, 2)
    h = _layer(params, "low.a", concat_channels(skips[-1], d), 2 * deep, deep, 1)
    low = h

    decoder_outs = []
    skip_src = (skips[2], skips[1], skips[0])
    chans = ((deep, 4 * w), (4 * w, 2 * w), (2 * w, w))
    names = ("up3", "up2", "up1")
    for (cin_d, cout_d), name, skip in zip(chans, names, skip_src):
        h = trilinear_upsample2x(h)
        h = concat_channels(h, skip)
        h = _layer(params, f"{name}.a", h, cin_d + cout_d, cout_d, 1)
        h = _layer(params, f"{name}.b", h, cout_d, cout_d, 1)
        decoder_outs.append(h)

    main = _head(params, "head.main", decoder_outs[-1], w, 0)
    aux = [
        _head(params, "head.aux_dil", d, deep, 3),
        _head(params, "head.aux_low", low, deep, 3),
        _head(params, "head.aux_up3", decoder_outs[0], 4 * w, 2),
        _head(params, "head.aux_up2", decoder_outs[1], 2 * w, 1),
    ]
    return main, aux


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def dice_loss(pred: Tensor, target: np.ndarray, spec: DiceLossSpec = DiceLossSpec()) -> Tensor:
    """Soft Dice loss, pooled over batch and spatial axes per channel.

    Per channel n: term = (f * sum(s*r) + eps) / (D + eps) with f = 2 (or
    1 with double_numerator off) and D = sum(s^2)+sum(r^2) for the
    squared variant, sum(s)+sum(r) for the plain one. Loss is one minus
    the channel mean.
    """
    s = pred.data
    r = np.asarray(target, dtype=s.dtype)
    if r.shape != s.shape:
        raise ValueError(f"target shape {r.shape} != prediction shape {s.shape}")
    if s.min() < 0.0 or s.max() > 1.0:
        raise ValueError("predictions must lie in [0, 1]")
    if not np.isin(r, (0.0, 1.0)).all():
        raise ValueError("target must be binary")
    n_ch = s.shape[1]
    axes = (0, 2, 3, 4)
    f = 2.0 if spec.double_numerator else 1.0
    inter = (s * r).sum(axis=axes)
    if spec.variant is DiceVariant.SQUARED_DENOM:
        denom = (s * s).sum(axis=axes) + (r * r).sum(axis=axes)
    else:
        denom = s.sum(axis=axes) + r.sum(axis=axes)
    numer = f * inter + spec.epsilon
    denom = denom + spec.epsilon
    terms = numer / denom
    loss = np.asarray(1.0 - terms.mean(), dtype=s.dtype)

    def backward(g):
        if not pred.requires_grad:
            return
        shape = (1, n_ch, 1, 1, 1)
        nu = numer.reshape(shape)
        de = denom.reshape(shape)
        if spec.variant is DiceVariant.SQUARED_DENOM:
            ddenom = 2.0 * s
        else:
            ddenom = 1.0
        dterm = (f * r * de - nu * ddenom) / (de * de)
        accumulate(pred, (-float(g) / n_ch * dterm).astype(s.dtype))

    return result(loss, (pred,), backward)


def total_loss(
    main: Tensor, aux: list[Tensor], target: np.ndarray, spec: DiceLossSpec = DiceLossSpec()
) -> Tensor:
    """Unweighted sum of the main loss and the four auxiliary losses."""
    total = dice_loss(main, target, spec)
    for head in aux:
        total = add(total, dice_loss(head, target, spec))
    return total
