"""Architecture notation: parsing, shape simulation, model construction.

Grammar (whitespace-insensitive, case-sensitive tokens):

    arch := item ('-' item)*
    item := unit ('*' INT)?
    unit := 'Conv(' INT ')' | 'Pool' | '(' arch ')'

`x*n` expands to n copies of the unit or parenthesized group, in order.
Conv kernels must lie in [1, 64]; Pool is always 2x2 average pooling with
stride 2.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import AvgPool2x2, Conv2D, Flatten, FullyConnected, ReLU, he_normal
from .errors import ArchParseError, DataError
from .rng import make_rng

MAX_KERNEL = 64
CANONICAL_INPUT = 128
N_CLASSES = 2

PRESETS = {
    "Big-Filters": "Conv(11)-Pool-Conv(10)-Pool-Conv(6)-Pool-Conv(3)-Pool-Conv(3)-Pool",
    "Small-Filters-Less-Pooling": (
        "Conv(3)*5-Pool-Conv(3)*4-Conv(2)-Pool-Conv(6)-Pool-Conv(3)-Pool-Conv(3)-Pool"
    ),
    "Small-Filters-Balanced-Pooling": "Conv(3)-Pool-Conv(4)-Pool-(Conv(3)-Pool)*3-Conv(2)",
}

# Filter counts for the Big-Filters preset; the small-filter presets use
# derive_channel_plan's widening rule.
BIG_FILTERS_CHANNELS = (16, 32, 64, 64, 64)


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" | "pool"
    kernel: int | None = None  # conv only


@dataclass(frozen=True)
class ArchSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    source_text: str

    @property
    def conv_kernels(self) -> tuple[int, ...]:
        return tuple(l.kernel for l in self.layers if l.kind == "conv")

    @property
    def n_conv(self) -> int:
        return sum(1 for l in self.layers if l.kind == "conv")

    @property
    def n_pool(self) -> int:
        return sum(1 for l in self.layers if l.kind == "pool")


@dataclass(frozen=True)
class ChannelPlan:
    channels: tuple[int, ...]  # output channels per conv layer, in order
    in_channels: int = 1
    classes: int = N_CLASSES


class _Tokenizer:
    """Yields (kind, value, offset) over the source; skips whitespace."""

    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def _skip_ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self):
        saved = self.pos
        tok = self.next()
        self.pos = saved
        return tok

    def next(self):
        self._skip_ws()
        if self.pos >= len(self.text):
            return ("eof", "", self.pos)
        ch = self.text[self.pos]
        start = self.pos
        if ch in "()-*":
            self.pos += 1
            return (ch, ch, start)
        if ch.isdigit():
            while self.pos < len(self.text) and self.text[self.pos].isdigit():
                self.pos += 1
            return ("int", int(self.text[start : self.pos]), start)
        if ch.isalpha():
            while self.pos < len(self.text) and self.text[self.pos].isalpha():
                self.pos += 1
            word = self.text[start : self.pos]
            if word in ("Conv", "Pool"):
                return (word, word, start)
            raise ArchParseError(f"unknown token {word!r}", start)
        raise ArchParseError(f"unexpected character {ch!r}", start)


def parse_arch(text: str, name: str = "custom") -> ArchSpec:
    """Parse an architecture string into its expanded layer list."""
    toks = _Tokenizer(text)
    layers = _parse_seq(toks, depth=0)
    kind, _, offset = toks.next()
    if kind != "eof":
        raise ArchParseError(f"unexpected trailing {kind!r}", offset)
    return ArchSpec(name=name, layers=tuple(layers), source_text=text)


def _parse_seq(toks: _Tokenizer, depth: int) -> list[LayerSpec]:
    items = [_parse_item(toks, depth)]
    while True:
        kind, _, offset = toks.peek()
        if kind == "-":
            toks.next()
            items.append(_parse_item(toks, depth))
        elif kind in ("eof", ")"):
            break
        else:
            raise ArchParseError(f"expected '-' between items, got {kind!r}", offset)
    return [layer for item in items for layer in item]


def _parse_item(toks: _Tokenizer, depth: int) -> list[LayerSpec]:
    unit = _parse_unit(toks, depth)
    kind, _, _ = toks.peek()
    if kind == "*":
        toks.next()
        kind, value, offset = toks.next()
        if kind != "int":
            raise ArchParseError("expected repetition count after '*'", offset)
        if value == 0:
            raise ArchParseError("repetition count 0", offset)
        return unit * value
    return unit


def _parse_unit(toks: _Tokenizer, depth: int) -> list[LayerSpec]:
    kind, value, offset = toks.next()
    if kind == "Conv":
        k2, _, off2 = toks.next()
        if k2 != "(":
            raise ArchParseError("expected '(' after Conv", off2)
        k3, kernel, off3 = toks.next()
        if k3 != "int":
            raise ArchParseError("expected kernel size inside Conv(...)", off3)
        if not 1 <= kernel <= MAX_KERNEL:
            raise ArchParseError(
                f"conv kernel must be in [1, {MAX_KERNEL}], got {kernel}", off3
            )
        k4, _, off4 = toks.next()
        if k4 != ")":
            raise ArchParseError("expected ')' after kernel size", off4)
        return [LayerSpec("conv", kernel)]
    if kind == "Pool":
        return [LayerSpec("pool")]
    if kind == "(":
        if depth > 32:
            raise ArchParseError("group nesting too deep", offset)
        inner = _parse_seq(toks, depth + 1)
        k2, _, off2 = toks.next()
        if k2 != ")":
            raise ArchParseError("expected ')' to close group", off2)
        return inner
    if kind == "eof":
        raise ArchParseError("empty architecture", offset)
    raise ArchParseError(f"expected Conv, Pool or '(', got {kind!r}", offset)


def render(arch: ArchSpec) -> str:
    """Canonical expanded text; re-parses to the identical layer list."""
    parts = []
    for layer in arch.layers:
        parts.append(f"Conv({layer.kernel})" if layer.kind == "conv" else "Pool")
    return "-".join(parts)


def resolve_arch(text_or_name: str) -> ArchSpec:
    """Accept a preset name or raw DSL text."""
    if text_or_name in PRESETS:
        return parse_arch(PRESETS[text_or_name], name=text_or_name)
    return parse_arch(text_or_name)


def derive_channel_plan(
    arch: ArchSpec, in_channels: int = 1, base: int = 16, cap: int = 128
) -> ChannelPlan:
    """Widening rule: `base` before the first Pool, doubling after each
    Pool, capped."""
    width = base
    channels = []
    for layer in arch.layers:
        if layer.kind == "conv":
            channels.append(width)
        else:
            width = min(width * 2, cap)
    return ChannelPlan(tuple(channels), in_channels=in_channels)


def default_channel_plan(arch: ArchSpec, in_channels: int = 1) -> ChannelPlan:
    if arch.name == "Big-Filters":
        return ChannelPlan(BIG_FILTERS_CHANNELS, in_channels=in_channels)
    return derive_channel_plan(arch, in_channels=in_channels)


def output_shape(
    arch: ArchSpec, input_shape: tuple[int, int, int], plan: ChannelPlan | None = None
) -> tuple[int, int, int]:
    """Simulate (C,H,W) through the stack; returns (H', W', flat size).

    Same-padding convs preserve H,W; each Pool halves them and requires
    even dims.
    """
    c, h, w = input_shape
    if plan is None:
        plan = default_channel_plan(arch, in_channels=c)
    _check_plan(arch, plan, c)
    width = c
    conv_idx = 0
    for i, layer in enumerate(arch.layers):
        if layer.kind == "conv":
            width = plan.channels[conv_idx]
            conv_idx += 1
        else:
            if h % 2 or w % 2:
                raise DataError(
                    f"pool (layer {i}) sees odd spatial dims {h}x{w}"
                )
            h //= 2
            w //= 2
            if h < 1 or w < 1:
                raise DataError(f"spatial dims reach zero at layer {i}")
    return h, w, width * h * w


def _check_plan(arch: ArchSpec, plan: ChannelPlan, in_channels: int) -> None:
    if len(plan.channels) != arch.n_conv:
        raise DataError(
            f"channel plan has {len(plan.channels)} entries for "
            f"{arch.n_conv} conv layers"
        )
    if plan.in_channels != in_channels:
        raise DataError(
            f"channel plan expects {plan.in_channels} input channels, got {in_channels}"
        )


class Model:
    """Conv/pool stack per an ArchSpec, ReLU after each conv, then a
    flatten + fully-connected head producing one logit per class.

    Carries the normalization statistics applied to inputs at inference
    time (set by the trainer, persisted in checkpoints).
    """

    def __init__(self, arch: ArchSpec, plan: ChannelPlan, layers: list,
                 input_hw: tuple[int, int]):
        self.arch = arch
        self.plan = plan
        self.layers = layers
        self.input_hw = input_hw
        self.norm_mean = np.zeros(plan.in_channels, dtype=np.float32)
        self.norm_std = np.ones(plan.in_channels, dtype=np.float32)

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad_logits: np.ndarray) -> None:
        g = grad_logits
        for layer in reversed(self.layers):
            g = layer.backward(g)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        mean = self.norm_mean.reshape(1, -1, 1, 1)
        std = self.norm_std.reshape(1, -1, 1, 1)
        return (x - mean) / std

    def named_params(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        conv_idx = 0
        for layer in self.layers:
            if isinstance(layer, Conv2D):
                out[f"conv{conv_idx}/weights"] = layer.weights
                out[f"conv{conv_idx}/bias"] = layer.bias
                conv_idx += 1
            elif isinstance(layer, FullyConnected):
                out["head/weights"] = layer.weights
                out["head/bias"] = layer.bias
        return out

    def named_grads(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        conv_idx = 0
        for layer in self.layers:
            if isinstance(layer, Conv2D):
                out[f"conv{conv_idx}/weights"] = layer.grads["weights"]
                out[f"conv{conv_idx}/bias"] = layer.grads["bias"]
                conv_idx += 1
            elif isinstance(layer, FullyConnected):
                out["head/weights"] = layer.grads["weights"]
                out["head/bias"] = layer.grads["bias"]
        return out


def instantiate_model(
    arch: ArchSpec,
    plan: ChannelPlan | None = None,
    seed: int = 0,
    input_hw: tuple[int, int] = (CANONICAL_INPUT, CANONICAL_INPUT),
) -> Model:
    """Build a runnable model with He-normal weights from a seeded generator.

    Identical seed (and arch/plan) gives bit-identical parameters. Biases
    are zero.
    """
    if plan is None:
        plan = default_channel_plan(arch)
    _check_plan(arch, plan, plan.in_channels)
    h, w, flat = output_shape(arch, (plan.in_channels, *input_hw), plan)
    rng = make_rng(seed, "init", arch.source_text)
    layers: list = []
    width = plan.in_channels
    conv_idx = 0
    for layer in arch.layers:
        if layer.kind == "conv":
            k = layer.kernel
            out_ch = plan.channels[conv_idx]
            fan_in = width * k * k
            weights = he_normal(rng, (out_ch, width, k, k), fan_in)
            bias = np.zeros(out_ch, dtype=np.float32)
            layers.append(Conv2D(weights, bias, padding="same"))
            layers.append(ReLU())
            width = out_ch
            conv_idx += 1
        else:
            layers.append(AvgPool2x2())
    layers.append(Flatten())
    head_w = he_normal(rng, (flat, plan.classes), fan_in=flat)
    head_b = np.zeros(plan.classes, dtype=np.float32)
    layers.append(FullyConnected(head_w, head_b))
    return Model(arch, plan, layers, input_hw)
