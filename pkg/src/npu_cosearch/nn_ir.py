"""Network search space, candidate representation and shape inference.

A candidate network is a list of blocks (residual or forward), each holding
one to four 1-D convolutions.  ``flatten`` lowers it to the linear layer list
that the deployment flow, the simulator and the analytical models consume.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

FEATURE_BITS = (4, 6, 8)
WEIGHT_BITS = (2, 4, 6, 8)
KERNEL_SIZES = (1, 3, 5, 7, 9, 11)
OUT_CHANNELS = tuple(range(4, 65, 4))
STRIDES = (1, 2, 4, 8, 16)
ARRAY_SIZES = (2, 4, 8, 16)
BLOCK_TYPES = ("residual", "forward")
ACTIVATIONS = ("relu", "none")
MAX_BLOCKS = 4
MAX_CONVS = 4

# producer index used for the network input tensor
NETWORK_INPUT = -1

DOCUMENT_VERSION = 1


class ShapeError(ValueError):
    """A layer would produce an empty or mismatched feature map."""


@dataclass(frozen=True)
class QuantSpec:
    feature_bits: int = 8
    weight_bits: int = 8

    @property
    def bias_bits(self) -> int:
        # biases are stored aligned to the accumulator's fractional point
        return self.feature_bits + self.weight_bits - 1


@dataclass(frozen=True)
class ConvLayerCfg:
    kernel_size: int = 3
    out_channels: int = 16
    activation: str = "relu"
    has_bias: bool = True
    has_padding: bool = True


@dataclass(frozen=True)
class BlockCfg:
    block_type: str = "forward"
    stride: int = 1
    layers: tuple[ConvLayerCfg, ...] = (ConvLayerCfg(),)


@dataclass(frozen=True)
class NetworkConfig:
    blocks: tuple[BlockCfg, ...]
    quant: QuantSpec = QuantSpec()
    input_channels: int = 40
    input_length: int = 101
    num_classes: int = 12

    def to_dict(self) -> dict:
        return {
            "version": DOCUMENT_VERSION,
            "input_channels": self.input_channels,
            "input_length": self.input_length,
            "num_classes": self.num_classes,
            "quant": {
                "feature_bits": self.quant.feature_bits,
                "weight_bits": self.quant.weight_bits,
            },
            "blocks": [
                {
                    "block_type": b.block_type,
                    "stride": b.stride,
                    "layers": [
                        {
                            "kernel_size": l.kernel_size,
                            "out_channels": l.out_channels,
                            "activation": l.activation,
                            "has_bias": l.has_bias,
                            "has_padding": l.has_padding,
                        }
                        for l in b.layers
                    ],
                }
                for b in self.blocks
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "NetworkConfig":
        version = doc.get("version", DOCUMENT_VERSION)
        if version != DOCUMENT_VERSION:
            raise ValueError(f"unsupported network document version {version}")
        blocks = tuple(
            BlockCfg(
                block_type=b["block_type"],
                stride=int(b["stride"]),
                layers=tuple(
                    ConvLayerCfg(
                        kernel_size=int(l["kernel_size"]),
                        out_channels=int(l["out_channels"]),
                        activation=l.get("activation", "relu"),
                        has_bias=bool(l.get("has_bias", True)),
                        has_padding=bool(l.get("has_padding", True)),
                    )
                    for l in b["layers"]
                ),
            )
            for b in doc["blocks"]
        )
        q = doc.get("quant", {})
        return cls(
            blocks=blocks,
            quant=QuantSpec(int(q.get("feature_bits", 8)), int(q.get("weight_bits", 8))),
            input_channels=int(doc.get("input_channels", 40)),
            input_length=int(doc.get("input_length", 101)),
            num_classes=int(doc.get("num_classes", 12)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetworkConfig":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class Candidate:
    """One point of the joint space: a network plus the searched MAC array size.

    Memory sizes and word widths of the accelerator are imputed from the
    network during deployment, so they are not part of the genome.
    """

    net: NetworkConfig
    array_size: int = 8

    def to_dict(self) -> dict:
        return {"network": self.net.to_dict(), "array_size": self.array_size}

    @classmethod
    def from_dict(cls, doc: dict) -> "Candidate":
        return cls(NetworkConfig.from_dict(doc["network"]), int(doc["array_size"]))


@dataclass(frozen=True)
class FlatLayer:
    role: str  # trunk_conv | skip_conv | classifier_fc
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    input_length: int
    output_length: int
    activation: str = "none"
    has_bias: bool = True
    has_padding: bool = True
    residual_partner: Optional[int] = None
    avgpool: bool = False
    source: int = NETWORK_INPUT

    @property
    def residual(self) -> bool:
        return self.residual_partner is not None

    @property
    def relu(self) -> bool:
        return self.activation == "relu"

    @property
    def result_length(self) -> int:
        """Length of the tensor written back to feature memory."""
        return 1 if self.avgpool else self.output_length


@dataclass(frozen=True)
class SearchSpace:
    feature_bits: tuple[int, ...] = FEATURE_BITS
    weight_bits: tuple[int, ...] = WEIGHT_BITS
    kernel_sizes: tuple[int, ...] = KERNEL_SIZES
    out_channels: tuple[int, ...] = OUT_CHANNELS
    strides: tuple[int, ...] = STRIDES
    array_sizes: tuple[int, ...] = ARRAY_SIZES
    block_types: tuple[str, ...] = BLOCK_TYPES
    activations: tuple[str, ...] = ACTIVATIONS
    max_blocks: int = MAX_BLOCKS
    max_convs: int = MAX_CONVS
    input_channels: int = 40
    input_length: int = 101
    num_classes: int = 12


DEFAULT_SPACE = SearchSpace()


def output_length(input_length: int, kernel: int, stride: int, padding: bool = True) -> int:
    """Convolution output length; with padding this is floor((I-1)/S)+1."""
    if padding:
        return (input_length - 1) // stride + 1
    return (input_length - kernel) // stride + 1


def validate(cfg: NetworkConfig, space: SearchSpace = DEFAULT_SPACE) -> list[str]:
    """Return every search-space violation of ``cfg``; empty means valid."""
    errs = []
    if cfg.quant.feature_bits not in space.feature_bits:
        errs.append(f"feature_bits {cfg.quant.feature_bits} not in {set(space.feature_bits)}")
    if cfg.quant.weight_bits not in space.weight_bits:
        errs.append(f"weight_bits {cfg.quant.weight_bits} not in {set(space.weight_bits)}")
    if not cfg.blocks:
        errs.append("block count < 1")
    if len(cfg.blocks) > space.max_blocks:
        errs.append(f"block count > {space.max_blocks}")
    if cfg.input_channels < 1 or cfg.input_length < 1 or cfg.num_classes < 1:
        errs.append("task dimensions must be positive")
    for bi, block in enumerate(cfg.blocks):
        where = f"block {bi}"
        if block.block_type not in space.block_types:
            errs.append(f"{where}: block_type {block.block_type!r} not in {set(space.block_types)}")
        if block.stride not in space.strides:
            errs.append(f"{where}: stride {block.stride} not in {set(space.strides)}")
        if not block.layers:
            errs.append(f"{where}: conv count < 1")
        if len(block.layers) > space.max_convs:
            errs.append(f"{where}: conv count > {space.max_convs}")
        for li, layer in enumerate(block.layers):
            lw = f"{where} layer {li}"
            if layer.kernel_size not in space.kernel_sizes:
                errs.append(f"{lw}: kernel {layer.kernel_size} not in {set(space.kernel_sizes)}")
            if layer.out_channels not in space.out_channels:
                errs.append(f"{lw}: out_channels {layer.out_channels} not in search space")
            if layer.activation not in space.activations:
                errs.append(f"{lw}: activation {layer.activation!r} not in {set(space.activations)}")
    return errs


def flatten(cfg: NetworkConfig) -> list[FlatLayer]:
    """Shape-infer ``cfg`` into the executed layer order.

    Residual blocks whose skip path changes shape get a strided 1x1
    projection, emitted before the trunk. The last conv applies global
    average pooling and a 1x1 classifier over ``num_classes`` is appended.
    """
    layers: list[FlatLayer] = []
    ch, length, src = cfg.input_channels, cfg.input_length, NETWORK_INPUT

    for bi, block in enumerate(cfg.blocks):
        in_ch, in_len, in_src = ch, length, src

        # trunk shapes first so we know whether the skip path needs projecting
        shapes = []
        c, n = in_ch, in_len
        for li, lc in enumerate(block.layers):
            s = block.stride if li == 0 else 1
            x = output_length(n, lc.kernel_size, s, lc.has_padding)
            if x < 1:
                raise ShapeError(f"block {bi} layer {li}: output length {x} < 1")
            shapes.append((c, lc.out_channels, s, n, x))
            c, n = lc.out_channels, x
        out_ch, out_len = c, n

        partner = None
        if block.block_type == "residual":
            if block.stride == 1 and in_ch == out_ch and in_len == out_len:
                partner = in_src
            else:
                skip_len = output_length(in_len, 1, block.stride)
                if skip_len != out_len:
                    raise ShapeError(
                        f"block {bi}: skip length {skip_len} != trunk length {out_len}"
                    )
                layers.append(
                    FlatLayer(
                        role="skip_conv", in_channels=in_ch, out_channels=out_ch, kernel=1,
                        stride=block.stride, input_length=in_len, output_length=skip_len,
                        activation="none", has_bias=True, has_padding=True, source=in_src,
                    )
                )
                partner = len(layers) - 1

        prev = in_src
        for li, (lc, (c, k, s, n, x)) in enumerate(zip(block.layers, shapes)):
            last = li == len(block.layers) - 1
            layers.append(
                FlatLayer(
                    role="trunk_conv", in_channels=c, out_channels=k, kernel=lc.kernel_size,
                    stride=s, input_length=n, output_length=x, activation=lc.activation,
                    has_bias=lc.has_bias, has_padding=lc.has_padding,
                    residual_partner=partner if last else None, source=prev,
                )
            )
            prev = len(layers) - 1
        ch, length, src = out_ch, out_len, prev

    if not layers:
        raise ShapeError("network has no layers")
    layers[-1] = replace(layers[-1], avgpool=True)
    layers.append(
        FlatLayer(
            role="classifier_fc", in_channels=ch, out_channels=cfg.num_classes, kernel=1,
            stride=1, input_length=1, output_length=1, activation="none", has_bias=True,
            has_padding=True, source=src,
        )
    )
    return layers


def count_macs(cfg: NetworkConfig) -> int:
    return sum(l.in_channels * l.out_channels * l.kernel * l.output_length for l in flatten(cfg))


def count_params(cfg: NetworkConfig) -> int:
    """Parameter storage in bits (weights plus biases)."""
    q = cfg.quant
    total = 0
    for l in flatten(cfg):
        total += l.in_channels * l.out_channels * l.kernel * q.weight_bits
        if l.has_bias:
            total += l.out_channels * q.bias_bits
    return total


def _pick(rng: np.random.Generator, choices):
    return choices[int(rng.integers(len(choices)))]


def _random_layer(space: SearchSpace, rng: np.random.Generator) -> ConvLayerCfg:
    return ConvLayerCfg(
        kernel_size=_pick(rng, space.kernel_sizes),
        out_channels=_pick(rng, space.out_channels),
        activation=_pick(rng, space.activations),
    )


def _random_block(space: SearchSpace, rng: np.random.Generator) -> BlockCfg:
    block_type = _pick(rng, space.block_types)
    stride = _pick(rng, space.strides)
    n = int(rng.integers(1, space.max_convs + 1))
    return BlockCfg(block_type, stride, tuple(_random_layer(space, rng) for _ in range(n)))


def sample_random(space: SearchSpace, rng: np.random.Generator) -> Candidate:
    quant = QuantSpec(_pick(rng, space.feature_bits), _pick(rng, space.weight_bits))
    n_blocks = int(rng.integers(1, space.max_blocks + 1))
    blocks = tuple(_random_block(space, rng) for _ in range(n_blocks))
    net = NetworkConfig(
        blocks=blocks,
        quant=quant,
        input_channels=space.input_channels,
        input_length=space.input_length,
        num_classes=space.num_classes,
    )
    return Candidate(net, _pick(rng, space.array_sizes))


# ---------------------------------------------------------------------------
# mutations

MUTATIONS = (
    "block_count",
    "block_type",
    "conv_count",
    "kernel_size",
    "stride",
    "word_width",
    "array_size",
    "out_channels",
)

Move = Callable[[np.random.Generator], Candidate]


def _steps(choices, value):
    """Adjacent values of ``value`` in the ordered choice list."""
    i = choices.index(value)
    return [choices[j] for j in (i - 1, i + 1) if 0 <= j < len(choices)]


def _with_blocks(cand: Candidate, blocks) -> Candidate:
    return replace(cand, net=replace(cand.net, blocks=tuple(blocks)))


def _set_layer(cand: Candidate, bi: int, li: int, **changes) -> Candidate:
    blocks = list(cand.net.blocks)
    layers = list(blocks[bi].layers)
    layers[li] = replace(layers[li], **changes)
    blocks[bi] = replace(blocks[bi], layers=tuple(layers))
    return _with_blocks(cand, blocks)


def _moves(kind: str, cand: Candidate, space: SearchSpace) -> list[Move]:
    net = cand.net
    blocks = net.blocks
    moves: list[Move] = []

    if kind == "block_count":
        if len(blocks) < space.max_blocks:
            for pos in range(len(blocks) + 1):
                moves.append(
                    lambda rng, p=pos: _with_blocks(
                        cand, blocks[:p] + (_random_block(space, rng),) + blocks[p:]
                    )
                )
        if len(blocks) > 1:
            for pos in range(len(blocks)):
                moves.append(lambda rng, p=pos: _with_blocks(cand, blocks[:p] + blocks[p + 1:]))

    elif kind == "block_type":
        for bi, b in enumerate(blocks):
            other = [t for t in space.block_types if t != b.block_type]
            for t in other:
                new = blocks[:bi] + (replace(b, block_type=t),) + blocks[bi + 1:]
                moves.append(lambda rng, nb=new: _with_blocks(cand, nb))

    elif kind == "conv_count":
        for bi, b in enumerate(blocks):
            if len(b.layers) < space.max_convs:
                for pos in range(len(b.layers) + 1):
                    def add(rng, bi=bi, b=b, pos=pos):
                        layers = b.layers[:pos] + (_random_layer(space, rng),) + b.layers[pos:]
                        return _with_blocks(
                            cand, blocks[:bi] + (replace(b, layers=layers),) + blocks[bi + 1:]
                        )
                    moves.append(add)
            if len(b.layers) > 1:
                for pos in range(len(b.layers)):
                    layers = b.layers[:pos] + b.layers[pos + 1:]
                    new = blocks[:bi] + (replace(b, layers=layers),) + blocks[bi + 1:]
                    moves.append(lambda rng, nb=new: _with_blocks(cand, nb))

    elif kind in ("kernel_size", "out_channels"):
        attr, choices = (
            ("kernel_size", space.kernel_sizes) if kind == "kernel_size"
            else ("out_channels", space.out_channels)
        )
        for bi, b in enumerate(blocks):
            for li, layer in enumerate(b.layers):
                for v in _steps(choices, getattr(layer, attr)):
                    moves.append(
                        lambda rng, bi=bi, li=li, v=v: _set_layer(cand, bi, li, **{attr: v})
                    )

    elif kind == "stride":
        for bi, b in enumerate(blocks):
            for v in _steps(space.strides, b.stride):
                new = blocks[:bi] + (replace(b, stride=v),) + blocks[bi + 1:]
                moves.append(lambda rng, nb=new: _with_blocks(cand, nb))

    elif kind == "word_width":
        q = net.quant
        for v in _steps(space.feature_bits, q.feature_bits):
            moves.append(lambda rng, v=v: replace(cand, net=replace(net, quant=replace(q, feature_bits=v))))
        for v in _steps(space.weight_bits, q.weight_bits):
            moves.append(lambda rng, v=v: replace(cand, net=replace(net, quant=replace(q, weight_bits=v))))

    elif kind == "array_size":
        for v in _steps(space.array_sizes, cand.array_size):
            moves.append(lambda rng, v=v: replace(cand, array_size=v))

    else:
        raise ValueError(f"unknown mutation {kind!r}")
    return moves


def mutate_with_kind(
    cand: Candidate, rng: np.random.Generator, space: SearchSpace = DEFAULT_SPACE
) -> tuple[str, Candidate]:
    """Apply one uniformly drawn mutation; inapplicable kinds are redrawn."""
    while True:
        kind = MUTATIONS[int(rng.integers(len(MUTATIONS)))]
        moves = _moves(kind, cand, space)
        if moves:
            move = moves[int(rng.integers(len(moves)))]
            return kind, move(rng)


def mutate(cand: Candidate, rng: np.random.Generator, space: SearchSpace = DEFAULT_SPACE) -> Candidate:
    return mutate_with_kind(cand, rng, space)[1]


def apply_mutation(
    kind: str, cand: Candidate, rng: np.random.Generator, space: SearchSpace = DEFAULT_SPACE
) -> Optional[Candidate]:
    """Apply a specific mutation kind, or return None when it is inapplicable."""
    moves = _moves(kind, cand, space)
    if not moves:
        return None
    return moves[int(rng.integers(len(moves)))](rng)
