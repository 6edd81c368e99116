"""Deployment backend: scheduling, memory sizing, parameter packing, bundles.

Feature-memory policy: the main data path ping-pongs between FMEM0 and
FMEM1.  FMEM2 holds the skip-path tensor of the residual block currently
executing: a 1x1 projection writes it directly, and for identity skips the
layer producing the block input also mirrors its output into FMEM2.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import nn_ir
from .nn_ir import NETWORK_INPUT, Candidate, FlatLayer, NetworkConfig, QuantSpec, flatten, output_length
from .npu_sim import FMEMS, AcceleratorConfig, Tensor, ceil_div, run_network
from .quantizer import fold_batchnorm, quantize_array
from .techdb import TechDatabase

BUNDLE_VERSION = 1
CONFIG_RECORD = struct.Struct("<HHHBBBBIH")  # 16 bytes

FLAG_PADDING = 1 << 0
FLAG_BIAS = 1 << 1
FLAG_RELU = 1 << 2
FLAG_AVGPOOL = 1 << 3
FLAG_RESIDUAL = 1 << 4
FLAG_MIRROR = 1 << 5


class DeployError(RuntimeError):
    pass


class ScheduleError(DeployError):
    pass


class NoFittingMacro(DeployError):
    def __init__(self, role, words, bits):
        super().__init__(f"no macro for {role}: need {words} words x {bits} bits")
        self.role, self.words, self.bits = role, words, bits


class ShapeMismatch(DeployError):
    pass


class ChecksumMismatch(DeployError):
    pass


@dataclass(frozen=True)
class ConfigRecord:
    input_length: int
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    padding: bool
    bias: bool
    relu: bool
    avgpool: bool
    residual: bool
    mirror: bool
    input_fmem: str
    output_fmem: str
    partial_fmem: Optional[str]

    def pack(self) -> bytes:
        flags = (
            FLAG_PADDING * self.padding | FLAG_BIAS * self.bias | FLAG_RELU * self.relu
            | FLAG_AVGPOOL * self.avgpool | FLAG_RESIDUAL * self.residual | FLAG_MIRROR * self.mirror
        )
        sel = FMEMS.index(self.input_fmem) | FMEMS.index(self.output_fmem) << 2
        if self.partial_fmem:
            sel |= FMEMS.index(self.partial_fmem) << 4
        try:
            return CONFIG_RECORD.pack(
                self.input_length, self.in_channels, self.out_channels,
                self.kernel, self.stride, flags, sel, 0, 0,
            )
        except struct.error as exc:
            raise DeployError(f"config field out of range: {exc}") from None

    @classmethod
    def unpack(cls, raw: bytes) -> "ConfigRecord":
        i, c, k, f, s, flags, sel, _, _ = CONFIG_RECORD.unpack(raw)
        residual = bool(flags & FLAG_RESIDUAL)
        return cls(
            input_length=i, in_channels=c, out_channels=k, kernel=f, stride=s,
            padding=bool(flags & FLAG_PADDING), bias=bool(flags & FLAG_BIAS),
            relu=bool(flags & FLAG_RELU), avgpool=bool(flags & FLAG_AVGPOOL),
            residual=residual, mirror=bool(flags & FLAG_MIRROR),
            input_fmem=FMEMS[sel & 3], output_fmem=FMEMS[(sel >> 2) & 3],
            partial_fmem=FMEMS[(sel >> 4) & 3] if residual else None,
        )


@dataclass(frozen=True)
class ScheduleEntry:
    layer: FlatLayer
    input_fmem: str
    output_fmem: str
    partial_fmem: Optional[str] = None
    mirror_fmem2: bool = False

    @property
    def config_record(self) -> ConfigRecord:
        l = self.layer
        return ConfigRecord(
            input_length=l.input_length, in_channels=l.in_channels, out_channels=l.out_channels,
            kernel=l.kernel, stride=l.stride, padding=l.has_padding, bias=l.has_bias,
            relu=l.relu, avgpool=l.avgpool, residual=l.residual, mirror=self.mirror_fmem2,
            input_fmem=self.input_fmem, output_fmem=self.output_fmem, partial_fmem=self.partial_fmem,
        )


@dataclass(frozen=True)
class Schedule:
    entries: tuple[ScheduleEntry, ...]
    input_placement: tuple[str, ...] = ("FMEM0",)
    fmem_words: dict = field(default_factory=dict)

    @property
    def layers(self) -> list[FlatLayer]:
        return [e.layer for e in self.entries]


def check_liveness(schedule: Schedule) -> None:
    """Replay the schedule symbolically; raise ScheduleError on any stale read.

    Each feature memory holds the index of the layer whose output it
    contains; every read must find exactly the tensor the layer consumes.
    """
    held = {m: NETWORK_INPUT for m in schedule.input_placement}
    for i, e in enumerate(schedule.entries):
        l = e.layer
        if e.input_fmem == e.output_fmem:
            raise ScheduleError(f"entry {i}: input and output share {e.input_fmem}")
        if held.get(e.input_fmem, "empty") != l.source:
            raise ScheduleError(
                f"entry {i}: {e.input_fmem} holds {held.get(e.input_fmem)}, needs {l.source}"
            )
        if l.residual:
            if e.partial_fmem in (None, e.input_fmem):
                raise ScheduleError(f"entry {i}: partial must come from its own memory")
            if held.get(e.partial_fmem, "empty") != l.residual_partner:
                raise ScheduleError(
                    f"entry {i}: partial in {e.partial_fmem} was overwritten before consumption"
                )
        if e.mirror_fmem2 and e.input_fmem == "FMEM2":
            raise ScheduleError(f"entry {i}: cannot mirror into its own input memory")
        held[e.output_fmem] = i
        if e.mirror_fmem2:
            held["FMEM2"] = i


def trace_schedule(net: NetworkConfig) -> Schedule:
    errs = nn_ir.validate(net)
    if errs:
        raise ScheduleError("invalid network: " + "; ".join(errs))
    layers = flatten(net)
    identity_partners = {
        l.residual_partner for l in layers
        if l.residual and (l.residual_partner == NETWORK_INPUT or layers[l.residual_partner].role != "skip_conv")
    }

    placement = ("FMEM0", "FMEM2") if NETWORK_INPUT in identity_partners else ("FMEM0",)
    where = {NETWORK_INPUT: "FMEM0"}  # main-path location of each tensor
    entries = []
    for i, l in enumerate(layers):
        src = where[l.source]
        if l.role == "skip_conv":
            dst = "FMEM2"
        else:
            dst = "FMEM1" if src == "FMEM0" else "FMEM0"
        entries.append(
            ScheduleEntry(
                layer=l, input_fmem=src, output_fmem=dst,
                partial_fmem="FMEM2" if l.residual else None,
                mirror_fmem2=i in identity_partners,
            )
        )
        where[i] = dst

    words = dict.fromkeys(FMEMS, 0)
    for m in placement:
        words[m] = net.input_channels * net.input_length
    for e in entries:
        size = e.layer.out_channels * e.layer.result_length
        for m in [e.output_fmem] + (["FMEM2"] if e.mirror_fmem2 else []):
            words[m] = max(words[m], size)

    schedule = Schedule(tuple(entries), placement, words)
    check_liveness(schedule)
    return schedule


def lmem_width(net: NetworkConfig) -> int:
    """Twice the widest fixed-point format plus log2 of the largest input channel count."""
    c_max = max(l.in_channels for l in flatten(net))
    return 2 * max(net.quant.feature_bits, net.quant.weight_bits) + (c_max - 1).bit_length()


def memory_requirements(schedule: Schedule, quant: QuantSpec, N: int, lmem_bits: int) -> dict:
    """Words and word width needed per physical memory."""
    req = {m: (schedule.fmem_words.get(m, 0), quant.feature_bits) for m in FMEMS}
    wmem = bmem = lmem = 0
    for l in schedule.layers:
        kt, ct = ceil_div(l.out_channels, N), ceil_div(l.in_channels, N)
        wmem += kt * ct * l.kernel * N * N
        if l.has_bias:
            bmem += kt * N
        lmem = max(lmem, N * l.output_length)
    req["WMEM"] = (wmem, quant.weight_bits)
    req["BMEM"] = (bmem, quant.bias_bits)
    req["LMEM"] = (lmem, lmem_bits)
    return req


def select_macro(tech: TechDatabase, role: str, words: int, bits: int):
    # macros are sorted by (bits, words): the first fit is the next possible configuration
    for m in tech.macros:
        if m.words >= words and m.bits >= bits:
            return m
    raise NoFittingMacro(role, words, bits)


def size_memories(schedule: Schedule, net: NetworkConfig, tech: TechDatabase, N: int,
                  lmem_bits: Optional[int] = None) -> dict:
    if not schedule.entries:
        raise DeployError("empty schedule")
    lmem_bits = lmem_width(net) if lmem_bits is None else lmem_bits
    req = memory_requirements(schedule, net.quant, N, lmem_bits)
    return {role: select_macro(tech, role, w, b).id for role, (w, b) in req.items()}


def deploy_candidate(cand: Candidate, tech: TechDatabase) -> tuple[Schedule, AcceleratorConfig]:
    """Schedule a candidate and derive its accelerator configuration."""
    schedule = trace_schedule(cand.net)
    lbits = lmem_width(cand.net)
    macros = size_memories(schedule, cand.net, tech, cand.array_size, lbits)
    accel = AcceleratorConfig(
        array_size=cand.array_size,
        feature_bits=cand.net.quant.feature_bits,
        weight_bits=cand.net.quant.weight_bits,
        lmem_bits=lbits,
        memory_macros=macros,
    )
    return schedule, accel


# ---------------------------------------------------------------------------
# parameters


@dataclass
class LayerParams:
    """Real-valued parameters of one flat layer (weights shaped K x C x F)."""

    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    bn: Optional[dict] = None  # gamma, beta, mean, var, eps


@dataclass
class PackedParams:
    weights: bytes
    bias: bytes


def _nbytes(bits: int) -> int:
    return -(-bits // 8)


def _encode(values: np.ndarray, bits: int) -> bytes:
    return np.asarray(values, dtype=f"<i{_nbytes(bits)}").tobytes()


def _decode(blob: bytes, bits: int) -> np.ndarray:
    return np.frombuffer(blob, dtype=f"<i{_nbytes(bits)}").astype(np.int64)


def quantize_layer(layer: FlatLayer, p: LayerParams, quant: QuantSpec):
    """Fold batch norm and quantize one layer; returns raw (weights, bias)."""
    w = np.asarray(p.weight, dtype=np.float64)
    if w.shape != (layer.out_channels, layer.in_channels, layer.kernel):
        raise ShapeMismatch(
            f"weights shaped {w.shape}, layer needs "
            f"({layer.out_channels}, {layer.in_channels}, {layer.kernel})"
        )
    b = None if p.bias is None else np.asarray(p.bias, dtype=np.float64)
    if b is not None and b.shape != (layer.out_channels,):
        raise ShapeMismatch(f"bias shaped {b.shape}")
    if p.bn is not None:
        if not layer.has_bias:
            raise ShapeMismatch("batch-norm folding needs a layer with bias")
        w, b = fold_batchnorm(w, b, p.bn["gamma"], p.bn["beta"], p.bn["mean"], p.bn["var"],
                              p.bn.get("eps", 1e-5))
    w_raw = quantize_array(w, quant.weight_bits)
    b_raw = None
    if layer.has_bias:
        b_raw = quantize_array(np.zeros(layer.out_channels) if b is None else b, quant.bias_bits)
    return w_raw, b_raw


def tile_weights(w_raw: np.ndarray, N: int) -> np.ndarray:
    """Zero-pad to N multiples and order as (k-tile, c-tile, f, row=k, col=c)."""
    K, C, F = w_raw.shape
    kt, ct = ceil_div(K, N), ceil_div(C, N)
    padded = np.zeros((kt * N, ct * N, F), dtype=np.int64)
    padded[:K, :C] = w_raw
    return padded.reshape(kt, N, ct, N, F).transpose(0, 2, 4, 1, 3)


def pack_parameters(layers: list[FlatLayer], params: list[LayerParams], quant: QuantSpec,
                    N: int) -> PackedParams:
    if len(layers) != len(params):
        raise ShapeMismatch(f"{len(params)} parameter sets for {len(layers)} layers")
    wparts, bparts = [], []
    for layer, p in zip(layers, params):
        w_raw, b_raw = quantize_layer(layer, p, quant)
        wparts.append(_encode(tile_weights(w_raw, N).ravel(), quant.weight_bits))
        if b_raw is not None:
            kt = ceil_div(layer.out_channels, N)
            padded = np.zeros(kt * N, dtype=np.int64)
            padded[: layer.out_channels] = b_raw
            bparts.append(_encode(padded, quant.bias_bits))
    return PackedParams(b"".join(wparts), b"".join(bparts))


def unpack_parameters(packed: PackedParams, layers: list[FlatLayer], quant: QuantSpec, N: int):
    """Inverse of :func:`pack_parameters` on the quantized values.

    Returns a list of ``(weights (K, C, F), bias (K,) or None)`` raw arrays.
    """
    wall = _decode(packed.weights, quant.weight_bits)
    ball = _decode(packed.bias, quant.bias_bits)
    wpos = bpos = 0
    out = []
    for l in layers:
        kt, ct = ceil_div(l.out_channels, N), ceil_div(l.in_channels, N)
        n = kt * ct * l.kernel * N * N
        tiles = wall[wpos:wpos + n].reshape(kt, ct, l.kernel, N, N)
        wpos += n
        w = tiles.transpose(0, 3, 1, 4, 2).reshape(kt * N, ct * N, l.kernel)
        b = None
        if l.has_bias:
            b = ball[bpos:bpos + kt * N][: l.out_channels]
            bpos += kt * N
        out.append((w[: l.out_channels, : l.in_channels].copy(), b))
    if wpos != len(wall) or bpos != len(ball):
        raise ShapeMismatch("packed blobs do not match the layer list")
    return out


def random_parameters(layers: list[FlatLayer], rng: np.random.Generator, scale: float = 0.5,
                      with_bn: bool = False) -> list[LayerParams]:
    """Random real-valued parameters, handy for examples and tests."""
    out = []
    for l in layers:
        w = rng.uniform(-scale, scale, size=(l.out_channels, l.in_channels, l.kernel))
        b = rng.uniform(-scale, scale, size=l.out_channels) if l.has_bias else None
        bn = None
        if with_bn and l.has_bias:
            k = l.out_channels
            bn = {
                "gamma": rng.uniform(0.5, 1.5, k), "beta": rng.uniform(-0.1, 0.1, k),
                "mean": rng.uniform(-0.1, 0.1, k), "var": rng.uniform(0.5, 2.0, k), "eps": 1e-5,
            }
        out.append(LayerParams(w, b, bn))
    return out


def save_params(path, params: list[LayerParams]) -> None:
    arrays = {}
    for i, p in enumerate(params):
        arrays[f"{i}.weight"] = p.weight
        if p.bias is not None:
            arrays[f"{i}.bias"] = p.bias
        if p.bn is not None:
            for k, v in p.bn.items():
                arrays[f"{i}.bn.{k}"] = np.asarray(v)
    np.savez(path, **arrays)


def load_params(path) -> list[LayerParams]:
    with np.load(path) as z:
        keys = set(z.files)
        n = 1 + max(int(k.split(".")[0]) for k in keys)
        out = []
        for i in range(n):
            bn = {k.split(".")[2]: z[k] for k in keys if k.startswith(f"{i}.bn.")}
            if "eps" in bn:
                bn["eps"] = float(bn["eps"])
            out.append(LayerParams(z[f"{i}.weight"], z[f"{i}.bias"] if f"{i}.bias" in keys else None,
                                   bn or None))
    return out


# ---------------------------------------------------------------------------
# bundles

BUNDLE_FILES = ("config.bin", "weights.bin", "bias.bin", "input.ref", "output.ref")


def _tensor_doc(t: Tensor) -> str:
    doc = {"bits": t.bits, "channels": t.channels, "length": t.length, "data": t.data.tolist()}
    return json.dumps(doc, sort_keys=True) + "\n"


def _tensor_from_doc(text: str) -> Tensor:
    doc = json.loads(text)
    data = np.asarray(doc["data"], dtype=np.int64).reshape(doc["channels"], doc["length"])
    return Tensor(data, int(doc["bits"]))


@dataclass
class Bundle:
    net: NetworkConfig
    accel: AcceleratorConfig
    schedule: Schedule
    packed: PackedParams
    input_ref: Tensor
    output_ref: Tensor

    def files(self) -> dict[str, bytes]:
        data = {
            "config.bin": b"".join(e.config_record.pack() for e in self.schedule.entries),
            "weights.bin": self.packed.weights,
            "bias.bin": self.packed.bias,
            "input.ref": _tensor_doc(self.input_ref).encode(),
            "output.ref": _tensor_doc(self.output_ref).encode(),
        }
        manifest = {
            "version": BUNDLE_VERSION,
            "accelerator": self.accel.to_dict(),
            "network": self.net.to_dict(),
            "input_placement": list(self.schedule.input_placement),
            "fmem_words": dict(sorted(self.schedule.fmem_words.items())),
            "layers": [
                {"role": l.role, "source": l.source, "residual_partner": l.residual_partner}
                for l in self.schedule.layers
            ],
            "checksums": {k: hashlib.sha256(v).hexdigest() for k, v in data.items()},
        }
        data["manifest"] = (json.dumps(manifest, sort_keys=True, indent=2) + "\n").encode()
        return data

    def write(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        for name, blob in self.files().items():
            (path / name).write_bytes(blob)
        return path

    def params(self):
        return unpack_parameters(self.packed, self.schedule.layers,
                                 QuantSpec(self.accel.feature_bits, self.accel.weight_bits),
                                 self.accel.array_size)

    def simulate(self, inp: Optional[Tensor] = None):
        return run_network(self.schedule, self.input_ref if inp is None else inp,
                           self.params(), self.accel)


def decode_layers(records: list[ConfigRecord], meta: list[dict]) -> list[FlatLayer]:
    layers = []
    for rec, m in zip(records, meta):
        layers.append(
            FlatLayer(
                role=m["role"], in_channels=rec.in_channels, out_channels=rec.out_channels,
                kernel=rec.kernel, stride=rec.stride, input_length=rec.input_length,
                output_length=output_length(rec.input_length, rec.kernel, rec.stride, rec.padding),
                activation="relu" if rec.relu else "none", has_bias=rec.bias,
                has_padding=rec.padding,
                residual_partner=m["residual_partner"] if rec.residual else None,
                avgpool=rec.avgpool, source=m["source"],
            )
        )
    return layers


def load_bundle(path, verify: bool = True) -> Bundle:
    path = Path(path)
    manifest = json.loads((path / "manifest").read_text())
    if manifest.get("version") != BUNDLE_VERSION:
        raise DeployError(f"unsupported bundle version {manifest.get('version')}")
    data = {name: (path / name).read_bytes() for name in BUNDLE_FILES}
    if verify:
        for name, blob in data.items():
            if hashlib.sha256(blob).hexdigest() != manifest["checksums"].get(name):
                raise ChecksumMismatch(f"{name} does not match its manifest checksum")
    raw = data["config.bin"]
    if len(raw) % CONFIG_RECORD.size:
        raise DeployError("config.bin is not a whole number of records")
    records = [ConfigRecord.unpack(raw[i:i + CONFIG_RECORD.size])
               for i in range(0, len(raw), CONFIG_RECORD.size)]
    layers = decode_layers(records, manifest["layers"])
    entries = tuple(
        ScheduleEntry(l, r.input_fmem, r.output_fmem, r.partial_fmem, r.mirror)
        for l, r in zip(layers, records)
    )
    schedule = Schedule(entries, tuple(manifest["input_placement"]), dict(manifest["fmem_words"]))
    return Bundle(
        net=NetworkConfig.from_dict(manifest["network"]),
        accel=AcceleratorConfig.from_dict(manifest["accelerator"]),
        schedule=schedule,
        packed=PackedParams(data["weights.bin"], data["bias.bin"]),
        input_ref=_tensor_from_doc(data["input.ref"].decode()),
        output_ref=_tensor_from_doc(data["output.ref"].decode()),
    )


def build_bundle(net: NetworkConfig, params: list[LayerParams], array_size: int, tech: TechDatabase,
                 example_input, lmem_bits: Optional[int] = None) -> Bundle:
    """Full deployment: schedule, size, pack, then simulate the example input for output.ref.

    ``example_input`` is real-valued, shaped (input_channels, input_length).
    """
    schedule = trace_schedule(net)
    lbits = lmem_width(net) if lmem_bits is None else lmem_bits
    macros = size_memories(schedule, net, tech, array_size, lbits)
    accel = AcceleratorConfig(array_size, net.quant.feature_bits, net.quant.weight_bits, lbits, macros)
    packed = pack_parameters(schedule.layers, params, net.quant, array_size)
    x = np.asarray(example_input, dtype=np.float64)
    if x.shape != (net.input_channels, net.input_length):
        raise ShapeMismatch(f"example input shaped {x.shape}")
    inp = Tensor(quantize_array(x, net.quant.feature_bits), net.quant.feature_bits)
    bundle = Bundle(net, accel, schedule, packed, inp, inp)
    logits, _ = bundle.simulate()
    bundle.output_ref = logits
    return bundle


def emit_bundle(bundle: Bundle, path) -> Path:
    return bundle.write(path)
