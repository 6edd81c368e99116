"""Cycle-exact functional simulator of the NPU loop nest.

The accelerator computes a 1-D convolution layer as::

    for k-tile:                      # ceil(K/N)
        for c-tile:                  # ceil(C/N)
            for f in range(F):       # one N x N weight tile fetched here
                for x in range(X):   # one cycle unless the input index is out of range
                    lmem[x] += W_tile @ in[c-tile, x*S - F//2 + f]
        for x in range(X):
            out[k-tile, x] = opu(lmem[x])

Every executed MAC iteration costs one cycle, skipped (padding) iterations
cost none, and one setup cycle is added per layer.  The OPU drain of a
(k-tile, x) pair is pipelined into the last MAC cycle that touches ``x``, so
it adds no cycles; its memory accesses (OMEM write, BMEM and PMEM reads) are
counted once per (k-tile, x).

The x loop is vectorized with numpy but every iteration's skip condition is
evaluated individually, so cycle and access counts come from the loop nest
itself, never from the closed-form model in :mod:`npu_cosearch.kpi`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .nn_ir import FlatLayer
from .quantizer import raw_range

ROLES = ("IMEM", "OMEM", "PMEM", "WMEM", "BMEM", "LMEM")
PHYSICAL_MEMORIES = ("FMEM0", "FMEM1", "FMEM2", "WMEM", "BMEM", "LMEM")
FMEMS = ("FMEM0", "FMEM1", "FMEM2")
# LMEM does a read-modify-write in one cycle through separate ports
TWO_PORT_ROLES = frozenset({"LMEM"})


class SimulationError(RuntimeError):
    pass


class AccumulatorOverflow(SimulationError):
    """An LMEM partial sum left the signed ``lmem_bits`` range."""


class ShapeMismatch(SimulationError):
    pass


@dataclass(frozen=True)
class AcceleratorConfig:
    array_size: int
    feature_bits: int
    weight_bits: int
    lmem_bits: int
    memory_macros: dict = field(default_factory=dict)

    @property
    def bias_bits(self) -> int:
        return self.feature_bits + self.weight_bits - 1

    def to_dict(self) -> dict:
        return {
            "array_size": self.array_size,
            "feature_bits": self.feature_bits,
            "weight_bits": self.weight_bits,
            "lmem_bits": self.lmem_bits,
            "memory_macros": dict(sorted(self.memory_macros.items())),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "AcceleratorConfig":
        return cls(
            int(doc["array_size"]), int(doc["feature_bits"]), int(doc["weight_bits"]),
            int(doc["lmem_bits"]), dict(doc.get("memory_macros", {})),
        )


@dataclass
class Tensor:
    """Channel-major raw fixed-point feature map."""

    data: np.ndarray
    bits: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int64)
        if self.data.ndim != 2:
            raise ShapeMismatch("tensor data must be (channels, length)")
        lo, hi = raw_range(self.bits)
        if self.data.size and (self.data.min() < lo or self.data.max() > hi):
            raise ValueError(f"tensor values exceed {self.bits}-bit range")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def length(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class AccessCount:
    reads: int = 0
    writes: int = 0
    idles: int = 0


@dataclass
class MemoryTrace:
    counts: dict
    cycles: int
    glitch_active_cycles: int

    def busy(self, role: str) -> int:
        c = self.counts[role]
        if role in TWO_PORT_ROLES:
            return max(c.reads, c.writes)
        return c.reads + c.writes


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def round_shift_even(a: np.ndarray, shift: int) -> np.ndarray:
    """Arithmetic right shift with round-half-to-even."""
    if shift == 0:
        return a.copy()
    q = a >> shift
    rem = a - (q << shift)
    half = 1 << (shift - 1)
    up = (rem > half) | ((rem == half) & (q & 1 == 1))
    return q + up


def round_div_even(a: np.ndarray, d: int) -> np.ndarray:
    """Integer division rounding to nearest, ties to even."""
    q = np.floor_divide(a, d)
    rem2 = 2 * (a - q * d)
    up = (rem2 > d) | ((rem2 == d) & (q & 1 == 1))
    return q + up


def _pad_to(a: np.ndarray, shape) -> np.ndarray:
    out = np.zeros(shape, dtype=np.int64)
    out[tuple(slice(0, s) for s in a.shape)] = a
    return out


def run_layer(
    layer: FlatLayer,
    inp: Tensor,
    partial: Optional[Tensor],
    weights,
    bias,
    accel: AcceleratorConfig,
) -> tuple[Tensor, MemoryTrace]:
    """Execute one layer; return the output tensor and its memory trace.

    ``weights`` are raw ``weight_bits`` integers shaped (K, C, F), optionally
    already zero-padded to multiples of N on the first two axes; ``bias``
    holds raw ``bias_bits`` integers aligned with the accumulator.
    """
    N = accel.array_size
    C, K, F, S = layer.in_channels, layer.out_channels, layer.kernel, layer.stride
    I, X = layer.input_length, layer.output_length
    if layer.has_padding and F % 2 == 0:
        raise ShapeMismatch(f"even kernel {F} cannot be centre-padded")
    if inp.channels != C or inp.length != I:
        raise ShapeMismatch(f"input is {inp.channels}x{inp.length}, layer expects {C}x{I}")
    w = np.asarray(weights, dtype=np.int64)
    if w.ndim != 3 or w.shape[2] != F or w.shape[0] < K or w.shape[1] < C:
        raise ShapeMismatch(f"weights shaped {w.shape}, expected ({K}, {C}, {F})")
    if layer.has_bias and (bias is None or len(bias) < K):
        raise ShapeMismatch("layer has bias but none was supplied")
    if layer.residual and (partial is None or partial.data.shape != (K, X)):
        got = None if partial is None else partial.data.shape
        raise ShapeMismatch(f"residual partial shaped {got}, expected ({K}, {X})")

    kt_n, ct_n = ceil_div(K, N), ceil_div(C, N)
    w = _pad_to(w[:, :, :], (kt_n * N, ct_n * N, F))
    x_in = _pad_to(inp.data, (ct_n * N, I))
    b = _pad_to(np.asarray(bias, dtype=np.int64), (kt_n * N,)) if layer.has_bias else None
    p = _pad_to(partial.data, (kt_n * N, X)) if layer.residual else None

    offset = -(F // 2) if layer.has_padding else 0
    xs = np.arange(X)
    # the skip condition of every (f, x) iteration, shared by all tile pairs
    idx = xs[None, :] * S + offset + np.arange(F)[:, None]
    valid = (idx >= 0) & (idx < I)
    if not layer.has_padding and not valid.all():
        raise ShapeMismatch("unpadded layer would read outside its input")

    lmem_lo, lmem_hi = raw_range(accel.lmem_bits)
    shift = accel.weight_bits - 1
    f_lo, f_hi = raw_range(accel.feature_bits)
    out_len = layer.result_length
    out = np.zeros((kt_n * N, out_len), dtype=np.int64)

    mac_cycles = 0
    wmem_reads = 0
    for kt in range(kt_n):
        ks = slice(kt * N, (kt + 1) * N)
        lmem = np.zeros((N, X), dtype=np.int64)
        for ct in range(ct_n):
            cs = slice(ct * N, (ct + 1) * N)
            for f in range(F):
                sel = valid[f]
                n_exec = int(sel.sum())
                if n_exec == 0:
                    continue
                wmem_reads += 1
                mac_cycles += n_exec
                tile = w[ks, cs, f]
                lmem[:, sel] += tile @ x_in[cs][:, idx[f, sel]]
                touched = lmem[:, sel]
                if touched.min() < lmem_lo or touched.max() > lmem_hi:
                    raise AccumulatorOverflow(
                        f"LMEM partial left the {accel.lmem_bits}-bit range "
                        f"(k-tile {kt}, c-tile {ct}, f {f})"
                    )
        # OPU
        acc = lmem.copy()
        if b is not None:
            acc += b[ks][:, None]
        if p is not None:
            acc += p[ks] << shift
        if layer.relu:
            np.maximum(acc, 0, out=acc)
        if layer.avgpool:
            acc = round_div_even(acc.sum(axis=1, keepdims=True), X)
        out[ks] = np.clip(round_shift_even(acc, shift), f_lo, f_hi)

    cycles = 1 + mac_cycles
    opu_pairs = kt_n * X
    reads = {
        "IMEM": mac_cycles,
        "OMEM": 0,
        "PMEM": opu_pairs if layer.residual else 0,
        "WMEM": wmem_reads,
        "BMEM": opu_pairs if layer.has_bias else 0,
        "LMEM": mac_cycles,
    }
    writes = {r: 0 for r in ROLES}
    writes["OMEM"] = kt_n * out_len
    writes["LMEM"] = mac_cycles
    counts = {}
    for role in ROLES:
        r, wr = reads[role], writes[role]
        busy = max(r, wr) if role in TWO_PORT_ROLES else r + wr
        counts[role] = AccessCount(r, wr, cycles - busy)
    trace = MemoryTrace(counts, cycles, mac_cycles)
    return Tensor(out[:K], accel.feature_bits), trace


def run_network(schedule, inp: Tensor, params, accel: AcceleratorConfig):
    """Run every schedule entry, routing tensors through the feature memories.

    ``params`` is a list of ``(weights, bias)`` raw arrays, one per entry.
    Returns ``(logits, traces)``.
    """
    fmem: dict = {}
    for role in schedule.input_placement:
        fmem[role] = inp
    traces = []
    out = inp
    for entry, (w, b) in zip(schedule.entries, params):
        layer = entry.layer
        try:
            src = fmem[entry.input_fmem]
        except KeyError:
            raise ShapeMismatch(f"{entry.input_fmem} read before written") from None
        partial = fmem.get(entry.partial_fmem) if entry.partial_fmem else None
        out, trace = run_layer(layer, src, partial, w, b, accel)
        fmem[entry.output_fmem] = out
        if entry.mirror_fmem2:
            fmem["FMEM2"] = out
        traces.append(trace)
    return out, traces
