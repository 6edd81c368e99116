"""Randomized layer sweeps comparing the analytical models with the simulator."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import kpi
from .nn_ir import ARRAY_SIZES, KERNEL_SIZES, STRIDES, FlatLayer, output_length
from .npu_sim import ROLES, AcceleratorConfig, Tensor, run_layer
from .quantizer import raw_range


@dataclass(frozen=True)
class SweepPoint:
    layer: FlatLayer
    array_size: int


def random_layer(rng: np.random.Generator, residual: bool = False, avgpool: bool = False) -> FlatLayer:
    F = int(rng.choice(KERNEL_SIZES))
    S = int(rng.choice(STRIDES))
    C = int(rng.integers(4, 65))
    K = int(rng.integers(4, 65))
    padding = bool(rng.integers(2))
    I = int(rng.integers(F if not padding else 1, 129))
    X = output_length(I, F, S, padding)
    return FlatLayer(
        role="trunk_conv", in_channels=C, out_channels=K, kernel=F, stride=S, input_length=I,
        output_length=X, activation="relu" if rng.integers(2) else "none",
        has_bias=bool(rng.integers(2)), has_padding=padding,
        residual_partner=0 if residual else None, avgpool=avgpool,
    )


def random_sweep(count: int, seed: int = 0) -> list[SweepPoint]:
    rng = np.random.default_rng(seed)
    return [
        SweepPoint(random_layer(rng, residual=bool(rng.integers(2))), int(rng.choice(ARRAY_SIZES)))
        for _ in range(count)
    ]


def random_operands(layer: FlatLayer, rng: np.random.Generator, feature_bits=8, weight_bits=8):
    flo, fhi = raw_range(feature_bits)
    wlo, whi = raw_range(weight_bits)
    blo, bhi = raw_range(feature_bits + weight_bits - 1)
    inp = Tensor(rng.integers(flo, fhi + 1, (layer.in_channels, layer.input_length)), feature_bits)
    w = rng.integers(wlo, whi + 1, (layer.out_channels, layer.in_channels, layer.kernel))
    b = rng.integers(blo, bhi + 1, layer.out_channels) if layer.has_bias else None
    partial = None
    if layer.residual:
        partial = Tensor(rng.integers(flo, fhi + 1, (layer.out_channels, layer.output_length)), feature_bits)
    return inp, partial, w, b


@dataclass
class Deviation:
    point: SweepPoint
    analytical: int
    simulated: int
    access_deltas: dict  # role -> (dr, dw, di)

    @property
    def ok(self) -> bool:
        return self.analytical == self.simulated and not any(
            any(d) for d in self.access_deltas.values()
        )


def compare(
    point: SweepPoint,
    rng: np.random.Generator,
    latency_fn: Optional[Callable] = None,
    access_fn: Optional[Callable] = None,
) -> Deviation:
    latency_fn = latency_fn or kpi.latency_layer
    access_fn = access_fn or kpi.access_counts
    layer, N = point.layer, point.array_size
    # generous accumulator so the sweep exercises timing, not the sizing rule
    accel = AcceleratorConfig(N, 8, 8, 40)
    inp, partial, w, b = random_operands(layer, rng)
    _, trace = run_layer(layer, inp, partial, w, b, accel)
    model = access_fn(layer, N)
    deltas = {}
    for role in ROLES:
        a, s = model[role], trace.counts[role]
        deltas[role] = (a.reads - s.reads, a.writes - s.writes, a.idles - s.idles)
    return Deviation(point, latency_fn(layer, N), trace.cycles, deltas)


REPORT_HEADER = (
    "idx\tC\tK\tF\tS\tI\tX\tN\tpadding\tresidual\tbias\tanalytical\tsimulated\tdelta\t"
    + "\t".join(f"d_{r}" for r in ROLES)
)


def report_rows(devs: list[Deviation]) -> list[str]:
    rows = [REPORT_HEADER]
    for i, d in enumerate(devs):
        l = d.point.layer
        access = "\t".join(",".join(str(v) for v in d.access_deltas[r]) for r in ROLES)
        rows.append(
            f"{i}\t{l.in_channels}\t{l.out_channels}\t{l.kernel}\t{l.stride}\t{l.input_length}\t"
            f"{l.output_length}\t{d.point.array_size}\t{int(l.has_padding)}\t{int(l.residual)}\t"
            f"{int(l.has_bias)}\t{d.analytical}\t{d.simulated}\t{d.analytical - d.simulated}\t{access}"
        )
    return rows
