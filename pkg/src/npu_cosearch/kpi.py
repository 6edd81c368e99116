"""Analytical latency, memory-access, power and area models.

The latency and access-count formulas are closed forms over the layer
shape; they must agree exactly with :mod:`npu_cosearch.npu_sim`.  See
MODEL_NOTES.md for how the padding-skip series were corrected against the
loop nest.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .nn_ir import FlatLayer
from .npu_sim import PHYSICAL_MEMORIES, ROLES, TWO_PORT_ROLES, AccessCount, AcceleratorConfig, ceil_div
from .techdb import TechDatabase, UnknownMacro

# 250 kHz clock and 100 ms input shift
DEFAULT_PERIOD = 25_000


def latency_no_skip(C: int, K: int, F: int, X: int, N: int) -> int:
    return 1 + ceil_div(C, N) * ceil_div(K, N) * F * X


def _series(first: int, step: int, limit: int) -> int:
    """Sum of ``first - step*i`` over the positive terms, at most ``limit`` terms."""
    if first <= 0:
        return 0
    terms = min(limit, (first - 1) // step + 1)
    return terms * first - step * terms * (terms - 1) // 2


def skipped_begin(F: int, S: int, X: int) -> int:
    """Iterations skipped per tile pair because the input index is negative."""
    return _series(F // 2, S, X)


def skipped_end(F: int, S: int, I: int, X: int) -> int:
    """Iterations skipped per tile pair because the input index reaches I."""
    i_max = (X - 1) * S - F // 2 + F - 1  # input index of the last iteration
    return _series(i_max + 1 - I, S, X)


def mac_cycles(layer: FlatLayer, N: int) -> int:
    F, S, X = layer.kernel, layer.stride, layer.output_length
    pairs = ceil_div(layer.in_channels, N) * ceil_div(layer.out_channels, N)
    per_pair = F * X
    if layer.has_padding:
        per_pair -= skipped_begin(F, S, X) + skipped_end(F, S, layer.input_length, X)
    return pairs * per_pair


def latency_layer(layer: FlatLayer, N: int) -> int:
    return 1 + mac_cycles(layer, N)


def latency_layer_uncorrected(layer: FlatLayer, N: int) -> int:
    """Skip series in their original closed form, kept as a negative control.

    Differs from :func:`latency_layer` in the end-side padding (an extra
    ``-F//2``) and in not capping the series at X terms.  MODEL_NOTES.md
    lists counterexamples.
    """
    C, K, F, S, X, I = (layer.in_channels, layer.out_channels, layer.kernel,
                        layer.stride, layer.output_length, layer.input_length)
    pairs = ceil_div(C, N) * ceil_div(K, N)
    if not layer.has_padding:
        return 1 + pairs * F * X
    h = F // 2
    a_b = (h - 1) // S + 1 if h > 0 else 0
    skip_b = sum(h - S * i for i in range(a_b))
    i_max = (X - 1) * S - h + F - 1
    c_we = i_max + 1 - h - I
    a_e = (c_we - 1) // S + 1 if c_we > 0 else 0
    skip_e = sum(c_we - S * i for i in range(a_e))
    return 1 + pairs * (F * X - skip_b - skip_e)


def taps_used(layer: FlatLayer) -> int:
    """Kernel taps with at least one in-range input index (those fetch a weight tile)."""
    F = layer.kernel
    if not layer.has_padding:
        return F
    S, X, I = layer.stride, layer.output_length, layer.input_length
    # a tap is dead at the start if even the last x reads a negative index,
    # and dead at the end if even x = 0 reads past the input
    dead_begin = max(0, F // 2 - (X - 1) * S)
    dead_end = max(0, F - F // 2 - I)
    return F - dead_begin - dead_end


def access_counts(layer: FlatLayer, N: int) -> dict:
    l = latency_layer(layer, N)
    mac = l - 1
    kt = ceil_div(layer.out_channels, N)
    opu = kt * layer.output_length
    reads = {
        "IMEM": mac,
        "OMEM": 0,
        "PMEM": opu if layer.residual else 0,
        "WMEM": ceil_div(layer.in_channels, N) * kt * taps_used(layer),
        "BMEM": opu if layer.has_bias else 0,
        "LMEM": mac,
    }
    writes = dict.fromkeys(ROLES, 0)
    writes["OMEM"] = kt * layer.result_length
    writes["LMEM"] = mac
    out = {}
    for role in ROLES:
        r, w = reads[role], writes[role]
        busy = max(r, w) if role in TWO_PORT_ROLES else r + w
        out[role] = AccessCount(r, w, l - busy)
    return out


def physical_counts(entry, N: int) -> dict:
    """Map one schedule entry's role counts onto the six physical memories.

    Roles sharing a physical memory within a layer are all OPU-side accesses,
    which happen in the same cycles, so the busy cycles of the memory are the
    maximum over its roles.
    """
    layer = entry.layer
    l = latency_layer(layer, N)
    roles = access_counts(layer, N)
    placement = {
        "IMEM": [entry.input_fmem],
        "OMEM": [entry.output_fmem] + (["FMEM2"] if entry.mirror_fmem2 else []),
        "PMEM": [entry.partial_fmem] if entry.partial_fmem else [],
        "WMEM": ["WMEM"],
        "BMEM": ["BMEM"],
        "LMEM": ["LMEM"],
    }
    acc = {m: [0, 0, 0] for m in PHYSICAL_MEMORIES}  # reads, writes, busy
    for role, mems in placement.items():
        c = roles[role]
        busy = l - c.idles
        for m in mems:
            acc[m][0] += c.reads
            acc[m][1] += c.writes
            acc[m][2] = max(acc[m][2], busy)
    return {m: AccessCount(r, w, l - b) for m, (r, w, b) in acc.items()}


@dataclass
class KpiReport:
    latency: int
    period: int
    power: float
    power_breakdown: dict = field(default_factory=dict)
    area: float = 0.0
    area_breakdown: dict = field(default_factory=dict)

    @property
    def meets_realtime(self) -> bool:
        return self.latency <= self.period

    def to_dict(self) -> dict:
        return {
            "latency": self.latency,
            "period": self.period,
            "meets_realtime": self.meets_realtime,
            "power_uw": self.power,
            "power_breakdown": self.power_breakdown,
            "area_um2": self.area,
            "area_breakdown": self.area_breakdown,
        }


def memory_power(reads, writes, idles, L, P, macro) -> float:
    """Average power of one memory over a period of P cycles.

    Access counts are normalized by the active latency L, so the dynamic
    part is the time-weighted per-cycle power; leakage switches between the
    running and low-power modes by the fraction of the period spent busy.
    """
    u = L / P
    dyn = (macro.p_read * reads + macro.p_write * writes + macro.p_idle * idles) / L
    return u * dyn + u * macro.p_static + max(0.0, 1.0 - u) * macro.p_lp


def power(schedule, accel: AcceleratorConfig, tech: TechDatabase, period: int = DEFAULT_PERIOD) -> dict:
    """Power breakdown in uW; keys are the physical memories plus glitch/mac/opu/control."""
    N = accel.array_size
    totals = {m: [0, 0, 0] for m in PHYSICAL_MEMORIES}
    L = 0
    active = 0
    for entry in schedule.entries:
        l = latency_layer(entry.layer, N)
        L += l
        active += l - 1
        for m, c in physical_counts(entry, N).items():
            t = totals[m]
            t[0] += c.reads
            t[1] += c.writes
            t[2] += c.idles

    macros = {}
    for m in PHYSICAL_MEMORIES:
        mid = accel.memory_macros.get(m)
        if mid is None:
            raise UnknownMacro(f"no macro assigned to {m}")
        macros[m] = tech.macro(mid)

    u = L / period
    lg = tech.logic
    out = {}
    for m in PHYSICAL_MEMORIES:
        r, w, i = totals[m]
        out[m] = memory_power(r, w, i, L, period, macros[m])
    glitches = (lg.glitch_gamma0 + lg.glitch_gamma1 * N) * active
    out["glitch"] = u * macros["LMEM"].p_glitch * glitches / L
    out["mac"] = u * (lg.mac_power_c0 + lg.mac_power_c1 * N + lg.mac_power_c2 * accel.weight_bits)
    out["opu"] = u * lg.opu_power * N
    out["control"] = lg.ctrl_power
    return out


def area(accel: AcceleratorConfig, tech: TechDatabase) -> dict:
    """Area breakdown in um^2: one entry per memory plus mac/opu/control."""
    out = {}
    for m in PHYSICAL_MEMORIES:
        mid = accel.memory_macros.get(m)
        if mid is None:
            raise UnknownMacro(f"no macro assigned to {m}")
        out[m] = tech.macro(mid).area_um2
    lg = tech.logic
    N = accel.array_size
    out["mac"] = lg.mac_unit_area * N * N * accel.weight_bits / lg.ww_ref
    out["opu"] = lg.opu_unit_area * N * accel.feature_bits / lg.fw_ref
    out["control"] = lg.ctrl_area
    return out


def network_latency(schedule, N: int) -> int:
    return sum(latency_layer(e.layer, N) for e in schedule.entries)


def kpi_report(schedule, accel: AcceleratorConfig, tech: TechDatabase, period: int = DEFAULT_PERIOD) -> KpiReport:
    pw = power(schedule, accel, tech, period)
    ar = area(accel, tech)
    return KpiReport(
        latency=network_latency(schedule, accel.array_size),
        period=period,
        power=sum(pw.values()),
        power_breakdown=pw,
        area=sum(ar.values()),
        area_breakdown=ar,
    )
