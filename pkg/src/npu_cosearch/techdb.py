"""Technology database: SRAM macros plus logic power/area coefficients.

File format (plain text, ``#`` starts a comment)::

    version = 1
    clock_hz = 250000
    ctrl_power = 0.3
    ...
    [macros]
    id words bits area_um2 p_read p_write p_idle p_static p_lp p_glitch
    sram_16x2 16 2 614.4 ...

Power coefficients are in uW (drawn while the access happens every cycle at
the reference clock), areas in um^2.  ``p_glitch`` is the power of one
glitch per cycle on the macro's data input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

FORMAT_VERSION = 1

MACRO_COLUMNS = (
    "id", "words", "bits", "area_um2", "p_read", "p_write", "p_idle", "p_static", "p_lp", "p_glitch",
)

LOGIC_KEYS = (
    "clock_hz",
    "ctrl_power",
    "mac_power_c0",
    "mac_power_c1",
    "mac_power_c2",
    "opu_power",
    "ctrl_area",
    "mac_unit_area",
    "opu_unit_area",
    "ww_ref",
    "fw_ref",
    "glitch_gamma0",
    "glitch_gamma1",
)


class TechDatabaseError(ValueError):
    pass


class UnknownMacro(KeyError):
    pass


@dataclass(frozen=True)
class Macro:
    id: str
    words: int
    bits: int
    area_um2: float
    p_read: float
    p_write: float
    p_idle: float
    p_static: float
    p_lp: float
    p_glitch: float = 0.0


@dataclass(frozen=True)
class LogicCoefficients:
    clock_hz: float = 250_000.0
    ctrl_power: float = 0.0
    mac_power_c0: float = 0.0
    mac_power_c1: float = 0.0
    mac_power_c2: float = 0.0
    opu_power: float = 0.0
    ctrl_area: float = 0.0
    mac_unit_area: float = 0.0
    opu_unit_area: float = 0.0
    ww_ref: float = 8.0
    fw_ref: float = 8.0
    glitch_gamma0: float = 0.0
    glitch_gamma1: float = 0.0


@dataclass(frozen=True)
class TechDatabase:
    macros: tuple[Macro, ...]
    logic: LogicCoefficients
    version: int = FORMAT_VERSION

    def __post_init__(self):
        for m in self.macros:
            nums = [getattr(m, f.name) for f in fields(m) if f.name != "id"]
            if any(v < 0 or not math.isfinite(v) for v in nums):
                raise TechDatabaseError(f"macro {m.id}: coefficients must be finite and >= 0")
        for f in fields(self.logic):
            v = getattr(self.logic, f.name)
            if v < 0 or not math.isfinite(v):
                raise TechDatabaseError(f"{f.name} must be finite and >= 0")
        keys = [(m.bits, m.words) for m in self.macros]
        if keys != sorted(keys):
            raise TechDatabaseError("macros must be sorted by (bits, words)")
        ids = [m.id for m in self.macros]
        if len(set(ids)) != len(ids):
            raise TechDatabaseError("duplicate macro id")

    def macro(self, macro_id: str) -> Macro:
        for m in self.macros:
            if m.id == macro_id:
                return m
        raise UnknownMacro(macro_id)


def parse(text: str) -> TechDatabase:
    kv: dict[str, str] = {}
    rows: list[list[str]] = []
    header = None
    in_macros = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line == "[macros]":
            in_macros = True
            continue
        if not in_macros:
            if "=" not in line:
                raise TechDatabaseError(f"line {lineno}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            kv[k] = v
        elif header is None:
            header = line.split()
            missing = set(MACRO_COLUMNS[:-1]) - set(header)
            if missing:
                raise TechDatabaseError(f"macro table lacks columns {sorted(missing)}")
        else:
            cells = line.split()
            if len(cells) != len(header):
                raise TechDatabaseError(f"line {lineno}: expected {len(header)} columns")
            rows.append(cells)

    if "version" not in kv:
        raise TechDatabaseError("missing version field")
    version = int(kv.pop("version"))
    if version != FORMAT_VERSION:
        raise TechDatabaseError(f"unsupported database version {version}")
    unknown = set(kv) - set(LOGIC_KEYS)
    if unknown:
        raise TechDatabaseError(f"unknown keys {sorted(unknown)}")
    logic = LogicCoefficients(**{k: float(v) for k, v in kv.items()})

    macros = []
    for cells in rows:
        d = dict(zip(header, cells))
        macros.append(
            Macro(
                id=d["id"],
                words=int(d["words"]),
                bits=int(d["bits"]),
                **{c: float(d.get(c, 0.0)) for c in MACRO_COLUMNS[3:]},
            )
        )
    return TechDatabase(tuple(macros), logic, version)


def dumps(db: TechDatabase) -> str:
    out = [f"version = {db.version}"]
    for k in LOGIC_KEYS:
        out.append(f"{k} = {getattr(db.logic, k)!r}")
    out.append("")
    out.append("[macros]")
    out.append(" ".join(MACRO_COLUMNS))
    for m in db.macros:
        out.append(" ".join(repr(getattr(m, c)) if c != "id" else m.id for c in MACRO_COLUMNS))
    return "\n".join(out) + "\n"


def load(path) -> TechDatabase:
    return parse(Path(path).read_text())


def load_default() -> TechDatabase:
    """The shipped synthetic database (not calibrated to any real process)."""
    text = resources.files("npu_cosearch").joinpath("data/tech_synthetic.txt").read_text()
    return parse(text)


def synthetic_database() -> TechDatabase:
    """Build the shipped synthetic database from simple scaling laws.

    SRAM area and leakage grow with capacity, access power with word width
    and log depth.  Magnitudes are chosen so SRAM dominates total area and a
    small keyword-spotting network lands in the single-digit uW range.
    """
    macros = []
    for bits in (2, 4, 6, 8, 16, 24, 32):
        for exp in range(4, 17):
            words = 1 << exp
            cap = words * bits
            p_read = 0.025 * bits * (1 + exp / 8)
            p_static = 0.01 + 1.5e-5 * cap
            macros.append(
                Macro(
                    id=f"sram_{words}x{bits}",
                    words=words,
                    bits=bits,
                    area_um2=round(600 + 0.45 * cap, 6),
                    p_read=round(p_read, 6),
                    p_write=round(1.2 * p_read, 6),
                    p_idle=round(0.15 * p_read, 6),
                    p_static=round(p_static, 6),
                    p_lp=round(0.3 * p_static, 6),
                    p_glitch=round(0.004 * bits, 6),
                )
            )
    logic = LogicCoefficients(
        clock_hz=250_000.0,
        ctrl_power=0.3,
        mac_power_c0=0.05,
        mac_power_c1=0.04,
        mac_power_c2=0.03,
        opu_power=0.02,
        ctrl_area=3000.0,
        mac_unit_area=40.0,
        opu_unit_area=150.0,
        ww_ref=8.0,
        fw_ref=8.0,
        glitch_gamma0=0.5,
        glitch_gamma1=0.25,
    )
    return TechDatabase(tuple(macros), logic)
