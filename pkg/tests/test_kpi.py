import json
from dataclasses import fields, replace
from pathlib import Path

import numpy as np
import pytest

import oracles
from npu_cosearch import kpi, sweep, techdb
from npu_cosearch.deploy import Schedule, ScheduleEntry, deploy_candidate
from npu_cosearch.nn_ir import DEFAULT_SPACE, FlatLayer, sample_random
from npu_cosearch.npu_sim import PHYSICAL_MEMORIES, AcceleratorConfig

GOLDEN = Path(__file__).parent / "golden"


def layer(C, K, F, S, I, padding=True, **kw):
    X = (I - 1) // S + 1 if padding else (I - F) // S + 1
    return FlatLayer("trunk_conv", C, K, F, S, I, X, has_padding=padding, **kw)


def ones_db():
    macro = techdb.Macro(**{f.name: 1 for f in fields(techdb.Macro)} | {"id": "m"})
    logic = techdb.LogicCoefficients(**{f.name: 1.0 for f in fields(techdb.LogicCoefficients)})
    return techdb.TechDatabase((macro,), logic)


def golden_schedule():
    return Schedule((ScheduleEntry(layer(2, 2, 1, 1, 4), "FMEM0", "FMEM1"),))


def test_latency_no_skip_examples():
    assert kpi.latency_no_skip(8, 8, 1, 1, 8) == 2
    assert kpi.latency_no_skip(16, 32, 3, 101, 8) == 2425
    assert kpi.latency_no_skip(1, 1, 7, 13, 16) == 1 + 7 * 13


def test_latency_layer_reductions():
    assert kpi.latency_layer(layer(16, 32, 3, 1, 101, padding=False), 8) == kpi.latency_no_skip(16, 32, 3, 99, 8)
    assert kpi.latency_layer(layer(16, 32, 1, 2, 101), 8) == kpi.latency_no_skip(16, 32, 1, 51, 8)
    assert kpi.latency_layer(layer(4, 4, 3, 1, 8), 4) == 1 + 3 * 8 - 2


def test_latency_matches_loop_walk_exhaustively():
    for F in (1, 3, 5, 7, 9, 11):
        for S in (1, 2, 4, 8, 16):
            for I in range(1, 40):
                for padding in (True, False):
                    if not padding and I < F:
                        continue
                    l = layer(5, 3, F, S, I, padding)
                    assert kpi.latency_layer(l, 2) == oracles.simulated_loop_count(
                        5, 3, F, S, I, l.output_length, 2, padding), (F, S, I, padding)


def test_uncorrected_form_deviates():
    l = layer(4, 4, 3, 1, 8)
    assert kpi.latency_layer_uncorrected(l, 4) == 24 != kpi.latency_layer(l, 4)


def test_access_counts_examples():
    c = kpi.access_counts(layer(16, 32, 3, 1, 101, has_bias=True), 8)
    l = kpi.latency_layer(layer(16, 32, 3, 1, 101), 8)
    assert c["WMEM"].reads == 24
    assert c["OMEM"].writes == c["BMEM"].reads == 404
    assert c["IMEM"].reads == c["LMEM"].reads == c["LMEM"].writes == l - 1


def test_access_counts_match_simulator():
    rng = np.random.default_rng(0)
    for p in sweep.random_sweep(150, seed=9):
        assert sweep.compare(p, rng).ok


def _ones_accel():
    return AcceleratorConfig(2, 8, 8, 20, dict.fromkeys(PHYSICAL_MEMORIES, "m"))


@pytest.mark.parametrize("name", ["power_area_ones", "power_area_synthetic"])
def test_golden_power_area(name):
    g = json.loads((GOLDEN / f"{name}.json").read_text())
    if "macros" in g:
        tech = techdb.load_default()
        accel = AcceleratorConfig(2, 8, 8, 20, g["macros"])
    else:
        tech, accel = ones_db(), _ones_accel()
    rep = kpi.kpi_report(golden_schedule(), accel, tech, g["period"])
    for k, v in g["power"].items():
        assert rep.power_breakdown[k] == pytest.approx(v, rel=1e-9, abs=1e-12), k
    for k, v in g["area"].items():
        assert rep.area_breakdown[k] == pytest.approx(v, rel=1e-9), k
    assert rep.power == pytest.approx(g["power_total"], rel=1e-9)
    assert rep.area == pytest.approx(g["area_total"], rel=1e-9)


def test_fully_busy_has_no_low_power_term():
    tech = ones_db()
    full = kpi.power(golden_schedule(), _ones_accel(), tech, period=5)
    lp = replace(tech.macros[0], p_lp=100.0)
    tech2 = replace(tech, macros=(lp,))
    assert kpi.power(golden_schedule(), _ones_accel(), tech2, period=5) == full


def test_idle_limit_is_leakage_plus_control():
    tech, accel = ones_db(), _ones_accel()
    pw = kpi.power(golden_schedule(), accel, tech, period=10**12)
    expect = len(PHYSICAL_MEMORIES) * 1.0 + tech.logic.ctrl_power
    assert sum(pw.values()) == pytest.approx(expect, rel=1e-9)


def test_unknown_macro():
    accel = AcceleratorConfig(2, 8, 8, 20, dict.fromkeys(PHYSICAL_MEMORIES, "nope"))
    with pytest.raises(techdb.UnknownMacro):
        kpi.power(golden_schedule(), accel, ones_db())
    with pytest.raises(techdb.UnknownMacro):
        kpi.area(accel, ones_db())


def test_area_mac_term_quadratic_and_logic_only():
    tech = techdb.load_default()
    a = kpi.area(AcceleratorConfig(4, 8, 8, 20, dict.fromkeys(PHYSICAL_MEMORIES, "sram_16x8")), tech)
    b = kpi.area(AcceleratorConfig(8, 8, 8, 20, dict.fromkeys(PHYSICAL_MEMORIES, "sram_16x8")), tech)
    assert b["mac"] == 4 * a["mac"]
    zero = replace(ones_db(), macros=(replace(ones_db().macros[0], area_um2=0.0),))
    z = kpi.area(_ones_accel(), zero)
    assert sum(z.values()) == z["mac"] + z["opu"] + z["control"]


def test_power_monotone_in_coefficients_and_counts():
    tech = ones_db()
    base = sum(kpi.power(golden_schedule(), _ones_accel(), tech, 10).values())
    for f in ("p_read", "p_write", "p_idle", "p_static", "p_glitch"):
        t2 = replace(tech, macros=(replace(tech.macros[0], **{f: 2.0}),))
        assert sum(kpi.power(golden_schedule(), _ones_accel(), t2, 10).values()) >= base
    for f in fields(techdb.LogicCoefficients):
        if f.name in ("ww_ref", "fw_ref", "clock_hz"):
            continue
        t2 = replace(tech, logic=replace(tech.logic, **{f.name: 2.0}))
        assert sum(kpi.power(golden_schedule(), _ones_accel(), t2, 10).values()) >= base
    # more work at a fixed period: bigger layer, more accesses
    bigger = Schedule((ScheduleEntry(layer(2, 2, 1, 1, 8), "FMEM0", "FMEM1"),))
    assert sum(kpi.power(bigger, _ones_accel(), tech, 20).values()) >= \
        sum(kpi.power(golden_schedule(), _ones_accel(), tech, 20).values())


def test_reports_are_consistent():
    tech = techdb.load_default()
    rng = np.random.default_rng(1)
    n = 0
    while n < 30:
        cand = sample_random(DEFAULT_SPACE, rng)
        try:
            sched, accel = deploy_candidate(cand, tech)
        except Exception:
            continue
        n += 1
        rep = kpi.kpi_report(sched, accel, tech)
        assert len(rep.power_breakdown) == 10 and len(rep.area_breakdown) == 9
        assert rep.power == pytest.approx(sum(rep.power_breakdown.values()), rel=1e-9)
        assert rep.area == pytest.approx(sum(rep.area_breakdown.values()), rel=1e-9)
        assert rep.meets_realtime == (rep.latency <= 25_000)
        sram = sum(rep.area_breakdown[m] for m in PHYSICAL_MEMORIES)
        assert sram / rep.area > 0.75


def test_techdb_round_trip_and_errors():
    db = techdb.load_default()
    assert techdb.parse(techdb.dumps(db)) == db == techdb.synthetic_database()
    with pytest.raises(techdb.TechDatabaseError):
        techdb.parse("clock_hz = 1\n[macros]\n")
    bad = techdb.dumps(db).replace("0.3\n", "-0.3\n", 1)
    with pytest.raises(techdb.TechDatabaseError):
        techdb.parse(bad)
