import json
import sys
import time

import numpy as np
import pytest

from npu_cosearch import evaluator
from npu_cosearch.evaluator import EvaluatorSpec, ProtocolError, Timeout, NonzeroExit, evaluate, surrogate_evaluate
from npu_cosearch.nn_ir import DEFAULT_SPACE, BlockCfg, ConvLayerCfg, NetworkConfig, QuantSpec, count_macs, sample_random

NET = NetworkConfig((BlockCfg("forward", 1, (ConvLayerCfg(3, 16),)),))


def stub(code):
    return EvaluatorSpec(kind="external", command=(sys.executable, "-c", code), timeout=2.0)


def test_surrogate_limits():
    big = NetworkConfig((BlockCfg("forward", 1, (ConvLayerCfg(11, 64),) * 4),) * 4)
    assert count_macs(big) > 1e7
    assert surrogate_evaluate(big) == pytest.approx(0.03, abs=1e-12)
    flat = EvaluatorSpec(k_mac=0.0, k_bits=0.0)
    assert surrogate_evaluate(NET, flat) == 0.60


def test_surrogate_formula_and_purity():
    m = count_macs(NET)
    expect = 0.03 + 0.57 * np.exp(-3.0 * m / 1e6 - 2.0 * 16 / 16)
    assert surrogate_evaluate(NET) == pytest.approx(expect, rel=1e-12)
    assert surrogate_evaluate(NET) == surrogate_evaluate(NetworkConfig.from_json(NET.to_json()))


def test_surrogate_monotone():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = sample_random(DEFAULT_SPACE, rng).net
        more = NetworkConfig(n.blocks + (BlockCfg("forward", 1, (ConvLayerCfg(3, 8),)),), n.quant) \
            if len(n.blocks) < 4 else None
        if more is not None:
            assert surrogate_evaluate(more) < surrogate_evaluate(n)
        if n.quant.weight_bits < 8:
            wider = NetworkConfig(n.blocks, QuantSpec(n.quant.feature_bits, n.quant.weight_bits + 2))
            assert surrogate_evaluate(wider) < surrogate_evaluate(n)


def test_spec_validation():
    with pytest.raises(ValueError):
        EvaluatorSpec(e_min=0.5, e_max=0.4)
    with pytest.raises(ValueError):
        EvaluatorSpec(kind="external")
    spec = EvaluatorSpec.from_dict({"kind": "external", "command": "python3 -c pass"})
    assert spec.command == ("python3", "-c", "pass")
    assert EvaluatorSpec.from_dict(spec.to_dict()) == spec


def test_external_round_trip():
    code = (
        "import json,sys; doc=json.load(sys.stdin); "
        "assert doc['version']==1 and doc['network']['blocks']; print(json.dumps({'error_rate': 0.5}))"
    )
    assert evaluate(stub(code), NET) == 0.5


def test_request_document_parses_back():
    doc = json.loads(evaluator.request_document(NET))
    assert NetworkConfig.from_dict(doc["network"]) == NET


def test_garbage_is_protocol_error():
    with pytest.raises(ProtocolError):
        evaluate(stub("print('hello')"), NET)
    with pytest.raises(ProtocolError):
        evaluator.parse_response('{"error_rate": 1.5}')
    with pytest.raises(ProtocolError):
        evaluator.parse_response('{"error_rate": 0.1, "version": 2}')


def test_nonzero_exit():
    with pytest.raises(NonzeroExit):
        evaluate(stub("import sys; sys.exit(3)"), NET)


def test_hang_times_out():
    spec = EvaluatorSpec(kind="external", command=(sys.executable, "-c", "import time; time.sleep(30)"),
                         timeout=0.5)
    t0 = time.monotonic()
    with pytest.raises(Timeout):
        evaluate(spec, NET)
    assert time.monotonic() - t0 < 5
