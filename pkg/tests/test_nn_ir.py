import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from npu_cosearch import nn_ir
from npu_cosearch.nn_ir import (
    BlockCfg, Candidate, ConvLayerCfg, NetworkConfig, QuantSpec, apply_mutation, count_macs,
    count_params, flatten, mutate, sample_random, validate,
)


def net_of(*blocks, **kw):
    return NetworkConfig(blocks=tuple(blocks), **kw)


def fwd(F=3, K=8, S=1, **kw):
    return BlockCfg("forward", S, (ConvLayerCfg(F, K, **kw),))


def test_validate_in_domain():
    assert validate(net_of(fwd(), fwd(5, 16), BlockCfg("residual", 2, (ConvLayerCfg(),)))) == []


def test_validate_bad_kernel():
    errs = validate(net_of(fwd(F=4)))
    assert len(errs) == 1 and "kernel 4" in errs[0]


def test_validate_too_many_blocks():
    assert any("block count > 4" in e for e in validate(net_of(*[fwd()] * 5)))


def test_validate_collects_all():
    net = NetworkConfig((fwd(F=4, K=5),), QuantSpec(5, 3))
    assert len(validate(net)) == 4


def test_flatten_forward_block():
    layers = flatten(net_of(fwd(3, 8, 2), input_length=16))
    assert layers[0].output_length == 8
    assert [l.role for l in layers] == ["trunk_conv", "classifier_fc"]


def test_flatten_identity_residual_has_no_skip():
    net = net_of(BlockCfg("residual", 1, (ConvLayerCfg(3, 40),)), input_channels=40)
    layers = flatten(net)
    assert "skip_conv" not in [l.role for l in layers]
    assert layers[0].residual_partner == nn_ir.NETWORK_INPUT


@pytest.mark.parametrize("stride,k", [(2, 40), (1, 16), (4, 8)])
def test_flatten_inserts_projection(stride, k):
    net = net_of(BlockCfg("residual", stride, (ConvLayerCfg(3, 12), ConvLayerCfg(5, k))))
    layers = flatten(net)
    skip = layers[0]
    assert skip.role == "skip_conv" and skip.kernel == 1 and skip.stride == stride
    trunk = layers[2]
    assert trunk.residual_partner == 0
    assert (skip.out_channels, skip.output_length) == (trunk.out_channels, trunk.output_length)


def test_flatten_channel_chaining_and_lengths():
    rng = np.random.default_rng(3)
    for _ in range(200):
        cand = sample_random(nn_ir.DEFAULT_SPACE, rng)
        layers = flatten(cand.net)
        for l in layers:
            if l.role != "classifier_fc" and l.has_padding:
                assert l.output_length == (l.input_length - 1) // l.stride + 1
            if l.source != nn_ir.NETWORK_INPUT:
                src = layers[l.source]
                assert l.in_channels == src.out_channels
                assert l.input_length == src.result_length
        assert layers[-1].role == "classifier_fc"
        assert layers[-1].out_channels == cand.net.num_classes
        assert layers[-2].avgpool


def test_shape_error_when_unpadded_too_short():
    net = net_of(BlockCfg("forward", 1, (ConvLayerCfg(11, 8, has_padding=False),)), input_length=5)
    with pytest.raises(nn_ir.ShapeError):
        flatten(net)


def test_count_macs_examples():
    one = NetworkConfig((fwd(1, 4),), input_channels=1, input_length=1, num_classes=1)
    # trunk 1*4*1*1 plus classifier 4*1
    assert count_macs(one) == 4 + 4
    net = net_of(fwd(3, 32), input_channels=16, input_length=101, num_classes=12)
    trunk = flatten(net)[0]
    assert trunk.in_channels * trunk.out_channels * trunk.kernel * trunk.output_length == 155_136
    assert count_macs(net) == 155_136 + 32 * 12


def test_count_params():
    net = net_of(fwd(3, 8), input_channels=4, num_classes=2, quant=QuantSpec(8, 4))
    assert count_params(net) == 4 * 8 * 3 * 4 + 8 * 11 + 8 * 2 * 4 + 2 * 11


def test_sample_random_deterministic_and_valid():
    a = sample_random(nn_ir.DEFAULT_SPACE, np.random.default_rng(7))
    b = sample_random(nn_ir.DEFAULT_SPACE, np.random.default_rng(7))
    assert a == b
    assert validate(a.net) == []


def test_sample_kernel_coverage_chi_square():
    rng = np.random.default_rng(0)
    counts = dict.fromkeys(nn_ir.KERNEL_SIZES, 0)
    sizes = set()
    n = 0
    while n < 10_000:
        cand = sample_random(nn_ir.DEFAULT_SPACE, rng)
        sizes.add(cand.array_size)
        for b in cand.net.blocks:
            for l in b.layers:
                counts[l.kernel_size] += 1
                n += 1
    assert all(v > 0 for v in counts.values())
    exp = n / len(counts)
    chi2 = sum((v - exp) ** 2 / exp for v in counts.values())
    assert chi2 < 20.5  # 5 dof, p ~ 0.001
    assert sizes == set(nn_ir.ARRAY_SIZES)


def test_mutate_kernel_steps_to_adjacent():
    cand = Candidate(net_of(fwd(3, 8)), 8)
    seen = set()
    for s in range(40):
        out = apply_mutation("kernel_size", cand, np.random.default_rng(s))
        seen.add(out.net.blocks[0].layers[0].kernel_size)
    assert seen == {1, 5}


def test_mutate_array_size_steps():
    cand = Candidate(net_of(fwd()), 8)
    seen = {apply_mutation("array_size", cand, np.random.default_rng(s)).array_size for s in range(40)}
    assert seen == {4, 16}


def test_add_block_inapplicable_at_max_and_redrawn():
    cand = Candidate(net_of(*[fwd()] * 4), 8)
    moves = nn_ir._moves("block_count", cand, nn_ir.DEFAULT_SPACE)
    assert all(len(m(np.random.default_rng(0)).net.blocks) == 3 for m in moves)
    single = Candidate(net_of(fwd(1, 4)), 2)
    assert apply_mutation("stride", Candidate(net_of(fwd()), 2), np.random.default_rng(0)) is not None
    for s in range(50):
        kind, out = nn_ir.mutate_with_kind(single, np.random.default_rng(s))
        assert out != single, kind


def test_network_json_round_trip():
    cand = sample_random(nn_ir.DEFAULT_SPACE, np.random.default_rng(11))
    assert NetworkConfig.from_json(cand.net.to_json()) == cand.net
    assert Candidate.from_dict(json.loads(json.dumps(cand.to_dict()))) == cand


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1))
def test_mutation_closure(seed_a, seed_b):
    cand = sample_random(nn_ir.DEFAULT_SPACE, np.random.default_rng(seed_a))
    rng = np.random.default_rng(seed_b)
    for _ in range(5):
        cand = mutate(cand, rng)
        assert validate(cand.net) == []
        assert cand.array_size in nn_ir.ARRAY_SIZES
