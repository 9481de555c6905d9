import numpy as np

from prunelab import costmodel
from prunelab.costmodel import ChannelId
from prunelab.net import GatedModel, LayerSpec, build_model


def _dense_432():
    """4 -> 3 -> 2 net with the middle layer gated."""
    layers = [
        LayerSpec("dense", in_dim=4, out_dim=3, gate=True),
        LayerSpec("relu"),
        LayerSpec("dense", in_dim=3, out_dim=2),
    ]
    weights = {"w0": np.ones((4, 3)), "b0": np.zeros(3),
               "w2": np.ones((3, 2)), "b2": np.zeros(2)}
    return GatedModel("dense-432", layers, weights, {0: np.ones(3)}, (4,))


def _conv_chain(h):
    layers = [
        LayerSpec("conv", in_dim=2, out_dim=3, ksize=3, pad=1, gate=True),
        LayerSpec("relu"),
        LayerSpec("conv", in_dim=3, out_dim=4, ksize=3, pad=1),
    ]
    weights = {"w0": np.ones((3, 2, 3, 3)), "b0": np.zeros(3),
               "w2": np.ones((4, 3, 3, 3)), "b2": np.zeros(4)}
    return GatedModel("conv-chain", layers, weights, {0: np.ones(3)}, (2, h, h))


def test_mlp_tiny_singleton_groups():
    groups = costmodel.trace_couplings(build_model("mlp-tiny", 0))
    assert len(groups) == 96
    assert all(len(g) == 1 for g in groups)


def test_res_tiny_stream_group():
    m = build_model("res-tiny", 0)
    groups = costmodel.trace_couplings(m)
    sizes = sorted(len(g) for g in groups)
    # one whole-stream group: 2 block outputs + the shortcut source, 3x8
    assert sizes[-1] == 24
    assert sizes[:-1] == [1] * 16
    big = max(groups, key=len)
    assert {c.layer for c in big.members} == {2, 6, 11}


def test_no_gated_layers_empty():
    layers = [LayerSpec("dense", in_dim=2, out_dim=2)]
    m = GatedModel("plain", layers, {"w0": np.ones((2, 2)), "b0": np.zeros(2)},
                   {}, (2,))
    assert costmodel.trace_couplings(m) == []


def test_groups_partition_gated_channels():
    for arch in ("mlp-tiny", "vgg-tiny", "res-tiny"):
        m = build_model(arch, 1)
        groups = costmodel.trace_couplings(m)
        seen = [c for g in groups for c in g.members]
        assert len(seen) == len(set(seen))
        assert set(seen) == set(costmodel.gated_channels(m, active_only=False))


def test_channel_cost_hand_count_dense():
    costs = costmodel.channel_costs(_dense_432())
    c = costs[ChannelId(0, 1)]
    assert c.delta_flops == 4 + 2      # producing row + consumer column
    assert c.delta_mem == (4 + 1) + 2 + 1  # weights+bias, consumer slice, activation


def test_channel_cost_conv_spatial_scaling():
    small = costmodel.channel_costs(_conv_chain(8))[ChannelId(0, 0)]
    big = costmodel.channel_costs(_conv_chain(16))[ChannelId(0, 0)]
    assert big.delta_flops == 4 * small.delta_flops


def test_costs_positive_everywhere():
    for arch in ("mlp-tiny", "vgg-tiny", "res-tiny"):
        m = build_model(arch, 2)
        for c in costmodel.channel_costs(m).values():
            assert c.delta_flops > 0 and c.delta_mem > 0


def test_cost_sum_within_twice_model_flops():
    for arch in ("mlp-tiny", "vgg-tiny", "res-tiny"):
        m = build_model(arch, 2)
        total = sum(c.delta_flops for c in costmodel.channel_costs(m).values())
        assert total <= 2 * costmodel.model_flops(m, True) + 1e-9


def test_model_flops_hand_count():
    m = build_model("mlp-tiny", 0)
    assert costmodel.model_flops(m, only_active=False) == 2 * 64 + 64 * 32 + 32 * 2
    assert costmodel.model_flops(m, True) == costmodel.model_flops(m, False)


def test_model_flops_layer_gated_off():
    m = _dense_432()
    m.gates[0][:] = 0.0
    # the gated layer and the consumer reading it both drop to zero
    assert costmodel.model_flops(m, True) == 0
    assert costmodel.model_flops(m, False) == 4 * 3 + 3 * 2


def test_flops_additivity_on_singletons():
    m = build_model("mlp-tiny", 3)
    base = costmodel.model_flops(m, True)
    cid = ChannelId(2, 5)
    delta = costmodel.channel_costs(m)[cid].delta_flops
    m.gates[2][5] = 0.0
    assert base - costmodel.model_flops(m, True) == delta


def test_params_hand_count():
    m = build_model("mlp-tiny", 0)
    expected = (2 * 64 + 64) + (64 * 32 + 32) + (32 * 2 + 2)
    assert costmodel.model_params(m, False) == expected


def test_residual_consumer_costs_split_once():
    m = build_model("res-tiny", 0)
    costs = costmodel.channel_costs(m)
    total = sum(c.delta_flops for c in costs.values())
    # producer side alone: every gated conv filter, counted once
    assert total <= 2 * costmodel.model_flops(m, True) + 1e-9
    # stream members at the same index share the same consumer attribution
    a = costs[ChannelId(2, 0)].delta_flops
    b = costs[ChannelId(6, 0)].delta_flops
    assert a > 0 and b > 0
