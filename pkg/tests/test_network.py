import json

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from dstanet import tensorkit as tk
from dstanet.network import (ConfigError, DSTANet, LayerSpec, NetworkConfig, default_config,
                             export_attention, param_count, parse_config)


def tiny_config(layers=(4, 6), heads=2, **kw):
    specs = [LayerSpec(c_out=c, heads=heads) for c in layers]
    return NetworkConfig(5, 6, 3, 3, specs, **kw)


def test_default_config():
    cfg = default_config()
    assert [l.c_out for l in cfg.layers] == [64, 64, 128, 128, 256, 256, 256, 256]
    assert {l.heads for l in cfg.layers} == {3}
    assert cfg.channel_chain()[0] == (3, 64)
    assert cfg.channel_chain()[-1] == (256, 256)


def test_default_registry_has_eight_global_maps():
    net = DSTANet(default_config(num_frames=8), seed=0)
    maps = [n for n in net.named_parameters() if n.endswith("global_map")]
    assert len(maps) == 8
    assert all(".spatial." in n for n in maps)


def test_pipeline_alternates():
    net = DSTANet(tiny_config((4, 4, 4)), 0)
    assert net.pipeline() == [(i, ax) for i in range(3) for ax in ("spatial", "temporal")]


def test_no_layers_rejected():
    with pytest.raises(ConfigError, match="at least one layer"):
        param_count(NetworkConfig(5, 6, 3, 3, []))


def test_broken_channel_chain():
    cfg = NetworkConfig(5, 6, 3, 3, [LayerSpec(c_out=4), LayerSpec(c_out=6, c_in=5)])
    with pytest.raises(ConfigError, match=r"layers\[1\]"):
        cfg.validate()


@pytest.mark.parametrize("layers", [(4,), (4, 6), (8, 8, 16)])
def test_param_count_matches_registry(layers):
    cfg = tiny_config(layers)
    net = DSTANet(cfg, 1)
    assert param_count(cfg) == sum(p.size for p in net.parameters())


def test_param_count_grows_with_width():
    assert param_count(tiny_config((8, 12))) > param_count(tiny_config((4, 6)))


def test_same_seed_same_init():
    a = DSTANet(tiny_config(), 7).state_dict()
    b = DSTANet(tiny_config(), 7).state_dict()
    c = DSTANet(tiny_config(), 8).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not all(np.array_equal(a[k], c[k]) for k in a)


def test_single_layer_keeps_grid():
    cfg = NetworkConfig(5, 6, 4, 3, [LayerSpec(c_out=4, heads=2)])
    net = DSTANet(cfg, 0)
    spatial, temporal = net.blocks[0]
    x = np.random.default_rng(0).normal(size=(2, 5, 6, 4))
    assert temporal(spatial(x)).shape == (2, 5, 6, 4)
    assert net.forward(x).shape == (2, 3)


def test_zero_input_gives_bias_without_pe():
    net = DSTANet(tiny_config(use_pe=False), 0)
    net.fc_b.data[:] = [0.5, -1.0, 2.0]
    logits = net.forward(np.zeros((1, 5, 6, 3))).data
    assert_array_equal(logits, [[0.5, -1.0, 2.0]])


def test_batch_permutation():
    net = DSTANet(tiny_config(), 2)
    x = np.random.default_rng(1).normal(size=(4, 5, 6, 3))
    perm = [2, 0, 3, 1]
    assert_allclose(net.forward(x[perm]).data, net.forward(x).data[perm], rtol=0, atol=1e-12)


def test_bias_shift():
    net = DSTANet(tiny_config(), 3)
    x = np.random.default_rng(2).normal(size=(3, 5, 6, 3))
    before, p_before = net.forward(x).data, net.predict_proba(x)
    net.fc_b.data += 1.75
    assert_allclose(net.forward(x).data, before + 1.75, rtol=0, atol=1e-12)
    assert_allclose(net.predict_proba(x), p_before, rtol=0, atol=1e-12)


def test_shape_mismatch():
    net = DSTANet(tiny_config(), 0)
    with pytest.raises(tk.ShapeError, match="expected input"):
        net.forward(np.zeros((1, 6, 5, 3)))


def test_export_counts_and_shapes():
    net = DSTANet(tiny_config((4, 4), heads=3), 0)
    x = np.random.default_rng(3).normal(size=(5, 6, 3))
    maps = export_attention(net, x)
    assert len(maps) == 2 * 3 * 2
    for m in maps:
        assert m.values.shape == ((5, 5) if m.axis == "spatial" else (6, 6))
    assert [m.layer_index for m in maps] == sorted(m.layer_index for m in maps)
    again = export_attention(net, x)
    for a, b in zip(maps, again):
        assert_array_equal(a.values, b.values)


def test_state_dict_roundtrip_and_mismatch():
    src = DSTANet(tiny_config(), 4)
    dst = DSTANet(tiny_config(), 5)
    dst.load_state_dict(src.state_dict())
    x = np.random.default_rng(4).normal(size=(2, 5, 6, 3))
    assert_array_equal(dst.forward(x).data, src.forward(x).data)
    state = src.state_dict()
    state.pop("classifier.bias")
    with pytest.raises(ConfigError, match="missing"):
        dst.load_state_dict(state)


def test_config_roundtrip():
    cfg = tiny_config(score_norm="softmax")
    back = NetworkConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back.to_dict() == cfg.to_dict()


@pytest.mark.parametrize("doc, message", [
    ('{"num_joints": 5}', "required field missing"),
    ('{"num_joints": 5, "num_frames": 6, "in_channels": 3, "num_classes": 3, '
     '"layers": [{"c_out": 4, "heads": 0}]}', r"layers\[0\]\.heads"),
    ('{"num_joints": 5, "num_frames": 6, "in_channels": 3, "num_classes": 3, '
     '"layers": [{"c_out": 4, "colour": 1}]}', r"layers\[0\]\.colour: unknown field"),
    ('{"num_joints": 5, "num_frames": 6, "in_channels": 3, "num_classes": 3, '
     '"layers": [{"c_out": 4, "strategy": "d"}]}', r"layers\[0\]\.strategy"),
    ('{"num_joints": 5,\n "num_frames": }', "line 2"),
])
def test_config_errors_name_the_field(doc, message):
    with pytest.raises(ConfigError, match=message):
        parse_config(doc, "net.json")


def test_train_section_passed_through():
    doc = json.dumps({**tiny_config().to_dict(), "train": {"epochs": 3}})
    cfg, train = parse_config(doc)
    assert train == {"epochs": 3}
    assert cfg.num_classes == 3
