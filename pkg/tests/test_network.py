import numpy as np
import pytest

from pyramidcount.engine import GradTape
from pyramidcount.errors import ConfigError, WeightFileError
from pyramidcount.network import (PRESETS, AttentionSubnet, LayerSpec, NetworkConfig, POOL,
                                  PyramidModel, build_attention_subnet, build_backbone, conv,
                                  count_parameters, count_parameters_arith, forward_pyramid,
                                  load_weights, make_config, receptive_field, save_weights)
from pyramidcount.training import SGDMomentum

TINY = make_config("tiny", [4, 4, 8, 8, 1], [3, 3, 3, 3, 3], pool_after=(1, 2))


def test_fcn7c_layer_order():
    desc = [l.describe() for l in PRESETS["FCN-7c"].layers]
    assert desc == [
        "conv 16x1x5x5 (leaky_relu)", "conv 16x16x5x5 (leaky_relu)", "max-pool 2x2",
        "conv 32x16x5x5 (leaky_relu)", "conv 32x32x5x5 (leaky_relu)", "max-pool 2x2",
        "conv 64x32x5x5 (leaky_relu)", "conv 32x64x5x5 (leaky_relu)", "conv 1x32x5x5 (relu)",
    ]


def test_fcn5c_layer_order():
    desc = [l.describe() for l in PRESETS["FCN-5c"].layers]
    assert desc == [
        "conv 16x1x5x5 (leaky_relu)", "max-pool 2x2", "conv 32x16x5x5 (leaky_relu)",
        "max-pool 2x2", "conv 64x32x3x3 (leaky_relu)", "conv 32x64x3x3 (leaky_relu)",
        "conv 1x32x3x3 (relu)",
    ]


def test_fcn14c_pools_after_4_and_8():
    kinds = [l.kind for l in PRESETS["FCN-14c-76"].layers]
    assert [i for i, k in enumerate(kinds) if k == "pool"] == [4, 9]
    assert len(PRESETS["FCN-14c-76"].convs) == 14


@pytest.mark.parametrize("name,rf", [("FCN-7c", 76), ("FCN-7c-40", 40), ("FCN-5c", 40),
                                     ("FCN-5c-64", 64), ("FCN-5c-78", 78), ("FCN-14c-76", 76)])
def test_receptive_fields(name, rf):
    assert receptive_field(name) == rf


def test_receptive_field_single_1x1():
    # a lone 1x1 conv, checked directly (not a valid backbone)
    cfg = NetworkConfig("one", (conv(1, 1, 1, "relu"),))
    rf = 1 + sum((l.kh - 1) for l in cfg.layers)
    assert rf == 1


@pytest.mark.parametrize("name,count", [
    ("FCN-7c", 148_593), ("FCN-5c", 50_497), ("FCN-7c-40", 162_337),
    ("FCN-5c-64", 116_545), ("FCN-5c-78", 178_369),
    # prose figure for FCN-14c-76; its ablation table row repeats FCN-5c-78's count
    ("FCN-14c-76", 143_225),
])
def test_backbone_parameter_counts(name, count):
    assert count_parameters(build_backbone(name)) == count
    assert count_parameters_arith(name) == count


@pytest.mark.parametrize("name,scales,mode,count", [
    ("FCN-7c", (1.0, 0.7), "adaptive", 150_917),
    ("FCN-7c", (1.0, 0.7, 0.5), "adaptive", 150_918),
    ("FCN-7c", (1.0, 0.7, 0.5), "fixed", 148_597),
    ("FCN-7c", (1.0, 0.7), "fixed", 148_596),
    ("FCN-7c", (1.0, 0.7, 0.5), "sum", 150_914),
    ("FCN-7c", (1.0, 0.7, 0.5), "no_softmax", 150_918),
    ("FCN-5c", (1.0, 0.7), "adaptive", 52_821),
    ("FCN-5c", (1.0, 0.7, 0.5), "adaptive", 52_822),
])
def test_pyramid_parameter_counts(name, scales, mode, count):
    m = PyramidModel(name, scales, mode)
    assert count_parameters(m) == count
    assert count_parameters_arith(name, len(scales), mode) == count


def test_attention_subnet_shape_and_count():
    att = build_attention_subnet(32)
    assert count_parameters(att) == 2321
    assert att.params["conv1.w"].data.shape == (8, 32, 3, 3)
    assert att.params["conv2.w"].data.shape == (1, 8, 1, 1)


def test_attention_in_ch_mismatch():
    with pytest.raises(ConfigError):
        build_attention_subnet(16, backbone=build_backbone("FCN-7c"))
    assert build_attention_subnet(32, backbone=build_backbone("FCN-5c")).in_ch == 32


def test_attention_output_one_channel():
    from pyramidcount.engine import Var
    att = AttentionSubnet(32)
    out = att.forward(Var(np.random.default_rng(0).normal(size=(2, 32, 6, 5)).astype(np.float32)))
    assert out.shape == (2, 1, 6, 5)


def test_backbone_feeds_penultimate_features():
    from pyramidcount.engine import Var
    bb = build_backbone("FCN-7c")
    d, feat = bb.forward(Var(np.zeros((1, 1, 16, 16), np.float32)))
    assert feat.shape == (1, 32, 4, 4) and d.shape == (1, 1, 4, 4)


def test_build_deterministic():
    a, b = build_backbone("FCN-5c", seed=3), build_backbone("FCN-5c", seed=3)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    c = build_backbone("FCN-5c", seed=4)
    assert not np.array_equal(a.params["conv1.w"].data, c.params["conv1.w"].data)


def test_init_is_glorot_uniform():
    w = build_backbone("FCN-7c").params["conv2.w"].data
    bound = np.sqrt(6 / (16 * 25 + 16 * 25))
    assert np.abs(w).max() <= bound and np.abs(w).max() > 0.9 * bound
    assert not build_backbone("FCN-7c").params["conv2.b"].data.any()


@pytest.mark.parametrize("bad,match", [
    ((conv(4, 1, 3), POOL, conv(1, 3, 3, "relu"), POOL), "in_ch"),
    ((conv(4, 1, 3), POOL, conv(1, 4, 3, "relu")), "2 pool"),
    ((conv(4, 1, 3), POOL, POOL, conv(1, 4, 3, "leaky_relu")), "relu"),
    ((conv(4, 1, 4), POOL, POOL, conv(1, 4, 3, "relu")), "odd"),
    ((conv(4, 1, 3), POOL, conv(4, 4, 3), POOL, conv(1, 4, 3, "relu")), "final pool"),
])
def test_config_validation(bad, match):
    with pytest.raises(ConfigError, match=match):
        NetworkConfig("bad", bad).validate()


def test_model_construction_errors():
    with pytest.raises(ConfigError):
        PyramidModel(TINY, ())
    with pytest.raises(ConfigError):
        PyramidModel(TINY, (0.7, 1.0))
    with pytest.raises(ConfigError):
        PyramidModel(TINY, (1.0,), "feat")
    with pytest.raises(ConfigError):
        PyramidModel("FCN-99c")


def test_forward_requires_multiple_of_4():
    m = PyramidModel(TINY, (1.0, 0.7))
    with pytest.raises(ConfigError):
        m.forward(np.zeros((1, 1, 30, 32), np.float32))


def test_forward_output_shapes():
    m = PyramidModel(TINY, (1.0, 0.7, 0.5))
    out, tape = forward_pyramid(m, np.random.default_rng(0).random((2, 1, 32, 48)), True)
    assert out.fused.shape == (2, 1, 8, 12)
    assert len(out.densities) == 3 and len(out.attention) == 3
    assert all(d.shape == (2, 1, 8, 12) for d in out.densities)
    assert len(tape) > 0


def test_degenerate_single_scale_sum_equals_backbone():
    from pyramidcount.engine import Var
    m = PyramidModel(TINY, (1.0,), "sum", seed=5)
    x = np.random.default_rng(1).random((1, 1, 32, 32)).astype(np.float32)
    d, _ = m.backbone.forward(Var(x))
    np.testing.assert_array_equal(m.forward(x).fused.data, d.data)


def test_adaptive_attention_sums_to_one():
    m = PyramidModel(TINY, (1.0, 0.7), "adaptive", seed=2)
    out = m.forward(np.random.default_rng(2).random((1, 1, 40, 40)))
    total = sum(a.data for a in out.attention)
    np.testing.assert_allclose(total, 1.0, atol=1e-6)


def test_fixed_mode_has_no_attention():
    m = PyramidModel(TINY, (1.0, 0.7), "fixed")
    assert m.attention is None
    assert m.forward(np.zeros((1, 1, 16, 16))).attention == []


def test_saturated_attention_selects_one_scale():
    from pyramidcount.engine import Var
    rng = np.random.default_rng(3)
    m = PyramidModel(TINY, (1.0, 0.5), "adaptive", seed=7)
    m.fusion["w"].data[:] = [[[[0.8]], [[1.7]]]]
    m.fusion["b"].data[:] = 0.05
    dens = [Var(rng.random((1, 1, 6, 6)).astype(np.float32)) for _ in range(2)]
    logits = [Var(np.full((1, 1, 6, 6), v, np.float32)) for v in (-40.0, 40.0)]
    fused = m._fuse(dens, logits, None).fused.data
    alone = np.maximum(1.7 * dens[1].data + 0.05, 0)
    np.testing.assert_allclose(fused, alone, atol=1e-4)


def test_constant_image_gives_constant_centre():
    m = PyramidModel(TINY, (1.0, 0.5), "adaptive", seed=1)
    out = m.forward(np.full((1, 1, 128, 128), 0.6, np.float32)).fused.data[0, 0]
    # RF/2 measured in pixels of the coarsest pyramid level, then /4 output stride
    border = int(np.ceil(receptive_field(TINY) / 2 / 0.5 / 4)) + 2
    centre = out[border:-border, border:-border]
    assert np.ptp(centre) <= 1e-4


def test_weight_sharing_by_identity():
    m = PyramidModel(TINY, (1.0, 0.7), "adaptive", seed=0)
    before = {k: id(v.data) for k, v in m.backbone.params.items()}
    tape = GradTape()
    out = m.forward(np.random.default_rng(0).random((1, 1, 32, 32)).astype(np.float32), tape)
    tape.backward(out.fused)
    SGDMomentum(m.parameters(), 0.9).step(0.01)
    # one storage per weight, updated in place for every scale
    assert {k: id(v.data) for k, v in m.backbone.params.items()} == before
    assert m.parameters()["backbone.conv1.w"] is m.backbone.params["conv1.w"]


def test_weights_roundtrip(tmp_path):
    m = PyramidModel("FCN-5c", (1.0, 0.7), "adaptive", seed=11)
    p = tmp_path / "w.pyrd"
    save_weights(m, p)
    m2 = load_weights(p)
    assert count_parameters(m2) == count_parameters(m)
    assert m2.scales == m.scales and m2.fusion_mode == "adaptive"
    x = np.random.default_rng(0).random((1, 1, 32, 32)).astype(np.float32)
    np.testing.assert_array_equal(m.forward(x).fused.data, m2.forward(x).fused.data)


def test_weights_roundtrip_custom_config(tmp_path):
    m = PyramidModel(TINY, (1.0, 0.5), "fixed", seed=1)
    save_weights(m, tmp_path / "t.pyrd")
    m2 = load_weights(tmp_path / "t.pyrd")
    assert m2.config == TINY


def test_weights_truncated(tmp_path):
    m = PyramidModel("FCN-5c", (1.0,), "fixed")
    p = tmp_path / "w.pyrd"
    save_weights(m, p)
    data = p.read_bytes()
    p.write_bytes(data[:-10])
    with pytest.raises(WeightFileError, match="truncated"):
        load_weights(p)
    p.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(WeightFileError, match="magic"):
        load_weights(p)


def test_weights_config_mismatch(tmp_path):
    save_weights(PyramidModel("FCN-5c", (1.0, 0.7)), tmp_path / "w.pyrd")
    with pytest.raises(WeightFileError, match="shape mismatch"):
        load_weights(tmp_path / "w.pyrd", PyramidModel("FCN-5c-64", (1.0, 0.7)))
