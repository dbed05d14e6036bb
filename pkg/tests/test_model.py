import numpy as np
import pytest

from waferseg.model import (
    ModelConfig,
    ModelConfigError,
    WeightImportError,
    build_model,
    decoder_stages,
    encoder_layers,
    predict_classes,
)
from waferseg.persistence import model_checkpoint, write_checkpoint
from waferseg.tensor import (
    ShapeError,
    Tensor,
    conv2d,
    maxpool2,
    no_grad,
    numerical_gradient,
    relative_error,
    softmax_array,
)
from waferseg.training import weighted_cross_entropy

# output size column of the architecture table for a 442x440 wafer
TABLE_SIZES = {
    "conv1": (442, 440), "conv2": (221, 220), "conv3": (111, 110), "conv4": (56, 55), "conv5": (28, 28),
    "conv6": (14, 14), "trans1": (28, 28), "trans2": (56, 55), "trans3": (111, 110), "trans4": (221, 220),
    "trans5": (442, 440),
}
TABLE_FILTERS = {
    "standard": [[64, 64], [128, 128], [256] * 3, [512] * 3, [512] * 3, [4096, 4096, 64]],
    "vaughan": [[64, 64], [128, 128], [256] * 3, [512] * 3, [512] * 3, [512, 64]],
    "broomstick": [[64, 64], [128, 128], [256] * 3, [512] * 3, [512, 512, 64]],
}


def small_model(seed=0, dtype=np.float32, **kw):
    return build_model(ModelConfig(**kw), seed=seed, dtype=dtype)


def test_encoder_filters_follow_table():
    for variant, stacks in TABLE_FILTERS.items():
        layers = encoder_layers(ModelConfig(variant=variant, skip_count=4))
        got = {}
        for name, _, c_out, _ in layers:
            got.setdefault(int(name[4]), []).append(c_out)
        assert [got[s] for s in sorted(got)] == stacks


def test_vaughan_conv6_has_two_convs():
    names = [n for n, *_ in encoder_layers(ModelConfig(variant="vaughan"))]
    assert [n for n in names if n.startswith("conv6")] == ["conv6_1", "conv6_2"]


def test_broomstick_has_no_conv6_or_trans1():
    cfg = ModelConfig(variant="broomstick", skip_count=4)
    assert not [n for n, *_ in encoder_layers(cfg) if n.startswith("conv6")]
    assert [s for s, _ in decoder_stages(cfg)] == ["trans2", "trans3", "trans4", "trans5"]


def test_broomstick_rejects_five_skips():
    with pytest.raises(ModelConfigError, match="broomstick"):
        ModelConfig(variant="broomstick", skip_count=5)


@pytest.mark.parametrize("bad", [dict(variant="vgg"), dict(init_mode="xavier"), dict(skip_count=6)])
def test_invalid_config(bad):
    with pytest.raises(ModelConfigError):
        ModelConfig(**bad)


def test_same_seed_same_parameters():
    a, b = small_model(seed=3), small_model(seed=3)
    for (ka, va), (kb, vb) in zip(a.state_arrays().items(), b.state_arrays().items()):
        assert ka == kb and va.tobytes() == vb.tobytes()
    c = small_model(seed=4)
    assert c.convs["conv1_1"].weight.data.tobytes() != a.convs["conv1_1"].weight.data.tobytes()


def test_he_initialization_statistics():
    model = small_model(seed=0)
    w = model.convs["conv4_2"].weight.data.astype(np.float64)
    fan_in = w.shape[1] * 9
    assert abs(w.mean()) < 0.01 * np.sqrt(2 / fan_in) * 10
    assert abs(w.var() / (2 / fan_in) - 1) < 0.01
    assert all(np.all(bn.gamma.data == 1) and np.all(bn.beta.data == 0) for bn in model.bns.values())
    assert np.all(model.convs["trans1.conv"].bias.data == 0)


def test_skip_projection_and_head_shapes():
    model = small_model(skip_count=5)
    for stage, enc in decoder_stages(model.config):
        assert model.convs[f"{stage}.conv"].weight.shape[0] == 64
        assert model.convs[f"{stage}.skip"].weight.shape[:2] == (64, model.config.stacks[enc - 1][-1])
        assert model.convs[f"{stage}.skip"].weight.shape[2:] == (3, 3)
    assert model.convs["head.resized"].weight.shape == (3, 64, 3, 3)
    assert model.convs["head.skip"].weight.shape == (3, 64, 3, 3)


def test_three_skips_connect_the_inner_core():
    model = small_model(skip_count=3)
    skips = [n for n in model.convs if n.endswith(".skip")]
    assert skips == ["trans1.skip", "trans2.skip", "trans3.skip"]
    # trans1/2/3 take conv5/4/3 outputs, i.e. the stacks feeding conv6/5/4
    assert [e for s, e in decoder_stages(model.config)][:3] == [5, 4, 3]


@pytest.mark.parametrize("variant,skips", [("standard", 5), ("vaughan", 5), ("broomstick", 4)])
def test_table_shapes_at_full_size(variant, skips):
    model = build_model(ModelConfig(variant=variant, skip_count=skips), seed=0)
    trace = {}
    with no_grad():
        out = model.forward(Tensor(np.zeros((1, 1, 442, 440), np.float32)), "inference", trace)
    assert out.shape == (1, 3, 442, 440)
    n_stacks = len(TABLE_FILTERS[variant])
    for s in range(1, n_stacks + 1):
        assert trace[f"conv{s}"] == (TABLE_FILTERS[variant][s - 1][-1],) + TABLE_SIZES[f"conv{s}"]
    for stage, _ in decoder_stages(model.config):
        assert trace[stage] == (64,) + TABLE_SIZES[stage]
    assert ("trans1" in trace) == (variant != "broomstick")


def test_probabilities_sum_to_one(rng):
    model = small_model(skip_count=3)
    with no_grad():
        out = model.forward(Tensor(rng.standard_normal((2, 1, 40, 36)).astype(np.float32))).data
    assert out.shape == (2, 3, 40, 36)
    assert np.max(np.abs(out.sum(axis=1) - 1)) <= 1e-6


def test_variants_share_the_interface(rng):
    x = Tensor(rng.standard_normal((1, 1, 33, 35)).astype(np.float32))
    shapes = set()
    for variant, skips in (("standard", 5), ("vaughan", 5), ("broomstick", 4)):
        with no_grad():
            shapes.add(build_model(ModelConfig(variant=variant, skip_count=skips)).forward(x).shape)
    assert shapes == {(1, 3, 33, 35)}


def test_skips_are_live_paths(rng):
    x = Tensor(rng.standard_normal((1, 1, 32, 32)).astype(np.float32))
    five = small_model(seed=1, skip_count=5)
    zero = small_model(seed=1, skip_count=0)
    zero.load_state_arrays({k: v for k, v in five.state_arrays().items() if k in zero.state_arrays()})
    with no_grad():
        assert not np.allclose(five.forward(x).data, zero.forward(x).data)


def test_too_small_input_is_rejected():
    with pytest.raises(ShapeError, match="too small"):
        small_model().forward(Tensor(np.zeros((1, 1, 16, 64), np.float32)))


def test_wrong_channel_count_is_rejected():
    with pytest.raises(ShapeError, match="channel"):
        small_model().forward(Tensor(np.zeros((1, 3, 32, 32), np.float32)))


@pytest.mark.parametrize("stack", [3, 4, 5])
def test_residual_identity(stack):
    """Zeroed in-stack convs with identity BN statistics: the stack passes its projected input."""
    model = small_model(seed=0, dtype=np.float64)
    for j in (1, 2, 3):
        name = f"conv{stack}_{j}"
        model.convs[name].weight.data[...] = 0
        model.bns[name].running_mean[:] = 0
        model.bns[name].running_var[:] = 1 - model.bns[name].eps
    x = Tensor(np.random.default_rng(0).standard_normal((1, 1, 40, 40)))
    with no_grad():
        feats = model.encode(x, "inference")
        inp = maxpool2(feats[stack - 1])
        sc = model.convs.get(f"conv{stack}.shortcut")
        expected = conv2d(inp, sc).data if sc is not None else inp.data
    np.testing.assert_array_equal(feats[stack].data, expected)


def test_predict_classes_examples():
    p = np.array([0.1, 0.2, 0.7]).reshape(1, 3, 1, 1)
    assert predict_classes(p)[0, 0, 0] == 2
    tie = np.array([0.4, 0.4, 0.2]).reshape(1, 3, 1, 1)
    assert predict_classes(tie)[0, 0, 0] == 0


def test_predict_classes_matches_scan_oracle(rng):
    p = rng.dirichlet(np.ones(3), size=(2, 5, 7)).transpose(0, 3, 1, 2)
    p[0, :, 0, 0] = [0.3, 0.3, 0.4]
    p[0, :, 0, 1] = [0.2, 0.4, 0.4]
    got = predict_classes(p)
    for n in range(2):
        for i in range(5):
            for j in range(7):
                vals = list(p[n, :, i, j])
                assert got[n, i, j] == vals.index(max(vals))


def end_to_end_gradient_error(rng):
    """Worst relative error of loss gradients w.r.t. parameters at every depth, and the probe count."""
    model = build_model(ModelConfig(variant="vaughan", skip_count=5), seed=2, dtype=np.float64)
    x = Tensor(rng.standard_normal((1, 1, 48, 48)))
    labels = rng.integers(0, 3, (48, 48))
    onehot = np.stack([labels == k for k in range(3)])[None].astype(np.float64)
    weights = (1.0, 2.0, 5.0)

    def loss_value():
        with no_grad():
            return weighted_cross_entropy(model.forward(x, "inference"), onehot, weights)[0]

    model.zero_grad()
    logits = model.logits(x, "inference")
    _, grad = weighted_cross_entropy(softmax_array(logits.data), onehot, weights)
    logits.backward(grad)

    params = model.parameters()
    chosen = []
    for name in ("conv1_1.weight", "conv2_2.bn.gamma", "conv3_3.weight", "conv3.shortcut.weight",
                 "conv4_1.bn.beta", "conv5_2.weight", "conv6_1.weight", "conv6_2.bn.gamma",
                 "trans1.conv.weight", "trans2.skip.weight", "trans3.conv.bias", "trans5.skip.weight",
                 "head.resized.weight", "head.skip.bias"):
        t = params[name]
        for _ in range(2):
            chosen.append((name, tuple(int(rng.integers(0, d)) for d in t.shape)))
    worst = 0.0
    for name, idx in chosen:
        t = params[name]
        num = numerical_gradient(loss_value, t.data, idx, 1e-5)
        worst = max(worst, relative_error(t.grad[idx], num, floor=1e-8))
    return worst, len(chosen)


def test_end_to_end_gradient(rng):
    worst, probes = end_to_end_gradient_error(rng)
    assert probes >= 20
    assert worst < 1e-3, worst


def test_import_weights_from_checkpoint(tmp_path):
    donor = build_model(ModelConfig(), seed=9)
    rgb = {name: t.data for name, t in donor.parameters().items()}
    rgb["conv1_1.weight"] = np.repeat(donor.convs["conv1_1"].weight.data, 3, axis=1) / 3
    path = tmp_path / "vgg.ckpt"
    write_checkpoint(path, model_checkpoint(donor))
    model = build_model(ModelConfig(init_mode="import4"), seed=0, import_weights=path)
    for name in ("conv1_1", "conv1_2", "conv2_1", "conv2_2"):
        np.testing.assert_array_equal(model.convs[name].weight.data, donor.convs[name].weight.data)
    assert model.convs["conv3_1"].weight.data.tobytes() != donor.convs["conv3_1"].weight.data.tobytes()

    m10 = build_model(ModelConfig(init_mode="import10"), seed=0, import_weights=rgb)
    np.testing.assert_allclose(m10.convs["conv1_1"].weight.data, donor.convs["conv1_1"].weight.data, rtol=1e-6)
    np.testing.assert_array_equal(m10.convs["conv4_3"].weight.data, donor.convs["conv4_3"].weight.data)


def test_import_errors_name_the_layer(tmp_path):
    with pytest.raises(WeightImportError, match="not found"):
        build_model(ModelConfig(init_mode="import4"), import_weights=tmp_path / "missing.ckpt")
    with pytest.raises(WeightImportError, match="conv2_1"):
        build_model(ModelConfig(init_mode="import4"),
                    import_weights={"conv1_1.weight": np.zeros((64, 1, 3, 3)),
                                    "conv1_2.weight": np.zeros((64, 64, 3, 3)),
                                    "conv2_1.weight": np.zeros((128, 32, 3, 3))})
    with pytest.raises(WeightImportError, match="needs an import"):
        build_model(ModelConfig(init_mode="import10"))
