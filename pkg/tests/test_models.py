import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctcascade.errors import ContractError, FormatError, ParameterError, ShapeError
from ctcascade.layers import BatchNorm2d, Conv2d, Linear, ReLU, Tanh
from ctcascade.models import (NetworkSpec, build_network, dncnn_parameter_count, load_network, predict_denoised,
                              save_network)
from ctcascade.tensor import save_ten


def test_cnn5_parameter_count():
    net = build_network(NetworkSpec("dncnn", depth_modules=5), 0)
    assert net.parameter_count() == 186_177 == dncnn_parameter_count(5, 1)
    assert sum(isinstance(layer, Conv2d) for layer in net.layers) == 7


@pytest.mark.parametrize("depth", [5, 10, 15])
@pytest.mark.parametrize("in_ch", [1, 2])
def test_layer_sequence_and_counts(depth, in_ch):
    net = build_network(NetworkSpec("dncnn", depth_modules=depth, in_channels=in_ch), 0)
    kinds = [type(layer) for layer in net.layers]
    assert kinds == [Conv2d, ReLU] + [Conv2d, BatchNorm2d, ReLU] * depth + [Conv2d]
    assert net.layers[0].weight.shape == (64, in_ch, 3, 3)
    assert net.layers[-1].weight.shape == (1, 64, 3, 3)
    assert all(layer.bias is None for layer in net.layers[2:-1] if isinstance(layer, Conv2d))
    assert net.parameter_count() == dncnn_parameter_count(depth, in_ch)


def test_two_channel_changes_only_first_layer():
    a = build_network(NetworkSpec("dncnn", depth_modules=2, in_channels=1), 0)
    b = build_network(NetworkSpec("dncnn", depth_modules=2, in_channels=2), 0)
    shapes_a = [p.shape for p in a.parameters()]
    shapes_b = [p.shape for p in b.parameters()]
    assert shapes_b[0] == (64, 2, 3, 3)
    assert shapes_a[1:] == shapes_b[1:]


@pytest.mark.parametrize("in_ch", [1, 2])
def test_mlp_widths(in_ch):
    net = build_network(NetworkSpec("mlp", in_channels=in_ch), 0)
    assert [type(layer) for layer in net.layers] == [Linear, Tanh, Linear, Tanh, Linear]
    shapes = [layer.weight.shape for layer in net.layers if isinstance(layer, Linear)]
    assert shapes == [(511, 169 * in_ch), (511, 511), (169, 511)]
    assert not net.spec.residual
    out = net.forward(np.zeros((3, in_ch, 13, 13), np.float32))
    assert out.shape == (3, 1, 13, 13)


def test_unsupported_kind():
    with pytest.raises(ParameterError):
        NetworkSpec("rednet")
    with pytest.raises(ParameterError):
        NetworkSpec("dncnn", depth_modules=0)


def test_build_is_deterministic():
    spec = NetworkSpec("dncnn", depth_modules=2, feature_channels=16)
    a, b = build_network(spec, 42), build_network(spec, 42)
    assert all(np.array_equal(p.value, q.value) for p, q in zip(a.parameters(), b.parameters()))


def trained_bn(net, rng, shape):
    net.forward(rng.standard_normal(shape).astype(np.float32), training=True)
    return net


def test_forward_preserves_extents(rng):
    net = trained_bn(build_network(NetworkSpec("dncnn", depth_modules=2, feature_channels=8), 0), rng,
                     (2, 1, 16, 16))
    assert net.forward(np.zeros((4, 1, 40, 40), np.float32)).shape == (4, 1, 40, 40)
    assert net.forward(np.zeros((1, 1, 96, 96), np.float32)).shape == (1, 1, 96, 96)
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 2, 8, 8), np.float32))


def test_zero_final_layer_gives_zero_output(rng):
    net = trained_bn(build_network(NetworkSpec("dncnn", depth_modules=1, feature_channels=8), 0), rng,
                     (2, 1, 8, 8))
    for p in net.layers[-1].parameters():
        p.value[...] = 0
    x = rng.standard_normal((2, 1, 10, 10)).astype(np.float32) * 100
    assert not net.forward(x).any()
    primary = rng.standard_normal((10, 10)).astype(np.float32)
    assert np.array_equal(predict_denoised(net, primary, x[:1]), primary)


def test_predict_denoised_identity_and_contract(rng):
    class Fixed:
        spec = NetworkSpec("dncnn")

        def __init__(self, residual):
            self.residual = residual

        def forward(self, x, training=False):
            return self.residual[None, None]

    clean = rng.standard_normal((8, 8))
    primary = clean + rng.standard_normal((8, 8))
    assert np.array_equal(predict_denoised(Fixed(primary - clean), primary, primary[None, None]),
                          primary - (primary - clean))
    with pytest.raises(ContractError):
        predict_denoised(build_network(NetworkSpec("mlp"), 0), primary, primary[None, None])


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(-3, 3), st.integers(-3, 3))
def test_translation_covariance(seed, dy, dx):
    r = np.random.default_rng(seed)
    net = trained_bn(build_network(NetworkSpec("dncnn", depth_modules=2, feature_channels=8), seed % 97,
                                   dtype=np.float64), r, (2, 1, 12, 12))
    x = r.standard_normal((1, 1, 32, 32))
    shifted = np.roll(x, (dy, dx), axis=(2, 3))
    a = net.forward(x)
    b = np.roll(net.forward(shifted), (-dy, -dx), axis=(2, 3))
    m = 4 + 3  # four 3x3 convs give radius 4, plus the shift
    assert np.max(np.abs(a[..., m:-m, m:-m] - b[..., m:-m, m:-m])) < 1e-4


def test_checkpoint_round_trip(tmp_path, rng):
    net = trained_bn(build_network(NetworkSpec("dncnn", depth_modules=2, in_channels=2, feature_channels=8), 5),
                     rng, (2, 2, 8, 8))
    save_network(net, tmp_path / "ck")
    names = sorted(p.name for p in (tmp_path / "ck").iterdir())
    assert "manifest.json" in names and "conv1.weight.ten" in names and "bn2.gamma.ten" in names
    back = load_network(tmp_path / "ck")
    assert back.spec == net.spec and back.seed == 5
    x = rng.standard_normal((1, 2, 12, 12)).astype(np.float32)
    assert np.array_equal(back.forward(x), net.forward(x))


def test_checkpoint_corruption_detected(tmp_path, rng):
    net = build_network(NetworkSpec("dncnn", depth_modules=1, feature_channels=4), 0)
    save_network(net, tmp_path / "ck")
    save_ten(tmp_path / "ck" / "conv1.weight.ten", np.zeros((4, 1, 5, 5), np.float32))
    with pytest.raises(FormatError):
        load_network(tmp_path / "ck")
    (tmp_path / "ck" / "conv1.weight.ten").unlink()
    with pytest.raises(FormatError):
        load_network(tmp_path / "ck")
    with pytest.raises(FormatError):
        load_network(tmp_path / "missing")
