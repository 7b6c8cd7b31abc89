import numpy as np
import pytest

from saecodec.errors import InvalidArgumentError, ModelError, PreconditionError
from saecodec.network import (
    ScalableModel, analysis, analysis_backward, analysis_forward, build_default_model, build_model,
    init_layer, model_from_bytes, model_to_bytes, synthesis, synthesis_backward, synthesis_forward)
from saecodec.numerics import conv2d_forward, gdn_forward

from gradcheck import max_rel_error, numeric_grad


def test_latent_shape_at_training_crop():
    layer = init_layer(48, 3000.0, rng=np.random.default_rng(0))
    x = np.random.default_rng(1).uniform(size=(1, 3, 256, 256))
    q = analysis(x, layer)
    assert q.shape == (1, 48, 16, 16)
    assert synthesis(q, layer).shape == (1, 3, 256, 256)


def test_zero_in_zero_out():
    layer = init_layer(8, 1.0)
    assert not analysis(np.zeros((1, 3, 32, 32)), layer).any()
    assert not synthesis(np.zeros((1, 8, 2, 2)), layer).any()


def test_analysis_matches_composed_ops():
    layer = init_layer(6, 1.0, rng=np.random.default_rng(2))
    x = np.random.default_rng(3).uniform(size=(2, 3, 32, 48))
    e = layer.encoder
    h = gdn_forward(conv2d_forward(x, e[0].conv), e[0].gdn)
    h = gdn_forward(conv2d_forward(h, e[1].conv), e[1].gdn)
    h = conv2d_forward(h, e[2].conv)
    np.testing.assert_array_equal(analysis(x, layer), h)


def test_topology_invariants():
    layer = init_layer(10, 1.0)
    assert [s.conv.kernel_size for s in layer.encoder] == [9, 5, 5]
    assert [s.conv.stride for s in layer.encoder] == [4, 2, 2]
    assert [s.conv.stride for s in layer.decoder] == [2, 2, 4]
    assert layer.encoder[-1].gdn is None and layer.decoder[-1].gdn is None
    assert layer.decoder[-1].conv.kernels.shape[1] == 3


@pytest.mark.parametrize("fm", [4, 12])
def test_round_trip_shape_and_feature_maps(fm):
    layer = init_layer(fm, 1.0)
    x = np.random.default_rng(4).uniform(size=(1, 3, 48, 64))
    q = analysis(x, layer)
    assert q.shape == (1, fm, 3, 4)
    assert synthesis(q, layer).shape == x.shape


def test_preconditions():
    layer = init_layer(4, 1.0)
    with pytest.raises(PreconditionError):
        analysis(np.zeros((1, 3, 30, 32)), layer)
    with pytest.raises(PreconditionError):
        analysis(np.zeros((1, 1, 32, 32)), layer)
    with pytest.raises(InvalidArgumentError):
        synthesis(np.zeros((1, 5, 2, 2)), layer)


def test_default_ladders():
    m = build_default_model(5, "mse")
    assert [l.lambda_rate for l in m.layers] == [3000, 1000, 300, 100, 30]
    assert [l.feature_maps for l in m.layers] == [48, 48, 96, 144, 192]
    m = build_default_model(4, "ms-ssim")
    assert [l.lambda_rate for l in m.layers] == [50, 30, 10, 0.5]
    m = build_default_model(1)
    assert m.num_layers == 1 and m.layers[0].feature_maps == 48 and m.layers[0].lambda_rate == 3000
    with pytest.raises(InvalidArgumentError):
        build_default_model(5, "ms-ssim")
    with pytest.raises(InvalidArgumentError):
        build_default_model(0)


def test_construction_deterministic():
    a = model_to_bytes(build_model([4, 6], [10.0, 5.0], seed=3))
    b = model_to_bytes(build_model([4, 6], [10.0, 5.0], seed=3))
    assert a == b


def test_layer_index_enforced():
    layer = init_layer(4, 1.0, layer_index=1)
    with pytest.raises(InvalidArgumentError):
        ScalableModel([layer])


def test_backward_finite_difference():
    rng = np.random.default_rng(5)
    layer = init_layer(3, 1.0, rng=rng)
    for st in layer.encoder + layer.decoder:
        st.conv.bias[:] = rng.normal(scale=0.1, size=st.conv.bias.shape)
    x = rng.uniform(size=(1, 3, 16, 16))
    q, cache = analysis_forward(x, layer)
    wq = rng.normal(size=q.shape)
    _, grads = analysis_backward(cache, layer, wq)
    params = layer.ae_params()
    for name in ("enc0.kernels", "enc1.gamma", "enc2.bias", "enc0.beta"):
        idx = list(range(0, params[name].size, max(1, params[name].size // 15)))
        num = numeric_grad(lambda: analysis(x, layer), params[name], indices=idx, weights=wq)
        assert max_rel_error(grads[name].ravel()[idx], [num[i] for i in idx]) <= 1e-6, name
    y, cache = synthesis_forward(q, layer)
    wy = rng.normal(size=y.shape)
    gq, grads = synthesis_backward(cache, layer, wy)
    for name in ("dec0.kernels", "dec1.gamma", "dec2.bias", "dec1.beta"):
        idx = list(range(0, params[name].size, max(1, params[name].size // 15)))
        num = numeric_grad(lambda: synthesis(q, layer), params[name], indices=idx, weights=wy)
        assert max_rel_error(grads[name].ravel()[idx], [num[i] for i in idx]) <= 1e-6, name
    assert max_rel_error(gq, numeric_grad(lambda: synthesis(q, layer), q, weights=wy)) <= 1e-6


def test_model_file_round_trip():
    m = build_model([4, 6], [10.0, 5.0], seed=1)
    blob = model_to_bytes(m)
    assert blob[:4] == b"SAEM"
    back = model_from_bytes(blob)
    assert model_to_bytes(back) == blob
    assert back.identifier() == m.identifier()


def test_model_file_corruption_detected():
    blob = bytearray(model_to_bytes(build_model([4], [10.0])))
    blob[20] ^= 0xFF
    with pytest.raises(ModelError, match="checksum"):
        model_from_bytes(bytes(blob))
    with pytest.raises(ModelError):
        model_from_bytes(b"XXXX" + bytes(blob[4:]))
