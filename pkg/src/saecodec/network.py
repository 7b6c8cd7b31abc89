"""Per-layer auto-encoder and the stacked scalable model.

Every layer uses the same topology: three strided convolutions (9x9/4,
5x5/2, 5x5/2) with GDN after the first two, mirrored by three transposed
convolutions with IGDN after the first two.  The last decoder stage is
linear so enhance layers can emit signed residuals.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .entropy_model import EntropyModel
from .errors import InvalidArgumentError, ModelError, PreconditionError
from .numerics import (
    ConvParams, GdnParams, conv2d_backward, conv2d_forward, gdn_backward, gdn_forward,
    igdn_backward, igdn_forward, same_padding, tconv2d_backward, tconv2d_forward)

KERNELS = (9, 5, 5)
STRIDES = (4, 2, 2)
DOWNSAMPLE = 16
IMAGE_CHANNELS = 3

MSE_LAMBDAS = (3000.0, 1000.0, 300.0, 100.0, 30.0)
MSSSIM_LAMBDAS = (50.0, 30.0, 10.0, 0.5)
FEATURE_MAPS = (48, 48, 96, 144, 192)

MODEL_MAGIC = b"SAEM"
MODEL_VERSION = 1


@dataclass
class Stage:
    conv: ConvParams
    gdn: GdnParams | None = None


@dataclass
class LayerModel:
    encoder: list
    decoder: list
    feature_maps: int
    lambda_rate: float
    entropy: EntropyModel
    layer_index: int = 0

    def ae_params(self) -> dict:
        """Autoencoder parameters by name, in serialization order (views, not copies)."""
        out = {}
        for prefix, stages in (("enc", self.encoder), ("dec", self.decoder)):
            for i, st in enumerate(stages):
                out[f"{prefix}{i}.kernels"] = st.conv.kernels
                out[f"{prefix}{i}.bias"] = st.conv.bias
                if st.gdn is not None:
                    out[f"{prefix}{i}.beta"] = st.gdn.beta
                    out[f"{prefix}{i}.gamma"] = st.gdn.gamma
        return out

    def copy(self) -> "LayerModel":
        def dup(stages):
            return [Stage(ConvParams(s.conv.kernels.copy(), s.conv.bias.copy(), s.conv.stride, s.conv.padding),
                          None if s.gdn is None else GdnParams(s.gdn.beta.copy(), s.gdn.gamma.copy()))
                    for s in stages]
        return LayerModel(dup(self.encoder), dup(self.decoder), self.feature_maps, self.lambda_rate,
                          self.entropy.copy(), self.layer_index)


@dataclass
class ScalableModel:
    layers: list
    input_scale: float = 255.0
    version: int = MODEL_VERSION

    def __post_init__(self):
        if not self.layers:
            raise InvalidArgumentError("a scalable model needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.layer_index != i:
                raise InvalidArgumentError(f"layer {i} carries layer_index {layer.layer_index}")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def to_bytes(self) -> bytes:
        return model_to_bytes(self)

    def identifier(self) -> int:
        """64-bit hash of the serialized model, stored in stream headers."""
        return int.from_bytes(hashlib.blake2b(self.to_bytes(), digest_size=8).digest(), "little")


def _uniform(rng, shape, fan_in):
    # unit-variance uniform, scaled so each output starts with variance ~1 per unit input variance
    return rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size=shape) / np.sqrt(fan_in)


def init_layer(feature_maps: int, lambda_rate: float, layer_index: int = 0, rng=None) -> LayerModel:
    if feature_maps < 1:
        raise InvalidArgumentError("feature_maps must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    n = feature_maps
    encoder = []
    chans = (IMAGE_CHANNELS, n, n, n)
    for i, (k, s) in enumerate(zip(KERNELS, STRIDES)):
        cin, cout = chans[i], chans[i + 1]
        conv = ConvParams(_uniform(rng, (cout, cin, k, k), cin * k * k), np.zeros(cout), s,
                          same_padding(s * 8, k, s))
        encoder.append(Stage(conv, GdnParams.initial(cout) if i < 2 else None))
    decoder = []
    dchans = (n, n, n, IMAGE_CHANNELS)
    for i, (k, s) in enumerate(zip(KERNELS[::-1], STRIDES[::-1])):
        cin, cout = dchans[i], dchans[i + 1]
        # each output of a stride-s transposed conv sees about cin*(k/s)^2 inputs
        conv = ConvParams(_uniform(rng, (cin, cout, k, k), cin * k * k / (s * s)), np.zeros(cout), s,
                          same_padding(s * 8, k, s))
        decoder.append(Stage(conv, GdnParams.initial(cout) if i < 2 else None))
    entropy = EntropyModel(n, rng=rng)
    return LayerModel(encoder, decoder, n, float(lambda_rate), entropy, layer_index)


def build_model(feature_maps, lambdas, seed: int = 0) -> ScalableModel:
    if len(feature_maps) != len(lambdas):
        raise InvalidArgumentError("feature_maps and lambdas differ in length")
    rng = np.random.default_rng(seed)
    layers = [init_layer(int(n), float(lam), i, rng) for i, (n, lam) in enumerate(zip(feature_maps, lambdas))]
    return ScalableModel(layers)


def build_default_model(num_layers: int, objective: str = "mse", seed: int = 0) -> ScalableModel:
    """Model with the default feature-map and lambda ladders."""
    objective = objective.lower().replace("-", "")
    if objective == "mse":
        lambdas = MSE_LAMBDAS
    elif objective == "msssim":
        lambdas = MSSSIM_LAMBDAS
    else:
        raise InvalidArgumentError(f"unknown objective {objective!r}")
    if not 1 <= num_layers <= len(lambdas):
        raise InvalidArgumentError(f"num_layers must be in [1, {len(lambdas)}] for {objective}, got {num_layers}")
    return build_model(FEATURE_MAPS[:num_layers], lambdas[:num_layers], seed)


def analysis_forward(x: np.ndarray, m: LayerModel):
    """Encoder pass returning ``(latent, cache)``; the cache feeds :func:`analysis_backward`."""
    if x.ndim != 4 or x.shape[1] != IMAGE_CHANNELS:
        raise PreconditionError(f"analysis expects (batch, 3, H, W), got {x.shape}")
    if x.shape[2] % DOWNSAMPLE or x.shape[3] % DOWNSAMPLE:
        raise PreconditionError(f"spatial dims {x.shape[2:]} must be multiples of {DOWNSAMPLE}; pad first")
    cache = []
    h = x
    for st in m.encoder:
        a = conv2d_forward(h, st.conv)
        cache.append((h, a))
        h = gdn_forward(a, st.gdn) if st.gdn is not None else a
    return h, cache


def analysis(x: np.ndarray, m: LayerModel) -> np.ndarray:
    return analysis_forward(x, m)[0]


def analysis_backward(cache, m: LayerModel, grad_latent: np.ndarray):
    """Returns ``(grad_x, grad_params)`` keyed like :meth:`LayerModel.ae_params`."""
    grads = {}
    g = grad_latent
    for i in reversed(range(len(m.encoder))):
        st = m.encoder[i]
        h, a = cache[i]
        if st.gdn is not None:
            g, grads[f"enc{i}.beta"], grads[f"enc{i}.gamma"] = gdn_backward(a, st.gdn, g)
        g, grads[f"enc{i}.kernels"], grads[f"enc{i}.bias"] = conv2d_backward(h, st.conv, g)
    return g, grads


def synthesis_forward(q: np.ndarray, m: LayerModel):
    if q.ndim != 4 or q.shape[1] != m.feature_maps:
        raise InvalidArgumentError(f"latent has shape {q.shape}, layer expects {m.feature_maps} channels")
    cache = []
    h = np.asarray(q, dtype=np.float64)
    for st in m.decoder:
        a = tconv2d_forward(h, st.conv)
        cache.append((h, a))
        h = igdn_forward(a, st.gdn) if st.gdn is not None else a
    return h, cache


def synthesis(q: np.ndarray, m: LayerModel) -> np.ndarray:
    """Decoder pass; output is unclipped so residual layers keep their sign."""
    return synthesis_forward(q, m)[0]


def synthesis_backward(cache, m: LayerModel, grad_out: np.ndarray):
    grads = {}
    g = grad_out
    for i in reversed(range(len(m.decoder))):
        st = m.decoder[i]
        h, a = cache[i]
        if st.gdn is not None:
            g, grads[f"dec{i}.beta"], grads[f"dec{i}.gamma"] = igdn_backward(a, st.gdn, g)
        g, grads[f"dec{i}.kernels"], grads[f"dec{i}.bias"] = tconv2d_backward(h, st.conv, g)
    return g, grads


# ---------------------------------------------------------------------------
# model file


def _layer_bytes(layer: LayerModel) -> bytes:
    parts = [struct.pack("<Hd", layer.feature_maps, layer.lambda_rate)]
    for arr in layer.ae_params().values():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    parts.append(layer.entropy.to_bytes())
    return b"".join(parts)


def model_to_bytes(model: ScalableModel) -> bytes:
    body = MODEL_MAGIC + struct.pack("<HB", model.version, model.num_layers)
    body += b"".join(_layer_bytes(layer) for layer in model.layers)
    return body + struct.pack("<I", zlib.crc32(body))


def model_from_bytes(buf: bytes) -> ScalableModel:
    if len(buf) < 11 or buf[:4] != MODEL_MAGIC:
        raise ModelError("not a model file (bad magic)")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) != crc:
        raise ModelError("model file checksum mismatch")
    version, count = struct.unpack_from("<HB", buf, 4)
    if version != MODEL_VERSION:
        raise ModelError(f"unsupported model version {version}")
    try:
        layers, offset = _parse_layers(buf, count)
    except (struct.error, ValueError) as exc:
        raise ModelError(f"truncated or corrupt model file: {exc}") from exc
    if offset != len(buf) - 4:
        raise ModelError("model file has trailing bytes")
    return ScalableModel(layers, version=version)


def _parse_layers(buf: bytes, count: int):
    offset = 7
    layers = []
    for i in range(count):
        fm, lam = struct.unpack_from("<Hd", buf, offset)
        offset += 10
        layer = init_layer(fm, lam, i)
        for name, arr in layer.ae_params().items():
            n = arr.size
            arr[...] = np.frombuffer(buf, "<f8", n, offset).reshape(arr.shape)
            offset += 8 * n
        layer.entropy, offset = EntropyModel.from_bytes(buf, offset)
        if layer.entropy.channels != fm:
            raise ModelError(f"layer {i}: entropy model has {layer.entropy.channels} channels, expected {fm}")
        layers.append(layer)
    return layers, offset


def save_model(model: ScalableModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path) -> ScalableModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
