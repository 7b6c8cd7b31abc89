"""Layered encode/decode and the scalable bitstream container.

Layer 0 codes the image; layer i >= 1 codes the difference between the image
and the decoder-side reconstruction accumulated over layers 0..i-1.  The
encoder runs the decoder internally so residuals never drift from what a
decoder will see.  Clamping to 8 bits happens once, at final output.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .entropy_model import quantize
from .errors import DecodeError, InvalidArgumentError, UnsupportedError, WrongModelError
from .network import DOWNSAMPLE, ScalableModel, analysis, synthesis
from .rangecoder import Payload, rc_decode, rc_encode

STREAM_MAGIC = b"SAEB"
STREAM_VERSION = 1
MAX_SIDE = 1 << 16
_FIXED = struct.Struct("<4sHIIIIBQ")


@dataclass
class LayeredBitstream:
    width: int
    height: int
    padded_width: int
    padded_height: int
    model_id: int
    payloads: list = field(default_factory=list)
    version: int = STREAM_VERSION

    @property
    def num_layers(self) -> int:
        return len(self.payloads)

    def header_size(self) -> int:
        return _FIXED.size + 4 * self.num_layers

    def to_bytes(self) -> bytes:
        head = _FIXED.pack(STREAM_MAGIC, self.version, self.width, self.height, self.padded_width,
                           self.padded_height, self.num_layers, self.model_id)
        lengths = struct.pack(f"<{self.num_layers}I", *(len(p.data) for p in self.payloads))
        return head + lengths + b"".join(p.data for p in self.payloads)

    @classmethod
    def from_bytes(cls, buf: bytes, feature_maps=None) -> "LayeredBitstream":
        """Parse a stream.  ``feature_maps`` (per layer) fills in payload symbol counts."""
        if len(buf) < _FIXED.size:
            raise DecodeError(f"stream truncated: {len(buf)} bytes, header needs {_FIXED.size}", offset=len(buf))
        magic, version, w, h, pw, ph, n, mid = _FIXED.unpack_from(buf, 0)
        if magic != STREAM_MAGIC:
            raise DecodeError("not a layered bitstream (bad magic)", offset=0)
        if version != STREAM_VERSION:
            raise DecodeError(f"unsupported stream version {version}", offset=4)
        pos = _FIXED.size
        if len(buf) < pos + 4 * n:
            raise DecodeError("stream truncated inside the length table", offset=len(buf))
        lengths = struct.unpack_from(f"<{n}I", buf, pos)
        pos += 4 * n
        payloads = []
        for i, size in enumerate(lengths):
            if pos + size > len(buf):
                raise DecodeError(f"payload {i} truncated", offset=len(buf))
            count = 0
            if feature_maps is not None and i < len(feature_maps):
                count = feature_maps[i] * (ph // DOWNSAMPLE) * (pw // DOWNSAMPLE)
            payloads.append(Payload(bytes(buf[pos:pos + size]), count))
            pos += size
        if pos != len(buf):
            raise DecodeError(f"{len(buf) - pos} trailing bytes after the last payload", offset=pos)
        return cls(w, h, pw, ph, mid, payloads, version)


def pad_image(image: np.ndarray):
    """Reflect-pad an (H, W, C) image on the right/bottom to multiples of 16.

    Returns ``(padded, (height, width))``.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    ph = -h % DOWNSAMPLE
    pw = -w % DOWNSAMPLE
    if ph == 0 and pw == 0:
        return image, (h, w)
    mode = "reflect" if h > ph and w > pw else "symmetric"
    return np.pad(image, ((0, ph), (0, pw), (0, 0)), mode=mode), (h, w)


def _to_tensor(image: np.ndarray, scale: float) -> np.ndarray:
    return (np.asarray(image, dtype=np.float64) / scale).transpose(2, 0, 1)[None]


def _to_image(x: np.ndarray, scale: float, height: int, width: int) -> np.ndarray:
    pixels = x[0, :, :height, :width].transpose(1, 2, 0) * scale
    return np.clip(np.floor(pixels + 0.5), 0, 255).astype(np.uint8)


def _scan_channels(shape) -> np.ndarray:
    # channel-major, then row-major within a channel
    _, c, h, w = shape
    return np.repeat(np.arange(c), h * w)


def _check_image(image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidArgumentError(f"expected an (H, W, 3) image, got shape {image.shape}")
    if image.dtype != np.uint8:
        raise InvalidArgumentError(f"expected 8-bit samples, got {image.dtype}")
    if max(image.shape[:2]) > MAX_SIDE:
        raise UnsupportedError(f"image side exceeds {MAX_SIDE}")
    if min(image.shape[:2]) < 1:
        raise InvalidArgumentError("empty image")
    return image


def _check_layers(k, available):
    if not 1 <= k <= available:
        raise InvalidArgumentError(f"layer count must be in [1, {available}], got {k}")


def layer_steps(x: np.ndarray, model: ScalableModel, k: int):
    """Layered coding of a (B, 3, H, W) tensor in network units.

    Yields one dict per layer with the layer ``input`` (image or residual),
    its clamped integer ``symbols``, the decoded ``contribution`` and the
    running ``reconstruction``.
    """
    _check_layers(k, model.num_layers)
    accum = np.zeros_like(x)
    for i in range(k):
        layer = model.layers[i]
        inp = x if i == 0 else x - accum
        table = layer.entropy.cdf_table()
        symbols = table.clamp(quantize(analysis(inp, layer)))
        contribution = synthesis(symbols.astype(np.float64), layer)
        accum = accum + contribution
        yield dict(index=i, input=inp, symbols=symbols, contribution=contribution, reconstruction=accum)


def frozen_reconstruction(x: np.ndarray, model: ScalableModel, k: int) -> np.ndarray:
    """Decoder-side accumulation through layers 0..k-1 (zeros when k == 0)."""
    accum = np.zeros_like(x)
    if k:
        for step in layer_steps(x, model, k):
            accum = step["reconstruction"]
    return accum


def encode_layers(image: np.ndarray, model: ScalableModel, k: int):
    """:func:`layer_steps` on a padded uint8 image; exposes every layer's input."""
    image = _check_image(image)
    padded, _ = pad_image(image)
    yield from layer_steps(_to_tensor(padded, model.input_scale), model, k)


def reconstruct_at_layer(image: np.ndarray, model: ScalableModel, k: int) -> np.ndarray:
    """Decoded image after ``k`` layers, computed without serialization."""
    image = _check_image(image)
    for step in encode_layers(image, model, k):
        pass
    return _to_image(step["reconstruction"], model.input_scale, *image.shape[:2])


def sae_encode(image: np.ndarray, model: ScalableModel, k: int | None = None) -> LayeredBitstream:
    image = _check_image(image)
    k = model.num_layers if k is None else k
    padded, (h, w) = pad_image(image)
    stream = LayeredBitstream(w, h, padded.shape[1], padded.shape[0], model.identifier())
    for step in encode_layers(image, model, k):
        table = model.layers[step["index"]].entropy.cdf_table()
        sym = step["symbols"]
        stream.payloads.append(rc_encode(sym.ravel(), _scan_channels(sym.shape), table))
    return stream


def decode_latents(stream: LayeredBitstream, model: ScalableModel, k: int):
    """Entropy-decode the first ``k`` payloads into (1, C, h, w) integer latents."""
    lh, lw = stream.padded_height // DOWNSAMPLE, stream.padded_width // DOWNSAMPLE
    out = []
    for i in range(k):
        layer = model.layers[i]
        shape = (1, layer.feature_maps, lh, lw)
        payload = stream.payloads[i]
        payload = Payload(payload.data, int(np.prod(shape)))
        try:
            sym = rc_decode(payload, _scan_channels(shape), layer.entropy.cdf_table())
        except DecodeError as exc:
            raise DecodeError(f"layer {i}: {exc}", offset=exc.offset) from exc
        out.append(sym.reshape(shape))
    return out


def sae_decode_tensor(stream: LayeredBitstream, model: ScalableModel, k: int | None = None) -> np.ndarray:
    """Unclamped accumulated reconstruction in network units (padded size)."""
    if stream.model_id != model.identifier():
        raise WrongModelError(
            f"stream was encoded with model {stream.model_id:016x}, got {model.identifier():016x}")
    k = stream.num_layers if k is None else k
    _check_layers(k, stream.num_layers)
    if k > model.num_layers:
        raise WrongModelError(f"stream has {k} layers but the model only {model.num_layers}")
    accum = None
    for i, sym in enumerate(decode_latents(stream, model, k)):
        contribution = synthesis(sym.astype(np.float64), model.layers[i])
        accum = contribution if accum is None else accum + contribution
    return accum


def sae_decode(stream: LayeredBitstream, model: ScalableModel, k: int | None = None) -> np.ndarray:
    """Decode the first ``k`` layers (default all) to an (H, W, 3) uint8 image."""
    x = sae_decode_tensor(stream, model, k)
    return _to_image(x, model.input_scale, stream.height, stream.width)


def truncate(stream: LayeredBitstream, k: int) -> LayeredBitstream:
    _check_layers(k, stream.num_layers)
    return LayeredBitstream(stream.width, stream.height, stream.padded_width, stream.padded_height,
                            stream.model_id, list(stream.payloads[:k]), stream.version)


def truncate_bytes(buf: bytes, k: int) -> bytes:
    """Truncate a serialized stream without decoding any payload."""
    return truncate(LayeredBitstream.from_bytes(buf), k).to_bytes()


def stream_bpp(stream: LayeredBitstream) -> np.ndarray:
    """Per-layer payload bits per original-image pixel."""
    pixels = stream.width * stream.height
    return np.array([len(p.data) * 8 / pixels for p in stream.payloads])


def read_stream(path, model: ScalableModel | None = None) -> LayeredBitstream:
    with open(path, "rb") as fh:
        buf = fh.read()
    fms = None if model is None else [l.feature_maps for l in model.layers]
    return LayeredBitstream.from_bytes(buf, fms)


def write_stream(stream: LayeredBitstream, path) -> None:
    with open(path, "wb") as fh:
        fh.write(stream.to_bytes())
