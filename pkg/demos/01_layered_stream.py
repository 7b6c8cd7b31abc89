"""
Encoding, truncating and decoding a layered stream
==================================================

An untrained three-layer model is enough to show how the container works.
Every layer adds a payload, and dropping payloads from the end never needs
the model.
"""

import numpy as np

from saecodec import build_model, sae_decode, sae_encode, truncate
from saecodec.pipeline import LayeredBitstream, stream_bpp
from saecodec.synthetic import synthetic_images

# a small synthetic picture: smooth background, a few shapes, some texture
image = synthetic_images(1, 64, 80, seed=3)[0]
print(image.shape, image.dtype)

model = build_model([8, 8, 16], [3000.0, 300.0, 30.0], seed=0)
stream = sae_encode(image, model)
print("bpp per layer:", np.round(stream_bpp(stream), 4))

# the serialized form is what goes on disk
buf = stream.to_bytes()
print(len(buf), "bytes")

# keep only the base layer, then parse it back
base_only = LayeredBitstream.from_bytes(truncate(LayeredBitstream.from_bytes(buf), 1).to_bytes())
a = sae_decode(base_only, model)
b = sae_decode(stream, model, 1)
print("truncated stream decodes like a 1-layer decode:", np.array_equal(a, b))
