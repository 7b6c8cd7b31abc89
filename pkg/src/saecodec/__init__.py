"""Scalable learned image codec: a base auto-encoder plus residual enhance layers."""

from .errors import CodecError, DecodeError, ModelError, WrongModelError
from .metrics import RDPoint, bd_psnr, bd_rate, ms_ssim, psnr, rd_curve
from .network import ScalableModel, build_default_model, build_model, load_model, save_model
from .pipeline import LayeredBitstream, sae_decode, sae_encode, truncate

__version__ = "0.1.0"

__all__ = [
    "CodecError", "DecodeError", "LayeredBitstream", "ModelError", "RDPoint", "ScalableModel",
    "WrongModelError", "bd_psnr", "bd_rate", "build_default_model", "build_model", "load_model",
    "ms_ssim", "psnr", "rd_curve", "sae_decode", "sae_encode", "save_model", "truncate",
]
