from .autoencoder import PerceptualCodec
from .ddim import DdimScheduler, make_schedule
from .stack import Conditioning, DiffusionBackbone
from .unet import CondUNet, NUM_DECODER_LAYERS

__all__ = [
    "CondUNet",
    "Conditioning",
    "DdimScheduler",
    "DiffusionBackbone",
    "NUM_DECODER_LAYERS",
    "PerceptualCodec",
    "make_schedule",
]
