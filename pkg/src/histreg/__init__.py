"""Feature-based rigid + non-rigid registration of histology image pairs,
with stain/colour harmonisation, tiled blending and rTRE evaluation."""
from .core import (AffineTransform2D, SinusoidalWarp, TpsWarp, load_image, resample,
                   save_image)
from .errors import HistregError, ParseError, RegistrationFailed
from .evaluation import amrtre, mmrtre, point_eval, rtre
from .preprocess import PreprocessConfig, otsu_mask, preprocess
from .registration import RegistrationConfig, RegistrationResult, register_pair
from .stain import StainModel, macenko_estimate, reinhard_transfer, vahadane_estimate
from .synth import SynthSpec, generate_pair

__version__ = "0.1.0"

__all__ = [
    "AffineTransform2D", "SinusoidalWarp", "TpsWarp", "load_image", "save_image", "resample",
    "HistregError", "ParseError", "RegistrationFailed", "rtre", "mmrtre", "amrtre",
    "point_eval", "PreprocessConfig", "otsu_mask", "preprocess", "RegistrationConfig",
    "RegistrationResult", "register_pair", "StainModel", "macenko_estimate",
    "reinhard_transfer", "vahadane_estimate", "SynthSpec", "generate_pair",
]
