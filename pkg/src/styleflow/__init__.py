"""Desk-scale style-conditioned diffusion transformer.

A small numpy autodiff tape drives a multi-view style modulator, joint
attention blocks with an additive edge pathway, rectified-flow training and
Euler sampling.  A staged curation pipeline filters image manifests.
"""
from .numerics import NonFiniteError, ParamStore, grad_check, load_params, save_params
from .tokenizer import ModelConfig
from .model import init_model
from .imaging import canny, ssim
from .diffusion import stylize, train
from .estimator import CannyEdges, StyleTransferModel

__version__ = "0.1.0"

__all__ = [
    "CannyEdges", "ModelConfig", "NonFiniteError", "ParamStore", "StyleTransferModel", "canny",
    "grad_check", "init_model", "load_params", "save_params", "ssim", "stylize", "train",
]
