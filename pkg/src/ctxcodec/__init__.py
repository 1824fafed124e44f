"""Toy conditional learned video codec.

A desk-scale inter-frame codec built on a small reverse-mode autodiff engine:
temporal contexts mined from the previous reconstruction are gated by learned
confidence maps before conditioning the contextual transforms, per-position
dynamic filters generated from the reference frame let the transforms adapt
to reference quality, and latents travel through a Laplace-modelled range
coder into a bit-exact container. Training follows a staged schedule ending
in repeat-compressed long-cascade fine-tuning.
"""

from .errors import (
    CodecError, ContractError, DimensionError, FormatError, SymbolRangeError,
)
from .model import CodecConfig, ModelState, init_model, load_checkpoint, save_checkpoint
from .tensor import Tape, Tensor, precision

__all__ = [
    "CodecError",
    "ContractError",
    "DimensionError",
    "FormatError",
    "SymbolRangeError",
    "CodecConfig",
    "ModelState",
    "init_model",
    "load_checkpoint",
    "save_checkpoint",
    "Tape",
    "Tensor",
    "precision",
]

__version__ = "0.1.0"
