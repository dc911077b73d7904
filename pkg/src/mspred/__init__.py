"""Learning equivariant encoders from stationary sequences.

The package trains an encoder/decoder pair by solving a closed-form
least-squares latent transition inside every forward pass and
backpropagating the future-prediction error through it, then analyzes the
learned transition operators (equivariance, homogeneity, spectra) and
uncovers their common block structure by simultaneous block-diagonalization.
"""

from . import analysis, autodiff, config, datagen, model, sbd, svg, training
from .errors import (
    ContractError,
    DimensionError,
    FormatError,
    MspredError,
    NumericError,
    SingularityError,
    TrainingAbort,
    ValidationError,
)

__all__ = [
    "analysis",
    "autodiff",
    "config",
    "datagen",
    "model",
    "sbd",
    "svg",
    "training",
    "ContractError",
    "DimensionError",
    "FormatError",
    "MspredError",
    "NumericError",
    "SingularityError",
    "TrainingAbort",
    "ValidationError",
]

__version__ = "0.1.0"
