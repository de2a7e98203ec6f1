"""M-layer: a neural network layer built on the matrix exponential.

An input ``x`` is embedded as ``phi = U x + u0``, mixed into a square matrix
``M = B + sum_a phi_a T_a`` and read out as ``V + S . exp(M)``.
"""

from .errors import (ConfigError, ConvergenceError, DimensionError, DomainError, FormatError,
                     TrainingDiverged)
from .layer import (Dims, ForwardCache, MLayerParams, backward, build_matrix, embed, forward,
                    init_periodic, init_standard, load_model, param_count, reparameterize, save_model)
from .linexp import expm, expm_frechet, expm_vjp, frobenius_norm, spectral_norm

__version__ = "0.1.0"
