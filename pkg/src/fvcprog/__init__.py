"""FVC decline prognosis toolkit.

Turns CT slice stacks and clinical records into per-patient FVC decline
slopes: automated lung masking, closed-form least-squares slope targets,
a context-gated hybrid CNN/transformer regressor trained with AdamW, and
Laplace log-likelihood / RMSE evaluation.
"""

__version__ = "0.1.0"

from .errors import DataError, MaskError, NumericalError, SingularDesignError

__all__ = [
    "DataError",
    "MaskError",
    "NumericalError",
    "SingularDesignError",
    "__version__",
]
