"""Language-disentangled speaker embeddings at desk scale.

A small numpy laboratory for training speaker embeddings that shed
spoken-language information: a tape-based autodiff engine with a
gradient-reversal node, an encoder with self-attentive pooling plus a
language-classifier head, adversarial and correlation-based objectives,
a two-phase alternating trainer, a bilingual trial-protocol builder, and
EER / minDCF / language-probe evaluation.
"""

from . import autodiff, dataset, evaluation, losses, model, trainer, trials
from .errors import (
    ContractError,
    NumericError,
    ParseError,
    ProtocolEmptyError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "dataset",
    "evaluation",
    "losses",
    "model",
    "trainer",
    "trials",
    "ContractError",
    "NumericError",
    "ParseError",
    "ProtocolEmptyError",
    "ShapeError",
    "__version__",
]
