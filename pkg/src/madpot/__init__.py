"""Few-shot anomaly detection with entropic and partial optimal transport.

The package is organised by concern:

``numkit``     softmax, cosine costs, bicubic resampling, splitmix64 RNG
``transport``  Sinkhorn, Dykstra partial OT, exact LP reference
``model``      frozen toy encoder, adapters, learnable prompts, params I/O
``scoring``    transport and contrastive scores, segmentation maps
``losses``     generalized Dice, focal and BCE with gradients
``training``   batched forward/backward and the Adam loop
``data``       synthetic images, PGM and JSONL I/O
``metrics``    ROC-AUC and the evaluation report
``cli``        the ``madpot`` command
"""

from .errors import (
    InfeasibleError,
    InvalidConfigError,
    InvalidInputError,
    MadpotError,
    NumericalDegeneracyError,
    ParseError,
    ShapeError,
    TrainingError,
    UndefinedMetricError,
)
from .transport import SolverConfig, TransportPlan, exact_lp_oracle, partial_ot, sinkhorn

__version__ = "0.1.0"

__all__ = [
    "MadpotError",
    "InvalidInputError",
    "ShapeError",
    "InvalidConfigError",
    "InfeasibleError",
    "NumericalDegeneracyError",
    "UndefinedMetricError",
    "ParseError",
    "TrainingError",
    "SolverConfig",
    "TransportPlan",
    "sinkhorn",
    "partial_ot",
    "exact_lp_oracle",
    "__version__",
]
