"""Fed-SPA: federated learning with sparsification-amplified privacy.

Desk-scale simulator with a Renyi-DP accountant, RandK sparsification,
FedAvg / DP-Fed baselines and an adaptive server optimizer.
"""

from fedspa.errors import (
    CalibrationError,
    FormatError,
    InfinitePrivacyLoss,
    InvalidParameter,
    NoFeasibleAlpha,
    NumericError,
    ProtocolError,
)

__version__ = "0.1.0"

__all__ = [
    "CalibrationError",
    "FormatError",
    "InfinitePrivacyLoss",
    "InvalidParameter",
    "NoFeasibleAlpha",
    "NumericError",
    "ProtocolError",
]
