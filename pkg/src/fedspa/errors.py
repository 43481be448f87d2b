"""Exception hierarchy shared by all modules."""


class FedSpaError(Exception):
    pass


class InvalidParameter(FedSpaError, ValueError):
    pass


class NumericError(FedSpaError, ArithmeticError):
    pass


class FormatError(FedSpaError, ValueError):
    """Malformed input file. ``offset`` is the byte (or line) position, when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class ProtocolError(FedSpaError, RuntimeError):
    pass


class InfinitePrivacyLoss(FedSpaError):
    """Raised when a mechanism adds no noise, so no finite RDP bound exists."""


class NoFeasibleAlpha(FedSpaError):
    pass


class CalibrationError(FedSpaError):
    def __init__(self, message, min_achievable_epsilon=None):
        super().__init__(message)
        self.min_achievable_epsilon = min_achievable_epsilon
