__all__ = (
    'ChMoEError',
    'ChMoEDimensionError',
    'ChMoEIndexError',
    'ChMoEConfigError',
    'ChMoEContractError',
    'ChMoEFormatError',
    'ChMoETrainingError',
    'ChMoECheckError',
)

class ChMoEError(Exception):
    """
    Base class for errors raised by chmoe.
    """
    pass


class ChMoEDimensionError(ChMoEError):
    """
    Error raised when the shapes of the operands of an operation are incompatible.
    """
    pass


class ChMoEIndexError(ChMoEError):
    """
    Error raised when a row, column or label index falls outside of its valid range.
    """
    pass


class ChMoEConfigError(ChMoEError):
    """
    Error raised when a configuration, a geometry or a top-k value is invalid.
    """
    pass


class ChMoEContractError(ChMoEError):
    """
    Error raised when one component hands another something it promised not to, e.g. a routing table computed from
    different tokens, or a non-scalar loss passed to backward.
    """
    pass


class ChMoEFormatError(ChMoEError):
    """
    Error raised when a tensor container or a checkpoint manifest is malformed.
    """
    pass


class ChMoETrainingError(ChMoEError):
    """
    Error raised when training diverges.

    :ivar int step: The step at which the loss stopped being finite.
    """
    def __init__(self, msg, step=None):
        super().__init__(msg)
        self.step = step


class ChMoECheckError(ChMoEError):
    """
    Error raised when a property suite finds a counterexample.

    :ivar counterexample: A dict describing the first failing case (seed, config, deviation).
    """
    def __init__(self, msg, counterexample=None):
        super().__init__(msg)
        self.counterexample = counterexample or {}
