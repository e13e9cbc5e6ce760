"""Exception types raised across the package."""


class GatposError(Exception):
    """Base class for all package errors."""


class DatasetFormatError(GatposError, ValueError):
    """A dataset package is missing a file or contains malformed lines."""


class GraphRangeError(GatposError, IndexError):
    """A node index falls outside ``[0, num_nodes)``."""


class SplitError(GatposError, ValueError):
    """Split generation or validation failed."""


class ShapeError(GatposError, ValueError):
    """Operand shapes are inconsistent."""


class SegmentationError(GatposError, ValueError):
    """A segment index is malformed or has an empty segment."""


class DomainError(GatposError, ValueError):
    """An elementwise function was evaluated outside its domain."""


class ContractError(GatposError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(GatposError, ValueError):
    """Invalid hyperparameters or configuration values."""


class TrainingAborted(GatposError, RuntimeError):
    """Training hit a non-finite loss.

    ``epoch`` and ``term`` identify where it happened.
    """

    def __init__(self, message, epoch=None, term=None):
        super().__init__(message)
        self.epoch = epoch
        self.term = term
