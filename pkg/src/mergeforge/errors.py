"""Exception types shared across the package."""


class MergeforgeError(Exception):
    """Base class for all package-specific failures."""


class DimensionMismatch(MergeforgeError):
    """Operands have incompatible shapes."""


class NotPositiveDefinite(MergeforgeError):
    """Cholesky factorization failed even after jitter escalation."""


class ZeroMatrix(MergeforgeError):
    """An operand with zero Frobenius norm where a nonzero one is required."""


class FormatError(MergeforgeError):
    """Checkpoint container is malformed (bad magic, version, or blob)."""


class ShapeError(MergeforgeError):
    """Declared shapes disagree with actual data."""


class MetaMismatch(MergeforgeError):
    """Checkpoints do not share identical module metadata."""


class MissingModule(MergeforgeError):
    """A 2D module required by an operation has no entry."""


class MissingConfigCell(MergeforgeError):
    """A merge config lacks the lambda for some (block, group) cell."""


class OutOfRange(MergeforgeError):
    """A scalar parameter lies outside its documented range."""


class EmptySplit(MergeforgeError):
    """A dataset split that must be nonempty is empty."""


class EmptyInput(MergeforgeError):
    """An input collection that must be nonempty is empty."""


class Divergence(MergeforgeError):
    """Training loss became non-finite."""


class EvaluatorFailure(MergeforgeError):
    """The black-box evaluator raised; carries the partial trial history."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history
