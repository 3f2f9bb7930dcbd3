"""Exception types shared across the package."""


class UnisafeError(Exception):
    """Base class for errors raised by this package."""


class InfeasibleError(UnisafeError):
    """No admissible input exists (or none could be certified).

    Attributes:
        max_margin: best (smallest) worst-case constraint margin found, if known.
        state: the plant state at which feasibility failed, if applicable.
    """

    def __init__(self, message, max_margin=None, state=None):
        super().__init__(message)
        self.max_margin = max_margin
        self.state = state


class DomainError(UnisafeError):
    """Objective evaluated at a point on or outside the admissible polytope."""


class NumericError(UnisafeError):
    """A computation produced non-finite values (state blow-up, bad barrier input)."""


class FormatError(UnisafeError):
    """A file could not be parsed.

    Attributes:
        offset: byte/character offset of the first problem, when known.
    """

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class SchemaError(UnisafeError):
    """A file parsed but its declared dimensions/fields are inconsistent."""


class TrainingDivergedError(UnisafeError):
    """Training loss became non-finite.

    Attributes:
        epoch: index of the epoch at which divergence was detected.
    """

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch
