"""Exception hierarchy shared across the package."""


class UgspError(Exception):
    """Base class for all package errors."""

    category = "error"


class DimensionError(UgspError):
    """Operand shapes are incompatible. The message carries both shapes."""

    category = "dimension"


class ContractError(UgspError):
    """A caller violated an operation's precondition."""

    category = "contract"


class FormatError(UgspError):
    """An on-disk artifact (image, label cache, checkpoint) is malformed."""

    category = "format"


class CheckpointError(FormatError):
    """Checkpoint payload does not match the model being loaded."""

    category = "checkpoint"


class NumericalError(UgspError):
    """A non-finite value appeared while debug checks were enabled."""

    category = "numeric"


class TrainingDiverged(UgspError):
    """Training loss became non-finite; message carries the last batch id."""

    category = "numeric"
