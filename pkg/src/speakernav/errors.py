"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ValueError):
    """A scalar or configuration parameter is out of range."""


class ContractError(RuntimeError):
    """A precondition of an operation was violated by the caller."""


class ValidationError(ValueError):
    """A data record or span layout fails its invariants."""


class AlignmentError(ValidationError):
    """Instruction segments and trajectory sub-paths do not line up."""


class GenerationError(RuntimeError):
    """World generation failed after bounded retries."""


class SamplingError(RuntimeError):
    """No episode matching the request could be sampled."""


class CheckpointError(RuntimeError):
    """Base class for checkpoint load failures."""


class CorruptCheckpointError(CheckpointError):
    pass


class IncompatibleCheckpointError(CheckpointError):
    pass


class TrainingDivergence(RuntimeError):
    """Loss became non-finite during optimisation."""
