"""Exception types shared across the package."""


class LorabenchError(Exception):
    """Base class for all package errors."""


class ShapeError(LorabenchError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(LorabenchError):
    """An operation precondition was violated."""


class VocabError(LorabenchError):
    """Text or token ids fall outside the fixed vocabulary."""


class DatasetError(LorabenchError):
    """Generator parameters are infeasible or a sample file is malformed."""


class CheckpointError(LorabenchError):
    """Checkpoint bytes do not conform to the LRLB layout."""


class ConvergenceError(LorabenchError):
    """An iterative numerical routine failed to converge."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class TrainingDiverged(LorabenchError):
    """Loss became non-finite; carries the last good checkpoint if one was written."""

    def __init__(self, message: str, step: int, checkpoint_path=None):
        super().__init__(message)
        self.step = step
        self.checkpoint_path = checkpoint_path


class ConfigError(LorabenchError):
    """Experiment configuration is missing, malformed, or inconsistent."""
