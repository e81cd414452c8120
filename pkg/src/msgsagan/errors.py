class MSGSAGANError(Exception):
    """Base class; ``kind`` is what the CLI reports in its error JSON."""

    kind = "error"


class ConfigurationError(MSGSAGANError, ValueError):
    kind = "configuration"


class NumericError(MSGSAGANError, ArithmeticError):
    kind = "numeric"


class IngestionError(MSGSAGANError, OSError):
    kind = "ingestion"


class ExtractorUnavailable(MSGSAGANError, RuntimeError):
    kind = "environment"


class CheckpointError(MSGSAGANError, RuntimeError):
    kind = "checkpoint"


class TrainingDiverged(MSGSAGANError, RuntimeError):
    kind = "diverged"

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot
