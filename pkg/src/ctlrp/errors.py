"""Exception hierarchy shared by every ctlrp module."""


class CtlrpError(Exception):
    """Base class; ``kind`` is the machine-parsable tag printed by the CLI."""

    kind = "error"


class DimensionError(CtlrpError, ValueError):
    kind = "dimension"


class UsageError(CtlrpError, ValueError):
    kind = "usage"


class StructureError(CtlrpError, ValueError):
    kind = "structure"


class IngestionError(CtlrpError, ValueError):
    kind = "ingestion"

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(CtlrpError, ValueError):
    kind = "config"


class InputError(CtlrpError, ValueError):
    kind = "input"


class ModelError(CtlrpError, ValueError):
    kind = "model"


class CheckpointError(CtlrpError, ValueError):
    kind = "checkpoint"
