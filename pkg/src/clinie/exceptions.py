class ClinieError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(ClinieError, ValueError):
    pass


class ParseError(ClinieError, ValueError):
    """Malformed annotated report. Carries 1-based ``line``/``column`` when known."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)


class ValidationError(ClinieError, ValueError):
    """Schema signature violations in a document; ``violations`` lists them."""

    def __init__(self, message, violations=()):
        self.violations = list(violations)
        super().__init__(message)


class SerializationError(ClinieError, ValueError):
    pass


class EncoderError(ClinieError, ValueError):
    pass


class TrainingError(ClinieError, RuntimeError):
    pass


class TrainingDataError(TrainingError, ValueError):
    pass


class CorpusMismatchError(ClinieError, ValueError):
    """Prediction and gold corpora do not align document-for-document."""


class ModelMismatchError(ClinieError, ValueError):
    """Checkpoints were trained against incompatible schemas or configurations."""
