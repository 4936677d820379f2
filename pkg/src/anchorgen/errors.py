"""Exception taxonomy shared across the package."""


class AnchorgenError(Exception):
    """Base class for all package errors."""


class ContractViolation(AnchorgenError, ValueError):
    """An operation was called with arguments that break its contract."""


class ShapeMismatchError(ContractViolation):
    """Operand shapes do not conform to an operation's shape rule."""

    def __init__(self, op_kind, *shapes):
        self.op_kind = op_kind
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(
            f"{op_kind}: incompatible shapes {' vs '.join(str(s) for s in self.shapes)}"
        )


class ConfigurationError(AnchorgenError, ValueError):
    """A configuration object or value is invalid."""


class UnknownOperationError(ConfigurationError):
    """Requested op kind is not in the primitive registry."""


class TruncationError(ContractViolation):
    """A serialized token stream does not fit under the model's max length."""


class DivergenceError(AnchorgenError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, batch_index, message=""):
        self.epoch = epoch
        self.batch_index = batch_index
        detail = message or "non-finite loss"
        super().__init__(f"{detail} at epoch {epoch}, batch {batch_index}")


class NondeterministicFunctionError(AnchorgenError, RuntimeError):
    """A function required to be deterministic returned differing values."""


class ParseError(AnchorgenError, ValueError):
    """A serialized artifact could not be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UndefinedAUCError(ContractViolation):
    """Rank AUC is undefined because only one class is present."""


class StageError(AnchorgenError, RuntimeError):
    """A pipeline stage failed; completed artifacts are preserved."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")


class MissingArtifactError(AnchorgenError, FileNotFoundError):
    """Required run artifacts are absent."""

    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing artifacts: " + ", ".join(self.missing))
