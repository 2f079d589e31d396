"""Exception hierarchy shared by every module."""

from __future__ import annotations


class KelabError(Exception):
    """Base class for all package errors."""


class InputError(KelabError, ValueError):
    pass


class ConfigError(KelabError, ValueError):
    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class NumericError(KelabError, ArithmeticError):
    def __init__(self, message: str, layer: int | None = None):
        self.layer = layer
        super().__init__(message)


class TemplateError(KelabError, ValueError):
    pass


class GenerationError(KelabError):
    """Fact-graph generation could not satisfy the requested counts."""


class IngestError(KelabError, ValueError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


class CheckpointError(KelabError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    def __init__(self, message: str, block: str | None = None):
        self.block = block
        super().__init__(message)


class CovarianceError(KelabError, ArithmeticError):
    pass


class DegenerateKeyError(KelabError, ArithmeticError):
    pass


class SolveError(KelabError):
    """Value optimization failed to reach its loss threshold."""

    def __init__(self, message: str, loss_curve: list[float] | None = None, layer: int | None = None):
        self.loss_curve = list(loss_curve or [])
        self.layer = layer
        super().__init__(message)


class EditPlanError(KelabError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class MissingArtifactError(KelabError, FileNotFoundError):
    pass


class NormalizationError(InputError):
    """A ratio's denominator (baseline entropy, generalization accuracy) is zero."""
