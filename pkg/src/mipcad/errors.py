"""Exception hierarchy shared by every stage."""


class MipCadError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class FormatError(MipCadError):
    """A file header or record could not be parsed."""


class IntegrityError(MipCadError):
    """File contents disagree with their declared header."""


class GeometryError(MipCadError):
    """Volume geometry the pipeline cannot handle."""


class ContractError(MipCadError):
    """An operation was called with inputs violating its preconditions."""


class ParameterError(MipCadError, ValueError):
    """A scalar parameter is out of its allowed range."""


class SegmentationError(MipCadError):
    """Lung segmentation produced no usable component."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class DependencyError(MipCadError):
    """A pipeline stage was requested before its upstream stage ran."""

    exit_code = 2

    def __init__(self, stage, requires):
        super().__init__(
            f"stage '{stage}' needs the output of '{requires}'; run `mipcad {requires}` first"
        )
        self.stage = stage
        self.requires = requires
