"""Exception types raised by the fitting stack."""


class DomainError(ValueError):
    """Argument outside the domain of a density or special function."""


class UndefinedMomentError(ValueError):
    """Predictive mean or variance does not exist (t experts with small dof)."""


class DegenerateComponentError(RuntimeError):
    """An expert lost (almost) all responsibility mass."""


class FitFailedError(RuntimeError):
    """Every restart of a fit degenerated.

    ``diagnostics`` holds one message per abandoned restart.
    """

    def __init__(self, message, diagnostics=()):
        super().__init__(message)
        self.diagnostics = list(diagnostics)


class UnsupportedFamilyError(ValueError):
    pass


class CsvFormatError(ValueError):
    """Malformed input table; the message names the line and column."""


class DataNotFoundError(FileNotFoundError):
    pass


class ChecksumError(ValueError):
    pass
