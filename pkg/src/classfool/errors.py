"""Exception types shared across the package."""


class ClassfoolError(Exception):
    """Base class for every error raised by classfool."""


class InputError(ClassfoolError, ValueError):
    """Bad argument: wrong shape, label out of range, empty set."""


class ConfigError(ClassfoolError, ValueError):
    """Inconsistent or incomplete configuration."""


class TrainingError(ClassfoolError, RuntimeError):
    def __init__(self, message, iteration):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


class NumericError(ClassfoolError, ArithmeticError):
    """A numerical routine failed (e.g. Cholesky after jitter)."""


class FormatError(ClassfoolError, ValueError):
    """Base class for file parse errors."""


class MagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class HeaderError(FormatError):
    pass


class CountMismatchError(FormatError):
    pass
