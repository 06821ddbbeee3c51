class HarnessError(Exception):
    """Base class for errors raised by the harness"""

    exit_code: int = 1


class ValidationError(HarnessError):
    """Malformed input: manifests, specs, shapes or arguments"""

    exit_code = 2


class DataError(HarnessError):
    """Unreadable, unsupported or missing data files"""

    exit_code = 3


class NumericalError(HarnessError):
    """Non-finite activations or degenerate statistics"""

    exit_code = 4
