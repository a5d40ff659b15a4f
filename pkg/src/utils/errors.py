"""
Errors Module
Exception hierarchy shared by the library and the command line
"""

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_ERROR = 3


class TallyError(Exception):
    """Base class for all errors raised by the framework"""

    exit_code = EXIT_RUNTIME_ERROR


class ConfigError(TallyError, ValueError):
    """Invalid configuration, dataset spec or command-line combination"""

    exit_code = EXIT_CONFIG_ERROR


class ShapeError(TallyError, ValueError):
    """Tensor or network shape mismatch"""


class GradientError(TallyError, RuntimeError):
    """Misuse of the backward pass (non-scalar loss, double backward)"""


class NumericalError(TallyError, ArithmeticError):
    """Non-finite values or a diverged loss"""


class SamplingError(TallyError, RuntimeError):
    """Sampler precondition violated or retries exhausted"""


class BankError(TallyError, LookupError):
    """Lookup of a prototype or domain statistic that was never committed"""


class ProtocolError(TallyError, ValueError):
    """Test set does not satisfy the balance required by an evaluation protocol"""


class FormatError(TallyError, ValueError):
    """Dataset container or checkpoint cannot be read (version, corruption)"""
