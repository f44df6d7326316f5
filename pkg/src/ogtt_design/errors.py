"""Exception hierarchy shared by the library and the CLI."""


class OGTTError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class InputError(OGTTError, ValueError):
    """Malformed user input: bad CSV, invalid design, non-finite state."""

    exit_code = 2


class ConfigurationError(InputError):
    exit_code = 2


class IntegrationError(OGTTError):
    """The adaptive integrator could not reach the requested tolerance."""

    exit_code = 3

    def __init__(self, message, t_fail=float("nan")):
        super().__init__(message)
        self.t_fail = t_fail


class SamplerError(OGTTError):
    exit_code = 3

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class EstimationError(OGTTError):
    exit_code = 3


class ContractViolation(OGTTError):
    """A caller broke a documented precondition (e.g. changed T2 mid-run)."""

    exit_code = 4
