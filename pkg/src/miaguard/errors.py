"""Exception hierarchy shared by every module."""


class MiaGuardError(Exception):
    pass


class ConfigurationError(MiaGuardError, ValueError):
    """Invalid parameters or configuration, detected before any work starts."""


class InputError(MiaGuardError, ValueError):
    """Malformed or out-of-contract input data."""


class CapabilityError(MiaGuardError):
    """The endpoint cannot provide a required feature (echo scoring, moments...)."""

    def __init__(self, feature: str, detail: str = ""):
        self.feature = feature
        msg = f"endpoint lacks required capability: {feature}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class TransportError(MiaGuardError):
    """Network/transport failure. Retryable; ``attempts`` counts tries made."""

    retryable = True

    def __init__(self, message: str, attempts: int = 1):
        self.attempts = attempts
        super().__init__(f"{message} (after {attempts} attempt(s))")


class ProtocolError(MiaGuardError):
    """The remote side answered with a well-formed error or an unparseable body."""
