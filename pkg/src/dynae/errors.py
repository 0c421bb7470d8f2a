"""Exception types shared across the package."""


class DynaeError(Exception):
    """Base class for errors raised by dynae."""


class ShapeError(DynaeError, ValueError):
    """Input arrays have incompatible dimensions."""


class NonFiniteError(DynaeError, ArithmeticError):
    """A loss, gradient or density evaluated to NaN or infinity."""

    def __init__(self, message, payload=None):
        super().__init__(message)
        self.payload = payload


class SimulationEscape(DynaeError, RuntimeError):
    """A simulated trajectory left its bounding box."""

    def __init__(self, frame):
        super().__init__(f"trajectory left the bounding box at frame {frame}")
        self.frame = frame


class ConfigError(DynaeError, ValueError):
    """Invalid configuration or command-line usage."""
