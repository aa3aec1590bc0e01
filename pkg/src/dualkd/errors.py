"""Exception types shared across the package."""


class DualKDError(Exception):
    """Base class for all package errors."""


class DimensionError(DualKDError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(DualKDError, ValueError):
    """A layer, model or run was configured inconsistently."""


class UsageError(DualKDError):
    """An API or CLI was called in a way its contract forbids."""


class InputError(DualKDError, ValueError):
    """Input data is empty, malformed or does not match the expected layout."""


class FormatError(DualKDError):
    """A file on disk is truncated, corrupt or of an unsupported version."""


class ArchitectureError(DualKDError):
    """Stored parameters do not fit the architecture they are loaded into."""


class DivergenceError(DualKDError):
    """Training produced a non-finite loss."""

    def __init__(self, component, step=None):
        self.component = component
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite loss component {component!r}{where}")
