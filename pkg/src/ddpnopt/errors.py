"""Exception types shared across the package."""


class DDPError(Exception):
    """Base class for all errors raised by ddpnopt."""


class ShapeError(DDPError, ValueError):
    def __init__(self, message, layer=None):
        self.layer = layer
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)


class NumericalError(DDPError, ArithmeticError):
    """Non-finite or singular quantity; ``layer``/``step`` locate it when known."""

    def __init__(self, message, layer=None, step=None):
        self.layer = layer
        self.step = step
        self.detail = message
        prefix = []
        if step is not None:
            prefix.append(f"step {step}")
        if layer is not None:
            prefix.append(f"layer {layer}")
        if prefix:
            message = ", ".join(prefix) + ": " + message
        super().__init__(message)

    def located(self, layer=None, step=None):
        """Copy with missing location fields filled in."""
        return NumericalError(self.detail, self.layer if self.layer is not None else layer,
                              self.step if self.step is not None else step)


class UnsupportedModeError(DDPError):
    """Requested combination of options has no implementation (e.g. factored + second order)."""


class InfeasibleDimensionError(DDPError, ValueError):
    pass


class ConfigError(DDPError, ValueError):
    pass


class DataError(DDPError, ValueError):
    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{', '.join(where)}: {message}"
        super().__init__(message)
