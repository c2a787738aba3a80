class ConfigurationError(ValueError):
    """Invalid user-facing configuration (unknown names, bad shapes, bad values)."""

    def __init__(self, message, path=None):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}" if path else message)


class DivergenceError(ArithmeticError):
    """A simulation or optimisation left the finite range.

    ``index`` is the failing time/step index and ``item`` the trajectory or
    epoch it belongs to, when known.
    """

    def __init__(self, message, index=None, item=None):
        self.index = index
        self.item = item
        super().__init__(message)
