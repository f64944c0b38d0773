"""Exception types shared by all modules."""


class InvalidArgument(ValueError):
    """An input violates a documented precondition."""


class NumericalFailure(ArithmeticError):
    """A numerical routine left its validity domain or failed to converge."""
