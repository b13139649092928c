class ValidationError(ValueError):
    """Bad input: parameters, configurations or files that fail a precondition."""


class NumericalError(RuntimeError):
    """A numerical guarantee was violated (non-convergence, lost positivity, blow-up)."""
