class ConfigurationError(ValueError):
    """Invalid parameters or configuration."""


class ContractViolation(ValueError):
    """Inputs violate a component contract (shapes, view counts, geometry)."""


class NumericalFailure(RuntimeError):
    """Non-finite values produced inside an optimisation step."""


class TrainingFailure(RuntimeError):
    """Training diverged or failed to make progress."""
