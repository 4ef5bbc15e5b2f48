class BudgetExceededError(ValueError):
    """Composed failure probabilities exceed the target eps_qkd."""


class DegenerateSignalError(ValueError):
    """Signal clicks are indistinguishable from dark counts."""


class ResourceLimitError(RuntimeError):
    """Instance too large for an exhaustive computation."""


class ConfigError(ValueError):
    pass


class RangeWarning(UserWarning):
    """Model evaluated outside the range it was characterised over."""
