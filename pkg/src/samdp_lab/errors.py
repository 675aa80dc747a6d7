"""Exception types shared across the package."""


class StructuralError(ValueError):
    """Shapes, dimensions or required fields do not line up."""


class BudgetError(ValueError):
    """A perturbation falls outside its admissible set."""


class CapacityError(RuntimeError):
    """An exact enumeration would exceed its configured cap."""


class DomainError(ValueError):
    """A mathematical precondition (e.g. absolute continuity) is violated."""


class InterfaceError(PermissionError):
    """An operation asked a victim handle for more access than its tier grants."""


class DependencyError(RuntimeError):
    """A pipeline phase needs an artifact that an earlier phase has not produced."""


class NumericalError(FloatingPointError):
    """A loss or solve produced non-finite values."""


class ConfigError(StructuralError):
    """A configuration file or override is malformed or names an unknown key."""
