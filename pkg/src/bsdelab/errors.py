"""Exception hierarchy shared across the package.

The CLI maps these to exit codes: configuration/domain/model problems are
user errors (exit 2), numeric failures exit 3, resource limits exit 4.
"""


class BsdeLabError(Exception):
    pass


class ConfigurationError(BsdeLabError):
    """Invalid inputs, mismatched shapes, or unsatisfied preconditions."""


class ModelError(BsdeLabError):
    """A model produced non-finite output or is otherwise unusable."""


class DomainError(BsdeLabError):
    """Parameter outside the mathematical domain (e.g. an exponent p <= 1)."""


class NumericError(BsdeLabError):
    """An iteration failed to converge or a linear system was unusable."""


class ResourceError(BsdeLabError):
    """A configured budget (node count, memory) would be exceeded."""


class StateError(BsdeLabError):
    """Operation called on an object in the wrong state."""
