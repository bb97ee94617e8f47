"""Exception types shared across the package."""


class ValidationError(ValueError):
    """An input violates a documented precondition or invariant."""


class BundleFormatError(ValueError):
    """A trace bundle's index file cannot be parsed."""


class BundleIntegrityError(ValueError):
    """A trace bundle's binary payload disagrees with its index."""


class ConfigError(ValueError):
    """A configuration file or option is invalid."""
