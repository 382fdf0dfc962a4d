"""Exception types shared across the package."""


class GaitFuseError(Exception):
    """Base class for all package errors."""


class FormatError(GaitFuseError, ValueError):
    """A file or record does not follow its declared format."""


class TopologyError(GaitFuseError, ValueError):
    """A skeleton topology is invalid or does not fit a pose."""


class ConfigError(GaitFuseError, ValueError):
    """A run configuration is invalid."""


class ContractViolation(GaitFuseError, RuntimeError):
    """A numerical contract was broken (non-finite values, gradient mismatch)."""
