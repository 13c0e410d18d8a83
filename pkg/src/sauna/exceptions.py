"""Exception types raised across the package."""


class SaunaError(Exception):
    """Base class for package errors."""


class ConfigurationError(SaunaError, ValueError):
    """Invalid configuration, shape, or dimension."""


class UsageError(SaunaError, RuntimeError):
    """An operation was called in a state where it is not allowed."""


class TrainingAborted(SaunaError, RuntimeError):
    """Training stopped because of repeated numerical failure."""
