"""Exception types shared across the package."""


class SplitMixError(Exception):
    """Base class for all package errors."""


class ShapeError(SplitMixError, ValueError):
    """Tensor/layer dimension mismatch."""


class ConfigError(SplitMixError, ValueError):
    """Invalid configuration value; message carries the field path."""


class DataFormatError(SplitMixError, ValueError):
    """Malformed dataset file (bad magic, truncated payload, label range)."""


class NumericsError(SplitMixError, RuntimeError):
    """Non-finite value encountered during training."""


class ProtocolError(SplitMixError, RuntimeError):
    """Federated-protocol invariant violated (e.g. client budget exceeded)."""
