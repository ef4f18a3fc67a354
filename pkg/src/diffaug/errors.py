"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Bad or unknown configuration key / value."""


class DataError(ValueError):
    """Malformed input data (edge lists, dataset files, splits)."""


class NumericalError(RuntimeError):
    """Non-finite values encountered during training or refinement."""


class CheckpointError(RuntimeError):
    """Unreadable, truncated, or version-incompatible checkpoint file."""


class ImpossibleLatentError(ValueError):
    """Conditioning on a zero-probability latent configuration.

    Raised by the exact posterior when the requested (a0, at) combination
    cannot occur under the given kernel, e.g. an edge appearing out of
    nothing when the converging probability is zero.
    """


class GuidanceError(RuntimeError):
    """Guidance callback failed during sampling."""
