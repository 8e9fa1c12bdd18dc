"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A config value violates an invariant (bad temperature, depth, etc.)."""


class ShapeError(ValueError):
    """An input tensor has the wrong channel count or spatial shape."""


class RoutingError(LookupError):
    """A modality was routed to a component that does not serve it."""


class DegenerateEmbeddingError(ValueError):
    """An embedding row has (near-)zero norm; cosine losses are undefined."""


class QueueEmptyError(RuntimeError):
    """Top-k retrieval or the neighborhood loss was asked on an empty queue."""


class CheckpointError(RuntimeError):
    """A checkpoint blob is corrupted, truncated, or version-mismatched."""
