"""Exception types shared across the package."""


class SubdivFitError(Exception):
    """Base class for all domain errors raised by this package."""


class MeshFormatError(SubdivFitError):
    """A mesh or point cloud file could not be parsed."""


class TopologyError(SubdivFitError):
    """Mesh connectivity violates a required invariant (open boundary,
    non-manifold edge, inconsistent orientation, bad index)."""


class GeometryError(SubdivFitError):
    """Degenerate geometry prevents an operation (singular metric,
    indefinite system, unreachable target)."""
