"""Joint two-species marked log-Gaussian Cox processes on SPDE meshes."""

__version__ = "0.1.0"

from .data import BEHAVIORS, SPECIES, MarkedPointPattern, read_sightings, write_sightings  # noqa: E402
from .geo import CovariateGrid, DomainPolygon  # noqa: E402
from .mesh import Mesh, build_mesh, dual_weights, projector  # noqa: E402
from .model import HyperState, JointLGCP, ModelSpec, prepare_data  # noqa: E402
from .spde import SpdeParams, assemble_precision  # noqa: E402

__all__ = [
    "BEHAVIORS", "SPECIES", "MarkedPointPattern", "read_sightings", "write_sightings",
    "CovariateGrid", "DomainPolygon", "Mesh", "build_mesh", "dual_weights", "projector",
    "HyperState", "JointLGCP", "ModelSpec", "prepare_data", "SpdeParams", "assemble_precision",
]
