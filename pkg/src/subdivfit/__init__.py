"""Subdivision-surface compression and smooth shape analysis.

Fit a Catmull-Clark control mesh to a dense triangle mesh or an oriented
point cloud with a robust majorize-minimize energy, then run spectral
shape analysis (Laplace-Beltrami eigenfunctions, wave-kernel signatures,
heat-method geodesics, functional maps) directly on the compressed
representation.
"""

__version__ = "0.1.0"

from .errors import GeometryError, MeshFormatError, SubdivFitError, TopologyError
from .mesh import PointCloud, QuadControlMesh, TriMesh
from .halfedge import HalfedgeTopology, build_halfedge
from .meshio import (
    load_mesh,
    load_mesh_with_fields,
    load_point_cloud,
    save_mesh,
    save_mesh_with_fields,
    save_point_cloud,
)
from .subdivision import (
    cc_subdivide,
    composed_subdivision_matrix,
    descend_param,
    limit_stencil_matrix,
    refine_for_visualization,
    subdivision_matrix,
)
from .evaluation import (
    JetBatch,
    LimitEvaluator,
    SurfaceJet,
    SurfaceParam,
    eval_limit,
    sample_grid,
    sample_surface,
)
from .simplify import qem_collapse
from .quadify import EdgePairingCost, TriToQuadResult, pairing_cost, tri_to_quad
from .fitting import (
    Correspondences,
    FitConfig,
    FitResult,
    MMWeights,
    QuadraticSystem,
    assemble_quadratic,
    cg_solve,
    energy,
    fit,
    mm_weights,
    point_surface_distance,
    quad_distance_model,
    quad_distance_models,
    regularizer_matrix,
    update_correspondences,
)
from .fem import (
    OperatorMatrices,
    QuadratureRule,
    SpectralBasis,
    assemble,
    eigensolve,
    first_fundamental,
)
from .analysis import (
    FunctionalMap,
    GeodesicField,
    WKSDescriptor,
    functional_map,
    heat_geodesic,
    point_map,
    wks,
)
