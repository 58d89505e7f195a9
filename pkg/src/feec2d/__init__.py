"""Finite element exterior calculus on 2D simplicial meshes with partial
boundary conditions: Whitney de Rham complexes, relative cohomology, the
mixed Hodge Laplace solver, and a boundary-respecting smoothing pipeline
(extension, distortion, variable-radius mollification, commuting projection).
"""

from .mesh import (
    BoundaryPartition,
    MeshError,
    MeshQuality,
    MeshSizeFunction,
    PatchSpecError,
    SimplicialMesh,
    build_mesh_size_function,
    make_box_mesh,
    mesh_from_json,
    mesh_quality,
    mesh_to_json,
    refine_uniform,
)
from .topology import (
    betti_relative,
    incidence_matrices,
    integer_rank,
    relative_complex,
    verify_poincare_lefschetz,
)
from .forms import FormField, constant_form, one_form, scalar_form, trig_form, two_form
from .whitney import (
    Cochain,
    FESpace,
    canonical_interpolant,
    exterior_derivative,
    l2_inner,
    l2_norm,
    mass_matrix,
    whitney_evaluate,
)
from .hodge import (
    DeRhamComplex,
    HarmonicBasis,
    HodgeError,
    SaddleSolution,
    harmonic_basis,
    hodge_decompose,
    poincare_constant,
    solve_mixed_hodge,
)

__version__ = "0.1.0"
