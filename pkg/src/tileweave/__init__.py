"""Cycle-consistent mosaic stitching from multi-candidate pairwise registrations."""

from .align import (
    AlignmentResult,
    SimpleEdge,
    SimpleGraph,
    align,
    global_align,
    multigraph_dot,
    prune,
    rms_error,
    simple_graph_dot,
)
from .errors import RegistrationError, SchemaError, StitchError
from .graph import (
    AlignmentMultigraph,
    CandidateTransform,
    EdgeBundle,
    TileNode,
    add_bundle,
    constraint_matrix,
    load_graph,
    nullspace_basis,
    save_graph,
)
from .registration import (
    FeatureSet,
    PairRegistrar,
    RegistrationParams,
    correlation_surface,
    detect_features,
    extract_candidates,
    register_all,
    register_pair,
    sequential_ransac,
)
from .render import render, save_png
from .solver import SolveReport, SolverConfig, SolverState, solve
from .synth import (
    GroundTruth,
    Region,
    SceneSpec,
    cut_tiles,
    evaluate,
    generate_scene,
    run_baseline,
)

__all__ = [
    "AlignmentMultigraph",
    "AlignmentResult",
    "CandidateTransform",
    "EdgeBundle",
    "FeatureSet",
    "GroundTruth",
    "PairRegistrar",
    "Region",
    "RegistrationError",
    "RegistrationParams",
    "SceneSpec",
    "SchemaError",
    "SimpleEdge",
    "SimpleGraph",
    "SolveReport",
    "SolverConfig",
    "SolverState",
    "StitchError",
    "TileNode",
    "add_bundle",
    "align",
    "constraint_matrix",
    "correlation_surface",
    "cut_tiles",
    "detect_features",
    "evaluate",
    "extract_candidates",
    "generate_scene",
    "global_align",
    "load_graph",
    "multigraph_dot",
    "nullspace_basis",
    "prune",
    "register_all",
    "register_pair",
    "render",
    "rms_error",
    "run_baseline",
    "save_graph",
    "save_png",
    "sequential_ransac",
    "simple_graph_dot",
    "solve",
]

__version__ = "0.1.0"
