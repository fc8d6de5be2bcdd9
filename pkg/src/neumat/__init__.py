"""Neural material toolkit.

Renders, fits and scores NeuMIP-style neural materials: a differentiable
flat-sample renderer with analytic gradients, the two-phase virtual
gonioreflectometer trajectory, an analytic heightfield reference simulator,
Adam-based direct optimization, and the residual-parallax-coherence (RPC)
sequence metric.
"""

# BLAS must stay single-threaded: the package parallelizes at the task level
# (frames / ray batches) and bit-exact results across worker counts require a
# fixed accumulation order inside every kernel.
try:
    import threadpoolctl as _threadpoolctl

    _BLAS_LIMIT = _threadpoolctl.threadpool_limits(limits=1, user_api="blas")
except Exception:  # pragma: no cover - threadpoolctl is a hard dep, but be safe
    _BLAS_LIMIT = None

from .material import (
    FeatureTexture,
    GradBuffer,
    Mlp,
    NeuralMaterial,
    eval_offset,
    eval_reflectance,
    eval_reflectance_backward,
    random_material,
    sample_bilinear,
)
from .renderer import (
    CameraPose,
    PointLight,
    default_camera_distance,
    frame_samples,
    render,
    render_backward,
    render_offset_map,
    render_sequence,
    trace_pixel,
)
from .trajectory import (
    Trajectory,
    TrajectoryFrame,
    make_gonio_trajectory,
    make_validation_grid,
    subsample_frames,
)
from .synthref import (
    AnalyticMaterial,
    make_test_materials,
    render_reference,
    render_reference_sequence,
    shade,
    trace_heightfield,
)
from .fitter import FitConfig, FitReport, evaluate, fit, fit_universal
from .rpc import (
    RpcReport,
    baseline,
    rectify,
    robust_mask,
    rpc_score,
    spearman,
    tvl1_flow,
)

__version__ = "0.1.0"

__all__ = [
    "FeatureTexture",
    "Mlp",
    "NeuralMaterial",
    "GradBuffer",
    "sample_bilinear",
    "eval_offset",
    "eval_reflectance",
    "eval_reflectance_backward",
    "random_material",
    "CameraPose",
    "PointLight",
    "trace_pixel",
    "frame_samples",
    "render",
    "render_backward",
    "render_offset_map",
    "render_sequence",
    "default_camera_distance",
    "Trajectory",
    "TrajectoryFrame",
    "make_gonio_trajectory",
    "make_validation_grid",
    "subsample_frames",
    "AnalyticMaterial",
    "shade",
    "trace_heightfield",
    "render_reference",
    "render_reference_sequence",
    "make_test_materials",
    "FitConfig",
    "FitReport",
    "fit",
    "fit_universal",
    "evaluate",
    "rectify",
    "baseline",
    "robust_mask",
    "tvl1_flow",
    "rpc_score",
    "spearman",
    "RpcReport",
]
