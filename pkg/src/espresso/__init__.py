"""Fixed-length spatio-temporal video projector toolkit.

A feature video ``[frames, patches, feat_dim]`` is compressed to exactly
``segments * (spatial_queries + temporal_queries)`` output tokens by
per-segment Q-Former pooling and compression, independent of video length.
Baseline projectors (per-token MLP, global query resampling, mean pooling),
an analytic cost model with an instrumented multiply-accumulate oracle, a
deterministic synthetic needle-in-a-haystack benchmark, toy training, and a
CLI round out the package.  Numerics run on float64 numpy arrays behind a
small reverse-mode gradient tape; hot kernels optionally dispatch to a
compiled extension (``ESPRESSO_KERNELS`` selects the backend).
"""

from .attention import (
    PE_DISABLED,
    PE_MODES,
    PE_SINUSOIDAL,
    PositionalEncoding,
    QFormerParams,
    qformer_forward,
    sinusoidal_table,
)
from .costmodel import (
    DEFAULT_FRAME_GRID,
    ProjectorDescriptor,
    RuntimeReport,
    ScalingRow,
    build_projector,
    flop_estimate,
    measure_runtime,
    param_count,
    projector_tokens,
    scaling_report,
    token_count,
)
from .kernels import active_backend, available_backends, set_backend
from .prng import Prng
from .projectors import (
    KIND_ESPRESSO,
    KIND_MEANPOOL,
    KIND_MLP,
    KIND_PR,
    KINDS,
    EspressoConfig,
    EspressoParams,
    FeatureVideo,
    ProjectorOutput,
    espresso_forward,
    load_feature_video,
    meanpool_forward,
    mlp_forward,
    pr_forward,
    save_feature_video,
)
from .synthbench import (
    NeedleComposite,
    NeedleDataset,
    SceneSpec,
    SweepResult,
    build_needle_composite,
    compression_sweep,
    gen_scene,
    make_needle_dataset,
    pearson,
)
from .tensor import (
    DenseTensor,
    GradTape,
    MacCounter,
    ShapeError,
    count_macs,
    finite_diff_grad_check,
)
from .training import (
    AdamParams,
    NeedleModel,
    ProbeParams,
    TrainReport,
    cross_entropy,
    evaluate_accuracy,
    gradient_suite,
    probe_forward,
    train_needle,
)

__version__ = "0.1.0"

__all__ = [
    "AdamParams", "DEFAULT_FRAME_GRID", "DenseTensor", "EspressoConfig",
    "EspressoParams", "FeatureVideo", "GradTape", "KINDS", "KIND_ESPRESSO",
    "KIND_MEANPOOL", "KIND_MLP", "KIND_PR", "MacCounter", "NeedleComposite",
    "NeedleDataset", "NeedleModel", "PE_DISABLED", "PE_MODES", "PE_SINUSOIDAL",
    "PositionalEncoding", "Prng", "ProbeParams", "ProjectorDescriptor",
    "ProjectorOutput", "QFormerParams", "RuntimeReport", "ScalingRow",
    "SceneSpec", "ShapeError", "SweepResult", "TrainReport",
    "active_backend", "available_backends", "build_needle_composite",
    "build_projector", "compression_sweep", "count_macs", "cross_entropy",
    "espresso_forward", "evaluate_accuracy", "finite_diff_grad_check",
    "flop_estimate", "gen_scene", "gradient_suite", "load_feature_video",
    "make_needle_dataset", "meanpool_forward", "measure_runtime",
    "mlp_forward", "param_count", "pearson", "pr_forward", "probe_forward",
    "projector_tokens", "qformer_forward", "save_feature_video",
    "scaling_report", "set_backend", "sinusoidal_table", "token_count",
    "train_needle",
]
