"""Differentiable temporal covariance pooling for video feature clips.

A small numpy-backed library with its own reverse-mode tape.  It builds
clip-level representations from frame feature maps in three flavors:
global average pooling, covariance pooling with an iterative matrix
square root, and temporal covariance pooling (attention calibration
over neighboring frames followed by a temporal covariance mixed across
frames).  Ships a CLI (``tcpool``), binary tensor/clip file formats, a
desk-scale synthetic trainer, and scikit-learn wrappers.
"""

from .attention import TcaParams, TsaParams, calibrate, calibrate_batch, tca, tsa
from .estimators import ClipClassifier, ClipPooler, check_clip_array
from .head import (
    HeadConfig,
    HeadParams,
    baseline_forward,
    canonical_variant,
    clip_representation,
    count_flops,
    count_params,
    flop_breakdown,
    head_logits_batch,
    init_head,
    param_breakdown,
    rep_dim,
    representation_batch,
    tcp_forward,
)
from .io import (
    FormatError,
    load_checkpoint,
    read_clip,
    read_tensor,
    save_checkpoint,
    write_clip,
    write_tensor,
)
from .pooling import (
    CovarianceMatrix,
    FeatureClip,
    PooledRepresentation,
    cross_cov,
    frame_cov,
    gap,
    plain_gcp,
    stacked_cov,
    tri_len,
    triangulate,
    upper_triangle,
)
from .spectral import (
    JacobiConvergenceError,
    SqrtResult,
    eig_sqrt_oracle,
    jacobi_eigh,
    newton_schulz_sqrt,
    sqrt_batch,
)
from .tconv import (
    TemporalKernel,
    temporal_conv,
    temporal_conv_batch,
    tcp_pool_batch,
    tcp_pool_efficient,
    tcp_pool_expanded,
)
from .tensor import (
    DOUBLE,
    SINGLE,
    Affine,
    IntegrityError,
    NormState,
    Parameter,
    ShapeError,
    Tape,
    Tensor,
    batch_norm,
    dropout,
    grad_check,
)
from .train import (
    OptimState,
    SyntheticSpec,
    TrainResult,
    TrainingDiverged,
    accuracy,
    cross_entropy,
    fit_head,
    make_dataset,
    sgd_step,
    split_train_val,
    train_loop,
)

__version__ = "0.1.0"

__all__ = [
    "Affine", "ClipClassifier", "ClipPooler", "CovarianceMatrix", "DOUBLE",
    "FeatureClip", "FormatError", "HeadConfig", "HeadParams",
    "IntegrityError", "JacobiConvergenceError", "NormState", "OptimState",
    "Parameter", "PooledRepresentation", "ShapeError", "SINGLE",
    "SqrtResult", "SyntheticSpec", "Tape", "TcaParams", "TemporalKernel",
    "Tensor", "TrainResult", "TrainingDiverged", "TsaParams", "accuracy",
    "baseline_forward", "batch_norm", "calibrate", "calibrate_batch",
    "canonical_variant", "check_clip_array", "clip_representation",
    "count_flops", "count_params", "cross_cov", "cross_entropy", "dropout",
    "eig_sqrt_oracle", "fit_head", "flop_breakdown", "frame_cov", "gap",
    "grad_check", "head_logits_batch", "init_head", "jacobi_eigh",
    "load_checkpoint", "make_dataset", "newton_schulz_sqrt",
    "param_breakdown", "plain_gcp", "read_clip", "read_tensor", "rep_dim",
    "representation_batch", "save_checkpoint", "sgd_step", "split_train_val",
    "sqrt_batch", "stacked_cov", "tca", "tcp_forward", "tcp_pool_batch",
    "tcp_pool_efficient", "tcp_pool_expanded", "temporal_conv",
    "temporal_conv_batch", "train_loop", "tri_len", "triangulate", "tsa",
    "upper_triangle", "write_clip", "write_tensor",
]
