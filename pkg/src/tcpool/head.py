"""Classification heads over feature clips.

Three variants share one skeleton:

* ``gap``: global average pooling straight into the classifier.
* ``gcp``: channel projection, orderless covariance pool, iterative matrix
  square root, triangulation, classifier.
* ``tcp``: like ``gcp`` but with attention calibration and a temporal
  convolution between projection and covariance, so the pooled second
  moments carry frame-order information.

Heads consume pre-extracted features shaped (frames, positions, channels),
never raw video.  All forward paths run on stacked batches internally; the
per-clip functions are thin wrappers.  Parameter and floating-point-cost
accounting is exact by enumeration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import TcaParams, TsaParams, calibrate_batch, default_key_width, default_reduction
from .pooling import FeatureClip, stacked_cov, tri_len, upper_triangle
from .spectral import sqrt_batch
from .tconv import TemporalKernel, default_kernel_size, tcp_pool_batch
from .tensor import (
    Affine,
    Parameter,
    ShapeError,
    Tensor,
    dropout,
    mean_over,
    reshape,
)

__all__ = [
    "HeadConfig",
    "HeadParams",
    "init_head",
    "head_logits_batch",
    "representation_batch",
    "tcp_forward",
    "baseline_forward",
    "clip_representation",
    "rep_dim",
    "count_params",
    "param_breakdown",
    "count_flops",
    "flop_breakdown",
    "canonical_variant",
]

_VARIANT_ALIASES = {"gap": "gap", "gcp": "gcp", "plain_gcp_mpn": "gcp", "tcp": "tcp"}


def canonical_variant(name: str) -> str:
    v = _VARIANT_ALIASES.get(str(name).strip().lower())
    if v is None:
        raise ValueError(f"unknown variant {name!r}; expected gap, gcp, or tcp")
    return v


@dataclass
class HeadConfig:
    """Static shape and behavior of a head.

    ``kernel_size`` of None resolves from the clip length (5 taps for
    clips up to 8 frames, 9 beyond).  ``positions`` is the number of
    spatial sites per frame (for 224x224 inputs through a stride-16
    backbone that is 14*14 = 196).
    """

    variant: str = "tcp"
    channels: int = 2048
    proj_dim: int = 128
    frames: int = 8
    positions: int = 196
    kernel_size: int | None = None
    sqrt_iterations: int = 3
    num_classes: int = 400
    use_attention: bool = True
    centered: bool = False
    dropout_rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.variant = canonical_variant(self.variant)
        if self.proj_dim > self.channels:
            raise ShapeError(f"projection width {self.proj_dim} exceeds {self.channels} channels")
        if self.frames < 1 or self.positions < 1 or self.channels < 1:
            raise ShapeError("frames, positions, and channels must be positive")
        k = self.resolved_kernel_size
        if k < 1 or k % 2 == 0:
            raise ShapeError(f"kernel size must be odd and positive, got {k}")
        if self.sqrt_iterations < 1:
            raise ShapeError("sqrt_iterations must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ShapeError(f"dropout rate must be in [0, 1), got {self.dropout_rate}")
        if self.num_classes < 1:
            raise ShapeError("num_classes must be positive")

    @property
    def resolved_kernel_size(self) -> int:
        if self.kernel_size is None:
            return default_kernel_size(self.frames)
        return int(self.kernel_size)


def rep_dim(cfg: HeadConfig) -> int:
    """Width of the vector handed to the classifier."""
    if cfg.variant == "gap":
        return cfg.channels
    return tri_len(cfg.proj_dim)


@dataclass
class HeadParams:
    """All trainable state of one head.  Groups unused by the variant are None."""

    config: HeadConfig
    proj: Affine | None
    tsa: TsaParams | None
    tca: TcaParams | None
    kernel: TemporalKernel | None
    classifier: Affine

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        if self.proj is not None:
            out.extend(self.proj.parameters())
        if self.tsa is not None:
            out.extend(self.tsa.parameters())
        if self.tca is not None:
            out.extend(self.tca.parameters())
        if self.kernel is not None:
            out.extend(self.kernel.parameters())
        out.extend(self.classifier.parameters())
        return out

    def named(self) -> dict[str, Parameter]:
        table: dict[str, Parameter] = {}
        for p in self.parameters():
            if p.name in table:
                raise ValueError(f"duplicate parameter name {p.name!r}")
            table[p.name] = p
        return table


def init_head(cfg: HeadConfig, dtype=np.float32) -> HeadParams:
    """Deterministically initialize a head from its config seed.

    Weights draw fan-in-scaled uniforms in a fixed group order (projection,
    spatial attention, channel attention, kernel, classifier); biases start
    at zero, normalization at scale one / shift zero, and the kernel's
    center tap near the identity.
    """
    rng = np.random.default_rng(cfg.seed)
    proj = tsa_p = tca_p = kernel = None
    if cfg.variant in ("gcp", "tcp"):
        proj = Affine.init("proj", cfg.channels, cfg.proj_dim, rng, dtype)
    if cfg.variant == "tcp" and cfg.use_attention:
        tsa_p = TsaParams.init("tsa", cfg.proj_dim, rng, dtype=dtype)
        tca_p = TcaParams.init("tca", cfg.proj_dim, rng, dtype=dtype)
    if cfg.variant == "tcp":
        kernel = TemporalKernel.init("kernel", cfg.proj_dim, cfg.resolved_kernel_size,
                                     rng, dtype)
    classifier = Affine.init("classifier", rep_dim(cfg), cfg.num_classes, rng, dtype)
    return HeadParams(config=cfg, proj=proj, tsa=tsa_p, tca=tca_p,
                      kernel=kernel, classifier=classifier)


def _check_batch(x: Tensor, cfg: HeadConfig) -> None:
    if x.ndim != 4:
        raise ShapeError(f"expected (clips, frames, positions, channels), got {x.shape}")
    if x.shape[3] != cfg.channels:
        raise ShapeError(f"clip has {x.shape[3]} channels, head expects {cfg.channels}")


def representation_batch(x: Tensor, params: HeadParams, training: bool = False,
                         rng: np.random.Generator | None = None) -> Tensor:
    """Pooled representation of a stacked (B, L, N, C) batch -> (B, m)."""
    cfg = params.config
    _check_batch(x, cfg)
    b, l, n, _ = x.shape
    if cfg.variant == "gap":
        return mean_over(x, (1, 2))
    xp = params.proj(x)  # (B, L, N, d)
    d = cfg.proj_dim
    if cfg.variant == "tcp":
        if params.tsa is not None:
            xp = calibrate_batch(xp, params.tsa, params.tca, training)
        pooled = tcp_pool_batch(xp, params.kernel, centered=cfg.centered)
    else:
        covs = stacked_cov(reshape(xp, (b * l, n, d)), centered=cfg.centered)
        pooled = mean_over(reshape(covs, (b, l, d, d)), 1)
    root = sqrt_batch(pooled, cfg.sqrt_iterations)
    return upper_triangle(root)


def head_logits_batch(x: Tensor, params: HeadParams, training: bool = False,
                      rng: np.random.Generator | None = None) -> Tensor:
    """Class logits for a stacked batch of clips -> (B, num_classes)."""
    cfg = params.config
    rep = representation_batch(x, params, training, rng)
    rep = dropout(rep, cfg.dropout_rate, rng, training)
    return params.classifier(rep)


def _clip_to_batch(clip: FeatureClip) -> Tensor:
    x = clip.stacked()
    return reshape(x, (1,) + x.shape)


def tcp_forward(clip: FeatureClip, params: HeadParams, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
    """Logits of the temporal covariance head for one clip -> (1, classes)."""
    if params.config.variant != "tcp":
        raise ValueError(f"parameters are for variant {params.config.variant!r}")
    return head_logits_batch(_clip_to_batch(clip), params, training, rng)


def baseline_forward(clip: FeatureClip, variant: str, params: HeadParams,
                     training: bool = False,
                     rng: np.random.Generator | None = None) -> Tensor:
    """Logits of an orderless baseline head for one clip -> (1, classes)."""
    variant = canonical_variant(variant)
    if variant == "tcp":
        raise ValueError("use tcp_forward for the tcp variant")
    if params.config.variant != variant:
        raise ValueError(f"parameters are for variant {params.config.variant!r}, "
                         f"requested {variant!r}")
    return head_logits_batch(_clip_to_batch(clip), params, training, rng)


def clip_representation(clip: FeatureClip, params: HeadParams) -> Tensor:
    """Eval-mode pooled representation of one clip -> (1, m)."""
    return representation_batch(_clip_to_batch(clip), params, training=False)


# ---------------------------------------------------------------------------
# Accounting


def param_breakdown(params: HeadParams) -> dict[str, int]:
    """Trainable scalar count per component group, by enumeration."""
    groups = {
        "projection": params.proj,
        "spatial_attention": params.tsa,
        "channel_attention": params.tca,
        "temporal_kernel": params.kernel,
        "classifier": params.classifier,
    }
    out: dict[str, int] = {}
    for name, group in groups.items():
        if group is None:
            continue
        out[name] = sum(p.size for p in group.parameters() if p.trainable)
    out["total"] = sum(v for k, v in out.items() if k != "total")
    return out


def count_params(params: HeadParams) -> int:
    return param_breakdown(params)["total"]


def flop_breakdown(cfg: HeadConfig) -> dict[str, int]:
    """Eval-mode floating-point operations for one clip, by stage.

    Convention: a matrix product of shapes (m, k) @ (k, n) costs 2*m*k*n
    (multiply and add counted separately); elementwise transcendentals
    (exp, sigmoid) count 4 each; plain elementwise arithmetic counts 1.
    """
    l, n, c = cfg.frames, cfg.positions, cfg.channels
    d, k, classes = cfg.proj_dim, cfg.resolved_kernel_size, cfg.num_classes
    out: dict[str, int] = {}
    if cfg.variant == "gap":
        out["pool"] = l * n * c + c
        out["classifier"] = 2 * c * classes + classes
        out["total"] = sum(out.values())
        return out

    out["projection"] = 2 * l * n * c * d + l * n * d
    if cfg.variant == "tcp" and cfg.use_attention:
        kw = default_key_width(d)
        hidden = d // default_reduction(d)
        spatial = (
            2 * l * n * d * d + l * n * d      # values
            + 2 * (2 * l * n * d * kw + l * n * kw)  # queries and keys
            + 2 * l * n * n * kw               # scores
            + 4 * l * n * n                    # softmax
            + 2 * l * n * n * d                # attend
            + 4 * l * n * d                    # normalization
        )
        channel = 2 * (
            2 * l * n * d                      # difference + spatial mean
            + 2 * l * d * hidden + l * hidden  # fc1
            + l * hidden                       # relu
            + 2 * l * hidden * d + l * d       # fc2
            + 4 * l * d                        # sigmoid
        ) + 2 * l * d                          # halved sum of branches
        out["attention"] = spatial + channel + 2 * l * n * d  # add + gate
    if cfg.variant == "tcp":
        out["temporal_conv"] = k * 2 * l * n * d * d + (k - 1) * l * n * d
    out["covariance"] = 2 * l * n * d * d + l * d * d + l * d * d  # gram + scale + mean
    # Square root: four squarings bound the top of the spectrum for the
    # pre-scale, the first iteration folds R_0 = I into one product, and
    # later iterations take three products each, plus scaling and
    # symmetrization.
    matmuls = 4 + (1 if cfg.sqrt_iterations == 1 else 1 + 3 * (cfg.sqrt_iterations - 1))
    extra = (2 if cfg.sqrt_iterations == 1 else 3 * cfg.sqrt_iterations) + 5
    out["matrix_sqrt"] = matmuls * 2 * d ** 3 + extra * d * d + 4 * d * d
    m = tri_len(d)
    out["classifier"] = 2 * m * classes + classes
    out["total"] = sum(out.values())
    return out


def count_flops(cfg: HeadConfig) -> int:
    return flop_breakdown(cfg)["total"]
