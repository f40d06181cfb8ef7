"""Temporal attention for feature clips.

Two mechanisms calibrate each frame using its two predecessors:

* spatial attention (``tsa``): queries come from the previous frame, keys
  from the frame before that, and values from the current frame.  Scores
  are row-softmaxed (each query row normalizes over keys) without any
  scaling factor, and the attended values pass through batch
  normalization.  The result has the frame's own shape so it can be added
  to the frame.
* channel attention (``tca``): sigmoid gates computed from the spatial
  means of the two temporal differences (current minus each predecessor),
  each pushed through a shared two-layer bottleneck, then averaged.

``calibrate`` applies both to every frame of a clip,
``out_l = (x_l + tsa(...)) * tca(...)``, clamping the predecessor indices
at the start of the sequence (frame 0 attends to itself).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .pooling import FeatureClip
from .tensor import (
    Affine,
    NormState,
    Parameter,
    ShapeError,
    Tensor,
    add,
    batch_norm,
    index_select,
    matmul,
    mean_over,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax_rows,
    sub,
    transpose,
)

__all__ = [
    "TsaParams",
    "TcaParams",
    "tsa",
    "tca",
    "calibrate",
    "calibrate_batch",
    "default_key_width",
    "default_reduction",
]


def default_key_width(channels: int) -> int:
    """Bottleneck width for queries and keys: a quarter of the channels."""
    return max(1, channels // 4)


def default_reduction(channels: int) -> int:
    """Largest divisor of ``channels`` not exceeding 16 (so the hidden
    width ``channels / r`` stays integral)."""
    for r in range(min(16, channels), 0, -1):
        if channels % r == 0:
            return r
    return 1


@dataclass
class TsaParams:
    """Parameters of the spatial attention: three channel maps and the
    output normalization.  Query and key maps share their output width."""

    value_map: Affine  # channels -> channels
    query_map: Affine  # channels -> key width
    key_map: Affine    # channels -> key width
    norm: NormState

    def __post_init__(self):
        if self.query_map.weight.shape[1] != self.key_map.weight.shape[1]:
            raise ShapeError("query and key maps must share their output width")
        if self.value_map.weight.shape[0] != self.value_map.weight.shape[1]:
            raise ShapeError("value map must preserve the channel count")

    @classmethod
    def init(cls, name: str, channels: int, rng: np.random.Generator,
             key_width: int | None = None, dtype=np.float32) -> "TsaParams":
        kw = default_key_width(channels) if key_width is None else key_width
        return cls(
            value_map=Affine.init(name + ".value", channels, channels, rng, dtype),
            query_map=Affine.init(name + ".query", channels, kw, rng, dtype),
            key_map=Affine.init(name + ".key", channels, kw, rng, dtype),
            norm=NormState.init(name + ".norm", channels, dtype),
        )

    def parameters(self) -> Iterable[Parameter]:
        yield from self.value_map.parameters()
        yield from self.query_map.parameters()
        yield from self.key_map.parameters()
        yield from self.norm.parameters()


@dataclass
class TcaParams:
    """Parameters of the channel attention bottleneck."""

    fc1: Affine  # channels -> channels / reduction
    fc2: Affine  # channels / reduction -> channels
    reduction: int

    def __post_init__(self):
        c = self.fc1.weight.shape[0]
        if c % self.reduction != 0:
            raise ShapeError(f"reduction {self.reduction} does not divide {c} channels")
        if self.fc1.weight.shape[1] != c // self.reduction:
            raise ShapeError("fc1 output width must be channels / reduction")
        if self.fc2.weight.shape != (c // self.reduction, c):
            raise ShapeError("fc2 must map the bottleneck back to the channel count")

    @classmethod
    def init(cls, name: str, channels: int, rng: np.random.Generator,
             reduction: int | None = None, dtype=np.float32) -> "TcaParams":
        r = default_reduction(channels) if reduction is None else reduction
        hidden = channels // r
        return cls(
            fc1=Affine.init(name + ".fc1", channels, hidden, rng, dtype),
            fc2=Affine.init(name + ".fc2", hidden, channels, rng, dtype),
            reduction=r,
        )

    def parameters(self) -> Iterable[Parameter]:
        yield from self.fc1.parameters()
        yield from self.fc2.parameters()


def _check_frames(*frames: Tensor) -> None:
    shape = frames[0].shape
    for f in frames:
        if f.ndim != 3:
            raise ShapeError(f"expected stacked (slabs, positions, channels), got {f.shape}")
        if f.shape != shape:
            raise ShapeError(f"frame shapes differ: {shape} vs {f.shape}")


def _tsa_stacked(prev2: Tensor, prev1: Tensor, cur: Tensor, p: TsaParams,
                 training: bool) -> Tensor:
    """Spatial attention over a stack of (M, N, C) frame triples."""
    _check_frames(prev2, prev1, cur)
    m, n, c = cur.shape
    queries = p.query_map(prev1)           # (M, N, k)
    keys = p.key_map(prev2)                # (M, N, k)
    values = p.value_map(cur)              # (M, N, C)
    scores = matmul(queries, transpose(keys))   # (M, N, N), raw, unscaled
    weights = softmax_rows(scores)
    attended = matmul(weights, values)     # (M, N, C)
    flat = reshape(attended, (m * n, c))
    normed = batch_norm(flat, p.norm, training)
    return reshape(normed, (m, n, c))


def _tca_stacked(prev2: Tensor, prev1: Tensor, cur: Tensor, p: TcaParams) -> Tensor:
    """Channel gates for a stack of frame triples -> (M, 1, C)."""
    _check_frames(prev2, prev1, cur)
    m, _, c = cur.shape

    def branch(ref: Tensor) -> Tensor:
        pooled = mean_over(sub(cur, ref), 1)                  # (M, C) spatial mean
        return sigmoid(p.fc2(relu(p.fc1(pooled))))

    gates = scale(add(branch(prev1), branch(prev2)), 0.5)
    return reshape(gates, (m, 1, c))


def tsa(prev2: Tensor, prev1: Tensor, cur: Tensor, p: TsaParams,
        training: bool = False) -> Tensor:
    """Spatial attention for one frame and its two predecessors, all (N, C).

    In training mode the normalization statistics are computed over this
    call's N positions alone; inside :func:`calibrate` all frames of the
    clip share one statistics pass instead.
    """
    for f in (prev2, prev1, cur):
        if f.ndim != 2:
            raise ShapeError(f"expected (positions, channels) frames, got {f.shape}")
    n, c = cur.shape
    out = _tsa_stacked(reshape(prev2, (1, n, c)), reshape(prev1, (1, n, c)),
                       reshape(cur, (1, n, c)), p, training)
    return reshape(out, (n, c))


def tca(prev2: Tensor, prev1: Tensor, cur: Tensor, p: TcaParams) -> Tensor:
    """Channel gates in (0, 1) for one frame triple; returns (1, C)."""
    for f in (prev2, prev1, cur):
        if f.ndim != 2:
            raise ShapeError(f"expected (positions, channels) frames, got {f.shape}")
    n, c = cur.shape
    out = _tca_stacked(reshape(prev2, (1, n, c)), reshape(prev1, (1, n, c)),
                       reshape(cur, (1, n, c)), p)
    return reshape(out, (1, c))


def _clamped_predecessors(length: int) -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(length, dtype=np.int64)
    return np.maximum(idx - 2, 0), np.maximum(idx - 1, 0)


def calibrate_batch(x: Tensor, tsa_p: TsaParams, tca_p: TcaParams,
                    training: bool = False) -> Tensor:
    """Calibrate every frame of a stacked (B, L, N, C) batch of clips.

    Frame l is combined with frames l-1 and l-2 (clamped to 0), so the first
    frames attend to themselves.  Training-mode normalization statistics are
    shared across all B*L frames of the call.
    """
    if x.ndim != 4:
        raise ShapeError(f"expected (clips, frames, positions, channels), got {x.shape}")
    b, l, n, c = x.shape
    i2, i1 = _clamped_predecessors(l)
    prev2 = reshape(index_select(x, 1, i2), (b * l, n, c))
    prev1 = reshape(index_select(x, 1, i1), (b * l, n, c))
    cur = reshape(x, (b * l, n, c))
    spatial = _tsa_stacked(prev2, prev1, cur, tsa_p, training)
    gates = _tca_stacked(prev2, prev1, cur, tca_p)
    out = mul(add(cur, spatial), gates)
    return reshape(out, (b, l, n, c))


def calibrate(clip: FeatureClip, tsa_p: TsaParams, tca_p: TcaParams,
              training: bool = False) -> FeatureClip:
    """Apply spatial and channel attention to every frame of a clip."""
    x = clip.stacked()
    out = calibrate_batch(reshape(x, (1,) + x.shape), tsa_p, tca_p, training)
    return FeatureClip.from_stacked(reshape(out, x.shape), hw=clip.hw)
