"""Temporal covariance pooling.

A temporal kernel is an odd-length bank of d x d tap matrices indexed by
offsets -(size-1)/2 .. +(size-1)/2.  Convolving a clip with it mixes each
frame with its neighbors in feature space:

    y_l = sum_j x_{clamp(l+j)} @ W_j          (replicate padding at the ends)

``tcp_pool_efficient`` averages the per-frame second moments of the
convolved clip, (1/L) sum_l (1/N) y_lᵀ y_l.  ``tcp_pool_expanded`` computes
the same quantity the long way, as tap-pair weighted sums of intra-frame
and cross-frame covariances,

    (1/L) sum_l sum_{j,j'} W_jᵀ C_{l+j, l+j'} W_{j'},
    C_{a,b} = (1/N) x_aᵀ x_b,

enumerating every ordered tap pair.  The two routes are algebraically
identical; keeping both makes each one an oracle for the other.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .pooling import CovarianceMatrix, FeatureClip, stacked_cov
from .tensor import (
    Parameter,
    ShapeError,
    Tensor,
    add,
    index_select,
    matmul,
    mean_over,
    reshape,
    scale,
    sub,
    transpose,
)

__all__ = [
    "TemporalKernel",
    "temporal_conv",
    "temporal_conv_batch",
    "tcp_pool_efficient",
    "tcp_pool_batch",
    "tcp_pool_expanded",
    "default_kernel_size",
]


def default_kernel_size(frames: int) -> int:
    """Kernel width that works well at a given clip length: 5 taps for
    clips up to 8 frames, 9 for longer ones."""
    return 5 if frames <= 8 else 9


@dataclass
class TemporalKernel:
    """Odd-length bank of square tap matrices, ordered by offset."""

    taps: list[Parameter]

    def __post_init__(self):
        if len(self.taps) < 1 or len(self.taps) % 2 == 0:
            raise ShapeError(f"kernel size must be odd and positive, got {len(self.taps)}")
        d = self.taps[0].shape
        if len(d) != 2 or d[0] != d[1]:
            raise ShapeError(f"taps must be square matrices, got {d}")
        for t in self.taps:
            if t.shape != d:
                raise ShapeError("all taps must share one shape")

    @property
    def size(self) -> int:
        return len(self.taps)

    @property
    def radius(self) -> int:
        return (len(self.taps) - 1) // 2

    @property
    def width(self) -> int:
        return self.taps[0].shape[0]

    def offsets(self) -> range:
        return range(-self.radius, self.radius + 1)

    def tap(self, offset: int) -> Parameter:
        return self.taps[offset + self.radius]

    @classmethod
    def init(cls, name: str, width: int, size: int, rng: np.random.Generator,
             dtype=np.float32, noise: float = 0.01) -> "TemporalKernel":
        """Center tap starts near the identity, neighbors near zero, so the
        freshly initialized kernel is approximately a pass-through."""
        if size < 1 or size % 2 == 0:
            raise ShapeError(f"kernel size must be odd and positive, got {size}")
        radius = (size - 1) // 2
        taps = []
        for j in range(-radius, radius + 1):
            w = noise * rng.standard_normal((width, width))
            if j == 0:
                w = w + np.eye(width)
            taps.append(Parameter(f"{name}.tap{j:+d}", Tensor._wrap(w.astype(dtype))))
        return cls(taps)

    def parameters(self) -> Iterable[Parameter]:
        yield from self.taps


def _check_width(channels: int, kernel: TemporalKernel) -> None:
    if channels != kernel.width:
        raise ShapeError(f"clip has {channels} channels but kernel taps are "
                         f"{kernel.width}x{kernel.width}")


def temporal_conv_batch(x: Tensor, kernel: TemporalKernel) -> Tensor:
    """Convolve a stacked (B, L, N, d) batch along the frame axis."""
    if x.ndim != 4:
        raise ShapeError(f"expected (clips, frames, positions, channels), got {x.shape}")
    b, l, n, d = x.shape
    _check_width(d, kernel)
    idx = np.arange(l, dtype=np.int64)
    out = None
    for j in kernel.offsets():
        shifted = index_select(x, 1, np.clip(idx + j, 0, l - 1))
        flat = reshape(shifted, (b * l * n, d))
        term = matmul(flat, kernel.tap(j).tensor)
        out = term if out is None else add(out, term)
    return reshape(out, (b, l, n, d))


def temporal_conv(clip: FeatureClip, kernel: TemporalKernel) -> FeatureClip:
    """Convolve a clip along time; output length equals input length."""
    x = clip.stacked()
    y = temporal_conv_batch(reshape(x, (1,) + x.shape), kernel)
    return FeatureClip.from_stacked(reshape(y, x.shape), hw=clip.hw)


def tcp_pool_batch(x: Tensor, kernel: TemporalKernel, centered: bool = False) -> Tensor:
    """Temporal covariance pool of a stacked (B, L, N, d) batch -> (B, d, d).

    Covariance and frame averaging reuse the shared summation path
    (:func:`tcpool.pooling.stacked_cov` + mean over frames), so with an
    identity single-tap kernel the result is bit-identical to the plain
    covariance pool.
    """
    if x.ndim != 4:
        raise ShapeError(f"expected (clips, frames, positions, channels), got {x.shape}")
    b, l, n, d = x.shape
    y = temporal_conv_batch(x, kernel)
    covs = stacked_cov(reshape(y, (b * l, n, d)), centered=centered)
    return mean_over(reshape(covs, (b, l, d, d)), 1)


def tcp_pool_efficient(clip: FeatureClip, kernel: TemporalKernel,
                       centered: bool = False) -> CovarianceMatrix:
    """Feature-space route: convolve along time, then average the per-frame
    second moments.  Cost is one pass of the kernel over the clip."""
    x = clip.stacked()
    pooled = tcp_pool_batch(reshape(x, (1,) + x.shape), kernel, centered=centered)
    d = kernel.width
    return CovarianceMatrix(reshape(pooled, (d, d)), centered=centered, source="pooled")


def tcp_pool_expanded(clip: FeatureClip, kernel: TemporalKernel,
                      centered: bool = False) -> CovarianceMatrix:
    """Covariance-space route: for every frame, enumerate all ordered tap
    pairs (j, j') and sum W_jᵀ C_{l+j, l+j'} W_{j'}, then average over
    frames.  Quadratic in kernel size; used to verify the efficient route.
    """
    x = clip.stacked()
    l, n, d = x.shape
    _check_width(d, kernel)
    if centered:
        # Center each frame once so every cross product uses centered rows.
        mu = reshape(mean_over(x, 1), (l, 1, d))
        x = sub(x, mu)
    frames = [reshape(index_select(x, 0, np.array([i], dtype=np.int64)), (n, d))
              for i in range(l)]
    total = None
    for target in range(l):
        for j in kernel.offsets():
            a = frames[min(max(target + j, 0), l - 1)]
            wj = kernel.tap(j).tensor
            for jp in kernel.offsets():
                b = frames[min(max(target + jp, 0), l - 1)]
                wjp = kernel.tap(jp).tensor
                cross = scale(matmul(transpose(a), b), 1.0 / n)  # C_{l+j, l+j'}
                term = matmul(matmul(transpose(wj), cross), wjp)
                total = term if total is None else add(total, term)
    pooled = scale(total, 1.0 / l)
    return CovarianceMatrix(pooled, centered=centered, source="pooled")
