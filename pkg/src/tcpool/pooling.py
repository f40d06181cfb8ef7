"""Clip containers and orderless pooling: global average pooling, per-frame
second-moment (covariance) matrices, their orderless average over frames, and
triangulated vectorization of symmetric matrices.

A *feature clip* is a sequence of L frames, each an N x C matrix of N spatial
feature vectors.  Global average pooling and the plain covariance pool are
invariant to frame order; everything temporal lives in other modules.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import (
    IntegrityError,
    ShapeError,
    Tensor,
    matmul,
    mean_over,
    record_op,
    reshape,
    scale,
    stack,
    sub,
    transpose,
)

__all__ = [
    "FeatureClip",
    "CovarianceMatrix",
    "PooledRepresentation",
    "gap",
    "frame_cov",
    "cross_cov",
    "plain_gcp",
    "triangulate",
    "stacked_cov",
    "upper_triangle",
    "tri_len",
]


class FeatureClip:
    """Ordered sequence of frames, each an (N, C) tensor.

    May be built from a list of frames or from one stacked (L, N, C) tensor;
    the latter is what internal pipelines produce.  ``stacked()`` is the
    differentiable accessor; ``frame(i)`` returns a read view for
    inspection (differentiable only for clips built from frames).
    """

    def __init__(self, frames: Sequence[Tensor], hw: tuple | None = None):
        frames = list(frames)
        if not frames:
            raise ShapeError("a clip needs at least one frame")
        for f in frames:
            if not isinstance(f, Tensor):
                raise TypeError("frames must be Tensors")
            if f.ndim != 2:
                raise ShapeError(f"frames must be (positions, channels), got {f.shape}")
            if f.shape != frames[0].shape:
                raise ShapeError(f"frame shapes differ: {frames[0].shape} vs {f.shape}")
            if f.dtype != frames[0].dtype:
                raise TypeError("frames must share one dtype")
        self._frames: list[Tensor] | None = frames
        self._stacked: Tensor | None = None
        self.hw = self._check_hw(hw, frames[0].shape[0])

    @staticmethod
    def _check_hw(hw, positions: int):
        if hw is None:
            return None
        h, w = int(hw[0]), int(hw[1])
        if h * w != positions:
            raise ShapeError(f"spatial size {h}x{w} != {positions} positions")
        return (h, w)

    @classmethod
    def from_stacked(cls, stacked: Tensor, hw: tuple | None = None) -> "FeatureClip":
        if stacked.ndim != 3:
            raise ShapeError(f"stacked clip must be (frames, positions, channels), got {stacked.shape}")
        if stacked.shape[0] < 1:
            raise ShapeError("a clip needs at least one frame")
        obj = object.__new__(cls)
        obj._frames = None
        obj._stacked = stacked
        obj.hw = cls._check_hw(hw, stacked.shape[1])
        return obj

    @classmethod
    def from_array(cls, arr: np.ndarray, hw: tuple | None = None, dtype=None) -> "FeatureClip":
        return cls.from_stacked(Tensor(arr, dtype=dtype), hw=hw)

    @property
    def length(self) -> int:
        return self._stacked.shape[0] if self._frames is None else len(self._frames)

    @property
    def positions(self) -> int:
        return self._stacked.shape[1] if self._frames is None else self._frames[0].shape[0]

    @property
    def channels(self) -> int:
        return self._stacked.shape[2] if self._frames is None else self._frames[0].shape[1]

    @property
    def dtype(self) -> np.dtype:
        return self._stacked.dtype if self._frames is None else self._frames[0].dtype

    def frame(self, i: int) -> Tensor:
        if not 0 <= i < self.length:
            raise IndexError(f"frame {i} out of range for length {self.length}")
        if self._frames is not None:
            return self._frames[i]
        return Tensor._wrap(self._stacked.data[i])

    def stacked(self) -> Tensor:
        if self._stacked is not None:
            return self._stacked
        return stack(self._frames)

    def reversed(self) -> "FeatureClip":
        frames = [self.frame(i) for i in range(self.length - 1, -1, -1)]
        return FeatureClip(frames, hw=self.hw)

    def permuted(self, order: Sequence[int]) -> "FeatureClip":
        order = list(order)
        if sorted(order) != list(range(self.length)):
            raise ShapeError(f"not a permutation of {self.length} frames: {order}")
        return FeatureClip([self.frame(i) for i in order], hw=self.hw)

    def __repr__(self) -> str:
        return (f"FeatureClip(frames={self.length}, positions={self.positions}, "
                f"channels={self.channels})")


@dataclass
class CovarianceMatrix:
    """A (d, d) second-moment matrix with provenance.

    ``source`` records where it came from: ``"frame:<l>"`` for one frame,
    ``"pair:<a>,<b>"`` for an ordered cross-frame product (these may be
    asymmetric), or ``"pooled"`` for an average.  Non-pair sources are
    validated to be symmetric at construction.
    """

    mat: Tensor
    centered: bool = False
    source: str = "pooled"

    def __post_init__(self):
        if self.mat.ndim != 2 or self.mat.shape[0] != self.mat.shape[1]:
            raise ShapeError(f"covariance must be square, got {self.mat.shape}")
        if not self.source.startswith("pair:"):
            m = self.mat.data
            tol = 1e-6 * max(1.0, float(np.abs(m).max(initial=0.0)))
            if float(np.abs(m - m.T).max(initial=0.0)) > tol:
                raise IntegrityError(f"matrix from source {self.source!r} is not symmetric")

    @property
    def dim(self) -> int:
        return self.mat.shape[0]


@dataclass
class PooledRepresentation:
    """A (1, m) pooled feature vector and the pooling kind that produced it."""

    vec: Tensor
    kind: str  # "gap" | "plain_gcp" | "tcp"

    def __post_init__(self):
        if self.vec.ndim != 2 or self.vec.shape[0] != 1:
            raise ShapeError(f"representation must be a (1, m) row, got {self.vec.shape}")

    @property
    def dim(self) -> int:
        return self.vec.shape[1]


def tri_len(d: int) -> int:
    """Length of the upper triangle (diagonal included) of a d x d matrix."""
    return d * (d + 1) // 2


# ---------------------------------------------------------------------------
# Pooling operations


def gap(clip: FeatureClip) -> PooledRepresentation:
    """Average every feature vector of the clip: (1/LN) sum over frames and
    positions.  Output is (1, C); invariant to frame order."""
    x = clip.stacked()
    v = mean_over(x, (0, 1))
    return PooledRepresentation(reshape(v, (1, clip.channels)), kind="gap")


def stacked_cov(x: Tensor, centered: bool = False) -> Tensor:
    """Second-moment matrix of each slab of a stacked (M, N, C) tensor.

    Returns (M, C, C) where slab m is (1/N) X_mᵀ X_m, optionally with the
    per-slab mean row subtracted first.  This is the single summation path
    shared by every covariance pool in the package, so pools that are
    algebraically equal are also bit-identical.
    """
    if x.ndim != 3:
        raise ShapeError(f"stacked_cov expects (slabs, positions, channels), got {x.shape}")
    n = x.shape[1]
    if centered:
        mu = reshape(mean_over(x, 1), (x.shape[0], 1, x.shape[2]))
        x = sub(x, mu)
    return scale(matmul(transpose(x), x), 1.0 / n)


def frame_cov(x: Tensor, centered: bool = False, source: str = "frame") -> CovarianceMatrix:
    """Second moment (1/N) XᵀX of one (N, C) frame; symmetric PSD."""
    if x.ndim != 2:
        raise ShapeError(f"frame_cov expects (positions, channels), got {x.shape}")
    c3 = stacked_cov(reshape(x, (1,) + x.shape), centered=centered)
    c = x.shape[1]
    return CovarianceMatrix(reshape(c3, (c, c)), centered=centered, source=source)


def cross_cov(a: Tensor, b: Tensor, pair: tuple | None = None) -> CovarianceMatrix:
    """Ordered cross product (1/N) AᵀB of two (N, C) frames; may be asymmetric."""
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"cross_cov needs two equal (N, C) frames, got {a.shape} and {b.shape}")
    m = scale(matmul(transpose(a), b), 1.0 / a.shape[0])
    tag = "pair:?" if pair is None else f"pair:{pair[0]},{pair[1]}"
    return CovarianceMatrix(m, centered=False, source=tag)


def plain_gcp(clip: FeatureClip, centered: bool = False) -> CovarianceMatrix:
    """Average of the per-frame second moments: (1/L) sum_l (1/N) X_lᵀX_l.

    A purely orderless second-order pool; permuting frames changes nothing
    (up to floating-point reassociation).
    """
    covs = stacked_cov(clip.stacked(), centered=centered)
    mat = mean_over(covs, 0)
    return CovarianceMatrix(mat, centered=centered, source="pooled")


def upper_triangle(a: Tensor) -> Tensor:
    """Row-major upper triangle (diagonal included) of square matrices.

    (d, d) input gives a (1, m) row; (B, d, d) input gives (B, m), with
    m = d(d+1)/2.
    """
    if a.ndim not in (2, 3) or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"upper_triangle expects square matrices, got {a.shape}")
    d = a.shape[-1]
    iu = np.triu_indices(d)
    batched = a.ndim == 3
    if batched:
        y = a.data[:, iu[0], iu[1]]
    else:
        y = a.data[iu[0], iu[1]][None, :]
    out = Tensor._wrap(np.ascontiguousarray(y))
    src_shape = a.shape

    def backward(g):
        z = np.zeros(src_shape, dtype=g.dtype)
        if batched:
            z[:, iu[0], iu[1]] = g
        else:
            z[iu[0], iu[1]] = g[0]
        return (z,)

    return record_op(out, (a,), backward)


def triangulate(c: CovarianceMatrix | Tensor) -> PooledRepresentation:
    """Vectorize a symmetric matrix into its (1, d(d+1)/2) upper triangle."""
    mat = c.mat if isinstance(c, CovarianceMatrix) else c
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ShapeError(f"triangulate expects one square matrix, got {mat.shape}")
    m = mat.data
    tol = 1e-4 * max(1.0, float(np.abs(m).max(initial=0.0)))
    if float(np.abs(m - m.T).max(initial=0.0)) > tol:
        raise IntegrityError("matrix is not symmetric within tolerance")
    return PooledRepresentation(upper_triangle(mat), kind="tcp")
