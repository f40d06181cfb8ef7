"""Matrix square root: eigen oracle, iterative root, and their agreement.

The only place numpy's own eigendecomposition appears is here, as an
independent cross-check of the hand-rolled cyclic Jacobi solver.
"""

import numpy as np
import pytest

import tcpool as tp
from tcpool.checks import random_spd
from tcpool.tensor import mean_over, mul, reshape

DOUBLE = np.float64


def sym(rng, d):
    m = rng.standard_normal((d, d))
    return (m + m.T) / 2.0


def test_jacobi_matches_numpy_eigh():
    rng = np.random.default_rng(0)
    for d in (2, 5, 16):
        for _ in range(5):
            a = sym(rng, d)
            vals, vecs = tp.jacobi_eigh(a)
            ref = np.linalg.eigvalsh(a)
            assert np.abs(np.sort(vals) - ref).max() <= 1e-10
            assert np.abs(vecs.T @ vecs - np.eye(d)).max() <= 1e-10
            assert np.abs(vecs @ np.diag(vals) @ vecs.T - a).max() <= 1e-10


def test_jacobi_on_diagonal_input():
    vals, vecs = tp.jacobi_eigh(np.diag([3.0, 1.0, 2.0]))
    assert np.abs(np.sort(vals) - [1.0, 2.0, 3.0]).max() <= 1e-14
    assert np.abs(np.abs(vecs) - np.eye(3)[np.argsort([3.0, 1.0, 2.0])].T).max() <= 1e-12


def test_eig_sqrt_oracle_examples():
    got = tp.eig_sqrt_oracle(np.diag([9.0, 4.0, 1.0]))
    assert np.abs(got - np.diag([3.0, 2.0, 1.0])).max() <= 1e-12
    rng = np.random.default_rng(1)
    for d in (3, 8):
        m = rng.standard_normal((d, d))
        a = m.T @ m
        root = tp.eig_sqrt_oracle(a)
        rel = np.linalg.norm(root @ root - a) / np.linalg.norm(a)
        assert rel <= 1e-10
    v = rng.standard_normal(5)
    a = np.outer(v, v)
    want = a / np.linalg.norm(v)
    # exactly singular input: clamping a roundoff-sized eigenvalue and
    # taking its square root leaves a sqrt(eps)-sized floor
    assert np.abs(tp.eig_sqrt_oracle(a) - want).max() <= 1e-7


def test_eig_sqrt_oracle_clips_negative_spectrum():
    got = tp.eig_sqrt_oracle(np.diag([1.0, -2.0]))
    assert np.array_equal(got, np.diag([1.0, 0.0]))


def test_iterative_root_is_exact_on_identity_and_scalars():
    for k in (1, 3, 20):
        r = tp.newton_schulz_sqrt(np.eye(4), iterations=k)
        assert np.array_equal(r.sqrt_mat.data, np.eye(4))
        assert r.residual == 0.0
        r = tp.newton_schulz_sqrt(np.array([[4.0]]), iterations=k)
        assert np.array_equal(r.sqrt_mat.data, [[2.0]])
    r = tp.newton_schulz_sqrt(3.0 * np.eye(7), iterations=5)
    assert np.abs(r.sqrt_mat.data - np.sqrt(3.0) * np.eye(7)).max() <= 1e-12


def test_iterative_root_residual_shrinks_with_iterations():
    a = np.diag([4.0, 1.0])
    residuals = [tp.newton_schulz_sqrt(a, iterations=k).residual for k in (1, 2, 3, 5, 10)]
    for prev, cur in zip(residuals, residuals[1:]):
        assert cur <= prev + 1e-13
    assert residuals[-1] <= 1e-6
    r = tp.newton_schulz_sqrt(a, iterations=20)
    oracle = tp.eig_sqrt_oracle(a)
    assert np.abs(r.sqrt_mat.data - oracle).max() <= 1e-8


def test_iterative_root_tracks_oracle_on_random_spd():
    rng = np.random.default_rng(2)
    for d in (4, 12):
        a = random_spd(rng, d, cond=50.0)
        oracle = tp.eig_sqrt_oracle(a)
        r = tp.newton_schulz_sqrt(tp.Tensor(a), iterations=20)
        rel = np.linalg.norm(r.sqrt_mat.data - oracle) / np.linalg.norm(oracle)
        assert rel <= 1e-7


def test_iterative_root_degenerate_and_invalid_inputs():
    r = tp.newton_schulz_sqrt(np.zeros((3, 3)), iterations=3)
    assert r.degenerate
    assert np.array_equal(r.sqrt_mat.data, np.zeros((3, 3)))
    with pytest.raises(tp.IntegrityError):
        tp.newton_schulz_sqrt(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(tp.ShapeError):
        tp.newton_schulz_sqrt(np.ones((2, 3)))
    with pytest.raises(ValueError):
        tp.newton_schulz_sqrt(np.eye(2), iterations=0)


def test_batched_root_output_is_symmetric_and_typed():
    rng = np.random.default_rng(3)
    x = np.stack([random_spd(rng, 5, cond=10.0) for _ in range(4)])
    root = tp.sqrt_batch(tp.Tensor(x), 3)
    assert root.dtype == np.float64
    assert np.array_equal(root.data, np.transpose(root.data, (0, 2, 1)))
    single = tp.sqrt_batch(tp.Tensor(x.astype(np.float32)), 3)
    assert single.dtype == np.float32


def test_batched_root_stays_finite_on_sharp_spectra():
    # near-rank-one matrices have a top eigenvalue far above the mean; the
    # pre-scale must keep the iteration inside its convergence basin, so a
    # shallow root stays finite and a deep one converges to the oracle
    rng = np.random.default_rng(4)
    for _ in range(10):
        v = rng.standard_normal((6, 1))
        a = v @ v.T + 1e-3 * np.eye(6)
        root = tp.sqrt_batch(tp.Tensor(a[None]), 3).data[0]
        assert np.isfinite(root).all()
        oracle = tp.eig_sqrt_oracle(a)
        deep = tp.sqrt_batch(tp.Tensor(a[None]), 30).data[0]
        rel_deep = np.linalg.norm(deep - oracle) / np.linalg.norm(oracle)
        assert rel_deep <= 1e-6


def test_batched_root_gradient_matches_central_differences():
    rng = np.random.default_rng(5)
    base = np.stack([random_spd(rng, 3, cond=5.0), random_spd(rng, 3, cond=20.0)])
    p = tp.Parameter("a", tp.Tensor(base, dtype=DOUBLE))
    probe = tp.Tensor(rng.standard_normal(base.shape))

    def f():
        half = tp.sqrt_batch(p.tensor, 2)
        return mean_over(mul(half, probe), (0, 1, 2))

    err = tp.grad_check(f, [p])
    assert err <= 1e-4


def test_jacobi_accepts_tensor_input():
    a = random_spd(np.random.default_rng(6), 4, cond=10.0)
    vals_t, _ = tp.jacobi_eigh(tp.Tensor(a))
    vals_a, _ = tp.jacobi_eigh(a)
    assert np.array_equal(np.sort(vals_t), np.sort(vals_a))
