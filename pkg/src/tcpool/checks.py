"""Self-verification runs: finite-difference gradient sweeps, the
efficient-vs-expanded pooling identity scan, and square-root accuracy
benchmarks.  The command-line tool drives everything here; the functions
are also importable for ad-hoc use.

Every check is deterministic given its seed and reports results as rows
rather than raising, so callers decide how to surface failures.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import TcaParams, TsaParams, calibrate, tca, tsa
from .head import HeadConfig, head_logits_batch, init_head
from .pooling import FeatureClip, upper_triangle
from .spectral import eig_sqrt_oracle, newton_schulz_sqrt, sqrt_batch
from .tconv import TemporalKernel, tcp_pool_efficient, tcp_pool_expanded, temporal_conv
from .tensor import (
    DOUBLE,
    NormState,
    Parameter,
    Tensor,
    add,
    batch_norm,
    concat,
    dropout,
    grad_check,
    index_select,
    log,
    matmul,
    mean_over,
    mul,
    reciprocal,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax_rows,
    sqrt,
    stack,
    sub,
    transpose,
)
from .train import cross_entropy

__all__ = [
    "CheckRow",
    "gradcheck_scope",
    "GRADCHECK_SCOPES",
    "PRIMITIVE_TOL",
    "COMPOSITE_TOL",
    "equivalence_scan",
    "EquivalenceReport",
    "random_spd",
    "sqrt_scan",
]

PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-4

GRADCHECK_SCOPES = ("primitive", "attention", "spectral", "head")


@dataclass
class CheckRow:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance


def _param(rng: np.random.Generator, name: str, shape) -> Parameter:
    return Parameter(name, Tensor(rng.standard_normal(shape), dtype=DOUBLE))


def _to_scalar(x: Tensor, probe: Tensor) -> Tensor:
    """Contract a tensor to a scalar against a fixed probe so the check
    exercises non-uniform output gradients."""
    return mean_over(mul(x, probe), tuple(range(x.ndim)))


def _probe(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), dtype=DOUBLE)


def _gradcheck_primitives(seed: int) -> list[CheckRow]:
    rng = np.random.default_rng(seed)
    rows: list[CheckRow] = []

    def check(name, params, f):
        rows.append(CheckRow(name, grad_check(f, params), PRIMITIVE_TOL))

    a = _param(rng, "a", (3, 4))
    b = _param(rng, "b", (3, 4))
    row = _param(rng, "row", (1, 4))
    sc = _param(rng, "sc", (1, 1))
    p34 = _probe(rng, (3, 4))
    check("add", [a, b], lambda: _to_scalar(add(a.tensor, b.tensor), p34))
    check("add_broadcast_row", [a, row], lambda: _to_scalar(add(a.tensor, row.tensor), p34))
    check("sub", [a, b], lambda: _to_scalar(sub(a.tensor, b.tensor), p34))
    check("mul", [a, b], lambda: _to_scalar(mul(a.tensor, b.tensor), p34))
    check("mul_broadcast_scalar", [a, sc], lambda: _to_scalar(mul(a.tensor, sc.tensor), p34))
    check("scale", [a], lambda: _to_scalar(scale(a.tensor, -1.7), p34))

    m1 = _param(rng, "m1", (3, 5))
    m2 = _param(rng, "m2", (5, 2))
    p32 = _probe(rng, (3, 2))
    check("matmul", [m1, m2], lambda: _to_scalar(matmul(m1.tensor, m2.tensor), p32))
    s1 = _param(rng, "s1", (2, 3, 4))
    s2 = _param(rng, "s2", (2, 4, 2))
    p232 = _probe(rng, (2, 3, 2))
    check("matmul_stacked", [s1, s2], lambda: _to_scalar(matmul(s1.tensor, s2.tensor), p232))
    p243 = _probe(rng, (2, 4, 3))
    p26 = _probe(rng, (2, 6))
    check("transpose", [s1], lambda: _to_scalar(transpose(s1.tensor), p243))
    check("reshape", [a], lambda: _to_scalar(reshape(a.tensor, (2, 6)), p26))

    c1 = _param(rng, "c1", (2, 3))
    c2 = _param(rng, "c2", (4, 3))
    p63 = _probe(rng, (6, 3))
    check("concat", [c1, c2], lambda: _to_scalar(concat([c1.tensor, c2.tensor], axis=0), p63))
    p234 = _probe(rng, (2, 3, 4))
    check("stack", [a, b], lambda: _to_scalar(stack([a.tensor, b.tensor]), p234))
    dup = np.array([0, 2, 2, 1], dtype=np.int64)
    probe_rows = _probe(rng, (3, 4))
    probe_cols = _probe(rng, (3, 4))
    check("index_select_rows", [a],
          lambda: _to_scalar(index_select(a.tensor, 0, dup[:3]), probe_rows))
    check("index_select_dup", [a],
          lambda: _to_scalar(index_select(a.tensor, 1, dup), probe_cols))
    p3 = _probe(rng, (3,))
    check("mean_over", [s1], lambda: _to_scalar(mean_over(s1.tensor, (0, 2)), p3))

    pos = Parameter("pos", Tensor(rng.uniform(0.5, 2.0, (3, 4)), dtype=DOUBLE))
    check("reciprocal", [pos], lambda: _to_scalar(reciprocal(pos.tensor), p34))
    check("sqrt", [pos], lambda: _to_scalar(sqrt(pos.tensor), p34))
    check("log", [pos], lambda: _to_scalar(log(pos.tensor), p34))
    check("sigmoid", [a], lambda: _to_scalar(sigmoid(a.tensor), p34))
    shifted = Parameter("shifted", Tensor(rng.standard_normal((3, 4)) + 0.75, dtype=DOUBLE))
    check("relu", [shifted], lambda: _to_scalar(relu(shifted.tensor), p34))
    check("softmax_rows", [a], lambda: _to_scalar(softmax_rows(a.tensor), p34))

    x = _param(rng, "x", (6, 4))
    p64 = _probe(rng, (6, 4))
    state = NormState.init("norm", 4, dtype=DOUBLE)
    check("batch_norm_train", [x, state.gamma, state.beta],
          lambda: _to_scalar(batch_norm(x.tensor, state, training=True), p64))
    state_eval = NormState.init("norm_eval", 4, dtype=DOUBLE)
    state_eval.running_mean[...] = rng.standard_normal(4)
    state_eval.running_var[...] = rng.uniform(0.5, 1.5, 4)
    check("batch_norm_eval", [x, state_eval.gamma, state_eval.beta],
          lambda: _to_scalar(batch_norm(x.tensor, state_eval, training=False), p64))

    def dropout_f():
        # Re-seeded every call so the mask is a constant of the check.
        r = np.random.default_rng(7)
        return _to_scalar(dropout(x.tensor, 0.4, r, training=True), p64)

    check("dropout_fixed_mask", [x], dropout_f)

    sym = _param(rng, "sym", (4, 4))
    p110 = _probe(rng, (1, 10))
    check("upper_triangle", [sym], lambda: _to_scalar(upper_triangle(sym.tensor), p110))
    logits = _param(rng, "logits", (5, 3))
    labels = np.array([0, 2, 1, 1, 0])
    check("cross_entropy", [logits], lambda: cross_entropy(logits.tensor, labels))
    return rows


def _gradcheck_attention(seed: int) -> list[CheckRow]:
    rng = np.random.default_rng(seed)
    rows: list[CheckRow] = []
    n, c = 3, 4
    tsa_p = TsaParams.init("tsa", c, rng, dtype=DOUBLE)
    tca_p = TcaParams.init("tca", c, rng, dtype=DOUBLE)
    f0 = _param(rng, "f0", (n, c))
    f1 = _param(rng, "f1", (n, c))
    f2 = _param(rng, "f2", (n, c))
    probe = _probe(rng, (n, c))

    tsa_params = list(tsa_p.parameters()) + [f0, f1, f2]
    rows.append(CheckRow(
        "tsa_train",
        grad_check(lambda: _to_scalar(
            tsa(f0.tensor, f1.tensor, f2.tensor, tsa_p, training=True), probe), tsa_params),
        COMPOSITE_TOL))
    rows.append(CheckRow(
        "tsa_eval",
        grad_check(lambda: _to_scalar(
            tsa(f0.tensor, f1.tensor, f2.tensor, tsa_p, training=False), probe), tsa_params),
        COMPOSITE_TOL))
    tca_params = list(tca_p.parameters()) + [f0, f1, f2]
    probe_row = _probe(rng, (1, c))
    rows.append(CheckRow(
        "tca",
        grad_check(lambda: _to_scalar(
            tca(f0.tensor, f1.tensor, f2.tensor, tca_p), probe_row), tca_params),
        COMPOSITE_TOL))

    l = 4
    frames = [_param(rng, f"frame{i}", (n, c)) for i in range(l)]
    probe_clip = _probe(rng, (l, n, c))
    # Clamped predecessors make the first frame's difference exactly zero,
    # which would park the gating relu on its kink with a zero bias; a
    # nonzero bias keeps central differences away from the kink.
    tca_p.fc1.bias.assign(np.full(tca_p.fc1.bias.tensor.shape, 0.1))

    def calibrate_f():
        clip = FeatureClip([p.tensor for p in frames])
        out = calibrate(clip, tsa_p, tca_p, training=True)
        return _to_scalar(out.stacked(), probe_clip)

    rows.append(CheckRow(
        "calibrate_train",
        grad_check(calibrate_f, list(tsa_p.parameters()) + list(tca_p.parameters()) + frames),
        COMPOSITE_TOL))
    return rows


def _gradcheck_spectral(seed: int) -> list[CheckRow]:
    rng = np.random.default_rng(seed)
    rows: list[CheckRow] = []
    d = 4
    base = random_spd(rng, d, cond=10.0)
    mat = Parameter("mat", Tensor(base, dtype=DOUBLE))
    probe = _probe(rng, (1, d, d))

    def sqrt_f():
        sym = scale(add(mat.tensor, transpose(mat.tensor)), 0.5)
        return _to_scalar(sqrt_batch(reshape(sym, (1, d, d)), 3), probe)

    rows.append(CheckRow("newton_schulz_k3", grad_check(sqrt_f, [mat]), COMPOSITE_TOL))

    stackd = Parameter("stackd", Tensor(
        np.stack([random_spd(rng, 3, 5.0), random_spd(rng, 3, 50.0)]), dtype=DOUBLE))
    probe2 = _probe(rng, (2, 3, 3))

    def batch_f():
        sym = scale(add(stackd.tensor, transpose(stackd.tensor)), 0.5)
        return _to_scalar(sqrt_batch(sym, 2), probe2)

    rows.append(CheckRow("newton_schulz_batch", grad_check(batch_f, [stackd]), COMPOSITE_TOL))
    return rows


def _gradcheck_head(seed: int) -> list[CheckRow]:
    rng = np.random.default_rng(seed)
    rows: list[CheckRow] = []

    l, n, d = 4, 3, 2
    kernel = TemporalKernel.init("kernel", d, 3, rng, dtype=DOUBLE)
    frames = [_param(rng, f"tc{i}", (n, d)) for i in range(l)]
    probe_clip = _probe(rng, (l, n, d))
    taps = list(kernel.parameters())

    def conv_f():
        clip = FeatureClip([p.tensor for p in frames])
        return _to_scalar(temporal_conv(clip, kernel).stacked(), probe_clip)

    rows.append(CheckRow("temporal_conv", grad_check(conv_f, taps + frames), COMPOSITE_TOL))

    probe_cov = _probe(rng, (d, d))

    def pool_f():
        clip = FeatureClip([p.tensor for p in frames])
        return _to_scalar(tcp_pool_efficient(clip, kernel).mat, probe_cov)

    rows.append(CheckRow("tcp_pool", grad_check(pool_f, taps + frames), COMPOSITE_TOL))

    cfg = HeadConfig(variant="tcp", channels=5, proj_dim=3, frames=3, positions=4,
                     kernel_size=3, sqrt_iterations=3, num_classes=3,
                     dropout_rate=0.0, seed=seed)
    params = init_head(cfg, dtype=DOUBLE)
    # Keep the gating relu off its kink at the clamped first frame (its
    # frame difference is exactly zero, so a zero bias would sit on it).
    params.tca.fc1.bias.assign(np.full(params.tca.fc1.bias.tensor.shape, 0.1))
    batch = Parameter("batch", Tensor(rng.standard_normal((2, 3, 4, 5)), dtype=DOUBLE))
    labels = np.array([0, 2])

    def head_f():
        logits = head_logits_batch(batch.tensor, params, training=True)
        return cross_entropy(logits, labels)

    rows.append(CheckRow(
        "head_cross_entropy",
        grad_check(head_f, params.parameters() + [batch]),
        COMPOSITE_TOL))
    return rows


def gradcheck_scope(scope: str, seed: int = 0) -> list[CheckRow]:
    """Finite-difference sweep for one scope (or 'all')."""
    runners = {
        "primitive": _gradcheck_primitives,
        "attention": _gradcheck_attention,
        "spectral": _gradcheck_spectral,
        "head": _gradcheck_head,
    }
    if scope == "all":
        rows: list[CheckRow] = []
        for name in GRADCHECK_SCOPES:
            rows.extend(runners[name](seed))
        return rows
    if scope not in runners:
        raise ValueError(f"unknown scope {scope!r}")
    return runners[scope](seed)


# ---------------------------------------------------------------------------
# Pooling identity scan


@dataclass
class EquivalenceReport:
    runs: int
    worst: float
    worst_config: tuple | None
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.runs == 0 or self.worst <= self.tolerance


def _rel_frobenius(a: np.ndarray, b: np.ndarray) -> float:
    den = max(float(np.linalg.norm(b)), np.finfo(np.float64).tiny)
    return float(np.linalg.norm(a - b)) / den


def equivalence_scan(frames=(1, 2, 4, 8), positions=(1, 4, 16), dims=(2, 8, 16),
                     kappas=(1, 3, 5), trials: int = 20, seed: int = 0,
                     dtype=DOUBLE, tolerance: float | None = None,
                     fault: float = 0.0) -> EquivalenceReport:
    """Compare the two pooling routes over a randomized grid.

    ``fault`` perturbs one kernel tap on the efficient route only; a
    non-zero value must make the scan fail, which tests the scan itself.
    """
    if tolerance is None:
        tolerance = 1e-10 if np.dtype(dtype) == np.dtype(DOUBLE) else 1e-5
    worst = 0.0
    worst_cfg = None
    runs = 0
    for l in frames:
        for n in positions:
            for d in dims:
                for kappa in kappas:
                    for trial in range(trials):
                        rng = np.random.default_rng([seed, l, n, d, kappa, trial])
                        clip = FeatureClip.from_array(
                            rng.standard_normal((l, n, d)), dtype=dtype)
                        taps = [Parameter(f"tap{j}", Tensor(rng.standard_normal((d, d)), dtype=dtype))
                                for j in range(kappa)]
                        kernel = TemporalKernel(taps)
                        expanded = tcp_pool_expanded(clip, kernel).mat.data
                        if fault:
                            bad = [Parameter(t.name, t.tensor) for t in taps]
                            mid = kappa // 2
                            bad[mid] = Parameter(taps[mid].name,
                                                 add(taps[mid].tensor, float(fault)))
                            kernel = TemporalKernel(bad)
                        efficient = tcp_pool_efficient(clip, kernel).mat.data
                        err = _rel_frobenius(efficient, expanded)
                        runs += 1
                        if err > worst:
                            worst = err
                            worst_cfg = (l, n, d, kappa, trial)
    return EquivalenceReport(runs=runs, worst=worst, worst_config=worst_cfg,
                             tolerance=tolerance)


# ---------------------------------------------------------------------------
# Square-root accuracy


def random_spd(rng: np.random.Generator, d: int, cond: float) -> np.ndarray:
    """Symmetric positive-definite matrix with eigenvalues spread linearly
    from 1 to ``cond`` in a random orthonormal basis, so its condition
    number is ``cond`` exactly (up to roundoff)."""
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    eigs = np.linspace(1.0, float(cond), d)
    a = (q * eigs) @ q.T
    return (a + a.T) / 2.0


def sqrt_scan(d: int, iteration_counts, cond: float = 100.0, seed: int = 0):
    """Residual and oracle error of the iterative root at several iteration
    counts, on one fixed random SPD matrix.  Returns (K, residual,
    oracle relative error) rows."""
    rng = np.random.default_rng(seed)
    a = random_spd(rng, d, cond)
    oracle = eig_sqrt_oracle(a)
    den = max(float(np.linalg.norm(oracle)), np.finfo(np.float64).tiny)
    rows = []
    for k in iteration_counts:
        res = newton_schulz_sqrt(Tensor(a, dtype=DOUBLE), int(k))
        err = float(np.linalg.norm(res.sqrt_mat.data - oracle)) / den
        rows.append((int(k), res.residual, err))
    return rows
