"""Desk-scale training on synthetic clips.

Two generated tasks are provided.  ``order_pair`` emits clips in pairs that
contain exactly the same frames: class 0 in generated order, class 1
reversed.  Each clip carries a per-clip random pattern whose intensity ramps
over time, so the direction of time is learnable from cross-frame structure,
while any pooling that ignores frame order provably sees identical inputs
for both classes (the frame multiset is shared) and stays at chance.
``motion_direction`` translates a soft bump left or right across the
position axis.

The optimizer is stochastic gradient descent with classical momentum,
weight decay (skipped for biases and normalization parameters), and a step
learning-rate schedule.  Training is fully deterministic per seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np

from .head import HeadConfig, HeadParams, head_logits_batch, init_head
from .pooling import FeatureClip
from .tensor import Parameter, ShapeError, Tensor, record_op

__all__ = [
    "SyntheticSpec",
    "make_dataset",
    "dataset_clips",
    "split_train_val",
    "OptimState",
    "sgd_step",
    "cross_entropy",
    "accuracy",
    "TrainResult",
    "fit_head",
    "train_loop",
    "TrainingDiverged",
]

TASKS = ("order_pair", "motion_direction")


@dataclass
class SyntheticSpec:
    """Shape and flavor of a generated dataset."""

    task: str = "order_pair"
    num_samples: int = 512
    frames: int = 8
    positions: int = 16
    channels: int = 32
    num_classes: int = 2
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.num_classes != 2:
            raise ValueError("both synthetic tasks are binary")
        if self.num_samples < 2 or self.num_samples % self.num_classes != 0:
            raise ValueError("num_samples must be a positive multiple of num_classes")
        if self.task == "order_pair" and self.num_samples % 2 != 0:
            raise ValueError("order_pair emits samples in pairs")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


def _order_pair(spec: SyntheticSpec, rng: np.random.Generator):
    """Pairs (clip, reversed clip).  Frame l of the base clip is
    ramp(l) * pattern + noise, with the ramp increasing over time, so the
    arrow of time lives in cross-frame magnitudes while the frame multiset
    of a pair is literally identical."""
    pairs = spec.num_samples // 2
    l, n, c = spec.frames, spec.positions, spec.channels
    x = np.empty((spec.num_samples, l, n, c), dtype=np.float32)
    y = np.empty(spec.num_samples, dtype=np.int64)
    ramp = (np.arange(1, l + 1, dtype=np.float64) / l)[:, None, None]
    for k in range(pairs):
        pattern = rng.normal(size=(1, n, c))
        clip = ramp * pattern
        if spec.noise_sigma > 0:
            clip = clip + spec.noise_sigma * rng.normal(size=(l, n, c))
        x[2 * k] = clip.astype(np.float32)
        x[2 * k + 1] = x[2 * k][::-1]  # same frames, reversed order
        y[2 * k] = 0
        y[2 * k + 1] = 1
    return x, y


def _motion_direction(spec: SyntheticSpec, rng: np.random.Generator):
    """A soft bump walks left or right along the position axis."""
    l, n, c = spec.frames, spec.positions, spec.channels
    x = np.empty((spec.num_samples, l, n, c), dtype=np.float32)
    y = np.empty(spec.num_samples, dtype=np.int64)
    grid = np.arange(n, dtype=np.float64)
    width = max(n / 8.0, 0.75)
    for i in range(spec.num_samples):
        label = i % 2
        direction = 1.0 if label == 0 else -1.0
        start = rng.uniform(0, n)
        speed = rng.uniform(0.5, 1.5) * n / max(l, 2)
        signature = rng.normal(size=c)
        clip = np.empty((l, n, c), dtype=np.float64)
        for t in range(l):
            center = (start + direction * speed * t) % n
            dist = np.minimum(np.abs(grid - center), n - np.abs(grid - center))
            bump = np.exp(-0.5 * (dist / width) ** 2)
            clip[t] = bump[:, None] * signature[None, :]
        if spec.noise_sigma > 0:
            clip += spec.noise_sigma * rng.normal(size=clip.shape)
        x[i] = clip.astype(np.float32)
        y[i] = label
    return x, y


def make_dataset(spec: SyntheticSpec):
    """Generate ``(clips, labels)`` as numpy arrays, deterministic per seed."""
    rng = np.random.default_rng(spec.seed)
    if spec.task == "order_pair":
        return _order_pair(spec, rng)
    return _motion_direction(spec, rng)


def dataset_clips(x: np.ndarray) -> list[FeatureClip]:
    """View a stacked (S, L, N, C) array as a list of clips."""
    return [FeatureClip.from_array(x[i]) for i in range(x.shape[0])]


def split_train_val(x: np.ndarray, y: np.ndarray, val_fraction: float,
                    seed: int, paired: bool = True):
    """Deterministic split.  With ``paired`` (consecutive samples belong
    together, as order_pair emits them), whole pairs land on one side, so a
    validation clip never has its mirror in the training set."""
    s = x.shape[0]
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError("val_fraction must be in [0, 1)")
    rng = np.random.default_rng(seed)
    if paired:
        if s % 2 != 0:
            raise ValueError("paired split needs an even sample count")
        pair_order = rng.permutation(s // 2)
        n_val_pairs = int(round(val_fraction * (s // 2)))
        val_pairs = set(pair_order[:n_val_pairs].tolist())
        val_mask = np.array([i // 2 in val_pairs for i in range(s)])
    else:
        order = rng.permutation(s)
        n_val = int(round(val_fraction * s))
        val_mask = np.zeros(s, dtype=bool)
        val_mask[order[:n_val]] = True
    return x[~val_mask], y[~val_mask], x[val_mask], y[val_mask]


# ---------------------------------------------------------------------------
# Loss and metrics


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of (B, K) logits against integer labels.

    Fused log-softmax keeps the computation stable for large logits; the
    gradient is (softmax - onehot) / B.
    """
    if logits.ndim != 2:
        raise ShapeError(f"expected (batch, classes) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError("label out of range")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    picked = shifted[np.arange(b), labels][:, None]
    loss_val = float(np.mean(logsum - picked))
    out = Tensor._wrap(np.asarray(loss_val, dtype=logits.dtype).reshape(1, 1))

    def backward(g):
        soft = np.exp(shifted - logsum)
        soft[np.arange(b), labels] -= 1.0
        return (g.reshape(()) * soft / b,)

    return record_op(out, (logits,), backward)


def accuracy(logits, labels: np.ndarray) -> float:
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    labels = np.asarray(labels)
    if z.shape[0] == 0:
        return float("nan")
    return float(np.mean(z.argmax(axis=1) == labels))


# ---------------------------------------------------------------------------
# Optimizer


def _decayed(name: str) -> bool:
    """Weight decay applies to weights only, not biases or normalization."""
    return not name.endswith((".b", ".gamma", ".beta"))


@dataclass
class OptimState:
    """SGD with classical momentum and a step learning-rate schedule."""

    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_factor: float = 0.1
    decay_every: int = 120
    epoch: int = 0
    velocities: dict = field(default_factory=dict)

    def current_lr(self) -> float:
        if self.decay_every <= 0:
            return self.learning_rate
        drops = self.epoch // self.decay_every
        return self.learning_rate * (self.decay_factor ** drops)


def sgd_step(params: Sequence[Parameter], grads: dict[str, np.ndarray],
             opt: OptimState) -> None:
    """One in-place update: v <- mu*v + g + lambda*theta; theta <- theta - lr*v."""
    lr = opt.current_lr()
    for p in params:
        if not p.trainable:
            continue
        g = grads.get(p.name)
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient for {p.name}")
        if opt.weight_decay and _decayed(p.name):
            g = g + opt.weight_decay * p.tensor.data
        v = opt.velocities.get(p.name)
        v = g.copy() if v is None else opt.momentum * v + g
        opt.velocities[p.name] = v
        p.assign(p.tensor.data - lr * v)


class TrainingDiverged(RuntimeError):
    """Loss or gradients stopped being finite."""


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainResult:
    params: HeadParams
    history: list[dict]
    stopped: str  # "completed" | "early_accuracy" | "diverged"

    @property
    def final_val_accuracy(self) -> float:
        for rec in reversed(self.history):
            if not np.isnan(rec["val_accuracy"]):
                return rec["val_accuracy"]
        return float("nan")


def _eval_accuracy(x: np.ndarray, y: np.ndarray, params: HeadParams,
                   chunk: int = 64) -> float:
    if x.shape[0] == 0:
        return float("nan")
    hits = 0
    for start in range(0, x.shape[0], chunk):
        xb = Tensor._wrap(np.ascontiguousarray(x[start:start + chunk]))
        logits = head_logits_batch(xb, params, training=False)
        hits += int((logits.data.argmax(axis=1) == y[start:start + chunk]).sum())
    return hits / x.shape[0]


def _snapshot(params: HeadParams) -> dict[str, np.ndarray]:
    return {name: p.tensor.numpy() for name, p in params.named().items()}


def _restore(params: HeadParams, snap: dict[str, np.ndarray]) -> None:
    for name, p in params.named().items():
        p.assign(snap[name])


def fit_head(cfg: HeadConfig, x_train: np.ndarray, y_train: np.ndarray,
             x_val: np.ndarray, y_val: np.ndarray, opt: OptimState,
             epochs: int = 200, batch_size: int = 32,
             stream: IO | None = None, log_every: int = 1,
             params: HeadParams | None = None) -> TrainResult:
    """Train a head, returning per-epoch metrics and the final parameters.

    Metrics go to ``stream`` as one ``epoch split loss accuracy`` line per
    split per epoch.  Training stops early the first time validation
    accuracy reaches 1.0, and aborts (restoring the last finite-loss epoch)
    if the loss leaves the reals.
    """
    from .tensor import Tape  # local import keeps module load light

    if params is None:
        params = init_head(cfg)
    trainables = [p for p in params.parameters() if p.trainable]
    rng = np.random.default_rng(cfg.seed)
    history: list[dict] = []
    stopped = "completed"
    last_good = _snapshot(params)
    for epoch in range(epochs):
        opt.epoch = epoch
        order = rng.permutation(x_train.shape[0])
        epoch_loss = 0.0
        epoch_hits = 0
        diverged = False
        for start in range(0, len(order), batch_size):
            sel = order[start:start + batch_size]
            xb = Tensor._wrap(np.ascontiguousarray(x_train[sel]))
            yb = y_train[sel]
            with Tape() as tape:
                for p in trainables:
                    tape.watch(p.tensor)
                logits = head_logits_batch(xb, params, training=True, rng=rng)
                loss = cross_entropy(logits, yb)
                if not np.isfinite(loss.data).all():
                    diverged = True
                    break
                tape.backward(loss)
                grads = {p.name: tape.grad(p.tensor) for p in trainables}
            try:
                sgd_step(trainables, grads, opt)
            except TrainingDiverged:
                diverged = True
                break
            epoch_loss += loss.item() * len(sel)
            epoch_hits += int((logits.data.argmax(axis=1) == yb).sum())
        if diverged:
            _restore(params, last_good)
            stopped = "diverged"
            if stream:
                stream.write(f"{epoch}\ttrain\tdiverged\tnan\n")
            break
        last_good = _snapshot(params)
        train_loss = epoch_loss / x_train.shape[0]
        train_acc = epoch_hits / x_train.shape[0]
        val_acc = _eval_accuracy(x_val, y_val, params)
        history.append({
            "epoch": epoch,
            "train_loss": train_loss,
            "train_accuracy": train_acc,
            "val_accuracy": val_acc,
            "learning_rate": opt.current_lr(),
        })
        if stream and (epoch % log_every == 0 or epoch == epochs - 1):
            stream.write(f"{epoch}\ttrain\t{train_loss:.6f}\t{train_acc:.4f}\n")
            if not np.isnan(val_acc):
                stream.write(f"{epoch}\tval\t-\t{val_acc:.4f}\n")
        if val_acc == 1.0:
            stopped = "early_accuracy"
            break
    return TrainResult(params=params, history=history, stopped=stopped)


def train_loop(cfg: HeadConfig, spec: SyntheticSpec, opt: OptimState | None = None,
               epochs: int = 200, batch_size: int = 32,
               val_fraction: float = 0.25, stream: IO | None = None,
               log_every: int = 1) -> TrainResult:
    """Generate the synthetic dataset, split it, and fit the head."""
    if (spec.frames, spec.positions, spec.channels) != (cfg.frames, cfg.positions, cfg.channels):
        raise ShapeError("dataset spec and head config disagree on clip shape")
    if spec.num_classes != cfg.num_classes:
        raise ShapeError("dataset spec and head config disagree on class count")
    x, y = make_dataset(spec)
    paired = spec.task == "order_pair"
    x_tr, y_tr, x_va, y_va = split_train_val(x, y, val_fraction, spec.seed, paired=paired)
    if opt is None:
        opt = OptimState()
    return fit_head(cfg, x_tr, y_tr, x_va, y_va, opt, epochs=epochs,
                    batch_size=batch_size, stream=stream, log_every=log_every)
