"""Loss, optimizer, schedulers, sparsity metrics, and the training loop.

The loss mixes cross-entropy with a mean-squared term against the one-hot
label, L = (1 - gamma) * CE + gamma * MSE, with gamma = 0.05 by default.
The optimizer is heavy-ball momentum SGD with cosine-annealed learning
rate. Sparsity is reported as R_w (fraction of non-zero quantized weights)
and R_a (fraction of non-zero quantized activation outputs, averaged per
test sample and then over samples).
"""

from __future__ import annotations

import csv
import enum
import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import log_softmax, softmax

from .datasets import BatchPlan, LabeledImageSet, batches
from .network import ActQuant, Conv2d, ModelGraph, Param, ReLU
from .normalization import Mode, NormKind


class MseTarget(enum.Enum):
    LOGITS = "logits"
    PROBS = "probs"


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 0.05
    mse_target: MseTarget = MseTarget.LOGITS

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")


def combined_loss(logits: np.ndarray, labels: np.ndarray,
                  cfg: LossConfig = LossConfig()):
    """(1-gamma)*CE + gamma*MSE against the one-hot label.

    CE is averaged over the batch; MSE over batch and classes. Returns the
    scalar loss and the exact gradient w.r.t. the logits.
    """
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError("label out of range")

    logits64 = logits.astype(np.float64)
    one_hot = np.zeros((n, k))
    one_hot[np.arange(n), labels] = 1.0
    probs = softmax(logits64, axis=1)
    ce = -np.mean(log_softmax(logits64, axis=1)[np.arange(n), labels])
    grad_ce = (probs - one_hot) / n

    if cfg.mse_target is MseTarget.LOGITS:
        diff = logits64 - one_hot
        mse = np.mean(diff ** 2)
        grad_mse = 2.0 * diff / (n * k)
    else:
        diff = probs - one_hot
        mse = np.mean(diff ** 2)
        # d softmax jacobian: diag(p) - p p^T, applied per row
        inner = 2.0 * diff / (n * k)
        grad_mse = probs * (inner - np.sum(inner * probs, axis=1, keepdims=True))

    loss = (1.0 - cfg.gamma) * ce + cfg.gamma * mse
    grad = (1.0 - cfg.gamma) * grad_ce + cfg.gamma * grad_mse
    return float(loss), grad.astype(logits.dtype)


@dataclass
class OptimState:
    """Momentum SGD with optional weight decay on decaying parameters."""

    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")


def sgd_momentum_step(params: list[Param], opt: OptimState):
    """v <- momentum*v + grad (+ wd*param); param <- param - lr*v, in place."""
    if not opt.velocity:
        opt.velocity = [np.zeros_like(p.data) for p in params]
    if len(opt.velocity) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    for p, v in zip(params, opt.velocity):
        if v.shape != p.data.shape:
            raise ValueError(f"velocity shape {v.shape} does not match {p.name} {p.data.shape}")
        g = p.grad
        if opt.weight_decay and p.decay:
            g = g + opt.weight_decay * p.data
        v *= opt.momentum
        v += g
        p.data -= opt.learning_rate * v


@dataclass
class ScheduleState:
    base_lr: float
    total_epochs: int
    current_epoch: int = 0

    def __post_init__(self):
        if self.current_epoch > self.total_epochs:
            raise ValueError("current_epoch exceeds total_epochs")


def cosine_lr(sched: ScheduleState) -> float:
    """Cosine annealing from base_lr to 0, no restarts."""
    return sched.base_lr * 0.5 * (1.0 + np.cos(np.pi * sched.current_epoch / sched.total_epochs))


def scaled_lr_for_batch(base_lr_at_128: float, batch_size: int) -> float:
    """Linear learning-rate scaling: base * N / 128."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    return base_lr_at_128 * batch_size / 128.0


@dataclass
class SparsityReport:
    r_w_total: float
    r_a_total: float
    r_w_per_layer: list[float]
    r_a_per_layer: list[float]


def compute_r_w(graph: ModelGraph):
    """Fraction of non-zero quantized weight states, per quantized conv layer
    and pooled over all of them. A non-quantized model reports 1.0."""
    quantized = [c for c in graph.conv_layers() if c.quant is not None]
    if not quantized:
        per_layer = [1.0] * len(graph.conv_layers())
        return 1.0, per_layer
    per_layer = []
    nonzero = total = 0
    for conv in quantized:
        w_q, _, _ = conv.effective_weight()
        nz = int(np.count_nonzero(w_q))
        per_layer.append(nz / w_q.size)
        nonzero += nz
        total += w_q.size
    return nonzero / total, per_layer


def compute_r_a(graph: ModelGraph, test_set: LabeledImageSet, batch_size: int = 100,
                max_samples: int | None = None):
    """Per activation layer: mean over test samples of that sample's non-zero
    output fraction. Pooled value is the element-count weighted mean over
    layers."""
    if len(test_set.labels) == 0:
        raise ValueError("empty test set")
    act_layers = graph.activation_layers()
    if not act_layers:
        raise ValueError("model has no activation layers")
    for l in act_layers:
        l.record = True
    try:
        ratio_sums = np.zeros(len(act_layers))
        elem_counts = np.zeros(len(act_layers))
        n_seen = 0
        images, labels = test_set.images, test_set.labels
        if max_samples is not None:
            images, labels = images[:max_samples], labels[:max_samples]
        for start in range(0, images.shape[0], batch_size):
            xb = images[start:start + batch_size]
            graph.forward(xb, Mode.EVAL)
            for i, l in enumerate(act_layers):
                out = l.last_output
                per_sample = np.count_nonzero(out.reshape(out.shape[0], -1), axis=1) \
                    / np.prod(out.shape[1:])
                ratio_sums[i] += per_sample.sum()
                elem_counts[i] = np.prod(out.shape[1:])
            n_seen += xb.shape[0]
    finally:
        for l in act_layers:
            l.record = False
            l.last_output = None
    per_layer = (ratio_sums / n_seen).tolist()
    total = float(np.average(per_layer, weights=elem_counts))
    return total, per_layer


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    test_loss: float
    test_acc: float
    r_w: float
    r_a: float
    seconds: float


def evaluate(graph: ModelGraph, data: LabeledImageSet, loss_cfg: LossConfig,
             batch_size: int = 100, max_samples: int | None = None):
    """Mean loss and accuracy in EVAL mode."""
    images, labels = data.images, data.labels
    if max_samples is not None:
        images, labels = images[:max_samples], labels[:max_samples]
    losses = []
    correct = 0
    for start in range(0, images.shape[0], batch_size):
        xb = images[start:start + batch_size]
        yb = labels[start:start + batch_size]
        logits = graph.forward(xb, Mode.EVAL)
        loss, _ = combined_loss(logits, yb, loss_cfg)
        losses.append(loss * xb.shape[0])
        correct += int(np.sum(np.argmax(logits, axis=1) == yb))
    n = images.shape[0]
    return sum(losses) / n, correct / n


def train(graph: ModelGraph, train_set: LabeledImageSet, test_set: LabeledImageSet,
          *, epochs: int, batch_size: int, loss_cfg: LossConfig = LossConfig(),
          base_lr: float = 1e-2, momentum: float = 0.9, weight_decay: float = 0.0,
          seed: int = 42, augment: bool = False,
          metrics_max_samples: int | None = None) -> list[EpochRecord]:
    """Full training loop; deterministic given the seed. Returns one record
    per epoch (plus an initial-state record when epochs == 0)."""
    opt = OptimState(learning_rate=base_lr, momentum=momentum, weight_decay=weight_decay)
    sched = ScheduleState(base_lr=base_lr, total_epochs=max(epochs, 1))
    params = graph.parameters()
    log: list[EpochRecord] = []

    def _metrics(epoch, lr, train_loss, t0):
        test_loss, test_acc = evaluate(graph, test_set, loss_cfg, batch_size,
                                       max_samples=metrics_max_samples)
        r_w, _ = compute_r_w(graph)
        r_a, _ = compute_r_a(graph, test_set, batch_size, max_samples=metrics_max_samples)
        return EpochRecord(epoch=epoch, lr=lr, train_loss=train_loss,
                           test_loss=test_loss, test_acc=test_acc,
                           r_w=r_w, r_a=r_a, seconds=time.perf_counter() - t0)

    if epochs == 0:
        log.append(_metrics(0, base_lr, float("nan"), time.perf_counter()))
        return log

    for epoch in range(epochs):
        t0 = time.perf_counter()
        sched.current_epoch = epoch
        opt.learning_rate = cosine_lr(sched)
        plan = BatchPlan(seed=seed + epoch, batch_size=batch_size, shuffle=True,
                         pad_crop=augment, hflip=augment)
        loss_sum = 0.0
        n_samples = 0
        for xb, yb in batches(train_set, plan):
            graph.zero_grad()
            logits = graph.forward(xb, Mode.TRAIN)
            loss, grad = combined_loss(logits, yb, loss_cfg)
            graph.backward(grad)
            sgd_momentum_step(params, opt)
            loss_sum += loss * xb.shape[0]
            n_samples += xb.shape[0]
        log.append(_metrics(epoch + 1, opt.learning_rate, loss_sum / n_samples, t0))
    return log


def write_training_log(path, log: list[EpochRecord]):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "lr", "train_loss", "test_loss", "test_acc",
                         "r_w", "r_a", "seconds"])
        for rec in log:
            writer.writerow([rec.epoch, rec.lr, rec.train_loss, rec.test_loss,
                             rec.test_acc, rec.r_w, rec.r_a, rec.seconds])


def write_sparsity_csv(path, graph: ModelGraph, test_set: LabeledImageSet,
                       max_samples: int | None = None):
    """Per-layer sparsity table (layer_index, r_w, r_a); r_a has one fewer
    entry than the conv count because the head activation is not quantized."""
    _, r_w_layers = compute_r_w(graph)
    _, r_a_layers = compute_r_a(graph, test_set, max_samples=max_samples)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["layer_index", "r_w", "r_a"])
        for i in range(max(len(r_w_layers), len(r_a_layers))):
            writer.writerow([
                i,
                r_w_layers[i] if i < len(r_w_layers) else "",
                r_a_layers[i] if i < len(r_a_layers) else "",
            ])


def measure_step_bytes(graph: ModelGraph, xb: np.ndarray, yb: np.ndarray,
                       loss_cfg: LossConfig = LossConfig()) -> int:
    """Bytes held by forward caches plus parameters, gradients, and the batch
    itself after one training step; the engine's peak-allocation proxy."""
    graph.zero_grad()
    logits = graph.forward(xb, Mode.TRAIN)
    _, grad = combined_loss(logits, yb, loss_cfg)
    tape = graph.tape_nbytes()
    graph.backward(grad)
    param_bytes = sum(p.data.nbytes + p.grad.nbytes for p in graph.parameters())
    return tape + param_bytes + xb.nbytes + logits.nbytes


@dataclass
class NormBenchRow:
    variant: str
    batch_size: int
    seed: int
    final_train_loss: float
    final_test_loss: float
    peak_bytes: int


NORM_VARIANTS = {
    "BN": (NormKind.BN, False),
    "BN+WS": (NormKind.BN, True),
    "LBN": (NormKind.LBN, False),
    "LBN+WS": (NormKind.LBN, True),
}


def norm_comparison_experiment(train_set: LabeledImageSet, test_set: LabeledImageSet,
                               *, batch_sizes: list[int],
                               variants: list[str] = ("LBN+WS", "LBN", "BN+WS", "BN"),
                               epochs: int = 10, base_lr_at_128: float = 1e-2,
                               weight_decay: float = 0.0, seeds: list[int] = (42,),
                               arch: str = "cnn9-mini", dtype=np.float32,
                               metrics_max_samples: int | None = 1000,
                               progress=None) -> list[NormBenchRow]:
    """Batch-size sensitivity comparison of the normalization variants on a
    non-quantized CNN, with N/128 learning-rate scaling."""
    from .network import build_model

    rows = []
    for variant in variants:
        kind, use_ws = NORM_VARIANTS[variant]
        for bs in batch_sizes:
            for seed in seeds:
                graph = build_model(arch, train_set.class_count, quant=None,
                                    norm_kind=kind, use_ws=use_ws, seed=seed,
                                    dtype=dtype, in_channels=train_set.images.shape[1])
                lr = scaled_lr_for_batch(base_lr_at_128, bs)
                log = train(graph, train_set, test_set, epochs=epochs,
                            batch_size=bs, base_lr=lr, weight_decay=weight_decay,
                            seed=seed, metrics_max_samples=metrics_max_samples)
                nb = min(bs, train_set.images.shape[0])
                peak = measure_step_bytes(graph, train_set.images[:nb],
                                          train_set.labels[:nb])
                row = NormBenchRow(variant=variant, batch_size=bs, seed=seed,
                                   final_train_loss=log[-1].train_loss,
                                   final_test_loss=log[-1].test_loss,
                                   peak_bytes=peak)
                rows.append(row)
                if progress is not None:
                    progress(row)
    return rows


def write_norm_bench_csv(path, rows: list[NormBenchRow]):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["variant", "batch_size", "seed", "final_train_loss",
                         "final_test_loss", "peak_bytes"])
        for r in rows:
            writer.writerow([r.variant, r.batch_size, r.seed, r.final_train_loss,
                             r.final_test_loss, r.peak_bytes])


def write_summary_json(path, config: dict, log: list[EpochRecord]):
    summary = {
        "config": config,
        "epochs": len(log),
        "final": asdict(log[-1]) if log else None,
    }
    with open(path, "w") as f:
        json.dump(summary, f, indent=2)
