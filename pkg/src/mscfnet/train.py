"""Loss, optimizers, poly schedule, IoU metrics, synthetic scenes and the training loop."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import ops
from .layers import BatchNorm2d, PReLU
from .network import MscfNet
from .tensor import Parameter, Tape, Tensor, backward

log = logging.getLogger(__name__)

IGNORE_INDEX = 255


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"non-finite loss {loss} at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss


def cross_entropy_loss(logits: Tensor, labels, ignore_index: int = IGNORE_INDEX, class_weights=None) -> Tensor:
    return ops.cross_entropy(logits, labels, ignore_index, class_weights)


def poly_lr(lr_base: float, iteration: int, max_iteration: int, power: float = 0.9) -> float:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    if iteration >= max_iteration:
        return 0.0
    return lr_base * (1.0 - iteration / max_iteration) ** power


# ---------------------------------------------------------------------------
# optimizers


def decay_exempt(net: MscfNet) -> set[str]:
    """Names of batch-norm and PReLU parameters, which weight decay skips."""
    return {
        p.name
        for _, m in net.named_modules()
        if isinstance(m, (BatchNorm2d, PReLU))
        for p in m._params.values()
    }


@dataclass
class OptimizerState:
    kind: str = "sgd"  # "sgd" (with momentum) | "adam"
    lr_base: float = 4.5e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    iteration: int = 0
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def sgd_config(lr_base=4.5e-2, weight_decay=1e-4) -> OptimizerState:
    return OptimizerState("sgd", lr_base, 0.9, weight_decay)


def adam_config(lr_base=1e-3, weight_decay=2e-4) -> OptimizerState:
    return OptimizerState("adam", lr_base, 0.9, weight_decay, betas=(0.9, 0.999))


def optimizer_step(state: OptimizerState, params: Sequence[Parameter], lr: float,
                   no_decay: frozenset = frozenset()) -> None:
    """One in-place update of every trainable parameter.

    Weight decay is the classic L2 term added to the gradient; parameters
    named in ``no_decay`` are exempt.
    """
    state.iteration += 1
    t = state.iteration
    for p in params:
        if not p.trainable:
            continue
        g = p.grad
        if state.weight_decay and p.name not in no_decay:
            g = g + state.weight_decay * p.data
        key = p.name or id(p)
        if state.kind == "sgd":
            v = state.buffers.get(key)
            v = g.copy() if v is None else state.momentum * v + g
            state.buffers[key] = v
            p.data -= lr * v
        else:
            b1, b2 = state.betas
            m, s = state.buffers.get(key, (np.zeros_like(p.data), np.zeros_like(p.data)))
            m = b1 * m + (1 - b1) * g
            s = b2 * s + (1 - b2) * g * g
            state.buffers[key] = (m, s)
            mhat = m / (1 - b1 ** t)
            shat = s / (1 - b2 ** t)
            p.data -= lr * mhat / (np.sqrt(shat) + state.eps)


# ---------------------------------------------------------------------------
# metrics


class Metrics:
    """Confusion matrix accumulator; rows are ground truth, columns predictions."""

    def __init__(self, num_classes: int, ignore_index: int = IGNORE_INDEX):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.confusion = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, preds, labels) -> "Metrics":
        preds, labels = np.asarray(preds), np.asarray(labels)
        if preds.shape != labels.shape:
            raise ValueError(f"prediction shape {preds.shape} != label shape {labels.shape}")
        keep = labels != self.ignore_index
        k = self.num_classes
        idx = labels[keep].astype(np.int64) * k + preds[keep].astype(np.int64)
        self.confusion += np.bincount(idx, minlength=k * k).reshape(k, k)
        return self

    def __iadd__(self, other: "Metrics") -> "Metrics":
        self.confusion += other.confusion
        return self

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN where the class is absent from both predictions and labels."""
        tp = np.diag(self.confusion).astype(np.float64)
        denom = self.confusion.sum(0) + self.confusion.sum(1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)

    def miou(self) -> Optional[float]:
        iou = self.iou()
        present = ~np.isnan(iou)
        return float(iou[present].mean()) if present.any() else None


def update_metrics(m: Metrics, preds, labels) -> Metrics:
    return m.update(preds, labels)


def miou(m: Metrics) -> tuple[np.ndarray, Optional[float]]:
    return m.iou(), m.miou()


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class Sample:
    image: np.ndarray  # 3×H×W in [0, 1]
    labels: np.ndarray  # H×W uint8, 255 = ignore

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be 3×H×W, got {self.image.shape}")
        if self.labels.shape != self.image.shape[1:]:
            raise ValueError("image and label extents differ")
        h, w = self.labels.shape
        if h % 8 or w % 8:
            raise ValueError(f"extents {h}x{w} must be divisible by 8")


def class_colors(k: int) -> np.ndarray:
    """Well-separated RGB colors in [0, 1], index 0 being the background."""
    base = np.array(
        [[0.25, 0.25, 0.25], [0.85, 0.2, 0.2], [0.2, 0.75, 0.25], [0.2, 0.3, 0.85], [0.85, 0.8, 0.2],
         [0.75, 0.25, 0.8], [0.2, 0.8, 0.8], [0.95, 0.55, 0.15]]
    )
    if k <= len(base):
        return base[:k]
    rng = np.random.default_rng(1234)
    return np.concatenate([base, rng.uniform(0.1, 0.9, size=(k - len(base), 3))])


def synth_dataset(seed: int, count: int, height: int = 64, width: int = 96, num_classes: int = 3,
                  noise: float = 0.06) -> list[Sample]:
    """Scenes of rectangles and discs on a background, with exact masks.

    Shapes that would push the foreground above 60% of the image are dropped,
    so the background always covers at least 40% of the pixels.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if height % 8 or width % 8:
        raise ValueError("extents must be divisible by 8")
    rng = np.random.default_rng(seed)
    colors = class_colors(num_classes)
    yy, xx = np.mgrid[0:height, 0:width]
    out = []
    for _ in range(count):
        labels = np.zeros((height, width), dtype=np.uint8)
        for _ in range(int(rng.integers(1, 5))):
            cls = int(rng.integers(1, num_classes))
            if rng.random() < 0.5:
                h = int(rng.integers(height // 8, height // 2 + 1))
                w = int(rng.integers(width // 8, width // 2 + 1))
                y0 = int(rng.integers(0, height - h + 1))
                x0 = int(rng.integers(0, width - w + 1))
                mask = (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
            else:
                r = rng.uniform(min(height, width) / 10, min(height, width) / 4)
                cy, cx = rng.uniform(0, height), rng.uniform(0, width)
                mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
            trial = np.where(mask, cls, labels)
            if np.mean(trial != 0) <= 0.6:
                labels = trial.astype(np.uint8)
        jitter = rng.uniform(-0.08, 0.08, size=(num_classes, 3))
        img = (colors + jitter)[labels].transpose(2, 0, 1)
        img = np.clip(img + rng.normal(0.0, noise, size=img.shape), 0.0, 1.0)
        out.append(Sample(img, labels))
    return out


def stack(samples: Sequence[Sample]) -> tuple[Tensor, np.ndarray]:
    return Tensor(np.stack([s.image for s in samples])), np.stack([s.labels for s in samples])


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    optimizer: str = "adam"
    lr_base: float = 1e-3
    weight_decay: float = 2e-4
    power: float = 0.9
    seed: int = 0
    eval_batch_size: int = 16


@dataclass
class HistoryRow:
    epoch: int
    iteration: int
    lr: float
    loss: float
    miou: float


def history_csv(rows: Sequence[HistoryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "iteration", "lr", "loss", "miou"])
    for r in rows:
        w.writerow([r.epoch, r.iteration, repr(r.lr), repr(r.loss), repr(r.miou)])
    return buf.getvalue()


def predict(net: MscfNet, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    was = net.training
    net.eval()
    try:
        preds = [np.argmax(net(Tensor(images[i:i + batch_size])).data, axis=1) for i in range(0, len(images), batch_size)]
    finally:
        net.train(was)
    return np.concatenate(preds).astype(np.uint8)


def evaluate(net: MscfNet, samples: Sequence[Sample], batch_size: int = 16) -> Metrics:
    m = Metrics(net.cfg.num_classes)
    images = np.stack([s.image for s in samples])
    labels = np.stack([s.labels for s in samples])
    return m.update(predict(net, images, batch_size), labels)


def train_step(net: MscfNet, opt: OptimizerState, images: Tensor, labels: np.ndarray, lr: float,
               no_decay: Optional[frozenset] = None) -> float:
    net.train()
    net.zero_grad()
    with Tape() as tape:
        loss = cross_entropy_loss(net(images), labels)
    value = loss.item()
    if not math.isfinite(value):
        raise DivergenceError(opt.iteration, value)
    backward(tape, loss)
    if no_decay is None:
        no_decay = frozenset(decay_exempt(net))
    optimizer_step(opt, net.parameters(trainable_only=True), lr, no_decay)
    return value


def snapshot(net: MscfNet) -> dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in net.named_parameters()}


def restore(net: MscfNet, state: dict[str, np.ndarray]) -> None:
    for n, p in net.named_parameters():
        p.data[...] = state[n]


@dataclass
class TrainResult:
    history: list[HistoryRow]
    best_miou: float
    best_state: dict
    epoch_losses: list[float]


def train_loop(net: MscfNet, train_set: Sequence[Sample], val_set: Sequence[Sample], cfg: TrainConfig,
               history_path: Optional[Path] = None) -> TrainResult:
    """Train with seeded per-epoch shuffling and per-iteration poly LR.

    Evaluates mean IoU on ``val_set`` after each epoch; ``best_state`` is the
    parameter snapshot with the highest validation mIoU (earliest on ties).
    """
    if not train_set:
        raise ValueError("empty training set")
    shapes = {s.image.shape for s in train_set} | {s.image.shape for s in val_set}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent sample geometry: {sorted(shapes)}")
    opt = (adam_config if cfg.optimizer == "adam" else sgd_config)(cfg.lr_base, cfg.weight_decay)
    n_batches = math.ceil(len(train_set) / cfg.batch_size)
    max_it = cfg.epochs * n_batches
    rng = np.random.default_rng(cfg.seed)
    no_decay = frozenset(decay_exempt(net))
    history: list[HistoryRow] = []
    epoch_losses: list[float] = []
    best, best_state = -1.0, snapshot(net)
    it = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        losses = []
        lr = cfg.lr_base
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            images, labels = stack([train_set[i] for i in idx])
            lr = poly_lr(cfg.lr_base, it, max_it, cfg.power)
            try:
                losses.append(train_step(net, opt, images, labels, lr, no_decay))
            except DivergenceError as e:
                raise DivergenceError(it, e.loss) from None
            it += 1
        mean_loss = float(np.mean(losses))
        epoch_losses.append(mean_loss)
        score = evaluate(net, val_set, cfg.eval_batch_size).miou() if val_set else None
        score = float("nan") if score is None else score
        history.append(HistoryRow(epoch, it, lr, mean_loss, score))
        log.info("epoch %d  it %d  lr %.3g  loss %.4f  mIoU %.4f", epoch, it, lr, mean_loss, score)
        if score > best or (not val_set):
            # without a held-out split the latest epoch stands in for the best
            best, best_state = (score if val_set else best), snapshot(net)
        if history_path is not None:
            Path(history_path).write_text(history_csv(history))
    return TrainResult(history, best if val_set else float("nan"), best_state, epoch_losses)


def smoothed(values: Sequence[float], window: int = 5) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v.copy()
    return np.convolve(v, np.ones(window) / window, mode="valid")
