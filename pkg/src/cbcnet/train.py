"""Adam, the training loop and run reports."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import AugmentSpec, Dataset, augment
from .errors import DivergenceError, NumericError, ShapeError
from .model import Model, baseline_of, config_hash, count_conv_params, format_factor
from .tensor_core import softmax_cross_entropy


class Adam:
    """Adam with bias correction; moments are keyed by parameter name."""

    def __init__(self, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place."""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainReport:
    config_name: str
    config_hash: str
    seed: int
    epochs: list[EpochRecord] = field(default_factory=list)
    thresholds: list[float] = field(default_factory=list)
    best_acc: float | None = None
    epoch_exceeds: dict[str, int] = field(default_factory=dict)
    conv_param_count: int = 0
    baseline_name: str = ""
    baseline_conv_param_count: int = 0
    compression_factor: str = "1.00"
    wall_time: float | None = None

    def finalize(self) -> "TrainReport":
        accs = [e.val_accuracy for e in self.epochs]
        self.best_acc = max(accs) if accs else None
        self.epoch_exceeds = {}
        for t in self.thresholds:
            hit = epoch_exceeding(accs, t)
            if hit is not None:
                self.epoch_exceeds[f"{t:g}"] = hit
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def filename(self) -> str:
        return f"report-{self.config_hash}-s{self.seed}.json"


def epoch_exceeding(accuracies, threshold: float) -> int | None:
    """First 1-indexed epoch whose accuracy is strictly above ``threshold``."""
    for i, a in enumerate(accuracies):
        if a > threshold:
            return i + 1
    return None


def evaluate(model: Model, data: Dataset, batch_size: int = 128) -> tuple[float, float]:
    """Inference-mode ``(mean loss, accuracy)`` over ``data``."""
    n = len(data)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    total_loss, correct = 0.0, 0
    for start in range(0, n, batch_size):
        x = data.images[start : start + batch_size]
        y = data.labels[start : start + batch_size]
        logits = model.forward(x, training=False)
        loss, _ = softmax_cross_entropy(logits, y)
        total_loss += loss * len(y)
        correct += int((logits.argmax(axis=1) == y).sum())
    return total_loss / n, correct / n


def train(
    model: Model,
    train_data: Dataset,
    val_data: Dataset,
    epochs: int,
    batch_size: int = 128,
    seed: int = 0,
    thresholds=(),
    lr: float = 0.001,
    augment_spec: AugmentSpec | None = None,
    baseline: dict | None = None,
    record_time: bool = False,
    log=None,
) -> TrainReport:
    """Train ``model`` in place with Adam and return the per-epoch report.

    Shuffling and augmentation draw from streams derived from ``seed`` only,
    so identical arguments give identical reports.  A non-finite training loss
    raises :class:`DivergenceError`.
    """
    if len(train_data) == 0:
        raise ValueError("training set is empty")
    if epochs > 0 and len(val_data) == 0:
        raise ValueError("validation set is empty")
    baseline = baseline if baseline is not None else baseline_of(model.config)
    conv_count = count_conv_params(model.config)
    base_count = count_conv_params(baseline)
    report = TrainReport(
        config_name=model.config.get("name", "model"),
        config_hash=config_hash(model.config),
        seed=seed,
        thresholds=[float(t) for t in thresholds],
        conv_param_count=conv_count,
        baseline_name=baseline.get("name", "baseline"),
        baseline_conv_param_count=base_count,
        compression_factor=format_factor(base_count, conv_count),
    )
    shuffle_seq, aug_seq = np.random.SeedSequence(seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    aug_key = int(aug_seq.generate_state(1)[0])
    opt = Adam(lr=lr)
    t0 = time.perf_counter()
    n = len(train_data)
    for epoch in range(1, epochs + 1):
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            x = train_data.images[idx]
            if augment_spec is not None:
                x = np.stack(
                    [
                        augment(x[k], augment_spec, np.random.default_rng([aug_key, epoch, int(i)]))
                        for k, i in enumerate(idx)
                    ]
                )
            y = train_data.labels[idx]
            # overflow is reported as DivergenceError below, not as numpy warnings
            with np.errstate(over="ignore", invalid="ignore"):
                try:
                    logits = model.forward(x, training=True)
                    loss, grad = softmax_cross_entropy(logits, y)
                    if not math.isfinite(loss):
                        raise NumericError("loss is not finite")
                    model.backward(grad)
                except NumericError as exc:
                    raise DivergenceError(f"non-finite values at epoch {epoch}, batch offset {start}: {exc}") from exc
                opt.step(model.params(), model.grad)
            loss_sum += loss * len(idx)
        val_loss, val_acc = evaluate(model, val_data, batch_size)
        rec = EpochRecord(epoch, loss_sum / n, val_loss, val_acc)
        report.epochs.append(rec)
        if log is not None:
            log(f"epoch {epoch}: train_loss={rec.train_loss:.4f} val_loss={val_loss:.4f} val_acc={val_acc:.4f}")
    if record_time:
        report.wall_time = time.perf_counter() - t0
    return report.finalize()
