"""Mini-batch training of the dual-branch model with validation-based selection."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .losses import total_loss
from .model import PREDICT_MODES, CausalModel, predict
from .nn import BackboneConfig, derive_seed

__all__ = [
    "TrainConfig",
    "TrainLogRow",
    "TrainResult",
    "TrainingAborted",
    "AdamState",
    "adam_step",
    "Adam",
    "SGD",
    "split_train_val",
    "train",
    "accuracy",
    "LOG_HEADER",
]

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "batch", "l_ce", "l_cr_sum", "l_total", "train_acc", "val_acc"]

# sub-seed tags (the model uses 0..2 for its branches)
_SHUFFLE_TAG, _SPLIT_TAG = 3, 4


@dataclass
class TrainConfig:
    lam: float = 0.1
    lr: float = 0.01
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    val_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    predict_mode: str = "interventional"
    optimizer: str = "adam"
    pooling: str = "mean"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("lr, epochs and batch_size must be positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie strictly inside (0, 1)")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("invalid Adam constants")
        if self.predict_mode not in PREDICT_MODES:
            raise ValueError(f"predict_mode must be one of {PREDICT_MODES}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        extra = set(d) - names
        if extra:
            raise ValueError(f"unknown train config keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class TrainLogRow:
    epoch: int
    batch: int
    l_ce: float
    l_cr_sum: float
    l_total: float
    train_acc: float
    val_acc: Optional[float] = None

    def as_csv(self) -> list[str]:
        return [
            str(self.epoch),
            str(self.batch),
            repr(self.l_ce),
            repr(self.l_cr_sum),
            repr(self.l_total),
            f"{self.train_acc:.6f}",
            "" if self.val_acc is None else f"{self.val_acc:.6f}",
        ]


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, rows: list[TrainLogRow]):
        super().__init__(message)
        self.rows = rows


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns the new parameter array and state."""
    if param.shape != grad.shape:
        raise ValueError(f"param {param.shape} and grad {grad.shape} differ")
    t = state.step + 1
    m = beta1 * state.m + (1 - beta1) * grad
    v = beta2 * state.v + (1 - beta2) * (grad * grad)
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    new = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new.astype(param.dtype, copy=False), AdamState(m, v, t)


class Adam:
    def __init__(self, params: dict[str, ad.Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = {k: AdamState(np.zeros_like(p.values), np.zeros_like(p.values)) for k, p in params.items()}

    def step(self, names) -> None:
        for k in names:
            p = self.params[k]
            g = p.grad if p.grad is not None else np.zeros_like(p.values)
            p.values, self.state[k] = adam_step(p.values, g, self.state[k], self.lr, self.beta1, self.beta2, self.eps)


class SGD:
    def __init__(self, params: dict[str, ad.Tensor], lr: float):
        self.params = params
        self.lr = lr

    def step(self, names) -> None:
        for k in names:
            p = self.params[k]
            if p.grad is not None:
                p.values = (p.values - self.lr * p.grad).astype(p.values.dtype, copy=False)


def split_train_val(ds: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Class-stratified random holdout, deterministic in ``seed``."""
    if len(ds) < 2:
        raise ValueError("need at least two samples to split")
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must lie strictly inside (0, 1)")
    rng = derive_seed(seed, _SPLIT_TAG)
    val_idx = []
    for k in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == k)
        if 0 < idx.size < 2:
            raise ValueError(f"class {ds.class_names[k]!r} has fewer than 2 samples; cannot split")
        if idx.size == 0:
            continue
        n_val = min(max(1, int(round(val_fraction * idx.size))), idx.size - 1)
        val_idx.append(rng.permutation(idx)[:n_val])
    val = np.sort(np.concatenate(val_idx))
    train = np.setdiff1d(np.arange(len(ds)), val)
    return ds.subset(train), ds.subset(val)


def accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.asarray(pred) == np.asarray(labels))) if len(labels) else float("nan")


def predict_dataset(model: CausalModel, ds: Dataset, mode: str, batch_size: int = 256) -> np.ndarray:
    preds = []
    for s in range(0, len(ds), batch_size):
        out = model.forward(ds.images[s:s + batch_size])
        preds.append(predict(out, mode))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


@dataclass
class TrainResult:
    model: CausalModel  # parameters of the best validation epoch
    rows: list[TrainLogRow]
    best_epoch: int
    best_val_acc: float
    val_history: list[float] = field(default_factory=list)
    val_set: Optional[Dataset] = None


def _write_log(path: Path, rows: list[TrainLogRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow(r.as_csv())


def train(
    config: TrainConfig,
    dataset: Dataset,
    fem_cfg: BackboneConfig | None = None,
    sam_cfg: BackboneConfig | None | str = "same",
    use_sam: bool = True,
    log_path=None,
    on_epoch_end: Callable[[int, CausalModel], None] | None = None,
) -> TrainResult:
    """Train on ``dataset`` (all of it is training data; a stratified slice is held out).

    Each batch runs one forward pass and one backward pass of the total
    loss; the classifier, activation and extraction groups are then updated
    from those gradients, all evaluated at the pre-update parameters.
    ``use_sam=False`` builds the plain baseline network (requires ``lam == 0``).
    """
    if not use_sam and config.lam != 0:
        raise ValueError("a model without the activation branch needs lam == 0")
    K = dataset.num_classes
    present = set(np.unique(dataset.labels).tolist())
    if present != set(range(K)):
        raise ValueError(f"training labels cover {sorted(present)}, expected all of 0..{K - 1}")
    mode = config.predict_mode if use_sam else "baseline"

    fem_cfg = fem_cfg or BackboneConfig(input_size=dataset.image_size)
    if fem_cfg.input_size != dataset.image_size:
        raise ValueError(f"backbone expects {fem_cfg.input_size}px images, data has {dataset.image_size}px")
    model = CausalModel(fem_cfg, sam_cfg if use_sam else None, K, config.seed, config.pooling)
    train_set, val_set = split_train_val(dataset, config.val_fraction, config.seed)

    params = model.params
    if config.optimizer == "adam":
        opt = Adam(params, config.lr, config.beta1, config.beta2, config.eps)
    else:
        opt = SGD(params, config.lr)
    groups = [list(params.group(g)) for g in ("cls", "sam", "fem")]

    rows: list[TrainLogRow] = []
    best_state, best_acc, best_epoch = None, -1.0, -1
    val_history = []
    n = len(train_set)
    for epoch in range(config.epochs):
        order = derive_seed(config.seed, _SHUFFLE_TAG, epoch).permutation(n)
        correct = seen = 0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            x, y = train_set.images[idx], train_set.labels[idx]
            params.zero_grad()
            with ad.Tape() as tape:
                out = model.forward(x)
                losses = total_loss(out, y, config.lam)
            if not math.isfinite(losses.l_total):
                if log_path is not None:
                    _write_log(Path(log_path), rows)
                raise TrainingAborted(f"non-finite loss at epoch {epoch}, batch {b}", rows)
            tape.backward(losses.total)
            for names in groups:
                opt.step(names)
            correct += int((predict(out, "baseline" if out.strat_logits is None else mode) == y).sum())
            seen += len(y)
            rows.append(TrainLogRow(epoch, b, losses.l_ce, losses.l_cr_sum, losses.l_total, correct / seen))
        val_acc = accuracy(predict_dataset(model, val_set, mode), val_set.labels)
        rows[-1].val_acc = val_acc
        val_history.append(val_acc)
        log.info("epoch %d  loss %.4f  train %.3f  val %.3f", epoch, rows[-1].l_total, rows[-1].train_acc, val_acc)
        if val_acc > best_acc:
            best_acc, best_epoch, best_state = val_acc, epoch, params.snapshot()
        if on_epoch_end is not None:
            on_epoch_end(epoch, model)

    if log_path is not None:
        _write_log(Path(log_path), rows)
    for k, v in best_state.items():
        params[k].values = v
    return TrainResult(model, rows, best_epoch, best_acc, val_history, val_set)
