"""Training, finetuning, and evaluation for both tasks.

Classification runs momentum SGD with a multi-step learning-rate decay;
denoising finetunes follow the standard Adam recipe (50 epochs, 1e-4,
divided by 10 at epoch 40). Desk-scale defaults live in the preset
constructors at the bottom; everything is deterministic given the config
seed and the dataset seed.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .autograd import SGD, Tape, Tensor, backward, loss as loss_op
from .data import DatasetHandle
from .errors import ConfigError, FormatError, NumericError
from .netgraph import Network, forward_full, save_checkpoint

PSNR_CAP_DB = 100.0

METRICS_HEADER = ["epoch", "split", "loss", "metric"]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.05
    lr_milestones: tuple[int, ...] = ()
    lr_decay: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    loss: str | None = None  # derived from the dataset task when None
    eval_every: int = 1
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr < 0 or self.lr_decay <= 0:
            raise ConfigError("lr must be >= 0 and lr_decay > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer must be sgd or adam")
        if list(self.lr_milestones) != sorted(set(self.lr_milestones)):
            raise ConfigError("lr_milestones must be strictly increasing")
        if self.lr_milestones and self.lr_milestones[-1] >= self.epochs:
            raise ConfigError("lr_milestones must be < epochs")
        if self.loss is not None and self.loss not in ("cross_entropy", "mse"):
            raise ConfigError("loss must be cross_entropy or mse")


@dataclass(frozen=True)
class Metrics:
    epoch: int
    split: str  # train or test
    loss: float
    metric: float  # top-1 accuracy or mean PSNR (dB)
    seconds: float = 0.0


class Adam:
    """Adam with bias correction; ``step`` consumes and clears gradients."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self._t = 0

    def step(self) -> None:
        self._t += 1
        bc1 = 1.0 - self.beta1 ** self._t
        bc2 = 1.0 - self.beta2 ** self._t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                raise ConfigError("adam step with a missing gradient; run backward first")
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def _loss_kind(cfg: TrainConfig, data: DatasetHandle) -> str:
    if cfg.loss is not None:
        return cfg.loss
    return "mse" if data.task == "denoise" else "cross_entropy"


def _psnr_db(pred: np.ndarray, target: np.ndarray) -> float:
    """PSNR for unit-scale images, capped so identical pairs stay finite."""
    mse = float(np.mean((np.asarray(pred, np.float64) - target) ** 2))
    if mse <= 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def _batch_metric(task: str, out: np.ndarray, yb: np.ndarray) -> float:
    if task == "classify":
        return float((out.argmax(axis=1) == yb).mean())
    return float(np.mean([_psnr_db(out[i], yb[i]) for i in range(len(out))]))


def _make_optimizer(cfg: TrainConfig, net: Network):
    if cfg.optimizer == "adam":
        return Adam(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    return SGD(net.parameters(), lr=cfg.lr, momentum=cfg.momentum,
               weight_decay=cfg.weight_decay)


def _lr_at(cfg: TrainConfig, epoch: int) -> float:
    passed = sum(1 for m in cfg.lr_milestones if epoch >= m)
    return cfg.lr * cfg.lr_decay ** passed


def train(net: Network, data: DatasetHandle, cfg: TrainConfig,
          ckpt_path=None) -> list[Metrics]:
    """SGD/Adam loop with multi-step decay; returns the metrics history.

    When ``ckpt_path`` is given, the parameters achieving the best test
    metric seen so far are saved there (overwritten as the best improves).
    """
    task = data.task
    kind = _loss_kind(cfg, data)
    if task == "denoise" and kind == "cross_entropy":
        raise ConfigError("cross_entropy loss cannot train a denoiser")
    opt = _make_optimizer(cfg, net)
    history: list[Metrics] = []
    best_metric = -math.inf
    t0 = time.monotonic()
    for epoch in range(cfg.epochs):
        opt.lr = _lr_at(cfg, epoch)
        losses: list[float] = []
        metrics: list[float] = []
        for bi, (xb, yb) in enumerate(data.train_batches(cfg.batch_size, epoch)):
            if len(xb) < 2:
                continue  # train-mode norm needs at least 2 samples
            tape = Tape()
            try:
                out = forward_full(net, Tensor(xb, dtype=net.dtype), "train", tape=tape)
                scalar = loss_op(out, yb, kind, tape=tape)
            except NumericError as exc:
                raise NumericError(
                    f"divergence at epoch {epoch} batch {bi}: {exc}") from exc
            value = scalar.item()
            if not math.isfinite(value):
                raise NumericError(f"loss became {value} at epoch {epoch} batch {bi}")
            backward(tape, scalar)
            opt.step()
            losses.append(value)
            metrics.append(_batch_metric(task, out.data, yb))
        history.append(Metrics(epoch, "train", float(np.mean(losses)),
                               float(np.mean(metrics)), time.monotonic() - t0))
        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            ev = evaluate(net, data)
            history.append(replace(ev, epoch=epoch, seconds=time.monotonic() - t0))
            if ev.metric > best_metric:
                best_metric = ev.metric
                if ckpt_path is not None:
                    save_checkpoint(net, ckpt_path)
    return history


def finetune(net: Network, data: DatasetHandle, cfg: TrainConfig,
             ckpt_path=None) -> list[Metrics]:
    """Same loop as train; exists so call sites say what they mean."""
    return train(net, data, cfg, ckpt_path=ckpt_path)


def evaluate(net: Network, data: DatasetHandle, batch_size: int = 256) -> Metrics:
    """Eval-mode metrics over the test split (norm uses running stats)."""
    task = data.task
    kind = "mse" if task == "denoise" else "cross_entropy"
    losses: list[float] = []
    weights: list[int] = []
    per_sample: list[float] = []
    for xb, yb in data.test_batches(batch_size):
        out = forward_full(net, Tensor(xb, dtype=net.dtype), "eval")
        losses.append(loss_op(out, yb, kind).item())
        weights.append(len(xb))
        if task == "classify":
            per_sample.extend((out.data.argmax(axis=1) == yb).astype(float).tolist())
        else:
            per_sample.extend(_psnr_db(out.data[i], yb[i]) for i in range(len(xb)))
    mean_loss = float(np.average(losses, weights=weights))
    return Metrics(-1, "test", mean_loss, float(np.mean(per_sample)))


# ---------------------------------------------------------------------------
# metrics CSV


def write_metrics(history: list[Metrics], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for m in history:
            writer.writerow([m.epoch, m.split, f"{m.loss:.9g}", f"{m.metric:.9g}"])


def read_metrics(path) -> list[Metrics]:
    out: list[Metrics] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != METRICS_HEADER:
            raise FormatError(f"{path}: unexpected metrics CSV header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 fields")
            try:
                out.append(Metrics(int(row[0]), row[1], float(row[2]), float(row[3])))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: bad field: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# desk-scale presets


def classify_train_config(seed: int = 0) -> TrainConfig:
    """60 epochs of momentum SGD, lr 0.05 decayed 5x at 2/3 and 5/6."""
    return TrainConfig(epochs=60, batch_size=32, lr=0.05, lr_milestones=(40, 50),
                       lr_decay=0.2, momentum=0.9, weight_decay=1e-4, seed=seed)


def classify_finetune_config(seed: int = 0) -> TrainConfig:
    """Half the training budget at a tenth of the rate."""
    return TrainConfig(epochs=30, batch_size=32, lr=0.005, lr_milestones=(20, 25),
                       lr_decay=0.2, momentum=0.9, weight_decay=1e-4, seed=seed)


def denoise_train_config(seed: int = 0) -> TrainConfig:
    """Adam from scratch for the denoiser baseline."""
    return TrainConfig(epochs=40, batch_size=32, lr=1e-3, lr_milestones=(30,),
                       lr_decay=0.1, optimizer="adam", loss="mse", seed=seed)


def denoise_finetune_config(seed: int = 0) -> TrainConfig:
    """The published recipe: 50 epochs Adam at 1e-4, divided by 10 at 40."""
    return TrainConfig(epochs=50, batch_size=32, lr=1e-4, lr_milestones=(40,),
                       lr_decay=0.1, optimizer="adam", loss="mse", seed=seed)
