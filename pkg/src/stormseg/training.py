"""Adam, reduce-on-plateau scheduling with early termination, and the epoch loop."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import CLASS_NAMES
from .climate_data.dataset import (
    Dataset,
    class_frequencies,
    compute_class_weights,
    dataset_stats,
    split_arrays,
)
from .climate_data.sample import BASELINE_CHANNELS
from .losses import ClassWeights, LossSpec, compute_loss, one_hot
from .metrics import (
    METRIC_NAMES,
    ConfusionMatrix,
    MetricsReport,
    confusion_matrix,
    format_value,
    merge,
    metrics_from_cm,
)
from .model import ModelConfig, ModelParams, forward, init_model, predict_labels
from .tensor import NonFiniteError, Tensor, backward

log = logging.getLogger(__name__)

TC = 1


class TrainingDivergedError(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# optimiser
# ----------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update, applied in place to ``params``."""
    missing = [k for k in params if k not in grads]
    if missing:
        raise KeyError(f"no gradient for parameters {missing[:5]}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        arr = p.data if isinstance(p, Tensor) else p
        if name not in state.m:
            state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        arr -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ----------------------------------------------------------------------------
# scheduler
# ----------------------------------------------------------------------------

@dataclass
class SchedulerState:
    """Reduce-on-plateau over a score where lower is better (validation loss)."""

    lr: float = 1e-3
    best: float = math.inf
    since_improvement: int = 0
    since_decay: int = 0
    patience: int = 3
    factor: float = 0.5
    min_delta: float = 1e-4
    min_lr: float = 1e-6
    early_stop_patience: int = 10
    stop: bool = False


def scheduler_step(state: SchedulerState, val_score: float) -> SchedulerState:
    if state.lr < state.min_lr:
        state.stop = True
        return state
    if val_score < state.best - state.min_delta:
        state.best = val_score
        state.since_improvement = 0
        state.since_decay = 0
        return state
    state.since_improvement += 1
    state.since_decay += 1
    if state.since_decay >= state.patience:
        state.lr *= state.factor
        state.since_decay = 0
    if state.since_improvement >= state.early_stop_patience:
        state.stop = True
    return state


# ----------------------------------------------------------------------------
# configuration and history
# ----------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 15
    lr: float = 1e-3
    loss: dict = field(default_factory=lambda: {"variant": "jaccard"})
    batch_size: int = 4
    seed: int = 0
    channels: tuple[str, ...] = BASELINE_CHANNELS
    lr_schedule: bool = True
    scheduler: dict = field(default_factory=dict)
    eval_every: int = 1
    select: str = "final"          # or "best" (highest validation TC recall)
    augment_roll: bool = False
    adam: dict = field(default_factory=dict)

    def __post_init__(self):
        self.channels = tuple(self.channels)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.select not in ("final", "best"):
            raise ValueError("select must be 'final' or 'best'")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


def resolve_loss(loss: dict | LossSpec, train_labels: Optional[np.ndarray] = None) -> LossSpec:
    """Build a LossSpec; ``"weights": "inverse"`` (or ``"inverse_sqrt"``) derives
    weights from the training labels' class frequencies."""
    if isinstance(loss, LossSpec):
        return loss
    d = dict(loss)
    w = d.get("weights")
    if isinstance(w, str):
        if train_labels is None:
            raise ValueError(f"weights={w!r} needs training labels")
        norm = d.pop("weight_normalization",
                     "convex" if d["variant"] == "weighted_jaccard" else "mean_one")
        cw = compute_class_weights(class_frequencies([train_labels]), w, norm, smoothing=1e-6)
        d["weights"] = list(cw.w)
        d["weight_normalization"] = norm
    return LossSpec.from_dict(d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    lr: float
    val_loss: Optional[float] = None
    val_report: Optional[MetricsReport] = None


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    stopped_early: bool = False
    best_epoch: Optional[int] = None

    def __len__(self):
        return len(self.epochs)

    def column(self, name: str) -> list:
        return [getattr(e, name) for e in self.epochs]

    def to_csv(self) -> str:
        """Columns epoch, split, metric, value; per-class metrics as ``TC.recall``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "split", "metric", "value"])
        for e in self.epochs:
            w.writerow([e.epoch, "train", "loss", repr(e.train_loss)])
            w.writerow([e.epoch, "train", "lr", repr(e.lr)])
            if e.val_loss is not None:
                w.writerow([e.epoch, "val", "loss", repr(e.val_loss)])
            if e.val_report is not None:
                for c, per in enumerate(e.val_report.scores):
                    for m in METRIC_NAMES:
                        w.writerow([e.epoch, "val", f"{CLASS_NAMES[c]}.{m}", format_value(per[m])])
        return buf.getvalue()


# ----------------------------------------------------------------------------
# inference helpers
# ----------------------------------------------------------------------------

def predict_probs(params: ModelParams, cfg: ModelConfig, x: np.ndarray, batch_size: int = 8) -> np.ndarray:
    outs = [forward(x[i:i + batch_size], params, cfg, "eval").data
            for i in range(0, len(x), batch_size)]
    return np.concatenate(outs) if outs else np.zeros((0, cfg.class_count) + x.shape[2:])


def evaluate(params: ModelParams, cfg: ModelConfig, x: np.ndarray, y: np.ndarray,
             batch_size: int = 8) -> tuple[MetricsReport, ConfusionMatrix]:
    """Eval-mode forward over every sample; metrics from pooled confusion counts."""
    cm = ConfusionMatrix()
    for i in range(0, len(x), batch_size):
        pred = predict_labels(forward(x[i:i + batch_size], params, cfg, "eval"))
        cm = merge(cm, confusion_matrix(pred, y[i:i + batch_size]))
    return metrics_from_cm(cm), cm


def _pixel_accuracy(cm: ConfusionMatrix) -> float:
    total = int(cm.total[0])
    return int(cm.tp.sum()) / total if total else float("nan")


# ----------------------------------------------------------------------------
# the loop
# ----------------------------------------------------------------------------

@dataclass
class TrainData:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: Optional[np.ndarray] = None
    y_val: Optional[np.ndarray] = None
    stats: dict = field(default_factory=dict)
    channels: tuple[str, ...] = ()

    @classmethod
    def from_dataset(cls, ds: Dataset, channels: Sequence[str]) -> "TrainData":
        stats = dataset_stats(ds, channels)
        xt, yt, _ = split_arrays(ds, "train", channels, stats)
        if len(xt) == 0:
            raise ValueError(f"dataset {ds.root} has no training samples")
        xv, yv, _ = split_arrays(ds, "val", channels, stats)
        return cls(xt, yt, xv if len(xv) else None, yv if len(yv) else None, stats, tuple(channels))


def train(model_cfg: ModelConfig, data: "TrainData | Dataset", tcfg: TrainConfig,
          progress: bool = False) -> tuple[ModelParams, TrainHistory, LossSpec]:
    """Train from a fresh initialisation seeded by ``tcfg.seed``.

    ``data`` is either preloaded arrays or a Dataset read with ``tcfg.channels``.
    Returns the parameters (final epoch, or best validation TC recall with
    ``select="best"``), the per-epoch history and the resolved loss.
    """
    if isinstance(data, Dataset):
        data = TrainData.from_dataset(data, tcfg.channels)
    if data.x_train.shape[1] != model_cfg.input_channels:
        raise ValueError(f"data has {data.x_train.shape[1]} channels, model expects "
                         f"{model_cfg.input_channels}")
    h, w = data.x_train.shape[2:]
    if h % model_cfg.stride or w % model_cfg.stride:
        raise ValueError(f"grid {h}x{w} is incompatible with model stride {model_cfg.stride}")
    model_cfg = replace(model_cfg, seed=tcfg.seed)
    params = init_model(model_cfg)
    spec = resolve_loss(tcfg.loss, data.y_train)
    rng = np.random.default_rng(tcfg.seed)
    adam = AdamState(lr=tcfg.lr, **tcfg.adam)
    sched = SchedulerState(lr=tcfg.lr, **tcfg.scheduler)
    y_train_1h = one_hot(data.y_train)
    has_val = data.x_val is not None
    y_val_1h = one_hot(data.y_val) if has_val else None
    history = TrainHistory()
    best_key, best_params = -math.inf, None
    n = len(data.x_train)

    for epoch in range(1, tcfg.epochs + 1):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, n, tcfg.batch_size)):
            idx = order[start:start + tcfg.batch_size]
            xb, yb = data.x_train[idx], y_train_1h[idx]
            if tcfg.augment_roll:
                shift = int(rng.integers(0, w))
                xb, yb = np.roll(xb, shift, axis=-1), np.roll(yb, shift, axis=-1)
            try:
                loss = compute_loss(forward(xb, params, model_cfg, "train"), yb, spec)
                value = loss.item()
                if not math.isfinite(value):
                    raise NonFiniteError("loss")
                grads = backward(loss, params.params)
            except NonFiniteError as exc:
                raise TrainingDivergedError(f"non-finite value at epoch {epoch} batch {b}: {exc}") from None
            adam_step(params.params, grads, adam)
            total += value * len(idx)
            seen += len(idx)
        rec = EpochRecord(epoch, total / seen, adam.lr)

        score_for_sched = rec.train_loss
        if has_val and epoch % tcfg.eval_every == 0:
            probs = predict_probs(params, model_cfg, data.x_val)
            rec.val_loss = compute_loss(probs, y_val_1h, spec).item()
            rec.val_report, _ = evaluate(params, model_cfg, data.x_val, data.y_val)
            score_for_sched = rec.val_loss
            recall = rec.val_report.get(TC, "recall")
            key = -1.0 if recall is None else recall
            if key > best_key:
                best_key, best_params = key, params.copy()
                history.best_epoch = epoch
        history.epochs.append(rec)
        if progress:
            log.info("epoch %d train_loss=%.5f val_loss=%s lr=%.2e", epoch, rec.train_loss,
                     rec.val_loss, rec.lr)
        if tcfg.lr_schedule:
            scheduler_step(sched, score_for_sched)
            adam.lr = sched.lr
            if sched.stop:
                history.stopped_early = True
                break

    if tcfg.select == "best" and best_params is not None:
        params = best_params
    return params, history, spec


def train_pixel_accuracy(params: ModelParams, cfg: ModelConfig, x, y) -> tuple[float, ConfusionMatrix]:
    _, cm = evaluate(params, cfg, x, y)
    return _pixel_accuracy(cm), cm
