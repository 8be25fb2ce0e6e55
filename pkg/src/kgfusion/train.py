"""Training loops: entity-prediction adapters and fusion-based task classifiers."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np

from . import tensor as T
from .corpus import PAD, PartitionDataset, split_dataset
from .model import (
    AdapterModule,
    ClassifierHead,
    EncoderModel,
    EntityHead,
    FusionLayer,
    LinearHead,
    ParameterGroup,
    encode,
)
from .tensor import Tensor

Metric = Literal["accuracy", "micro_f1"]


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN or infinite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    patience: int = 5
    batch_size: int = 16
    learning_rate: float = 1e-3
    warmup_fraction: float = 0.1
    max_seq_len: int = 32
    seed: int = 0
    metric: Metric = "accuracy"
    holdout_fraction: float = 0.1
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ValueError("epochs, patience and batch_size must be >= 1")
        if not 0 < self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.metric not in ("accuracy", "micro_f1"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if not 0 <= self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must lie in [0, 1)")


def stlr_lr(step: int, total_steps: int, peak: float, warmup_fraction: float = 0.1) -> float:
    """Slanted triangular schedule: linear rise to ``peak`` at step ceil(f*T), linear decay to 0 at T."""
    if total_steps < 2:
        raise ValueError("the schedule needs at least 2 steps")
    if not 1 <= step <= total_steps:
        raise ValueError(f"step {step} outside 1..{total_steps}")
    warm = max(1, math.ceil(warmup_fraction * total_steps - 1e-9))
    if step <= warm:
        return peak * step / warm
    return peak * (total_steps - step) / (total_steps - warm)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_update(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: float) -> AdamState:
    """Bias-corrected Adam step applied in place to ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must align")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient; step aborted")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


# -- metrics and reports ------------------------------------------------------------------

def accuracy(y_true, y_pred) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.size == 0:
        raise ValueError("accuracy of an empty dataset")
    return float((y_true == y_pred).mean())


def micro_f1(y_true, y_pred) -> float:
    """2TP / (2TP + FP + FN) pooled over all labels of a 0/1 indicator matrix."""
    y_true, y_pred = np.asarray(y_true).astype(bool), np.asarray(y_pred).astype(bool)
    if y_true.size == 0:
        raise ValueError("micro-F1 of an empty dataset")
    tp = int((y_true & y_pred).sum())
    fp = int((~y_true & y_pred).sum())
    fn = int((y_true & ~y_pred).sum())
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


@dataclass
class RunReport:
    seeds: list[int]
    scores: list[float]
    best_epochs: list[int]
    metric: str = "accuracy"
    history: list[dict] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores))

    @property
    def std(self) -> float:
        return float(np.std(self.scores, ddof=1)) if len(self.scores) > 1 else 0.0

    def to_tsv(self) -> str:
        lines = ["seed\tmetric\tscore\tbest_epoch"]
        lines += [f"{s}\t{self.metric}\t{sc:.6f}\t{e}" for s, sc, e in zip(self.seeds, self.scores, self.best_epochs)]
        lines.append(f"mean\t{self.mean:.6f}\tstd\t{self.std:.6f}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_tsv())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunReport":
        seeds, scores, epochs, metric = [], [], [], "accuracy"
        with open(path, encoding="utf-8") as fh:
            rows = [line.rstrip("\n").split("\t") for line in fh if line.strip()]
        for row in rows[1:]:
            if row[0] == "mean":
                continue
            seeds.append(int(row[0]))
            metric = row[1]
            scores.append(float(row[2]))
            epochs.append(int(row[3]))
        return cls(seeds, scores, epochs, metric)


def repeated_runs(run: Callable[[int], tuple[float, int]], seeds: Sequence[int], metric: str = "accuracy") -> RunReport:
    """Call ``run(seed) -> (score, best_epoch)`` for every seed, in order."""
    if not seeds:
        raise ValueError("repeated_runs needs at least one seed")
    scores, epochs = [], []
    for seed in seeds:
        score, best_epoch = run(seed)
        scores.append(float(score))
        epochs.append(int(best_epoch))
    return RunReport(list(seeds), scores, epochs, metric)


# -- model assembled for prediction ---------------------------------------------------------

@dataclass
class KnowledgeModel:
    """Frozen encoder, optional adapter or fusion layer, and a linear head."""

    base: EncoderModel
    head: LinearHead
    active: AdapterModule | FusionLayer | None = None

    def logits(self, ids, mask, training: bool = False, rng=None) -> Tensor:
        return self.head(encode(self.base, ids, mask, self.active, training, rng))

    def decision_function(self, ids, mask, batch_size: int = 256) -> np.ndarray:
        out = []
        for start in range(0, len(ids), batch_size):
            b_ids, b_mask = _trim(ids[start:start + batch_size], mask[start:start + batch_size])
            out.append(self.logits(b_ids, b_mask).data)
        return np.concatenate(out) if out else np.zeros((0, self.head.n_labels))

    @property
    def multilabel(self) -> bool:
        return bool(getattr(self.head, "multilabel", False))

    def predict(self, ids, mask) -> np.ndarray:
        scores = self.decision_function(ids, mask)
        if self.multilabel:
            return (scores > 0.0).astype(np.int64)
        return scores.argmax(axis=1)


def evaluate(model: KnowledgeModel, ids, mask, labels, metric: Metric = "accuracy") -> float:
    """Accuracy for single-label heads; micro-F1 thresholds sigmoid outputs at 0.5."""
    if len(ids) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = model.predict(ids, mask)
    if metric == "micro_f1":
        labels = np.asarray(labels)
        if labels.ndim == 1:
            n = model.head.n_labels
            labels = np.eye(n, dtype=np.int64)[labels]
            pred = np.eye(n, dtype=np.int64)[pred] if pred.ndim == 1 else pred
        return micro_f1(labels, pred)
    return accuracy(labels, pred)


def _trim(ids: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Drop trailing columns that are padding in every row."""
    used = np.flatnonzero(mask.any(axis=0))
    width = int(used[-1]) + 1 if used.size else 1
    return ids[:, :width], mask[:, :width]


def mask_from_ids(ids: np.ndarray) -> np.ndarray:
    return (np.asarray(ids) != PAD).astype(np.int64)


# -- generic optimisation loop --------------------------------------------------------------

def _loss(model: KnowledgeModel, ids, mask, labels, training, rng) -> Tensor:
    ids, mask = _trim(ids, mask)
    logits = model.logits(ids, mask, training, rng)
    if model.multilabel:
        return T.bce_with_logits(logits, labels)
    return T.cross_entropy_loss(logits, labels)


def _mean_loss(model: KnowledgeModel, ids, mask, labels, batch_size: int = 256) -> float:
    total = 0.0
    for start in range(0, len(ids), batch_size):
        sl = slice(start, start + batch_size)
        total += _loss(model, ids[sl], mask[sl], labels[sl], False, None).item() * len(ids[sl])
    return total / len(ids)


def fit_model(model: KnowledgeModel, trainable: Sequence[ParameterGroup], train, val, cfg: TrainConfig):
    """Adam + slanted triangular LR + early stopping on validation loss.

    ``train`` and ``val`` are ``(ids, mask, labels)`` triples; with an empty
    validation set the training loss is monitored instead. The parameters of
    the best epoch (epoch 0 is the starting point) are restored. Returns
    ``(best_epoch, history)``.
    """
    params = [p for group in trainable for p in group.parameters()]
    ids, mask, labels = train
    n = len(ids)
    if n == 0:
        raise ValueError("empty training set")
    monitor_set = val if val is not None and len(val[0]) else train
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = max(2, cfg.epochs * steps_per_epoch)
    state = AdamState.for_params(params)
    dropout_rng = np.random.default_rng([cfg.seed, 0x5EED])

    def monitor():
        return _mean_loss(model, *monitor_set)

    best_loss = monitor()
    best_epoch, best_state = 0, [p.data.copy() for p in params]
    history = [{"epoch": 0, "monitor_loss": best_loss}]
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        running = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            step += 1
            for p in params:
                p.grad = None
            loss = _loss(model, ids[idx], mask[idx], labels[idx], True, dropout_rng)
            if not math.isfinite(loss.item()):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            clip_by_global_norm(grads, cfg.clip_norm)
            adam_update(params, grads, state, stlr_lr(min(step, total_steps), total_steps,
                                                      cfg.learning_rate, cfg.warmup_fraction))
            running += loss.item() * len(idx)
        current = monitor()
        history.append({"epoch": epoch, "train_loss": running / n, "monitor_loss": current})
        if current < best_loss:
            best_loss, best_epoch = current, epoch
            best_state = [p.data.copy() for p in params]
        elif epoch - best_epoch >= cfg.patience:
            break
    for p, data in zip(params, best_state):
        p.data = data
        p.grad = None
    return best_epoch, history


def train_adapter(base: EncoderModel, ds: PartitionDataset, cfg: TrainConfig, bottleneck: int = 16,
                  layers: Sequence[int] | None = None) -> tuple[AdapterModule, EntityHead, RunReport]:
    """Train one adapter plus entity head on a partition; the base stays frozen.

    The report's score is the training-set entity-prediction accuracy at the
    restored checkpoint.
    """
    if len(ds) == 0:
        raise ValueError("empty partition dataset")
    base.freeze(True)
    d = base.config.hidden
    layers = tuple(range(base.config.layers)) if layers is None else tuple(layers)
    adapter = AdapterModule(d, bottleneck, layers, ds.partition_index, seed=_derive(cfg.seed, 1))
    head = EntityHead(d, ds.n_labels, ds.partition_index, seed=_derive(cfg.seed, 2))
    train_ds, val_ds = split_dataset(ds, cfg.holdout_fraction, cfg.seed)
    model = KnowledgeModel(base, head, adapter)
    train = train_ds.arrays()
    val = val_ds.arrays() if len(val_ds) else None
    best_epoch, history = fit_model(model, [adapter, head], train, val, cfg)
    score = evaluate(model, train[0], train[1], train[2], "accuracy")
    return adapter, head, RunReport([cfg.seed], [score], [best_epoch], "accuracy", history)


def train_classifier(base: EncoderModel, train, val, cfg: TrainConfig, n_classes: int,
                     adapters: Sequence[AdapterModule] | None = None, multilabel: bool = False,
                     ) -> tuple[FusionLayer | None, ClassifierHead, RunReport]:
    """Task head on the frozen base, with a fusion layer over ``adapters`` when given.

    ``train``/``val`` are ``(ids, mask, labels)``; the report score is the
    validation metric (training metric when there is no validation data).
    """
    base.freeze(True)
    d = base.config.hidden
    labels = np.asarray(train[2])
    if multilabel:
        if labels.ndim != 2 or labels.shape[1] != n_classes:
            raise ValueError("multi-label targets must be an [n, n_classes] indicator matrix")
    elif labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range for {n_classes} classes")
    fusion = None
    trainable: list[ParameterGroup] = []
    if adapters is not None:
        if not adapters:
            raise ValueError("fusion needs at least one adapter")
        for a in adapters:
            a.freeze(True)
        layers = sorted(set().union(*(a.layer_indices for a in adapters)))
        fusion = FusionLayer(adapters, d, layers, seed=_derive(cfg.seed, 3))
        trainable.append(fusion)
    head = ClassifierHead(d, n_classes, multilabel, seed=_derive(cfg.seed, 4))
    trainable.append(head)
    model = KnowledgeModel(base, head, fusion)
    has_val = val is not None and len(val[0]) > 0
    best_epoch, history = fit_model(model, trainable, train, val if has_val else None, cfg)
    scored = val if has_val else train
    score = evaluate(model, *scored, metric=cfg.metric)
    return fusion, head, RunReport([cfg.seed], [score], [best_epoch], cfg.metric, history)


def train_fusion(base: EncoderModel, adapters: Sequence[AdapterModule], train, val, cfg: TrainConfig,
                 n_classes: int, multilabel: bool = False) -> tuple[FusionLayer, ClassifierHead, RunReport]:
    """Fusion layer + classifier head over frozen adapters and a frozen base."""
    if not adapters:
        raise ValueError("train_fusion needs at least one adapter")
    return train_classifier(base, train, val, cfg, n_classes, adapters, multilabel)


def _derive(seed: int, stream: int) -> int:
    """Independent child seed for one component of a run."""
    return int(np.random.default_rng([seed, stream]).integers(0, 2**31 - 1))
