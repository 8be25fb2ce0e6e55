"""End-to-end knowledge-injection study on a planted synthetic graph.

One trial builds a graph, partitions it, trains one adapter per part, then
compares a fused classifier against a frozen-base classifier on yes/no
questions about subjects that the task training data never mentions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import build_partition_dataset, build_vocabulary
from .model import EncoderConfig, build_encoder
from .partition import PartitionConfig, assign_triples, build_entity_graph, partition
from .synthetic import make_planted_kg, make_probe_task
from .tasks import encode_labels, encode_texts, fit_label_encoder, rows_from_tuples
from .train import KnowledgeModel, RunReport, TrainConfig, evaluate, train_adapter, train_classifier


@dataclass(frozen=True)
class InjectionSettings:
    n_entities: int = 100
    n_triples: int = 500
    k: int = 4
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    init_std: float = 0.1
    bottleneck: int = 32
    max_len: int = 16
    adapter_epochs: int = 100
    adapter_patience: int = 20
    adapter_lr: float = 1e-2
    adapter_batch: int = 10
    task_epochs: int = 60
    task_patience: int = 10
    task_lr: float = 3e-3
    task_batch: int = 16
    val_fraction: float = 0.15
    test_fraction: float = 0.3


@dataclass
class InjectionResult:
    seed: int
    fused: float
    baseline: float
    fused_epoch: int
    baseline_epoch: int
    adapter_accuracy: list[float]

    @property
    def gain(self) -> float:
        return self.fused - self.baseline


def injection_trial(seed: int, settings: InjectionSettings = InjectionSettings()) -> InjectionResult:
    s = settings
    planted = make_planted_kg(s.n_entities, s.n_triples, n_communities=s.k, seed=seed)
    kg = planted.kg
    assignment = partition(build_entity_graph(kg), PartitionConfig(k=s.k, seed=seed))
    vocab = build_vocabulary(kg)
    enc_cfg = EncoderConfig(vocab_size=len(vocab), max_positions=s.max_len, hidden=s.hidden, layers=s.layers,
                            heads=s.heads, init_std=s.init_std)
    base = build_encoder(enc_cfg, seed=seed)

    adapters, adapter_acc = [], []
    for sub in assign_triples(kg, assignment):
        ds = build_partition_dataset(sub, kg, vocab, s.max_len)
        cfg = TrainConfig(epochs=s.adapter_epochs, patience=s.adapter_patience, batch_size=s.adapter_batch,
                          learning_rate=s.adapter_lr, max_seq_len=s.max_len, holdout_fraction=0.0,
                          seed=seed * 100 + sub.partition_index)
        adapter, _, report = train_adapter(base, ds, cfg, bottleneck=s.bottleneck)
        adapters.append(adapter)
        adapter_acc.append(report.scores[0])

    task = {k: rows_from_tuples(v) for k, v in
            make_probe_task(planted, s.test_fraction, s.val_fraction, seed=seed).items()}
    labels = fit_label_encoder(task["train"])
    data = {k: (*encode_texts(rows, vocab, s.max_len), encode_labels(rows, labels)) for k, rows in task.items()}
    cfg = TrainConfig(epochs=s.task_epochs, patience=s.task_patience, batch_size=s.task_batch,
                      learning_rate=s.task_lr, max_seq_len=s.max_len, seed=seed)
    n_classes = len(labels.classes_)
    fusion, head, fused_report = train_classifier(base, data["train"], data["val"], cfg, n_classes, adapters)
    _, base_head, base_report = train_classifier(base, data["train"], data["val"], cfg, n_classes)
    fused = evaluate(KnowledgeModel(base, head, fusion), *data["test"])
    baseline = evaluate(KnowledgeModel(base, base_head, None), *data["test"])
    return InjectionResult(seed, fused, baseline, fused_report.best_epochs[0], base_report.best_epochs[0],
                           adapter_acc)


def injection_study(seeds, settings: InjectionSettings = InjectionSettings()):
    """Run one trial per seed; returns ``(fused_report, baseline_report, results)``."""
    results = [injection_trial(seed, settings) for seed in seeds]
    seeds = [r.seed for r in results]
    fused = RunReport(seeds, [r.fused for r in results], [r.fused_epoch for r in results])
    baseline = RunReport(seeds, [r.baseline for r in results], [r.baseline_epoch for r in results])
    return fused, baseline, results


def gain_summary(results) -> tuple[float, float]:
    """Mean and sample std of the per-seed accuracy gains."""
    gains = np.array([r.gain for r in results])
    std = float(gains.std(ddof=1)) if len(gains) > 1 else 0.0
    return float(gains.mean()), std
