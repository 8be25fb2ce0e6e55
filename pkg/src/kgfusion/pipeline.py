"""Pipeline configuration and the file-based stages behind the command line.

Output directory layout::

    parts/assignment.tsv
    corpora/vocab.txt, corpora/partition_XX.bin
    checkpoints/base.klm, adapter_XX.klm, entity_head_XX.klm,
                fusion_seedS.klm, head_seedS.klm, head_baseline_seedS.klm
                (each with a .json manifest)
    reports/adapters.tsv, fusion.tsv, baseline_fusion.tsv,
            evaluate_[baseline_]SPLIT.tsv
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .corpus import Vocabulary, build_partition_dataset, build_vocabulary, load_dataset, save_dataset
from .kg import KnowledgeGraph, filter_by_relations, load_triples, top_relations
from .model import (
    AdapterModule,
    ClassifierHead,
    EncoderConfig,
    EncoderModel,
    FusionLayer,
    build_encoder,
    encoder_from_checkpoint,
    encoder_manifest,
    load_checkpoint,
    save_checkpoint,
)
from .partition import (
    PartitionConfig,
    assign_triples,
    build_entity_graph,
    count_dropped,
    edge_cut,
    partition,
    read_assignment,
    write_assignment,
)
from .tasks import encode_labels, encode_texts, fit_label_encoder, load_task
from .train import KnowledgeModel, RunReport, TrainConfig, _derive, evaluate, train_adapter, train_classifier


class ConfigError(ValueError):
    """Invalid or inconsistent pipeline configuration."""


@dataclass
class EncoderSettings:
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    ffn: int | None = None
    dropout: float = 0.1
    init_std: float = 0.02
    seed: int = 0


@dataclass
class TaskPaths:
    train: str | None = None
    val: str | None = None
    test: str | None = None
    multilabel: bool = False


@dataclass
class PipelineConfig:
    triples: str | None = None
    out_dir: str = "run"
    kg_mode: str = "fused"
    top_relations: int | None = None
    triple_policy: str = "drop"
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    encoder: EncoderSettings = field(default_factory=EncoderSettings)
    bottleneck: int = 16
    adapter_layers: list[int] | None = None
    adapter_train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=30, learning_rate=1e-3))
    fusion_train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10, learning_rate=1e-4))
    task: TaskPaths = field(default_factory=TaskPaths)
    seeds: list[int] = field(default_factory=lambda: [0])

    # -- construction -------------------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        nested = {"partition": PartitionConfig, "encoder": EncoderSettings, "adapter_train": TrainConfig,
                  "fusion_train": TrainConfig, "task": TaskPaths}
        kwargs = {}
        try:
            for key, value in data.items():
                if key in nested and isinstance(value, dict):
                    sub = nested[key]
                    sub_known = {f.name for f in dataclasses.fields(sub)}
                    bad = set(value) - sub_known
                    if bad:
                        raise ConfigError(f"unknown keys in {key}: {sorted(bad)}")
                    kwargs[key] = sub(**value)
                else:
                    kwargs[key] = value
            cfg = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike | None, overrides: dict | None = None) -> "PipelineConfig":
        """Read a JSON file (or start from defaults) and apply dotted-key overrides."""
        data: dict = {}
        if path is not None:
            try:
                with open(path, encoding="utf-8") as fh:
                    data = json.load(fh)
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
            if not isinstance(data, dict):
                raise ConfigError(f"{path} must hold a JSON object")
        for key, value in (overrides or {}).items():
            set_dotted(data, key, value)
        return cls.from_dict(data)

    def validate(self) -> None:
        if self.kg_mode not in ("fused", "typed"):
            raise ConfigError(f"kg_mode must be 'fused' or 'typed', got {self.kg_mode!r}")
        if self.triple_policy not in ("drop", "subject"):
            raise ConfigError(f"triple_policy must be 'drop' or 'subject', got {self.triple_policy!r}")
        if self.top_relations is not None and self.top_relations < 1:
            raise ConfigError("top_relations must be >= 1")
        if self.bottleneck < 1:
            raise ConfigError("bottleneck must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed")
        if self.adapter_layers is not None and any(not 0 <= i < self.encoder.layers for i in self.adapter_layers):
            raise ConfigError("adapter_layers must index encoder layers")
        try:
            self.encoder_config(vocab_size=8)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    # -- derived values ---------------------------------------------------------------

    @property
    def max_positions(self) -> int:
        return max(self.adapter_train.max_seq_len, self.fusion_train.max_seq_len)

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        e = self.encoder
        return EncoderConfig(vocab_size=vocab_size, max_positions=self.max_positions, hidden=e.hidden,
                             layers=e.layers, heads=e.heads, ffn=e.ffn, dropout=e.dropout, init_std=e.init_std)

    def path(self, *parts: str) -> Path:
        return Path(self.out_dir, *parts)

    def require(self, value: str | None, name: str) -> str:
        if value is None:
            raise ConfigError(f"{name} is not set")
        if not os.path.exists(value):
            raise ConfigError(f"{name} does not exist: {value}")
        return value


def set_dotted(data: dict, key: str, value: Any) -> None:
    node = data
    parts = key.split(".")
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"cannot set {key}: {p} is not an object")
        node = nxt
    node[parts[-1]] = value


# -- stages -----------------------------------------------------------------------------

def load_kg(cfg: PipelineConfig) -> KnowledgeGraph:
    kg = load_triples(cfg.require(cfg.triples, "triples"), cfg.kg_mode)
    if cfg.top_relations is not None:
        kg = filter_by_relations(kg, {key for key, _ in top_relations(kg, cfg.top_relations)})
    return kg


def run_partition(cfg: PipelineConfig, out: str | os.PathLike | None = None) -> dict:
    kg = load_kg(cfg)
    g = build_entity_graph(kg)
    a = partition(g, cfg.partition)
    cut, dropped = edge_cut(g, a), count_dropped(kg, a)
    out = Path(out) if out is not None else cfg.path("parts", "assignment.tsv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_assignment(out, kg, a, cfg.partition, cut, dropped)
    return {"path": str(out), "cut": cut, "dropped": dropped, "part_weights": a.part_weights(g)}


def run_build_corpus(cfg: PipelineConfig, assignment: str | os.PathLike | None = None) -> dict:
    kg = load_kg(cfg)
    path = assignment if assignment is not None else cfg.path("parts", "assignment.tsv")
    if not os.path.exists(path):
        raise ConfigError(f"assignment file not found: {path} (run 'partition' first)")
    a, _ = read_assignment(path, kg)
    vocab = build_vocabulary(kg)
    corpora = cfg.path("corpora")
    corpora.mkdir(parents=True, exist_ok=True)
    vocab.save(corpora / "vocab.txt")
    sizes = []
    for sub in assign_triples(kg, a, cfg.triple_policy):
        if not sub.triples:
            sizes.append(0)
            continue
        ds = build_partition_dataset(sub, kg, vocab, cfg.adapter_train.max_seq_len)
        save_dataset(ds, corpora / f"partition_{sub.partition_index:02d}.bin")
        sizes.append(len(ds))
    return {"vocab_size": len(vocab), "examples": sizes}


def corpus_files(cfg: PipelineConfig) -> list[Path]:
    files = sorted(cfg.path("corpora").glob("partition_*.bin"))
    if not files:
        raise ConfigError(f"no corpora under {cfg.path('corpora')} (run 'build-corpus' first)")
    return files


def ensure_base(cfg: PipelineConfig) -> EncoderModel:
    """Load ``checkpoints/base.klm``, creating it from the encoder settings if absent."""
    path = cfg.path("checkpoints", "base.klm")
    if path.exists():
        return encoder_from_checkpoint(path)
    vocab = Vocabulary.load(cfg.path("corpora", "vocab.txt"))
    base = build_encoder(cfg.encoder_config(len(vocab)), seed=cfg.encoder.seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, base, encoder_manifest(base, cfg.encoder.seed))
    return base


def _train_partition(job: tuple[dict, str]) -> tuple[int, float, int]:
    cfg_dict, corpus_path = job
    cfg = PipelineConfig.from_dict(cfg_dict)
    base = encoder_from_checkpoint(cfg.path("checkpoints", "base.klm"))
    ds = load_dataset(corpus_path)
    p = ds.partition_index
    tc = dataclasses.replace(cfg.adapter_train, seed=_derive(cfg.adapter_train.seed, 1000 + p))
    adapter, head, report = train_adapter(base, ds, tc, cfg.bottleneck, cfg.adapter_layers)
    ckpt = cfg.path("checkpoints")
    save_checkpoint(ckpt / f"adapter_{p:02d}.klm", adapter, {
        "kind": "adapter", "partition": p, "hidden": adapter.hidden, "bottleneck": adapter.bottleneck,
        "layers": list(adapter.layer_indices), "seed": tc.seed})
    save_checkpoint(ckpt / f"entity_head_{p:02d}.klm", head, {
        "kind": "entity_head", "partition": p, "n_labels": head.n_labels, "label_entities": ds.label_entities})
    return p, report.scores[0], report.best_epochs[0]


def run_train_adapters(cfg: PipelineConfig, jobs: int = 1) -> RunReport:
    """Train one adapter per corpus file; ``jobs > 1`` uses worker processes."""
    if jobs < 1:
        raise ConfigError("jobs must be >= 1")
    files = corpus_files(cfg)
    ensure_base(cfg)
    work = [(cfg.to_dict(), str(f)) for f in files]
    if jobs == 1 or len(work) == 1:
        results = [_train_partition(w) for w in work]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_train_partition, work))
    results.sort()
    report = RunReport([r[0] for r in results], [r[1] for r in results], [r[2] for r in results], "accuracy")
    out = cfg.path("reports", "adapters.tsv")
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    return report


def load_adapters(cfg: PipelineConfig) -> list[AdapterModule]:
    paths = sorted(cfg.path("checkpoints").glob("adapter_*.klm"))
    if not paths:
        raise ConfigError("no adapter checkpoints (run 'train-adapters' first)")
    adapters = []
    for path in paths:
        state, meta = load_checkpoint(path)
        a = AdapterModule(meta["hidden"], meta["bottleneck"], meta["layers"], meta["partition"], frozen=True)
        a.load_state_dict(state)
        adapters.append(a)
    return adapters


def _task_data(cfg: PipelineConfig, vocab: Vocabulary, encoder, split: str):
    path = getattr(cfg.task, split)
    if path is None:
        return None
    rows = load_task(cfg.require(path, f"task.{split}"), cfg.task.multilabel)
    ids, mask = encode_texts(rows, vocab, cfg.fusion_train.max_seq_len)
    return ids, mask, encode_labels(rows, encoder, cfg.task.multilabel)


def run_train_fusion(cfg: PipelineConfig, baseline: bool = False) -> RunReport:
    """Fusion (or, with ``baseline``, head-only) training once per configured seed."""
    base = ensure_base(cfg)
    vocab = Vocabulary.load(cfg.path("corpora", "vocab.txt"))
    rows = load_task(cfg.require(cfg.task.train, "task.train"), cfg.task.multilabel)
    encoder = fit_label_encoder(rows, cfg.task.multilabel)
    classes = [str(c) for c in encoder.classes_]
    train = _task_data(cfg, vocab, encoder, "train")
    val = _task_data(cfg, vocab, encoder, "val")
    adapters = None if baseline else load_adapters(cfg)
    tag = "baseline_" if baseline else ""
    scores, epochs = [], []
    for seed in cfg.seeds:
        tc = dataclasses.replace(cfg.fusion_train, seed=seed)
        fusion, head, report = train_classifier(base, train, val, tc, len(classes), adapters, cfg.task.multilabel)
        ckpt = cfg.path("checkpoints")
        head_meta = {"kind": "classifier_head", "classes": classes, "multilabel": cfg.task.multilabel,
                     "seed": seed, "baseline": baseline}
        save_checkpoint(ckpt / f"head_{tag}seed{seed}.klm", head, head_meta)
        if fusion is not None:
            save_checkpoint(ckpt / f"fusion_seed{seed}.klm", fusion, {
                "kind": "fusion", "hidden": fusion.hidden, "layers": list(fusion.layer_indices),
                "adapters": [a.partition_index for a in adapters], "seed": seed})
        scores.append(report.scores[0])
        epochs.append(report.best_epochs[0])
    report = RunReport(list(cfg.seeds), scores, epochs, cfg.fusion_train.metric)
    out = cfg.path("reports", f"{tag}fusion.tsv")
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    return report


def load_task_model(cfg: PipelineConfig, seed: int, baseline: bool = False) -> tuple[KnowledgeModel, list[str]]:
    base = encoder_from_checkpoint(cfg.path("checkpoints", "base.klm"))
    tag = "baseline_" if baseline else ""
    head_path = cfg.path("checkpoints", f"head_{tag}seed{seed}.klm")
    if not head_path.exists():
        raise ConfigError(f"missing {head_path} (run 'train-fusion' first)")
    state, meta = load_checkpoint(head_path)
    head = ClassifierHead(base.config.hidden, len(meta["classes"]), meta["multilabel"], frozen=True)
    head.load_state_dict(state)
    fusion = None
    if not baseline:
        adapters = load_adapters(cfg)
        state, fmeta = load_checkpoint(cfg.path("checkpoints", f"fusion_seed{seed}.klm"))
        fusion = FusionLayer(adapters, fmeta["hidden"], fmeta["layers"], frozen=True)
        fusion.load_state_dict(state)
    return KnowledgeModel(base, head, fusion), meta["classes"]


def run_evaluate(cfg: PipelineConfig, baseline: bool = False, split: str = "test") -> RunReport:
    vocab = Vocabulary.load(cfg.path("corpora", "vocab.txt"))
    scores = []
    for seed in cfg.seeds:
        model, classes = load_task_model(cfg, seed, baseline)
        encoder = fit_label_encoder([], cfg.task.multilabel, classes)
        data = _task_data(cfg, vocab, encoder, split)
        if data is None:
            raise ConfigError(f"task.{split} is not set")
        scores.append(evaluate(model, *data, metric=cfg.fusion_train.metric))
    report = RunReport(list(cfg.seeds), scores, [-1] * len(scores), cfg.fusion_train.metric)
    name = f"evaluate_{'baseline_' if baseline else ''}{split}.tsv"
    out = cfg.path("reports", name)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    return report


def gradcheck_small(seed: int = 0, fusion: bool = True) -> dict[str, float]:
    """Finite-difference check of a two-layer, 32-wide encoder with adapter and entity head.

    Adapter and head gradients are checked at every coordinate. Encoder
    weights (20 per tensor) and fusion weights (128 per tensor) are checked
    at seeded random coordinates to keep the run short. Returns the max
    relative error per group.
    """
    from . import tensor as T
    from .model import EntityHead, encode

    rng = np.random.default_rng(seed)
    cfg = EncoderConfig(vocab_size=20, max_positions=8, hidden=32, layers=2, heads=4, dropout=0.0)
    base = build_encoder(cfg, seed=seed)
    adapter = AdapterModule(32, 8, (0, 1), seed=seed)
    for p in adapter.parameters():
        p.data = p.data + rng.normal(0.0, 0.1, p.shape)
    head = EntityHead(32, 5, seed=seed)
    ids = rng.integers(5, 20, size=(2, 6))
    mask = np.ones_like(ids)
    mask[1, 4:] = 0
    labels = np.array([1, 3])

    def loss_with(active):
        return lambda: T.cross_entropy_loss(head(encode(base, ids, mask, active)), labels)

    result = {
        "adapter": T.grad_check(loss_with(adapter), adapter.parameters() + head.parameters()),
        "base": T.grad_check(loss_with(adapter), base.parameters(), max_coords=20, seed=seed),
    }
    if fusion:
        other = AdapterModule(32, 8, (0, 1), seed=seed + 1)
        for p in other.parameters():
            p.data = p.data + rng.normal(0.0, 0.1, p.shape)
        layer = FusionLayer([adapter, other], 32, (0, 1), seed=seed, noise=0.1)
        result["fusion"] = T.grad_check(loss_with(layer), layer.parameters(), max_coords=128, seed=seed)
    return result
