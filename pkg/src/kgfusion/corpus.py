"""Masked entity prediction examples built from subgraph triples."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .kg import KnowledgeGraph, Triple
from .partition import Subgraph

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIALS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")

DATASET_MAGIC = b"KLMD1"


def tokenize(text: str) -> list[str]:
    return text.lower().split()


class Vocabulary:
    """Word-level vocabulary with the five special tokens at ids 0-4."""

    def __init__(self, tokens=()):
        self.tokens: list[str] = list(SPECIALS)
        self.index: dict[str, int] = {t: i for i, t in enumerate(self.tokens)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        idx = self.index.get(token)
        if idx is None:
            idx = self.index[token] = len(self.tokens)
            self.tokens.append(token)
        return idx

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def encode(self, words) -> list[int]:
        return [self.index.get(w, UNK) for w in words]

    def decode(self, ids, skip_pad: bool = True) -> str:
        return " ".join(self.tokens[i] for i in ids if not (skip_pad and i == PAD))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("".join(t + "\n" for t in self.tokens))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError(f"{path} does not start with the special tokens")
        return cls(tokens[len(SPECIALS):])


def relation_text(kg: KnowledgeGraph, t: Triple) -> str:
    return kg.relation_key(t)


def build_vocabulary(kg: KnowledgeGraph) -> Vocabulary:
    """Specials followed by every word of the entity and relation surface forms."""
    vocab = Vocabulary()
    for form in kg.entities:
        for w in tokenize(form):
            vocab.add(w)
    if kg.mode == "typed":
        forms = dict.fromkeys(kg.relation_key(t) for t in kg.triples)
        forms.update(dict.fromkeys(kg.relations))
    else:
        forms = kg.relations
    for form in forms:
        for w in tokenize(form):
            vocab.add(w)
    return vocab


@dataclass
class MaskedEntityExample:
    token_ids: np.ndarray
    attention_mask: np.ndarray
    label: int = -1


@dataclass
class PartitionDataset:
    partition_index: int
    label_entities: list[int]
    examples: list[MaskedEntityExample] = field(default_factory=list)
    max_len: int = 32

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def n_labels(self) -> int:
        return len(self.label_entities)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stacked ``(token_ids, attention_mask, labels)``."""
        if not self.examples:
            empty = np.zeros((0, self.max_len), dtype=np.int64)
            return empty, empty.copy(), np.zeros(0, dtype=np.int64)
        ids = np.stack([e.token_ids for e in self.examples]).astype(np.int64)
        mask = np.stack([e.attention_mask for e in self.examples]).astype(np.int64)
        labels = np.array([e.label for e in self.examples], dtype=np.int64)
        return ids, mask, labels


def encode_segments(segments: list[list[str]], vocab: Vocabulary, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """``[CLS] seg1 [SEP] seg2 [SEP] ...`` padded to ``max_len``.

    Overlong inputs lose content words from the right; every ``[SEP]`` is kept.
    """
    n_special = 1 + len(segments)
    if max_len < n_special:
        raise ValueError(f"max_len={max_len} cannot hold [CLS] and {len(segments)} [SEP] tokens")
    budget = max_len - n_special
    kept = []
    for seg in segments:
        take = seg[:budget]
        budget -= len(take)
        kept.append(take)
    ids = [CLS]
    for seg in kept:
        ids += vocab.encode(seg) + [SEP]
    mask = [1] * len(ids) + [0] * (max_len - len(ids))
    ids += [PAD] * (max_len - len(ids))
    return np.array(ids, dtype=np.int64), np.array(mask, dtype=np.int64)


def verbalize_triple(t: Triple, kg: KnowledgeGraph, vocab: Vocabulary, max_len: int = 32) -> MaskedEntityExample:
    """Encode ``[CLS] subject [SEP] relation [SEP]``; the object is left out."""
    subject = tokenize(kg.entities[t.subject])
    relation = tokenize(relation_text(kg, t))
    ids, mask = encode_segments([subject, relation], vocab, max_len)
    return MaskedEntityExample(ids, mask)


def build_partition_dataset(sub: Subgraph, kg: KnowledgeGraph, vocab: Vocabulary,
                            max_len: int = 32) -> PartitionDataset:
    """One example per retained triple, labelled by the object's index among the subgraph entities."""
    if not sub.triples:
        raise ValueError(f"subgraph {sub.partition_index} has no triples")
    label_entities = sorted(set(sub.entity_ids) | {t.subject for t in sub.triples} | {t.object for t in sub.triples})
    local = {e: i for i, e in enumerate(label_entities)}
    examples = []
    for t in sub.triples:
        ex = verbalize_triple(t, kg, vocab, max_len)
        ex.label = local[t.object]
        examples.append(ex)
    return PartitionDataset(sub.partition_index, label_entities, examples, max_len)


def split_dataset(ds: PartitionDataset, holdout_fraction: float, seed: int) -> tuple[PartitionDataset, PartitionDataset]:
    """Seeded shuffle, then the last ``round(fraction * n)`` examples become validation."""
    if not 0 <= holdout_fraction < 1:
        raise ValueError("holdout_fraction must lie in [0, 1)")
    order = np.random.default_rng(seed).permutation(len(ds.examples))
    n_val = int(round(holdout_fraction * len(ds.examples)))
    n_train = len(ds.examples) - n_val
    pick = lambda idx: [ds.examples[i] for i in idx]
    train = PartitionDataset(ds.partition_index, ds.label_entities, pick(order[:n_train]), ds.max_len)
    val = PartitionDataset(ds.partition_index, ds.label_entities, pick(order[n_train:]), ds.max_len)
    return train, val


# -- binary cache ---------------------------------------------------------------------
# magic, then u32 LE: partition index, label-space size, max_len, example count;
# label entity ids (u32 each); per example: max_len token ids (u32), packed mask bits,
# label (u32).

def dataset_to_bytes(ds: PartitionDataset) -> bytes:
    ids, mask, labels = ds.arrays()
    parts = [DATASET_MAGIC, struct.pack("<4I", ds.partition_index, ds.n_labels, ds.max_len, len(ds))]
    parts.append(np.asarray(ds.label_entities, dtype="<u4").tobytes())
    for i in range(len(ds)):
        parts.append(ids[i].astype("<u4").tobytes())
        parts.append(np.packbits(mask[i].astype(np.uint8)).tobytes())
        parts.append(struct.pack("<I", int(labels[i])))
    return b"".join(parts)


def dataset_from_bytes(buf: bytes) -> PartitionDataset:
    if buf[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise ValueError("not a dataset cache file")
    pos = len(DATASET_MAGIC)
    pidx, n_labels, max_len, count = struct.unpack_from("<4I", buf, pos)
    pos += 16
    label_entities = np.frombuffer(buf, dtype="<u4", count=n_labels, offset=pos).astype(int).tolist()
    pos += 4 * n_labels
    mask_bytes = (max_len + 7) // 8
    examples = []
    for _ in range(count):
        ids = np.frombuffer(buf, dtype="<u4", count=max_len, offset=pos).astype(np.int64)
        pos += 4 * max_len
        bits = np.frombuffer(buf, dtype=np.uint8, count=mask_bytes, offset=pos)
        mask = np.unpackbits(bits)[:max_len].astype(np.int64)
        pos += mask_bytes
        (label,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        examples.append(MaskedEntityExample(ids, mask, label))
    if pos != len(buf):
        raise ValueError("trailing bytes in dataset cache")
    return PartitionDataset(pidx, label_entities, examples, max_len)


def save_dataset(ds: PartitionDataset, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(ds))


def load_dataset(path: str | os.PathLike) -> PartitionDataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())
