"""Downstream classification data: ``label<TAB>text_a[<TAB>text_b]`` rows."""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from sklearn.preprocessing import LabelEncoder, MultiLabelBinarizer

from .corpus import Vocabulary, encode_segments, tokenize


class TaskFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TaskRow:
    labels: tuple[str, ...]
    text_a: str
    text_b: str | None = None


def parse_task_lines(lines: Iterable[str], multilabel: bool = False, source: str = "<input>") -> list[TaskRow]:
    """Blank lines and ``#`` comments are skipped.

    Multi-label rows list their labels comma-separated; an empty label field
    means no label applies.
    """
    rows = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) not in (2, 3):
            raise TaskFormatError(f"{source}:{lineno}: expected 2 or 3 tab-separated columns, got {len(cols)}")
        label, text_a = cols[0].strip(), cols[1].strip()
        text_b = cols[2].strip() if len(cols) == 3 else None
        if multilabel:
            labels = tuple(sorted({x.strip() for x in label.split(",") if x.strip()}))
        elif not label:
            raise TaskFormatError(f"{source}:{lineno}: empty label")
        else:
            labels = (label,)
        rows.append(TaskRow(labels, text_a, text_b))
    return rows


def load_task(path: str | os.PathLike, multilabel: bool = False) -> list[TaskRow]:
    with open(path, encoding="utf-8") as fh:
        return parse_task_lines(fh, multilabel, str(path))


def format_task(rows: Sequence[TaskRow]) -> str:
    out = []
    for r in rows:
        cols = [",".join(r.labels), r.text_a] + ([r.text_b] if r.text_b is not None else [])
        out.append("\t".join(cols) + "\n")
    return "".join(out)


def save_task(rows: Sequence[TaskRow], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_task(rows))


def rows_from_tuples(items: Iterable[tuple]) -> list[TaskRow]:
    """``(label, text_a[, text_b])`` tuples to rows."""
    return [TaskRow((t[0],), t[1], t[2] if len(t) > 2 else None) for t in items]


def encode_texts(rows: Sequence[TaskRow], vocab: Vocabulary, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    ids, masks = [], []
    for r in rows:
        segs = [tokenize(r.text_a)] + ([tokenize(r.text_b)] if r.text_b is not None else [])
        i, m = encode_segments(segs, vocab, max_len)
        ids.append(i)
        masks.append(m)
    if not ids:
        return np.zeros((0, max_len), dtype=np.int64), np.zeros((0, max_len), dtype=np.int64)
    return np.stack(ids), np.stack(masks)


def fit_label_encoder(rows: Sequence[TaskRow], multilabel: bool = False, classes: Sequence[str] | None = None):
    """Label encoder fitted on ``rows`` (or on an explicit class list)."""
    if multilabel:
        enc = MultiLabelBinarizer(classes=sorted(classes) if classes is not None else None)
        enc.fit([r.labels for r in rows] if classes is None else [tuple(classes)])
        return enc
    enc = LabelEncoder()
    enc.fit(list(classes) if classes is not None else [r.labels[0] for r in rows])
    return enc


def encode_labels(rows: Sequence[TaskRow], encoder, multilabel: bool = False) -> np.ndarray:
    if multilabel:
        unknown = {l for r in rows for l in r.labels} - set(encoder.classes_)
        if unknown:
            raise TaskFormatError(f"labels not seen in training: {sorted(unknown)}")
        return encoder.transform([r.labels for r in rows]).astype(np.int64)
    labels = [r.labels[0] for r in rows]
    unknown = set(labels) - set(encoder.classes_)
    if unknown:
        raise TaskFormatError(f"labels not seen in training: {sorted(unknown)}")
    return encoder.transform(labels).astype(np.int64)
