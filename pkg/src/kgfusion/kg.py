"""Knowledge-graph triples: TSV loading, relation statistics and filtering."""
from __future__ import annotations

import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Literal

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

Mode = Literal["fused", "typed"]
MODES = ("fused", "typed")


class TripleFormatError(ValueError):
    """Raised for malformed rows in a triple file."""


@dataclass(frozen=True)
class Triple:
    subject: int
    relation: int
    object: int
    subject_type: str | None = None
    object_type: str | None = None


@dataclass
class KnowledgeGraph:
    entities: list[str] = field(default_factory=list)
    relations: list[str] = field(default_factory=list)
    triples: list[Triple] = field(default_factory=list)
    mode: Mode = "fused"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    def relation_key(self, t: Triple) -> str:
        """Relation surface form, qualified by entity types in typed mode."""
        rel = self.relations[t.relation]
        if self.mode == "typed":
            if t.subject_type is None or t.object_type is None:
                raise TripleFormatError("typed mode requires subject and object type tags")
            return f"[{t.subject_type}] {rel} [{t.object_type}]"
        return rel

    def relation_keys(self) -> list[str]:
        return [self.relation_key(t) for t in self.triples]

    def validate(self) -> None:
        for name, forms in (("entity", self.entities), ("relation", self.relations)):
            for i, form in enumerate(forms):
                if not form.strip():
                    raise TripleFormatError(f"empty {name} surface form at id {i}")
        for t in self.triples:
            if not (0 <= t.subject < self.n_entities and 0 <= t.object < self.n_entities):
                raise TripleFormatError(f"entity id out of range in {t}")
            if not 0 <= t.relation < self.n_relations:
                raise TripleFormatError(f"relation id out of range in {t}")
            if self.mode == "typed":
                self.relation_key(t)


def normalize_surface(text: str) -> str:
    return " ".join(text.split()).lower()


class _Interner:
    def __init__(self):
        self.ids: dict[str, int] = {}
        self.forms: list[str] = []

    def __call__(self, form: str) -> int:
        idx = self.ids.get(form)
        if idx is None:
            idx = self.ids[form] = len(self.forms)
            self.forms.append(form)
        return idx


def parse_triples(lines: Iterable[str], mode: Mode = "fused", source: str = "<input>") -> KnowledgeGraph:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    ents, rels = _Interner(), _Interner()
    triples = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) not in (3, 5):
            raise TripleFormatError(f"{source}:{lineno}: expected 3 or 5 tab-separated columns, got {len(cols)}")
        if mode == "typed" and len(cols) != 5:
            raise TripleFormatError(f"{source}:{lineno}: typed mode needs 5 columns (with type tags)")
        forms = [normalize_surface(c) for c in cols]
        if not all(forms):
            raise TripleFormatError(f"{source}:{lineno}: empty surface form")
        s, r, o = ents(forms[0]), rels(forms[1]), ents(forms[2])
        st, ot = (forms[3], forms[4]) if len(cols) == 5 else (None, None)
        triples.append(Triple(s, r, o, st, ot))
    return KnowledgeGraph(ents.forms, rels.forms, triples, mode)


def load_triples(path: str | os.PathLike, mode: Mode = "fused") -> KnowledgeGraph:
    """Read a UTF-8 TSV triple file into a :class:`KnowledgeGraph`.

    Rows are ``subject<TAB>relation<TAB>object`` optionally followed by
    ``<TAB>subject_type<TAB>object_type``; typed mode requires the type
    columns. Lines starting with ``#`` are comments. Surface forms are
    whitespace-normalised and lowercased; vocabularies keep first-appearance
    order and duplicate triples are kept.
    """
    with open(path, encoding="utf-8") as fh:
        return parse_triples(fh, mode=mode, source=str(path))


def format_triples(kg: KnowledgeGraph) -> str:
    rows = []
    for t in kg.triples:
        cols = [kg.entities[t.subject], kg.relations[t.relation], kg.entities[t.object]]
        if t.subject_type is not None and t.object_type is not None:
            cols += [t.subject_type, t.object_type]
        rows.append("\t".join(cols) + "\n")
    return "".join(rows)


def save_triples(kg: KnowledgeGraph, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_triples(kg))


def relation_counts(kg: KnowledgeGraph) -> Counter:
    return Counter(kg.relation_keys())


def top_relations(kg: KnowledgeGraph, n: int) -> list[tuple[str, int]]:
    """Most frequent relation keys, by descending count then ascending key."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ranked = sorted(relation_counts(kg).items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:n]


def filter_by_relations(kg: KnowledgeGraph, keep: Iterable[str]) -> KnowledgeGraph:
    """Keep triples whose relation key is in ``keep``; ids are re-densified."""
    keep = set(keep)
    ents, rels = _Interner(), _Interner()
    triples = []
    for t in kg.triples:
        if kg.relation_key(t) not in keep:
            continue
        s = ents(kg.entities[t.subject])
        r = rels(kg.relations[t.relation])
        o = ents(kg.entities[t.object])
        triples.append(Triple(s, r, o, t.subject_type, t.object_type))
    return KnowledgeGraph(ents.forms, rels.forms, triples, kg.mode)


def kg_stats(kg: KnowledgeGraph, n: int = 20) -> str:
    """TSV summary: sizes followed by the top-``n`` relation table."""
    lines = [
        f"entities\t{kg.n_entities}",
        f"relations\t{kg.n_relations}",
        f"triples\t{len(kg.triples)}",
        "relation\tcount",
    ]
    lines += [f"{key}\t{count}" for key, count in top_relations(kg, n)]
    return "\n".join(lines) + "\n"


class TopRelationSelector(TransformerMixin, BaseEstimator):
    """Restrict a knowledge graph to its ``n_relations`` most common relation keys.

    ``fit`` records ``relations_`` (key, count) pairs; ``transform`` filters any
    graph of the same mode down to those keys.
    """

    def __init__(self, n_relations: int = 20):
        self.n_relations = n_relations

    def fit(self, X: KnowledgeGraph, y=None):
        if not isinstance(X, KnowledgeGraph):
            raise TypeError("TopRelationSelector expects a KnowledgeGraph")
        self.relations_ = top_relations(X, self.n_relations)
        self.mode_ = X.mode
        return self

    def transform(self, X: KnowledgeGraph) -> KnowledgeGraph:
        check_is_fitted(self, "relations_")
        if X.mode != self.mode_:
            raise ValueError(f"fitted on a {self.mode_} graph, got {X.mode}")
        return filter_by_relations(X, {key for key, _ in self.relations_})
