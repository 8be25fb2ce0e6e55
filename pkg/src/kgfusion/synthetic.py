"""Seeded synthetic knowledge graphs, graphs and probe tasks for tests and demos."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kg import KnowledgeGraph, Triple
from .partition import EntityGraph

RELATION_WORDS = (
    "treats", "prevents", "induces", "inhibits", "modulates", "causes", "detects",
    "binds", "attenuates", "expresses", "produces", "contains",
)
BRIDGE_RELATION = "comorbid"
DOMAIN_WORDS = ("cardio", "onco", "neuro", "immuno", "endo", "derma", "gastro", "pulmo")


@dataclass
class PlantedKG:
    kg: KnowledgeGraph
    community: list[int]               # per entity
    is_object: list[bool]              # per entity
    attribute: dict[int, int]          # entity -> hidden 0/1 class (subjects and objects)
    facts: dict[tuple[int, int], int]  # (subject, relation) -> object


def make_planted_kg(n_entities: int = 100, n_triples: int = 500, n_communities: int = 4,
                    n_relations: int = 7, object_share: float = 0.28, seed: int = 0) -> PlantedKG:
    """Functional facts ``subject --relation--> object`` inside planted communities.

    Every community holds ``n_entities / n_communities`` entities, roughly
    ``object_share`` of them objects. Subjects and objects carry a balanced
    hidden 0/1 class; each (subject, relation) pair gets exactly one object
    from the subject's own community and class. Each object is also linked by
    one ``comorbid`` triple to an object of the other class in its community,
    which keeps the community connected. The entity graph therefore has
    ``n_communities`` blocks with no crossing edges, and a subject's class can
    only be read off the facts about it. Entity names start with a domain
    word shared by their community, e.g. ``cardio drug3``; classes are
    balanced inside a community, so the word alone says nothing about the
    class. ``n_triples`` counts both kinds.
    """
    if n_entities % n_communities:
        raise ValueError("n_entities must be divisible by n_communities")
    if n_relations > len(RELATION_WORDS):
        raise ValueError(f"at most {len(RELATION_WORDS)} relations")
    rng = np.random.default_rng(seed)
    size = n_entities // n_communities
    n_obj = max(2, int(round(object_share * size)))
    n_subj = size - n_obj
    names, community, is_object = [], [], []
    subjects, objects = [], []
    for c in range(n_communities):
        subjects.append([])
        objects.append([])
        for j in range(size):
            obj = j >= n_subj
            eid = len(names)
            domain = DOMAIN_WORDS[c % len(DOMAIN_WORDS)] + ("" if c < len(DOMAIN_WORDS) else str(c))
            names.append(f"{domain} disease{eid}" if obj else f"{domain} drug{eid}")
            community.append(c)
            is_object.append(obj)
            (objects if obj else subjects)[c].append(eid)
    attribute: dict[int, int] = {}
    for c in range(n_communities):
        for group in (subjects[c], objects[c]):
            flags = np.arange(len(group)) % 2
            rng.shuffle(flags)
            attribute.update({e: int(f) for e, f in zip(group, flags)})
    bridges = []
    for c in range(n_communities):
        for o in objects[c]:
            other = [q for q in objects[c] if attribute[q] != attribute[o]]
            bridges.append((o, int(rng.choice(other))))
    n_facts = n_triples - len(bridges)
    pairs = [(s, r) for c in range(n_communities) for s in subjects[c] for r in range(n_relations)]
    if not 0 <= n_facts <= len(pairs):
        raise ValueError(f"n_triples must lie in [{len(bridges)}, {len(bridges) + len(pairs)}]")
    chosen = sorted(rng.choice(len(pairs), size=n_facts, replace=False).tolist())
    facts, triples = {}, []
    for i in chosen:
        s, r = pairs[i]
        pool = [o for o in objects[community[s]] if attribute[o] == attribute[s]]
        o = int(rng.choice(pool))
        facts[(s, r)] = o
        triples.append(Triple(s, r, o))
    triples += [Triple(o, n_relations, q) for o, q in bridges]
    kg = KnowledgeGraph(names, list(RELATION_WORDS[:n_relations]) + [BRIDGE_RELATION], triples, "fused")
    return PlantedKG(kg, community, is_object, attribute, facts)


def make_probe_task(planted: PlantedKG, test_fraction: float = 0.3, val_fraction: float = 0.15,
                    seed: int = 0) -> dict[str, list[tuple[str, str, str]]]:
    """Yes/no questions: is the object of ``<subject> <relation>`` in class 1?

    Rows are ``(label, text_a, text_b)`` with text_a the subject and text_b the
    relation. Subjects are split between train, validation and test within each
    class, so test answers depend on facts the task data never shows.
    """
    rng = np.random.default_rng(seed)
    kg = planted.kg
    split_of = {}
    for cls in (0, 1):
        subjects = sorted({s for s, _ in planted.facts if planted.attribute[s] == cls})
        order = rng.permutation(len(subjects))
        n_test = int(round(test_fraction * len(subjects)))
        n_val = int(round(val_fraction * len(subjects)))
        for rank, i in enumerate(order):
            split_of[subjects[i]] = "test" if rank < n_test else "val" if rank < n_test + n_val else "train"
    rows = {"train": [], "val": [], "test": []}
    for (s, r), o in sorted(planted.facts.items()):
        label = "yes" if planted.attribute[o] else "no"
        rows[split_of[s]].append((label, kg.entities[s], kg.relations[r]))
    return rows


def make_overfit_kg(n_entities: int = 20, n_triples: int = 50, n_relations: int = 5, seed: int = 0) -> KnowledgeGraph:
    """Small functional KG: ``n_triples`` distinct (subject, relation) pairs, objects drawn from all entities."""
    rng = np.random.default_rng(seed)
    names = [f"entity{i}" for i in range(n_entities)]
    pairs = [(s, r) for s in range(n_entities) for r in range(n_relations)]
    chosen = sorted(rng.choice(len(pairs), size=n_triples, replace=False).tolist())
    triples = []
    for i in chosen:
        s, r = pairs[i]
        o = int(rng.integers(0, n_entities - 1))
        o += o >= s
        triples.append(Triple(s, r, o))
    return KnowledgeGraph(names, list(RELATION_WORDS[:n_relations]), triples, "fused")


def random_connected_graph(n: int, edge_prob: float, rng: np.random.Generator,
                           max_edge_weight: int = 1, max_node_weight: int = 1) -> EntityGraph:
    """Random spanning tree plus Erdos-Renyi extra edges."""
    edges = []
    for v in range(1, n):
        edges.append((v, int(rng.integers(0, v)), int(rng.integers(1, max_edge_weight + 1))))
    for u in range(n):
        for v in range(u + 1, n):
            if rng.random() < edge_prob:
                edges.append((u, v, int(rng.integers(1, max_edge_weight + 1))))
    weights = rng.integers(1, max_node_weight + 1, size=n).tolist()
    return EntityGraph.from_edges(n, edges, weights)
