"""Balanced k-way partitioning of the entity graph.

The heuristic follows the usual multilevel recipe: coarsen by heavy-edge
matching, grow ``k`` regions on the coarsest graph, then project back level
by level with Fiduccia-Mattheyses style boundary refinement. A branch and
bound enumerator serves as an exact oracle on small graphs.
"""
from __future__ import annotations

import heapq
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Literal

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_is_fitted

from .kg import KnowledgeGraph, Triple

Policy = Literal["drop", "subject"]

BRUTE_FORCE_MAX_NODES = 14


class PartitionInfeasibleError(ValueError):
    """The balance constraint cannot be met for the given k, epsilon and node weights."""


@dataclass
class EntityGraph:
    """Undirected weighted graph; ``adjacency[u][v]`` is the weight of edge u-v."""

    node_count: int
    adjacency: list[dict[int, int]]
    node_weight: list[int] = None

    def __post_init__(self):
        if self.node_weight is None:
            self.node_weight = [1] * self.node_count
        if len(self.adjacency) != self.node_count or len(self.node_weight) != self.node_count:
            raise ValueError("adjacency and node_weight must have node_count entries")

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple[int, int, int]] | Iterable[tuple[int, int]],
                   node_weight: list[int] | None = None) -> "EntityGraph":
        adj: list[dict[int, int]] = [{} for _ in range(n)]
        for e in edges:
            u, v = e[0], e[1]
            w = e[2] if len(e) > 2 else 1
            if u == v:
                continue
            adj[u][v] = adj[u].get(v, 0) + w
            adj[v][u] = adj[v].get(u, 0) + w
        return cls(n, adj, list(node_weight) if node_weight is not None else None)

    def edges(self):
        for u, nbrs in enumerate(self.adjacency):
            for v, w in nbrs.items():
                if u < v:
                    yield u, v, w

    @property
    def total_node_weight(self) -> int:
        return int(sum(self.node_weight))

    @property
    def total_edge_weight(self) -> int:
        return sum(w for _, _, w in self.edges())

    def validate(self) -> None:
        for u, nbrs in enumerate(self.adjacency):
            if u in nbrs:
                raise ValueError(f"self-loop at node {u}")
            for v, w in nbrs.items():
                if w < 1 or self.adjacency[v].get(u) != w:
                    raise ValueError(f"asymmetric or non-positive edge {u}-{v}")
        if any(w < 1 for w in self.node_weight):
            raise ValueError("node weights must be >= 1")


@dataclass(frozen=True)
class PartitionConfig:
    k: int = 20
    epsilon: float = 0.03
    seed: int = 0
    max_refine_passes: int = 10
    n_init: int = 4

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0 <= self.epsilon < 1:
            raise ValueError("epsilon must lie in [0, 1)")
        if self.max_refine_passes < 0 or self.n_init < 1:
            raise ValueError("max_refine_passes must be >= 0 and n_init >= 1")


@dataclass
class PartitionAssignment:
    part_of: list[int]
    k: int

    def part_weights(self, g: EntityGraph) -> list[int]:
        weights = [0] * self.k
        for v, p in enumerate(self.part_of):
            weights[p] += g.node_weight[v]
        return weights

    def members(self, p: int) -> list[int]:
        return [v for v, q in enumerate(self.part_of) if q == p]


@dataclass
class Subgraph:
    partition_index: int
    entity_ids: list[int]
    triples: list[Triple] = field(default_factory=list)


def balance_bound(total_weight: int, k: int, epsilon: float) -> int:
    """Largest integer part weight allowed: floor((1+eps) * ceil(total/k))."""
    return int(math.floor((1.0 + epsilon) * math.ceil(total_weight / k) + 1e-9))


def is_balanced(g: EntityGraph, a: PartitionAssignment, epsilon: float) -> bool:
    return max(a.part_weights(g), default=0) <= balance_bound(g.total_node_weight, a.k, epsilon)


def build_entity_graph(kg: KnowledgeGraph) -> EntityGraph:
    """One node per entity, one undirected edge per connected pair weighted by triple count."""
    return EntityGraph.from_edges(kg.n_entities, ((t.subject, t.object, 1) for t in kg.triples))


def edge_cut(g: EntityGraph, a: PartitionAssignment) -> int:
    part = a.part_of
    if len(part) != g.node_count:
        raise ValueError(f"assignment covers {len(part)} nodes, graph has {g.node_count}")
    return sum(w for u, v, w in g.edges() if part[u] != part[v])


# -- internal helpers working on plain lists --------------------------------------

def _cut(adj, part) -> int:
    return sum(w for u, nbrs in enumerate(adj) for v, w in nbrs.items() if u < v and part[u] != part[v])


def _weights(nw, part, k) -> list[int]:
    weights = [0] * k
    for v, p in enumerate(part):
        weights[p] += nw[v]
    return weights


def _excess(weights, bound) -> int:
    return sum(w - bound for w in weights if w > bound)


def _connectivity(adj, part, v) -> dict[int, int]:
    conn: dict[int, int] = {}
    for u, w in adj[v].items():
        p = part[u]
        conn[p] = conn.get(p, 0) + w
    return conn


def _coarsen(adj, nw, rng, max_weight):
    """One round of heavy-edge matching. Returns (coarse adj, coarse weights, fine->coarse map)."""
    n = len(adj)
    match = [-1] * n
    for u in rng.permutation(n).tolist():
        if match[u] != -1:
            continue
        best, best_w = -1, 0
        for v, w in adj[u].items():
            if match[v] != -1 or nw[u] + nw[v] > max_weight:
                continue
            if w > best_w or (w == best_w and v < best):
                best, best_w = v, w
        if best >= 0:
            match[u], match[best] = best, u
        else:
            match[u] = u
    cmap = [-1] * n
    nc = 0
    for u in range(n):
        if cmap[u] == -1:
            cmap[u] = cmap[match[u]] = nc
            nc += 1
    cnw = [0] * nc
    cadj: list[dict[int, int]] = [{} for _ in range(nc)]
    for u in range(n):
        cu = cmap[u]
        cnw[cu] += nw[u]
        for v, w in adj[u].items():
            cv = cmap[v]
            if cu != cv:
                cadj[cu][cv] = cadj[cu].get(cv, 0) + w
    return cadj, cnw, cmap


def _grow_regions(adj, nw, k, bound, rng) -> list[int]:
    """Greedy region growing from k random seeds; the lightest part grows first."""
    n = len(adj)
    part = [-1] * n
    weights = [0] * k
    frontier: list[dict[int, int]] = [{} for _ in range(k)]

    def assign(v, p):
        part[v] = p
        weights[p] += nw[v]
        for q in range(k):
            frontier[q].pop(v, None)
        for u, w in adj[v].items():
            if part[u] == -1:
                frontier[p][u] = frontier[p].get(u, 0) + w

    seeds = rng.choice(n, size=min(k, n), replace=False).tolist()
    for p, s in enumerate(seeds):
        assign(s, p)
    active = set(range(len(seeds)))
    while active:
        p = min(active, key=lambda q: (weights[q], q))
        best, best_c = -1, -1
        for v, c in frontier[p].items():
            if weights[p] + nw[v] > bound:
                continue
            if c > best_c or (c == best_c and v < best):
                best, best_c = v, c
        if best < 0:
            active.discard(p)
            continue
        assign(best, p)
    for v in range(n):
        if part[v] != -1:
            continue
        conn = {}
        for u, w in adj[v].items():
            if part[u] != -1:
                conn[part[u]] = conn.get(part[u], 0) + w
        fits = [q for q in range(k) if weights[q] + nw[v] <= bound]
        if fits:
            p = max(fits, key=lambda q: (conn.get(q, 0), -weights[q], -q))
        else:
            p = min(range(k), key=lambda q: (weights[q], q))
        part[v] = p
        weights[p] += nw[v]
    return part


def _rebalance(adj, nw, part, k, bound) -> None:
    """Drain overweight parts by single moves, then by swaps with lighter nodes.

    Candidates are ranked by cut gain. Falls back to first-fit-decreasing
    packing when local moves get stuck.
    """
    weights = _weights(nw, part, k)
    while True:
        heavy = max(range(k), key=lambda q: (weights[q], -q))
        if weights[heavy] <= bound:
            return
        best = None
        members = [v for v, p in enumerate(part) if p == heavy]
        for v in members:
            conn = _connectivity(adj, part, v)
            own = conn.get(heavy, 0)
            for q in range(k):
                if q == heavy or weights[q] + nw[v] > bound:
                    continue
                key = (conn.get(q, 0) - own, -v, -q)
                if best is None or key > best[0]:
                    best = (key, v, q)
        if best is not None:
            _, v, q = best
            weights[heavy] -= nw[v]
            weights[q] += nw[v]
            part[v] = q
            continue
        swap = None
        for v in members:
            for u, q in enumerate(part):
                if q == heavy or nw[u] >= nw[v] or weights[q] - nw[u] + nw[v] > bound:
                    continue
                key = (nw[v] - nw[u], -v, -u)
                if swap is None or key > swap[0]:
                    swap = (key, v, u)
        if swap is None:
            break
        _, v, u = swap
        q = part[u]
        weights[heavy] += nw[u] - nw[v]
        weights[q] += nw[v] - nw[u]
        part[v], part[u] = q, heavy
    _first_fit_decreasing(nw, part, k, bound)


def _first_fit_decreasing(nw, part, k, bound) -> None:
    """Repack by decreasing weight: first keeping nodes in place where they fit, then best-fit."""
    order = sorted(range(len(nw)), key=lambda v: (-nw[v], v))
    for keep_local in (True, False):
        weights = [0] * k
        packed = [-1] * len(nw)
        for v in order:
            fits = [q for q in range(k) if weights[q] + nw[v] <= bound]
            if not fits:
                break
            if keep_local and part[v] in fits:
                q = part[v]
            elif keep_local:
                q = min(fits, key=lambda p: (weights[p], p))
            else:
                q = max(fits, key=lambda p: (weights[p], -p))
            packed[v] = q
            weights[q] += nw[v]
        else:
            part[:] = packed
            return


def _fm_pass(adj, nw, part, k, bound) -> bool:
    """One refinement pass; moves are rolled back to the best (excess, cut) prefix.

    Returns True when the pass strictly improved the (excess, cut) pair.
    """
    n = len(adj)
    weights = _weights(nw, part, k)
    slack = max(nw) if nw else 0
    locked = [False] * n
    stamp = [0] * n
    heap: list[tuple[int, int, int, int]] = []

    def push(v):
        p = part[v]
        conn = _connectivity(adj, part, v)
        own = conn.get(p, 0)
        best = None
        for q, w in conn.items():
            if q == p or weights[q] + nw[v] > bound + slack:
                continue
            gain = w - own
            if best is None or gain > best[0] or (gain == best[0] and q < best[1]):
                best = (gain, q)
        if best is not None:
            heapq.heappush(heap, (-best[0], v, best[1], stamp[v]))

    for v in range(n):
        if any(part[u] != part[v] for u in adj[v]):
            push(v)

    cut = _cut(adj, part)
    best_state = (_excess(weights, bound), cut)
    best_len = 0
    moves: list[tuple[int, int]] = []
    since_best = 0
    limit = max(25, n // 20)
    while heap:
        neg_gain, v, q, st = heapq.heappop(heap)
        if locked[v] or st != stamp[v]:
            continue
        if weights[q] + nw[v] > bound + slack:
            stamp[v] += 1
            push(v)
            continue
        p = part[v]
        part[v] = q
        weights[p] -= nw[v]
        weights[q] += nw[v]
        cut += neg_gain
        locked[v] = True
        moves.append((v, p))
        state = (_excess(weights, bound), cut)
        if state < best_state:
            best_state, best_len, since_best = state, len(moves), 0
        else:
            since_best += 1
            if since_best > limit:
                break
        for u in adj[v]:
            if not locked[u]:
                stamp[u] += 1
                push(u)
    for v, p in reversed(moves[best_len:]):
        part[v] = p
    return best_len > 0


def _refine(adj, nw, part, k, bound, passes) -> None:
    for _ in range(passes):
        if not _fm_pass(adj, nw, part, k, bound):
            break


def refine_pass(g: EntityGraph, a: PartitionAssignment, cfg: PartitionConfig) -> PartitionAssignment:
    """Boundary refinement of a balanced assignment; the cut never increases."""
    part = list(a.part_of)
    if a.k > 1 and g.node_count:
        bound = balance_bound(g.total_node_weight, a.k, cfg.epsilon)
        _refine(g.adjacency, g.node_weight, part, a.k, bound, cfg.max_refine_passes)
    return PartitionAssignment(part, a.k)


def _multilevel(adj, nw, k, bound, cfg: PartitionConfig, rng) -> list[int]:
    levels = []
    target = max(4 * k, 64)
    total = sum(nw)
    max_weight = max(max(nw), int(math.ceil(1.5 * total / target)))
    while len(adj) > target:
        cadj, cnw, cmap = _coarsen(adj, nw, rng, max_weight)
        if len(cadj) == len(adj):
            break
        levels.append((adj, nw, cmap))
        adj, nw = cadj, cnw

    best_part, best_key = None, None
    for _ in range(cfg.n_init):
        part = _grow_regions(adj, nw, k, bound, rng)
        _rebalance(adj, nw, part, k, bound)
        _refine(adj, nw, part, k, bound, cfg.max_refine_passes)
        key = (_excess(_weights(nw, part, k), bound), _cut(adj, part))
        if best_key is None or key < best_key:
            best_part, best_key = part, key
    part = best_part

    for fine_adj, fine_nw, cmap in reversed(levels):
        part = [part[c] for c in cmap]
        _rebalance(fine_adj, fine_nw, part, k, bound)
        _refine(fine_adj, fine_nw, part, k, bound, cfg.max_refine_passes)
    return part


def partition(g: EntityGraph, cfg: PartitionConfig) -> PartitionAssignment:
    """Multilevel balanced k-way partition of ``g``.

    Degree-zero nodes are held out of the multilevel pipeline and handed, in id
    order, to the currently lightest part.
    """
    k, n = cfg.k, g.node_count
    if k > n:
        raise ValueError(f"k={k} exceeds node count {n}")
    bound = balance_bound(g.total_node_weight, k, cfg.epsilon)
    if n and max(g.node_weight) > bound:
        raise PartitionInfeasibleError(f"a node of weight {max(g.node_weight)} exceeds the part bound {bound}")
    if k == 1:
        return PartitionAssignment([0] * n, 1)

    rng = np.random.default_rng(cfg.seed)
    connected = [v for v in range(n) if g.adjacency[v]]
    isolated = [v for v in range(n) if not g.adjacency[v]]
    part_of = [-1] * n
    weights = [0] * k
    if connected:
        local = {v: i for i, v in enumerate(connected)}
        sub_adj = [{local[u]: w for u, w in g.adjacency[v].items()} for v in connected]
        sub_nw = [g.node_weight[v] for v in connected]
        sub_part = _multilevel(sub_adj, sub_nw, k, bound, cfg, rng)
        for v, p in zip(connected, sub_part):
            part_of[v] = p
            weights[p] += g.node_weight[v]
    for v in isolated:
        p = min(range(k), key=lambda q: (weights[q], q))
        part_of[v] = p
        weights[p] += g.node_weight[v]
    if max(weights) > bound:
        _rebalance(g.adjacency, g.node_weight, part_of, k, bound)
        if max(_weights(g.node_weight, part_of, k)) > bound:
            raise PartitionInfeasibleError(
                f"could not satisfy part bound {bound} with k={k}, epsilon={cfg.epsilon}")
    return PartitionAssignment(part_of, k)


def brute_force_partition(g: EntityGraph, cfg: PartitionConfig) -> tuple[PartitionAssignment, int]:
    """Exact minimum-cut balanced assignment by branch and bound over canonical labelings."""
    n, k = g.node_count, cfg.k
    if n > BRUTE_FORCE_MAX_NODES:
        raise ValueError(f"brute force is limited to {BRUTE_FORCE_MAX_NODES} nodes, got {n}")
    bound = balance_bound(g.total_node_weight, k, cfg.epsilon)
    adj, nw = g.adjacency, g.node_weight
    # edges to lower-numbered nodes, so the partial cut is exact at every depth
    back = [[(u, w) for u, w in adj[v].items() if u < v] for v in range(n)]
    part = [-1] * n
    weights = [0] * k
    best = [math.inf, None]

    def dfs(v, used, cut):
        if cut >= best[0]:
            return
        if v == n:
            best[0], best[1] = cut, list(part)
            return
        for p in range(min(k, used + 1)):
            if weights[p] + nw[v] > bound:
                continue
            extra = sum(w for u, w in back[v] if part[u] != p)
            part[v] = p
            weights[p] += nw[v]
            dfs(v + 1, max(used, p + 1), cut + extra)
            weights[p] -= nw[v]
            part[v] = -1

    dfs(0, 0, 0)
    if best[1] is None:
        raise PartitionInfeasibleError("no balanced assignment exists")
    return PartitionAssignment(best[1], k), int(best[0])


# -- triples to subgraphs ------------------------------------------------------------

def assign_triples(kg: KnowledgeGraph, a: PartitionAssignment, policy: Policy = "drop") -> list[Subgraph]:
    """Distribute triples over partitions.

    Internal triples go to their partition. Crossing triples are dropped, or
    under ``policy="subject"`` follow their subject (the object entity is then
    listed in that subgraph too).
    """
    if policy not in ("drop", "subject"):
        raise ValueError(f"unknown policy {policy!r}")
    if len(a.part_of) != kg.n_entities:
        raise ValueError("assignment does not match the graph's entity count")
    entity_sets = [set() for _ in range(a.k)]
    for v, p in enumerate(a.part_of):
        entity_sets[p].add(v)
    kept: list[list[Triple]] = [[] for _ in range(a.k)]
    for t in kg.triples:
        ps, po = a.part_of[t.subject], a.part_of[t.object]
        if ps == po:
            kept[ps].append(t)
        elif policy == "subject":
            kept[ps].append(t)
            entity_sets[ps].add(t.object)
    return [Subgraph(p, sorted(entity_sets[p]), kept[p]) for p in range(a.k)]


def count_dropped(kg: KnowledgeGraph, a: PartitionAssignment) -> int:
    """Number of triples whose endpoints lie in different parts."""
    return sum(1 for t in kg.triples if a.part_of[t.subject] != a.part_of[t.object])


# -- assignment file ------------------------------------------------------------------

def format_assignment(kg: KnowledgeGraph, a: PartitionAssignment, cfg: PartitionConfig,
                      cut: int, dropped: int) -> str:
    header = (f"# k={a.k}\tepsilon={cfg.epsilon}\tseed={cfg.seed}\tcut={cut}\tdropped={dropped}\n")
    body = "".join(f"{name}\t{p}\n" for name, p in zip(kg.entities, a.part_of))
    return header + body


def write_assignment(path: str | os.PathLike, kg: KnowledgeGraph, a: PartitionAssignment,
                     cfg: PartitionConfig, cut: int, dropped: int) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_assignment(kg, a, cfg, cut, dropped))


def read_assignment(path: str | os.PathLike, kg: KnowledgeGraph) -> tuple[PartitionAssignment, dict]:
    """Parse an assignment file against ``kg``; returns the assignment and header fields."""
    index = {name: i for i, name in enumerate(kg.entities)}
    part_of = [-1] * kg.n_entities
    meta: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                for item in line[1:].strip().split("\t"):
                    key, _, value = item.partition("=")
                    meta[key.strip()] = value.strip()
                continue
            if not line:
                continue
            name, _, p = line.rpartition("\t")
            if name not in index:
                raise ValueError(f"unknown entity {name!r} in {path}")
            part_of[index[name]] = int(p)
    if -1 in part_of:
        raise ValueError(f"{path} does not cover every entity")
    k = int(meta.get("k", max(part_of, default=-1) + 1))
    return PartitionAssignment(part_of, k), meta


class GraphPartitioner(ClusterMixin, BaseEstimator):
    """Estimator wrapper around :func:`partition`.

    ``fit`` accepts an :class:`EntityGraph` or a :class:`KnowledgeGraph` and sets
    ``labels_``, ``assignment_``, ``edge_cut_`` and ``part_weights_``.
    """

    def __init__(self, n_parts: int = 20, epsilon: float = 0.03, max_refine_passes: int = 10,
                 n_init: int = 4, random_state: int = 0):
        self.n_parts = n_parts
        self.epsilon = epsilon
        self.max_refine_passes = max_refine_passes
        self.n_init = n_init
        self.random_state = random_state

    def _config(self) -> PartitionConfig:
        return PartitionConfig(k=self.n_parts, epsilon=self.epsilon, seed=self.random_state,
                               max_refine_passes=self.max_refine_passes, n_init=self.n_init)

    def fit(self, X, y=None):
        g = build_entity_graph(X) if isinstance(X, KnowledgeGraph) else X
        if not isinstance(g, EntityGraph):
            raise TypeError("GraphPartitioner expects an EntityGraph or a KnowledgeGraph")
        self.assignment_ = partition(g, self._config())
        self.labels_ = np.asarray(self.assignment_.part_of, dtype=np.int64)
        self.edge_cut_ = edge_cut(g, self.assignment_)
        self.part_weights_ = self.assignment_.part_weights(g)
        return self

    def refine(self, X) -> PartitionAssignment:
        check_is_fitted(self, "assignment_")
        return refine_pass(X, self.assignment_, self._config())
