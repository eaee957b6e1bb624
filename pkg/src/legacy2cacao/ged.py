"""Graph edit distance between workflow graphs.

Unit cost model:

* node insert/delete: 1; node substitution: 0 if kind and normalized name
  both match, else 1
* edge insert/delete: 1; edge substitution: 0 if the endpoints map onto each
  other and the labels match, else 1

Edges are labeled multi-edges. For an ordered pair of mapped nodes the edge
cost is ``max(|L1|, |L2|) - |L1 & L2|`` over the label multisets, which is
the optimal way to pair them up under the costs above.
"""

from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass

from .model import WorkflowGraph

EXACT_THRESHOLD = 14
TIMEOUT_S = 10.0


@dataclass(frozen=True)
class GedResult:
    raw_cost: int
    max_cost: int
    normalized: float
    exact: bool
    # (g1 key, g2 key or None) for every g1 node; unmatched g2 nodes are insertions.
    mapping: tuple[tuple[str, str | None], ...] = ()

    def to_dict(self) -> dict:
        return {
            "raw_cost": self.raw_cost,
            "max_cost": self.max_cost,
            "normalized": self.normalized,
            "exact": self.exact,
        }


class _Problem:
    def __init__(self, g1: WorkflowGraph, g2: WorkflowGraph):
        self.a = list(g1.nodes)
        self.b = list(g2.nodes)
        idx1 = {n.key: i for i, n in enumerate(self.a)}
        idx2 = {n.key: i for i, n in enumerate(self.b)}
        self.e1: dict[tuple[int, int], Counter] = {}
        self.e2: dict[tuple[int, int], Counter] = {}
        for e in g1.edges:
            self.e1.setdefault((idx1[e.source], idx1[e.target]), Counter())[e.label] += 1
        for e in g2.edges:
            self.e2.setdefault((idx2[e.source], idx2[e.target]), Counter())[e.label] += 1
        self.n_e2 = len(g2.edges)
        self.node_cost = [
            [0 if (x.kind, x.normalized_name) == (y.kind, y.normalized_name) else 1 for y in self.b]
            for x in self.a
        ]
        # Incident pairs per g1 node, so assigning node i only touches its edges.
        self.adj1: list[list[tuple[int, int]]] = [[] for _ in self.a]
        for p, q in self.e1:
            self.adj1[p].append((p, q))
            if q != p:
                self.adj1[q].append((p, q))
        self.adj2: list[list[tuple[int, int]]] = [[] for _ in self.b]
        for p, q in self.e2:
            self.adj2[p].append((p, q))
            if q != p:
                self.adj2[q].append((p, q))

    def step_cost(self, i: int, t: int, m: list[int]) -> int:
        """Cost added by mapping g1 node ``i`` to ``t`` (-1 = delete) given partial map ``m``.

        ``m[i]`` must already hold ``t``; pairs whose other endpoint is still
        undecided are skipped and charged when that endpoint is assigned.
        """
        cost = 1 if t < 0 else self.node_cost[i][t]
        for p, q in self.adj1[i]:
            mp, mq = m[p], m[q]
            if mp is None or mq is None:
                continue
            l1 = self.e1[(p, q)]
            if mp < 0 or mq < 0:
                cost += sum(l1.values())
            else:
                l2 = self.e2.get((mp, mq))
                cost += _label_cost(l1, l2)
        if t >= 0:
            # g2 edges between t and already-mapped images with no g1 counterpart.
            inv = self._inverse(m)
            for x, y in self.adj2[t]:
                px, py = inv.get(x), inv.get(y)
                if px is None or py is None:
                    continue
                if (px, py) not in self.e1:
                    cost += sum(self.e2[(x, y)].values())
        return cost

    @staticmethod
    def _inverse(m: list) -> dict[int, int]:
        return {t: i for i, t in enumerate(m) if t is not None and t >= 0}

    def completion_cost(self, m: list[int]) -> int:
        used = {t for t in m if t >= 0}
        cost = len(self.b) - len(used)
        for (x, y), labels in self.e2.items():
            if x not in used or y not in used:
                cost += sum(labels.values())
        return cost

    def total_cost(self, m: list[int]) -> int:
        partial: list = [None] * len(self.a)
        cost = 0
        for i, t in enumerate(m):
            partial[i] = t
            cost += self.step_cost(i, t, partial)
        return cost + self.completion_cost(m)


def _label_cost(l1: Counter, l2: Counter | None) -> int:
    n1 = sum(l1.values())
    if not l2:
        return n1
    n2 = sum(l2.values())
    common = sum((l1 & l2).values())
    return max(n1, n2) - common


def _greedy(prob: _Problem) -> list[int]:
    """Cheap upper bound: match equal nodes, then same-kind nodes, then improve by swaps."""
    m = [-1] * len(prob.a)
    free = list(range(len(prob.b)))
    for rank in (0, 1):
        for i, x in enumerate(prob.a):
            if m[i] >= 0:
                continue
            for t in free:
                y = prob.b[t]
                if prob.node_cost[i][t] == 0 or (rank == 1 and x.kind == y.kind):
                    m[i] = t
                    free.remove(t)
                    break
    best = prob.total_cost(m)
    improved = True
    while improved:
        improved = False
        options = list(range(len(prob.b))) + [-1]
        for i in range(len(m)):
            for t in options:
                if t == m[i]:
                    continue
                trial = list(m)
                if t >= 0 and t in trial:
                    trial[trial.index(t)] = m[i]
                trial[i] = t
                c = prob.total_cost(trial)
                if c < best:
                    best, m, improved = c, trial, True
    return m


def _exact(prob: _Problem, deadline: float) -> tuple[list[int], bool]:
    best_map = _greedy(prob)
    best = prob.total_cost(best_map)
    n1, n2 = len(prob.a), len(prob.b)
    order = sorted(range(n1), key=lambda i: -len(prob.adj1[i]))
    m: list = [None] * n1
    used = [False] * n2
    timed_out = False
    calls = 0

    def search(depth: int, cost: int, free: int) -> None:
        nonlocal best, best_map, timed_out, calls
        calls += 1
        if calls & 1023 == 0 and time.monotonic() > deadline:
            timed_out = True
        if timed_out:
            return
        remaining = n1 - depth
        if cost + abs(remaining - free) >= best:
            return
        if depth == n1:
            total = cost + prob.completion_cost(m)
            if total < best:
                best, best_map = total, list(m)
            return
        i = order[depth]
        candidates = sorted(
            (t for t in range(n2) if not used[t]), key=lambda t: prob.node_cost[i][t]
        )
        for t in candidates + [-1]:
            m[i] = t
            if t >= 0:
                used[t] = True
            search(depth + 1, cost + prob.step_cost(i, t, m), free - (t >= 0))
            if t >= 0:
                used[t] = False
            m[i] = None

    search(0, 0, n2)
    return best_map, not timed_out


def graph_edit_distance(
    g1: WorkflowGraph,
    g2: WorkflowGraph,
    exact_threshold: int = EXACT_THRESHOLD,
    timeout: float = TIMEOUT_S,
) -> GedResult:
    """Edit distance from ``g1`` to ``g2``, normalized by ``|V1|+|E1|+|V2|+|E2|``.

    Exact branch-and-bound when the combined node count is at most
    ``exact_threshold`` and the search finishes within ``timeout`` seconds;
    otherwise the greedy upper bound is returned with ``exact=False``.
    """
    prob = _Problem(g1, g2)
    max_cost = len(g1.nodes) + len(g1.edges) + len(g2.nodes) + len(g2.edges)
    if len(g1.nodes) + len(g2.nodes) <= exact_threshold:
        m, exact = _exact(prob, time.monotonic() + timeout)
    else:
        m, exact = _greedy(prob), False
    raw = prob.total_cost(m)
    mapping = tuple((n.key, prob.b[t].key if t >= 0 else None) for n, t in zip(prob.a, m))
    normalized = raw / max_cost if max_cost else 0.0
    return GedResult(raw, max_cost, normalized, exact, mapping)
