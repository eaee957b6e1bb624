"""Brute-force reference implementations used only by the tests."""

from __future__ import annotations

import itertools
from collections import Counter
from functools import lru_cache

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

from legacy2cacao.model import WorkflowGraph


# ---------------------------------------------------------------- edit distance


def _neighbours(s: str, alphabet: str, max_len: int):
    for i in range(len(s) + 1):
        if len(s) < max_len:
            for c in alphabet:
                yield s[:i] + c + s[i:]
    for i in range(len(s)):
        yield s[:i] + s[i + 1 :]
        for c in alphabet:
            if c != s[i]:
                yield s[:i] + c + s[i + 1 :]
    for i in range(len(s) - 1):
        if s[i] != s[i + 1]:
            yield s[:i] + s[i + 1] + s[i] + s[i + 2 :]


@lru_cache(maxsize=None)
def edit_graph_distances(alphabet: str, max_len: int, slack: int = 2):
    """Shortest edit-operation paths from every string up to ``max_len``.

    Every single insertion, deletion, substitution or adjacent swap is one
    edge, so the path length is the minimum number of operations.
    Intermediate strings may be up to ``slack`` characters longer.
    """
    cap = max_len + slack
    words = [""]
    for n in range(1, cap + 1):
        words += ["".join(p) for p in itertools.product(alphabet, repeat=n)]
    index = {w: i for i, w in enumerate(words)}
    rows, cols = [], []
    for w, i in index.items():
        for v in _neighbours(w, alphabet, cap):
            rows.append(i)
            cols.append(index[v])
    adj = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(words), len(words)))
    sources = [i for w, i in index.items() if len(w) <= max_len]
    dist = shortest_path(adj, method="D", unweighted=True, indices=sources)
    return index, dist


def brute_dl(a: str, b: str, alphabet: str | None = None, max_len: int | None = None) -> int:
    """Length of the shortest edit path between ``a`` and ``b``."""
    alphabet = alphabet or "".join(sorted(set(a + b))) or "a"
    max_len = max_len if max_len is not None else max(len(a), len(b))
    index, dist = edit_graph_distances(alphabet, max_len)
    # Strings are indexed shortest first, so source rows line up with ``index``.
    return int(dist[index[a], index[b]])


# ---------------------------------------------------------- graph edit distance


def brute_ged(g1: WorkflowGraph, g2: WorkflowGraph) -> int:
    """Minimum cost over every partial injective node mapping from g1 into g2."""
    a = [(n.key, n.kind, n.normalized_name) for n in g1.nodes]
    b = [(n.key, n.kind, n.normalized_name) for n in g2.nodes]
    e1 = Counter((e.source, e.target, e.label) for e in g1.edges)
    e2 = Counter((e.source, e.target, e.label) for e in g2.edges)
    best = None
    for k in range(min(len(a), len(b)) + 1):
        for chosen in itertools.combinations(range(len(a)), k):
            for image in itertools.permutations(range(len(b)), k):
                f = {a[i][0]: b[j][0] for i, j in zip(chosen, image)}
                cost = len(a) - k + len(b) - k
                cost += sum(a[i][1:] != b[j][1:] for i, j in zip(chosen, image))
                # Push g1 edges through the mapping; deleted endpoints drop the edge.
                moved = Counter()
                unmoved = 0
                for (s, t, lab), c in e1.items():
                    if s in f and t in f:
                        moved[(f[s], f[t], lab)] += c
                    else:
                        unmoved += c
                cost += unmoved
                # Per endpoint pair: pair equal labels for free, substitute the rest.
                pairs = {(s, t) for s, t, _ in moved} | {(s, t) for s, t, _ in e2}
                for s, t in pairs:
                    l1 = Counter({lab: c for (x, y, lab), c in moved.items() if (x, y) == (s, t)})
                    l2 = Counter({lab: c for (x, y, lab), c in e2.items() if (x, y) == (s, t)})
                    n1, n2 = sum(l1.values()), sum(l2.values())
                    cost += max(n1, n2) - sum((l1 & l2).values())
                if best is None or cost < best:
                    best = cost
    return best
