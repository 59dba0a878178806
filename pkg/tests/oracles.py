"""Independent reference computations used by the tests."""

import itertools

import numpy as np


def transport_vertices(a, b):
    """All vertices of the transport polytope ``{P >= 0 : P 1 = a, P^T 1 = b}``.

    Each vertex is supported on a spanning forest of the bipartite graph; for
    every edge set of size ``n + m - 1`` that forms a spanning tree the flow is
    unique and is found by peeling leaves.
    """
    n, m = len(a), len(b)
    edges = [(i, j) for i in range(n) for j in range(m)]
    out = []
    for subset in itertools.combinations(edges, n + m - 1):
        plan = _tree_flow(subset, np.array(a, float), np.array(b, float), n, m)
        if plan is not None and np.all(plan >= -1e-14):
            out.append(np.clip(plan, 0, None))
    return out


def _tree_flow(subset, a, b, n, m):
    plan = np.zeros((n, m))
    remaining = set(subset)
    supply = {("r", i): a[i] for i in range(n)}
    supply.update({("c", j): b[j] for j in range(m)})
    while remaining:
        degree = {}
        for i, j in remaining:
            degree[("r", i)] = degree.get(("r", i), 0) + 1
            degree[("c", j)] = degree.get(("c", j), 0) + 1
        leaves = [v for v, d in degree.items() if d == 1]
        if not leaves:
            return None  # cycle: not a tree
        v = leaves[0]
        edge = next(e for e in remaining if (("r", e[0]) == v or ("c", e[1]) == v))
        amount = supply[v]
        plan[edge] = amount
        other = ("c", edge[1]) if v[0] == "r" else ("r", edge[0])
        supply[other] -= amount
        supply[v] = 0.0
        remaining.discard(edge)
    if max(abs(s) for s in supply.values()) > 1e-12:
        return None
    return plan


def brute_force_wasserstein(x, a, y, b, p):
    cost = np.abs(np.subtract.outer(x, y)) ** p if x.ndim == 1 else (
        np.linalg.norm(x[:, None, :] - y[None, :, :], axis=2) ** p)
    best = min(float(np.sum(P * cost)) for P in transport_vertices(a, b))
    return best ** (1.0 / p)
