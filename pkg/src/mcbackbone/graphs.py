"""Small directed-graph utilities on dense adjacency supports.

Arcs follow the package-wide convention: entry (l, m) of a K x K matrix is
the arc l -> m, i.e. rows index sources and columns index targets.
"""

from __future__ import annotations

import numpy as np


def topological_order(support: np.ndarray) -> list[int] | None:
    """Kahn's algorithm on a boolean/weighted K x K support matrix.

    Returns a topological order of the node indices, or None if the support
    contains a directed cycle.  Ties are broken by ascending node index so
    the result is deterministic.
    """
    support = np.asarray(support)
    k = support.shape[0]
    nonzero = support != 0
    indegree = nonzero.sum(axis=0).astype(int)
    ready = sorted(np.flatnonzero(indegree == 0).tolist())
    order = []
    while ready:
        node = ready.pop(0)
        order.append(node)
        children = np.flatnonzero(nonzero[node])
        for child in children:
            indegree[child] -= 1
            if indegree[child] == 0:
                # insert keeping ascending order for determinism
                lo = 0
                while lo < len(ready) and ready[lo] < child:
                    lo += 1
                ready.insert(lo, int(child))
    if len(order) != k:
        return None
    return order


def is_acyclic(support: np.ndarray) -> bool:
    return topological_order(support) is not None


def find_cycle(support: np.ndarray) -> list[tuple[int, int]] | None:
    """Return one directed cycle as a list of (src, dst) arcs, or None."""
    support = np.asarray(support) != 0
    k = support.shape[0]
    color = [0] * k  # 0 unvisited, 1 on stack, 2 done
    parent: dict[int, int] = {}

    for start in range(k):
        if color[start] != 0:
            continue
        stack = [(start, iter(np.flatnonzero(support[start]).tolist()))]
        color[start] = 1
        while stack:
            node, it = stack[-1]
            advanced = False
            for child in it:
                if color[child] == 0:
                    color[child] = 1
                    parent[child] = node
                    stack.append((child, iter(np.flatnonzero(support[child]).tolist())))
                    advanced = True
                    break
                if color[child] == 1:
                    # back-arc closes a cycle: child -> ... -> node -> child
                    cycle = [(node, child)]
                    cur = node
                    while cur != child:
                        cycle.append((parent[cur], cur))
                        cur = parent[cur]
                    cycle.reverse()
                    return cycle
            if not advanced:
                color[node] = 2
                stack.pop()
    return None


def reaches(children: dict[int, set[int]], src: int, dst: int) -> bool:
    """True iff dst is reachable from src in the adjacency dict."""
    if src == dst:
        return True
    seen = {src}
    frontier = [src]
    while frontier:
        node = frontier.pop()
        for child in children.get(node, ()):
            if child == dst:
                return True
            if child not in seen:
                seen.add(child)
                frontier.append(child)
    return False


def creates_cycle(children: dict[int, set[int]], src: int, dst: int) -> bool:
    """True iff adding src -> dst to the adjacency dict closes a cycle."""
    if src == dst:
        return True
    return reaches(children, dst, src)
