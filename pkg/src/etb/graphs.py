"""Small graph helpers shared by validation, the claims store and export."""

from __future__ import annotations

from typing import Hashable, Iterable, Mapping, TypeVar

N = TypeVar("N", bound=Hashable)


def cyclic_components(graph: Mapping[N, Iterable[N]]) -> list[tuple[N, ...]]:
    """Strongly connected components that contain a cycle (Tarjan, iterative).

    Each component is returned sorted; components come out in discovery order
    over the sorted node list, so the result is deterministic.
    """
    succ = {v: sorted(set(graph.get(v, ())), key=repr) for v in graph}
    for vs in list(succ.values()):
        for u in vs:
            succ.setdefault(u, [])
    index: dict[N, int] = {}
    low: dict[N, int] = {}
    on: set[N] = set()
    stack: list[N] = []
    out: list[tuple[N, ...]] = []
    counter = 0
    for root in sorted(succ, key=repr):
        if root in index:
            continue
        work = [(root, 0)]
        while work:
            v, i = work.pop()
            if i == 0:
                index[v] = low[v] = counter
                counter += 1
                stack.append(v)
                on.add(v)
            recurse = False
            for j in range(i, len(succ[v])):
                u = succ[v][j]
                if u not in index:
                    work.append((v, j + 1))
                    work.append((u, 0))
                    recurse = True
                    break
                if u in on:
                    low[v] = min(low[v], index[u])
            if recurse:
                continue
            if low[v] == index[v]:
                comp = []
                while True:
                    u = stack.pop()
                    on.discard(u)
                    comp.append(u)
                    if u == v:
                        break
                if len(comp) > 1 or v in succ[v]:
                    out.append(tuple(sorted(comp, key=repr)))
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[v])
    return out
