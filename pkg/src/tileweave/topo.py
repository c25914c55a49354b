"""Small graph-topology helpers shared by the solver and alignment stages.

Operates on plain (i, j) edge lists over nodes 0..n-1. Parallel edges are
not expected here; callers pass at most one edge per pair.
"""

from __future__ import annotations


def connected_components(n_nodes: int, edges: list[tuple[int, int]]) -> list[list[int]]:
    """Union-find components, each sorted ascending, ordered by smallest member."""
    parent = list(range(n_nodes))

    def find(a: int) -> int:
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    for i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            if ri > rj:
                ri, rj = rj, ri
            parent[rj] = ri

    groups: dict[int, list[int]] = {}
    for v in range(n_nodes):
        groups.setdefault(find(v), []).append(v)
    return [sorted(groups[r]) for r in sorted(groups)]


def find_bridges(n_nodes: int, edges: list[tuple[int, int]]) -> list[int]:
    """Indices of bridge edges (edges on no cycle), via iterative lowlink DFS."""
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n_nodes)]
    for idx, (i, j) in enumerate(edges):
        adj[i].append((j, idx))
        adj[j].append((i, idx))

    visited = [False] * n_nodes
    disc = [0] * n_nodes
    low = [0] * n_nodes
    bridges = []
    timer = 0
    for start in range(n_nodes):
        if visited[start]:
            continue
        # stack entries: (node, incoming edge index, iterator position)
        stack = [(start, -1, 0)]
        visited[start] = True
        disc[start] = low[start] = timer
        timer += 1
        while stack:
            v, in_edge, pos = stack[-1]
            if pos < len(adj[v]):
                stack[-1] = (v, in_edge, pos + 1)
                to, eidx = adj[v][pos]
                if eidx == in_edge:
                    continue
                if visited[to]:
                    low[v] = min(low[v], disc[to])
                else:
                    visited[to] = True
                    disc[to] = low[to] = timer
                    timer += 1
                    stack.append((to, eidx, 0))
            else:
                stack.pop()
                if stack:
                    parent = stack[-1][0]
                    low[parent] = min(low[parent], low[v])
                    if low[v] > disc[parent]:
                        bridges.append(in_edge)
    return sorted(bridges)


def fundamental_cycles(
    n_nodes: int, edges: list[tuple[int, int]]
) -> list[list[tuple[int, int]]]:
    """One cycle per non-tree edge of a BFS spanning forest.

    Each cycle is a list of directed (u, v) hops; following them returns to
    the start node. Every cycle-space element is a combination of these, so
    checking a bound on all of them covers the graph's independent cycles.
    """
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n_nodes)]
    for idx, (i, j) in enumerate(edges):
        adj[i].append((j, idx))
        adj[j].append((i, idx))

    parent = [-1] * n_nodes
    parent_edge = [-1] * n_nodes
    depth = [0] * n_nodes
    seen = [False] * n_nodes
    tree_edges = set()
    order = []
    for start in range(n_nodes):
        if seen[start]:
            continue
        seen[start] = True
        queue = [start]
        while queue:
            v = queue.pop(0)
            order.append(v)
            for to, eidx in adj[v]:
                if not seen[to]:
                    seen[to] = True
                    parent[to] = v
                    parent_edge[to] = eidx
                    depth[to] = depth[v] + 1
                    tree_edges.add(eidx)
                    queue.append(to)

    cycles = []
    for idx, (i, j) in enumerate(edges):
        if idx in tree_edges:
            continue
        # walk both endpoints up to their lowest common ancestor
        path_i, path_j = [], []
        a, b = i, j
        while depth[a] > depth[b]:
            path_i.append((a, parent[a]))
            a = parent[a]
        while depth[b] > depth[a]:
            path_j.append((b, parent[b]))
            b = parent[b]
        while a != b:
            path_i.append((a, parent[a]))
            path_j.append((b, parent[b]))
            a, b = parent[a], parent[b]
        cycle = [(j, i)] + path_i + [(v, u) for (u, v) in reversed(path_j)]
        # orient: start at j, hop to i, climb to LCA, descend back to j
        cycles.append(cycle)
    return cycles
