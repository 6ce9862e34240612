"""Leiden community detection by modularity optimization at resolution gamma.

The quality function is configuration-model modularity

    Q = sum_c [ L_c / m  -  gamma * (d_c / 2m)^2 ]

with L_c the intra-community edge weight, d_c the total degree of
community c, and m the total edge weight. Each outer iteration runs
queue-based local moving, a seeded randomized refinement restricted to
quality-non-decreasing merges, and graph aggregation over the refined
partition. Every returned community induces a connected subgraph.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .knn import NeighborGraph

_MOVE_TOL = 1e-12  # minimum modularity gain counted as an improvement
_REFINE_THETA = 0.05  # randomness of refinement merges


@dataclass(frozen=True, eq=False)
class Partition:
    """Node-to-community assignment with its recomputed modularity."""

    assignment: np.ndarray  # (n,) int64, community ids 0..c-1
    c: int
    quality: float
    quality_history: tuple[float, ...] = ()

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64)
        object.__setattr__(self, "assignment", a)
        a.setflags(write=False)
        if a.ndim != 1:
            raise ValueError("assignment must be 1-D")
        if self.c <= 0 or a.min(initial=0) < 0 or (a.size and a.max() != self.c - 1):
            raise ValueError("community ids must be contiguous 0..c-1")
        if np.unique(a).size != self.c:
            raise ValueError("community ids must be contiguous 0..c-1")


def modularity(graph: NeighborGraph, assignment: np.ndarray, gamma: float) -> float:
    """Modularity of ``assignment`` on ``graph`` at resolution ``gamma``."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    assignment = np.asarray(assignment, dtype=np.int64)
    if assignment.shape != (graph.n,):
        raise ValueError("assignment does not cover the graph's nodes")
    m = graph.m
    if m <= 0:
        raise ValueError("empty graph (m = 0)")
    src = np.repeat(np.arange(graph.n), np.diff(graph.indptr))
    intra = assignment[src] == assignment[graph.indices]
    # CSR stores both directions, so intra weights are double-counted
    l_c = np.bincount(assignment[src[intra]], weights=graph.weights[intra]) / 2.0
    strengths = np.bincount(src, weights=graph.weights, minlength=graph.n)
    d_c = np.bincount(assignment, weights=strengths)
    k = max(len(l_c), len(d_c))
    l_c = np.pad(l_c, (0, k - len(l_c)))
    d_c = np.pad(d_c, (0, k - len(d_c)))
    return float(np.sum(l_c / m - gamma * (d_c / (2.0 * m)) ** 2))


class _Level:
    """Working graph for one aggregation level: CSR plus per-node self-loop
    weight collapsed from finer levels (counted twice in strengths)."""

    def __init__(self, indptr, indices, weights, self_wt):
        self.indptr = indptr
        self.indices = indices
        self.weights = weights
        self.self_wt = self_wt
        self.n = len(indptr) - 1
        row_sums = np.add.reduceat(weights, indptr[:-1]) if len(weights) else np.zeros(self.n)
        row_sums[np.diff(indptr) == 0] = 0.0
        self.strengths = row_sums + 2.0 * self_wt

    @classmethod
    def from_graph(cls, graph: NeighborGraph) -> "_Level":
        return cls(
            graph.indptr.astype(np.int64),
            graph.indices.astype(np.int64),
            graph.weights.astype(np.float64),
            np.zeros(graph.n, dtype=np.float64),
        )


def _local_move(level: _Level, comm: list[int], comm_deg: list[float],
                comm_size: list[int], freed: list[int], gamma: float,
                m: float, rng: np.random.Generator) -> int:
    """Queue-based local moving; mutates the partition state in place.

    Returns the number of node moves performed. Values are compared in
    edge-weight units (Q * m) against a tolerance of _MOVE_TOL * m.
    """
    indptr = level.indptr.tolist()
    nbr = level.indices.tolist()
    wt = level.weights.tolist()
    strengths = level.strengths.tolist()
    inv2m = gamma / (2.0 * m)
    tol = _MOVE_TOL * m

    order = rng.permutation(level.n).tolist()
    queue = deque(order)
    in_queue = [True] * level.n
    n_moves = 0

    while queue:
        v = queue.popleft()
        in_queue[v] = False
        a = comm[v]
        s_v = strengths[v]
        lo, hi = indptr[v], indptr[v + 1]

        acc: dict[int, float] = {}
        for i in range(lo, hi):
            c = comm[nbr[i]]
            acc[c] = acc.get(c, 0.0) + wt[i]

        val_cur = acc.get(a, 0.0) - s_v * (comm_deg[a] - s_v) * inv2m
        best_c, best_val = a, val_cur
        for c, k_vc in acc.items():
            if c == a:
                continue
            val = k_vc - s_v * comm_deg[c] * inv2m
            if val > best_val:
                best_c, best_val = c, val

        if 0.0 > best_val + tol:
            best_c, best_val = freed.pop(), 0.0  # isolate into an empty community
        elif best_c == a or best_val <= val_cur + tol:
            continue

        comm[v] = best_c
        comm_deg[a] -= s_v
        comm_deg[best_c] += s_v
        comm_size[a] -= 1
        comm_size[best_c] += 1
        if comm_size[a] == 0:
            freed.append(a)
        n_moves += 1
        for i in range(lo, hi):
            u = nbr[i]
            if comm[u] != best_c and not in_queue[u]:
                queue.append(u)
                in_queue[u] = True

    return n_moves


def _refine(level: _Level, comm: list[int], gamma: float, m: float,
            rng: np.random.Generator) -> np.ndarray:
    """Refinement phase: within each community, merge singletons into
    connected subcommunities using randomized quality-non-decreasing moves.

    Returns the refined assignment (one subcommunity id per node). Only
    nodes that are still singletons merge, and only into subcommunities
    they share an edge with, so every subcommunity is connected.
    """
    n = level.n
    indptr = level.indptr.tolist()
    nbr = level.indices.tolist()
    wt = level.weights.tolist()
    strengths = level.strengths.tolist()
    inv2m = gamma / (2.0 * m)

    comm_arr = np.asarray(comm, dtype=np.int64)
    src = np.repeat(np.arange(n), np.diff(level.indptr))
    same = comm_arr[src] == comm_arr[level.indices]
    k_in = np.zeros(n, dtype=np.float64)
    np.add.at(k_in, src[same], level.weights[same])  # k_v -> (C \ v)
    d_comm = np.bincount(comm_arr, weights=level.strengths,
                         minlength=int(comm_arr.max()) + 1)

    s = level.strengths
    node_ok = k_in >= gamma * s * (d_comm[comm_arr] - s) / (2.0 * m)

    ref = list(range(n))
    ref_size = [1] * n
    ref_deg = strengths.copy()
    ref_ext = k_in.tolist()  # edge weight from subcommunity to rest of its community

    for v in rng.permutation(n).tolist():
        if ref_size[ref[v]] > 1 or not node_ok[v]:
            continue
        a = comm[v]
        d_c = d_comm[a]
        lo, hi = indptr[v], indptr[v + 1]
        acc: dict[int, float] = {}
        for i in range(lo, hi):
            u = nbr[i]
            if comm[u] == a:
                r = ref[u]
                if r != v:
                    acc[r] = acc.get(r, 0.0) + wt[i]
        if not acc:
            continue
        s_v = strengths[v]
        cands: list[int] = []
        gains: list[float] = []
        for r, k_vr in acc.items():
            if ref_ext[r] < gamma * ref_deg[r] * (d_c - ref_deg[r]) / (2.0 * m):
                continue
            gain = k_vr - s_v * ref_deg[r] * inv2m
            if gain >= 0.0:
                cands.append(r)
                gains.append(gain)
        if not cands:
            continue
        if len(cands) == 1:
            target = cands[0]
        else:
            logits = np.array(gains) / (_REFINE_THETA * m)
            p = np.exp(logits - logits.max())
            p /= p.sum()
            target = cands[int(rng.choice(len(cands), p=p))]

        k_vt = acc[target]
        ref_size[target] += 1
        ref_size[ref[v]] -= 1
        ref_deg[target] += s_v
        ref_ext[target] += ref_ext[v] - 2.0 * k_vt
        ref[v] = target

    return np.asarray(ref, dtype=np.int64)


def _aggregate(level: _Level, ref: np.ndarray) -> tuple[_Level, np.ndarray]:
    """Collapse refined subcommunities into nodes of a coarser level.

    Returns the new level and the dense node map (old node -> new node).
    """
    _, node_map = np.unique(ref, return_inverse=True)
    n_new = int(node_map.max()) + 1

    src = np.repeat(np.arange(level.n), np.diff(level.indptr))
    r_src = node_map[src]
    r_dst = node_map[level.indices]
    cross = r_src != r_dst
    self_sum = np.bincount(r_src[~cross], weights=level.weights[~cross], minlength=n_new) / 2.0
    self_wt = self_sum + np.bincount(node_map, weights=level.self_wt, minlength=n_new)

    key = r_src[cross] * np.int64(n_new) + r_dst[cross]
    w = level.weights[cross]
    order = np.argsort(key, kind="stable")
    key, w = key[order], w[order]
    boundary = np.empty(len(key), dtype=bool)
    if len(key):
        boundary[0] = True
        boundary[1:] = key[1:] != key[:-1]
    starts = np.nonzero(boundary)[0]
    uniq_key = key[starts]
    sums = np.add.reduceat(w, starts) if len(starts) else np.zeros(0)

    new_src = (uniq_key // n_new).astype(np.int64)
    new_dst = (uniq_key % n_new).astype(np.int64)
    indptr = np.zeros(n_new + 1, dtype=np.int64)
    np.add.at(indptr, new_src + 1, 1)
    np.cumsum(indptr, out=indptr)
    return _Level(indptr, new_dst, sums, self_wt), node_map


def _connected_split(graph: NeighborGraph, assignment: np.ndarray) -> np.ndarray:
    """Split any community into its connected components (new contiguous ids,
    ordered by first node appearance). Splitting a disconnected community
    strictly increases modularity, so this never degrades quality."""
    n = graph.n
    out = np.full(n, -1, dtype=np.int64)
    next_id = 0
    indptr, indices = graph.indptr, graph.indices
    for start in range(n):
        if out[start] >= 0:
            continue
        c = assignment[start]
        out[start] = next_id
        stack = [start]
        while stack:
            v = stack.pop()
            for u in indices[indptr[v]: indptr[v + 1]]:
                if out[u] < 0 and assignment[u] == c:
                    out[u] = next_id
                    stack.append(int(u))
        next_id += 1
    return out


def _canonical_ids(assignment: np.ndarray) -> tuple[np.ndarray, int]:
    """Renumber community ids contiguously by first appearance."""
    mapping: dict[int, int] = {}
    out = np.empty_like(assignment)
    for i, c in enumerate(assignment.tolist()):
        out[i] = mapping.setdefault(c, len(mapping))
    return out, len(mapping)


def leiden_cluster(graph: NeighborGraph, gamma: float, seed: int,
                   max_iterations: int = 100) -> Partition:
    """Partition ``graph`` by Leiden modularity optimization.

    Runs local moving, refinement, and aggregation until an outer iteration
    makes no move, or ``max_iterations`` is reached. Deterministic for a
    fixed (graph, gamma, seed). The returned quality is recomputed from
    scratch and the history holds the flat modularity after the singleton
    initialization and after each outer iteration.
    """
    if graph.n == 0:
        raise ValueError("empty graph")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if max_iterations <= 0:
        raise ValueError("max_iterations must be positive")
    m = graph.m
    if m <= 0:
        raise ValueError("empty graph (m = 0)")

    rng = np.random.default_rng(seed)
    level = _Level.from_graph(graph)
    node_of_orig = np.arange(graph.n, dtype=np.int64)

    comm = list(range(level.n))
    comm_deg = level.strengths.tolist()
    comm_size = [1] * level.n
    freed: list[int] = []

    history = [modularity(graph, node_of_orig, gamma)]  # singleton baseline

    for _ in range(max_iterations):
        n_moves = _local_move(level, comm, comm_deg, comm_size, freed, gamma, m, rng)

        flat = np.asarray(comm, dtype=np.int64)[node_of_orig]
        q_now = modularity(graph, flat, gamma)
        if q_now < history[-1] - 1e-9:
            raise RuntimeError(
                f"modularity decreased across outer iterations: {history[-1]} -> {q_now}"
            )
        history.append(q_now)

        ref = _refine(level, comm, gamma, m, rng)
        new_level, node_map = _aggregate(level, ref)
        if new_level.n == level.n and n_moves == 0:
            break  # fixed point: nothing moved and nothing merged

        # carry the unrefined partition onto the aggregated graph
        comm_arr = np.asarray(comm, dtype=np.int64)
        _, dense = np.unique(comm_arr, return_inverse=True)
        n_comms = int(dense.max()) + 1
        agg_comm = np.empty(new_level.n, dtype=np.int64)
        agg_comm[node_map] = dense  # all members of a subcommunity share one community

        node_of_orig = node_map[node_of_orig]
        level = new_level
        comm = agg_comm.tolist()
        comm_deg = [0.0] * level.n
        comm_size = [0] * level.n
        for v in range(level.n):
            comm_deg[comm[v]] += level.strengths[v]
            comm_size[comm[v]] += 1
        freed = list(range(level.n - 1, n_comms - 1, -1))

    flat = np.asarray(comm, dtype=np.int64)[node_of_orig]
    flat = _connected_split(graph, flat)
    assignment, c = _canonical_ids(flat)
    quality = modularity(graph, assignment, gamma)
    if quality < history[-1] - 1e-9:
        raise RuntimeError("connectivity split decreased modularity")
    history.append(quality)
    if quality < history[0] - 1e-12:
        raise RuntimeError("final quality below the singleton partition's")
    return Partition(assignment=assignment, c=c, quality=quality,
                     quality_history=tuple(history))


def save_partition_csv(tile_ids, assignment: np.ndarray, path) -> None:
    """Write ``tile_id,hpc_id`` rows for a clustered subsample."""
    import csv
    from pathlib import Path

    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tile_id", "hpc_id"])
        for t, c in zip(tile_ids, np.asarray(assignment).tolist()):
            writer.writerow([t, int(c)])


def load_partition_csv(path) -> tuple[list[str], np.ndarray]:
    import csv
    from pathlib import Path

    tiles: list[str] = []
    labels: list[int] = []
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["tile_id", "hpc_id"]:
            raise ValueError(f"{path}: malformed partition header {header}")
        for row in reader:
            tiles.append(row[0])
            labels.append(int(row[1]))
    return tiles, np.asarray(labels, dtype=np.int64)
