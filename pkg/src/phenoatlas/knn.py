"""Exact Euclidean k-nearest-neighbour graph over tile embeddings.

Directed kNN lists are symmetrized by union, all retained edges get
weight 1.0, and distance ties are broken by lower node index so that
graph construction is fully deterministic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cohort import EmbeddingSet

_BLOCK_ROWS = 512  # rows per distance block; bounds peak memory at ~n*_BLOCK_ROWS floats


@dataclass(frozen=True, eq=False)
class NeighborGraph:
    """Undirected weighted graph in CSR form (no self-loops).

    ``indptr``/``indices``/``weights`` follow the usual CSR convention with
    both directions of every undirected edge present; neighbor lists are
    sorted by index.
    """

    n: int
    indptr: np.ndarray  # (n+1,) int64
    indices: np.ndarray  # int64, sorted within each row
    weights: np.ndarray  # float64

    def __post_init__(self):
        for name in ("indptr", "indices", "weights"):
            getattr(self, name).setflags(write=False)

    @property
    def m(self) -> float:
        """Total edge weight (each undirected edge counted once)."""
        return float(self.weights.sum()) / 2.0

    def neighbors(self, i: int) -> list[tuple[int, float]]:
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return list(zip(self.indices[lo:hi].tolist(), self.weights[lo:hi].tolist()))

    def degree(self, i: int) -> int:
        return int(self.indptr[i + 1] - self.indptr[i])

    def strength(self, i: int) -> float:
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return float(self.weights[lo:hi].sum())


def subsample(embeddings: EmbeddingSet, m: int, seed: int) -> EmbeddingSet:
    """Uniform random subsample of ``m`` tiles without replacement.

    Deterministic for a fixed seed; selected tiles keep their original
    relative order and identity. ``m`` at or above the tile count returns
    all tiles unchanged.
    """
    if m <= 0:
        raise ValueError("subsample size must be positive")
    if m >= embeddings.n:
        return embeddings
    rng = np.random.default_rng(seed)
    chosen = rng.choice(embeddings.n, size=m, replace=False)
    chosen.sort()
    return embeddings.subset(chosen)


def _knn_indices(vectors: np.ndarray, k: int) -> np.ndarray:
    """Exact k nearest neighbors per row by Euclidean distance.

    Ties are broken by lower index. Returns an (n, k) int64 array of
    neighbor indices, each row sorted by (distance, index), self excluded.
    """
    n = vectors.shape[0]
    sq_norms = np.einsum("ij,ij->i", vectors, vectors)
    out = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, _BLOCK_ROWS):
        stop = min(start + _BLOCK_ROWS, n)
        block = vectors[start:stop]
        # d^2 = |a|^2 - 2 a.b + |b|^2; clip negatives from cancellation
        d2 = sq_norms[start:stop, None] - 2.0 * (block @ vectors.T) + sq_norms[None, :]
        np.maximum(d2, 0.0, out=d2)
        rows = np.arange(start, stop)
        d2[np.arange(stop - start), rows] = np.inf  # exclude self
        cand = min(n - 1, k + 8)
        part = np.argpartition(d2, cand - 1, axis=1)[:, :cand]
        part_d = np.take_along_axis(d2, part, axis=1)
        # stable order: by distance, then by node index
        order = np.lexsort((part, part_d), axis=1)
        sorted_idx = np.take_along_axis(part, order, axis=1)
        sorted_d = np.take_along_axis(part_d, order, axis=1)
        out[start:stop] = sorted_idx[:, :k]
        # ties at the k-th distance may straddle the partition cut; redo those
        # rows exactly so the lower-index tie-break always holds
        v_k = sorted_d[:, k - 1]
        n_le = np.count_nonzero(d2 <= v_k[:, None], axis=1)
        for r in np.nonzero(n_le > cand)[0]:
            full = np.lexsort((np.arange(n), d2[r]))
            out[start + r] = full[:k]
    return out


def build_knn(embeddings: EmbeddingSet, k: int) -> NeighborGraph:
    """Build the union-symmetrized exact kNN graph, all edges weight 1.0."""
    n = embeddings.n
    if n == 0:
        raise ValueError("empty embedding set")
    if k <= 0:
        raise ValueError("k must be positive")
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the node count n={n}")

    nn = _knn_indices(embeddings.vectors, k)
    src = np.repeat(np.arange(n, dtype=np.int64), k)
    dst = nn.reshape(-1)
    # canonical undirected pairs, deduplicated after union symmetrization
    lo = np.minimum(src, dst)
    hi = np.maximum(src, dst)
    pairs = np.unique(lo * np.int64(n) + hi)
    lo = pairs // n
    hi = pairs % n
    return _graph_from_pairs(n, lo, hi, np.ones(pairs.shape[0], dtype=np.float64))


def _graph_from_pairs(
    n: int, lo: np.ndarray, hi: np.ndarray, w: np.ndarray
) -> NeighborGraph:
    """CSR graph from unique undirected pairs (lo < hi)."""
    if np.any(lo == hi):
        raise ValueError("self-loop in edge list")
    src = np.concatenate([lo, hi])
    dst = np.concatenate([hi, lo])
    ww = np.concatenate([w, w])
    order = np.lexsort((dst, src))
    src, dst, ww = src[order], dst[order], ww[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    np.cumsum(indptr, out=indptr)
    return NeighborGraph(n=n, indptr=indptr, indices=dst, weights=ww)


def graph_from_edges(
    n: int, edges: list[tuple[int, int, float]] | np.ndarray
) -> NeighborGraph:
    """Graph from an undirected edge list; duplicate pairs are rejected."""
    arr = np.asarray(edges, dtype=np.float64).reshape(-1, 3)
    lo = np.minimum(arr[:, 0], arr[:, 1]).astype(np.int64)
    hi = np.maximum(arr[:, 0], arr[:, 1]).astype(np.int64)
    if np.any(lo < 0) or np.any(hi >= n):
        raise ValueError("edge endpoint out of range")
    key = lo * np.int64(n) + hi
    if np.unique(key).shape[0] != key.shape[0]:
        raise ValueError("duplicate edge in edge list")
    return _graph_from_pairs(n, lo, hi, arr[:, 2].astype(np.float64))


def save_edge_csv(graph: NeighborGraph, path: str | Path) -> None:
    """Edge-list CSV ``src,dst,weight``, each undirected edge once (src < dst)."""
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["src", "dst", "weight"])
        for i in range(graph.n):
            lo_ptr, hi_ptr = graph.indptr[i], graph.indptr[i + 1]
            for j, w in zip(graph.indices[lo_ptr:hi_ptr], graph.weights[lo_ptr:hi_ptr]):
                if i < j:
                    writer.writerow([i, int(j), repr(float(w))])


def load_edge_csv(path: str | Path) -> NeighborGraph:
    """Load a graph from edge-list CSV; node count is max index + 1."""
    edges: list[tuple[int, int, float]] = []
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["src", "dst", "weight"]:
            raise ValueError(f"{path}: malformed edge-list header {header}")
        for row in reader:
            edges.append((int(row[0]), int(row[1]), float(row[2])))
    if not edges:
        raise ValueError(f"{path}: empty edge list")
    n = int(max(max(s, d) for s, d, _ in edges)) + 1
    return graph_from_edges(n, edges)
