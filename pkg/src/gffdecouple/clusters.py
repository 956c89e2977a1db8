"""Union-find cluster labelling on boxes and on general site graphs.

Labels are canonical: every cluster is labelled by the smallest flat
(row-major) index among its sites, closed sites get -1.
"""
from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def _find(parent, a):
    root = a
    while parent[root] != root:
        root = parent[root]
    while parent[a] != root:
        nxt = parent[a]
        parent[a] = root
        a = nxt
    return root


@numba.njit(cache=True)
def _union(parent, a, b):
    ra = _find(parent, a)
    rb = _find(parent, b)
    if ra < rb:
        parent[rb] = ra
    elif rb < ra:
        parent[ra] = rb


@numba.njit(cache=True)
def _strides(shape):
    d = shape.shape[0]
    st = np.ones(d, dtype=np.int64)
    for j in range(d - 2, -1, -1):
        st[j] = st[j + 1] * shape[j + 1]
    return st


@numba.njit(cache=True)
def _label_grid(mask, shape):
    n = mask.shape[0]
    d = shape.shape[0]
    st = _strides(shape)
    parent = np.arange(n)
    for i in range(n):
        if not mask[i]:
            continue
        for j in range(d):
            c = (i // st[j]) % shape[j]
            if c > 0 and mask[i - st[j]]:
                _union(parent, i, i - st[j])
    labels = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        if mask[i]:
            labels[i] = _find(parent, i)
    return labels


def label_grid(open_mask: np.ndarray) -> np.ndarray:
    """Nearest-neighbour clusters of the open sites of a box, same shape as the mask."""
    mask = np.ascontiguousarray(open_mask, dtype=np.bool_)
    shape = np.asarray(mask.shape, dtype=np.int64)
    return _label_grid(mask.ravel(), shape).reshape(mask.shape)


@numba.njit(cache=True)
def _label_edges(mask, edges):
    n = mask.shape[0]
    parent = np.arange(n)
    for e in range(edges.shape[0]):
        a, b = edges[e, 0], edges[e, 1]
        if mask[a] and mask[b]:
            _union(parent, a, b)
    labels = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        if mask[i]:
            labels[i] = _find(parent, i)
    return labels


def label_graph(open_mask: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Clusters of the open vertices of a graph given by an (E, 2) edge list."""
    return _label_edges(np.ascontiguousarray(open_mask, dtype=np.bool_),
                        np.ascontiguousarray(edges, dtype=np.int64).reshape(-1, 2))


def lattice_edges(coords: np.ndarray) -> np.ndarray:
    """Nearest-neighbour edges (i < j) between the rows of an integer coordinate array."""
    coords = np.asarray(coords, dtype=np.int64)
    index = {tuple(p): i for i, p in enumerate(coords.tolist())}
    out = []
    for i, p in enumerate(coords.tolist()):
        for j in range(len(p)):
            q = list(p)
            q[j] += 1
            k = index.get(tuple(q))
            if k is not None:
                out.append((min(i, k), max(i, k)))
    return np.asarray(out, dtype=np.int64).reshape(-1, 2)


@numba.njit(cache=True)
def _bottleneck(values, edges_start, edges_nbr, src, dst):
    # Kruskal on sites in decreasing value; returns the largest h such that a
    # path from src to dst exists with all values >= h (-inf if none).
    n = values.shape[0]
    parent = np.arange(n + 2)
    active = np.zeros(n, dtype=np.bool_)
    S, D = n, n + 1
    order = np.argsort(-values, kind="mergesort")
    for t in range(n):
        i = order[t]
        active[i] = True
        if src[i]:
            _union(parent, i, S)
        if dst[i]:
            _union(parent, i, D)
        for e in range(edges_start[i], edges_start[i + 1]):
            k = edges_nbr[e]
            if active[k]:
                _union(parent, i, k)
        if _find(parent, S) == _find(parent, D):
            return values[i]
    return -np.inf


@numba.njit(cache=True)
def _grid_adjacency(shape):
    d = shape.shape[0]
    st = _strides(shape)
    n = 1
    for j in range(d):
        n *= shape[j]
    start = np.zeros(n + 1, dtype=np.int64)
    for i in range(n):
        cnt = 0
        for j in range(d):
            c = (i // st[j]) % shape[j]
            if c > 0:
                cnt += 1
            if c < shape[j] - 1:
                cnt += 1
        start[i + 1] = start[i] + cnt
    nbr = np.empty(start[n], dtype=np.int64)
    for i in range(n):
        pos = start[i]
        for j in range(d):
            c = (i // st[j]) % shape[j]
            if c > 0:
                nbr[pos] = i - st[j]
                pos += 1
            if c < shape[j] - 1:
                nbr[pos] = i + st[j]
                pos += 1
    return start, nbr


class GridBottleneck:
    """Crossing thresholds between two site sets of a box.

    ``threshold(field)`` returns the largest level h at which the open set
    {field >= h} joins ``src`` to ``dst``; the crossing event at level h is
    then exactly ``h <= threshold``.
    """

    def __init__(self, shape, src: np.ndarray, dst: np.ndarray):
        self.shape = tuple(shape)
        self._start, self._nbr = _grid_adjacency(np.asarray(shape, dtype=np.int64))
        self.src = np.ascontiguousarray(src, dtype=np.bool_).ravel()
        self.dst = np.ascontiguousarray(dst, dtype=np.bool_).ravel()

    def threshold(self, field: np.ndarray) -> float:
        v = np.ascontiguousarray(field, dtype=np.float64).ravel()
        return float(_bottleneck(v, self._start, self._nbr, self.src, self.dst))


class GraphBottleneck(GridBottleneck):
    """As :class:`GridBottleneck` for a general graph on n vertices."""

    def __init__(self, n: int, edges: np.ndarray, src, dst):
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        both = np.concatenate([edges, edges[:, ::-1]])
        both = both[np.lexsort((both[:, 1], both[:, 0]))]
        self._start = np.searchsorted(both[:, 0], np.arange(n + 1)).astype(np.int64)
        self._nbr = np.ascontiguousarray(both[:, 1])
        self.shape = (n,)
        self.src = np.ascontiguousarray(src, dtype=np.bool_)
        self.dst = np.ascontiguousarray(dst, dtype=np.bool_)
