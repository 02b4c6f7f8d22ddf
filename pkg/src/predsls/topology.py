"""Communication graphs, hop distances and locality masks.

Nodes are 0-based internally. Every external format (edge-list files, CSV
exports, CLI flags) uses 1-based node labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import shortest_path

__all__ = [
    "UNREACHABLE",
    "Topology",
    "LocalityMask",
    "all_pairs_distances",
    "neighborhood",
    "expansion_bound",
    "locality_mask",
    "block_mask",
    "truncate",
    "boundary",
    "chain",
    "cycle",
    "tree",
    "mesh",
    "star",
    "from_spec",
    "read_edge_list",
]

# Sentinel hop count for disconnected pairs. Large enough that `dist <= kappa`
# is False for every usable kappa.
UNREACHABLE = np.iinfo(np.int64).max


def _normalize_edges(node_count: int, edges: Iterable[tuple[int, int]]) -> frozenset:
    out = set()
    for a, b in edges:
        a, b = int(a), int(b)
        if not (0 <= a < node_count and 0 <= b < node_count):
            raise ValueError(f"edge ({a}, {b}) out of range for {node_count} nodes")
        if a == b:
            continue
        out.add((min(a, b), max(a, b)))
    return frozenset(out)


@dataclass(frozen=True)
class Topology:
    """Undirected, unweighted graph with precomputed hop distances."""

    node_count: int
    edges: frozenset
    dist: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def from_edges(cls, node_count: int, edges: Iterable[tuple[int, int]]) -> "Topology":
        if node_count < 1:
            raise ValueError("a topology needs at least one node")
        edge_set = _normalize_edges(node_count, edges)
        dist = _bfs_distances(node_count, edge_set)
        dist.setflags(write=False)
        return cls(node_count=node_count, edges=edge_set, dist=dist)

    @property
    def diameter(self) -> int:
        finite = self.dist[self.dist != UNREACHABLE]
        return int(finite.max())

    @property
    def connected(self) -> bool:
        return not np.any(self.dist == UNREACHABLE)

    def neighbors(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.dist[i] == 1)

    def clamp_kappa(self, kappa: int) -> int:
        return int(min(max(kappa, 0), self.diameter))


def _bfs_distances(node_count: int, edges: frozenset) -> np.ndarray:
    if not edges:
        dist = np.full((node_count, node_count), UNREACHABLE, dtype=np.int64)
        np.fill_diagonal(dist, 0)
        return dist
    rows, cols = zip(*edges)
    adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(node_count, node_count))
    hops = shortest_path(adj, method="D", directed=False, unweighted=True)
    dist = np.full(hops.shape, UNREACHABLE, dtype=np.int64)
    finite = np.isfinite(hops)
    dist[finite] = hops[finite].astype(np.int64)
    return dist


def all_pairs_distances(topology: Topology) -> np.ndarray:
    """Return the N x N matrix of shortest hop counts (UNREACHABLE if disconnected)."""
    return topology.dist.copy()


def neighborhood(topology: Topology, i: int, kappa: int) -> np.ndarray:
    """Sorted node indices within `kappa` hops of node `i` (including `i`)."""
    if not 0 <= i < topology.node_count:
        raise IndexError(f"node {i} out of range for {topology.node_count} nodes")
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    return np.flatnonzero(topology.dist[i] <= kappa)


def expansion_bound(topology: Topology) -> np.ndarray:
    """Tabulate g(d) = max_i |{j : dist(i, j) = d}| for d = 0..diameter.

    Disconnected pairs are ignored, so the table is also defined for graphs
    with several components.
    """
    diam = topology.diameter
    g = np.zeros(diam + 1, dtype=np.int64)
    for d in range(diam + 1):
        g[d] = int((topology.dist == d).sum(axis=1).max())
    return g


@dataclass(frozen=True)
class LocalityMask:
    """Node-level sparsity patterns C^kappa (states) and C^{kappa+1} (actions)."""

    kappa: int
    state_mask: np.ndarray = field(repr=False, compare=False)
    action_mask: np.ndarray = field(repr=False, compare=False)


def locality_mask(topology: Topology, kappa: int) -> LocalityMask:
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    state = topology.dist <= kappa
    action = topology.dist <= kappa + 1
    state.setflags(write=False)
    action.setflags(write=False)
    return LocalityMask(kappa=int(kappa), state_mask=state, action_mask=action)


def block_mask(node_mask: np.ndarray, row_dims: Sequence[int], col_dims: Sequence[int]) -> np.ndarray:
    """Expand a node-level boolean mask to coordinate level."""
    return np.repeat(np.repeat(node_mask, row_dims, axis=0), col_dims, axis=1)


def _row_select(M: np.ndarray, topology: Topology, row_dims, nodes: np.ndarray) -> np.ndarray:
    M = np.asarray(M)
    row_dims = np.ones(topology.node_count, dtype=int) if row_dims is None else np.asarray(row_dims)
    if len(row_dims) != topology.node_count or int(row_dims.sum()) != M.shape[0]:
        raise ValueError(
            f"row partition {list(row_dims)} does not match a {M.shape[0]}-row matrix "
            f"on {topology.node_count} nodes"
        )
    keep = np.zeros(topology.node_count, dtype=bool)
    keep[nodes] = True
    out = np.zeros_like(M)
    rows = np.repeat(keep, row_dims)
    out[rows] = M[rows]
    return out


def truncate(M, topology: Topology, i: int, kappa: int, row_dims=None) -> np.ndarray:
    """(i, kappa)-truncation: keep row blocks j within kappa hops of i, zero the rest."""
    return _row_select(M, topology, row_dims, neighborhood(topology, i, kappa))


def boundary(M, topology: Topology, i: int, kappa: int, row_dims=None) -> np.ndarray:
    """(i, kappa)-boundary: keep only row blocks at exactly kappa + 1 hops from i."""
    shell = np.flatnonzero(topology.dist[i] == kappa + 1)
    return _row_select(M, topology, row_dims, shell)


# -- presets -----------------------------------------------------------------


def chain(n: int) -> Topology:
    return Topology.from_edges(n, [(k, k + 1) for k in range(n - 1)])


def cycle(n: int) -> Topology:
    if n < 3:
        return chain(n)
    return Topology.from_edges(n, [(k, (k + 1) % n) for k in range(n)])


def tree(branching: int, depth: int) -> Topology:
    """Complete `branching`-ary tree with `depth` levels below the root."""
    if branching < 1 or depth < 0:
        raise ValueError("tree needs branching >= 1 and depth >= 0")
    edges = []
    level = [0]
    count = 1
    for _ in range(depth):
        nxt = []
        for parent in level:
            for _ in range(branching):
                edges.append((parent, count))
                nxt.append(count)
                count += 1
        level = nxt
    return Topology.from_edges(count, edges)


def mesh(rows: int, cols: int) -> Topology:
    idx = lambda r, c: r * cols + c  # noqa: E731
    edges = []
    for r in range(rows):
        for c in range(cols):
            if c + 1 < cols:
                edges.append((idx(r, c), idx(r, c + 1)))
            if r + 1 < rows:
                edges.append((idx(r, c), idx(r + 1, c)))
    return Topology.from_edges(rows * cols, edges)


def star(leaves: int) -> Topology:
    return Topology.from_edges(leaves + 1, [(0, k) for k in range(1, leaves + 1)])


def read_edge_list(path) -> Topology:
    """Read a 1-based `i j` edge list. Lines starting with '#' are comments.

    A line holding a single integer declares the node count (useful for
    isolated trailing nodes); otherwise the count is the largest label seen.
    """
    edges = []
    declared = 0
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) == 1:
            declared = max(declared, int(parts[0]))
            continue
        if len(parts) != 2:
            raise ValueError(f"bad edge line: {raw!r}")
        a, b = int(parts[0]), int(parts[1])
        if a < 1 or b < 1:
            raise ValueError(f"node labels are 1-based: {raw!r}")
        edges.append((a - 1, b - 1))
    n = max([declared] + [max(a, b) + 1 for a, b in edges])
    return Topology.from_edges(n, edges)


def from_spec(spec: str) -> Topology:
    """Build a preset from strings like ``chain:16``, ``tree:2,3``, ``mesh:4,4``.

    Anything that is not a known preset is treated as an edge-list path.
    """
    name, _, args = spec.partition(":")
    name = name.strip().lower()
    try:
        nums = [int(a) for a in args.split(",")] if args else []
    except ValueError:
        nums = None
    builders = {"chain": (chain, 1), "cycle": (cycle, 1), "tree": (tree, 2), "mesh": (mesh, 2), "star": (star, 1)}
    if name in builders and nums is not None:
        fn, arity = builders[name]
        if len(nums) != arity:
            raise ValueError(f"preset {name!r} expects {arity} integer argument(s), got {args!r}")
        return fn(*nums)
    return read_edge_list(spec)
