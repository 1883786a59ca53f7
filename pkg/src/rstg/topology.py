"""Multi-scale node grids over a feature map and their connectivity.

Each scale ``g`` tiles the unit square with a g x g grid of regions, one node
per cell.  Sparse connectivity joins same-scale grid neighbours (8- or
4-connected) and any cross-scale pair whose regions overlap with positive
area; full connectivity joins every ordered pair.  Positional maps are
Gaussian-smoothed 6x6 occupancy grids of each node's region.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

POS_MAP_SIDE = 6
POS_MAP_SIZE = POS_MAP_SIDE * POS_MAP_SIDE

_GAUSS_SIGMA = 1.0


@dataclass(frozen=True)
class NodeRegion:
    """One grid cell at one scale; region in normalized [0,1]^2, half-open."""

    scale_index: int
    grid_row: int
    grid_col: int
    region: tuple  # (row0, col0, row1, col1)

    @property
    def area(self) -> float:
        r0, c0, r1, c1 = self.region
        return (r1 - r0) * (c1 - c0)

    def center(self) -> tuple:
        r0, c0, r1, c1 = self.region
        return ((r0 + r1) / 2.0, (c0 + c1) / 2.0)


def _gauss_kernel(sigma: float = _GAUSS_SIGMA) -> np.ndarray:
    ax = np.arange(-1, 2, dtype=np.float64)
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def positional_map(node: NodeRegion) -> np.ndarray:
    """6x6 occupancy of the node's region, smoothed with a normalized Gaussian.

    A cell is occupied when its center lies inside the half-open region; if a
    very fine grid leaves every center outside, the cell containing the
    region's own center is marked instead.  Smoothing renormalizes the kernel
    over in-bounds support, so a constant field is a fixed point.
    """
    r0, c0, r1, c1 = node.region
    occ = np.zeros((POS_MAP_SIDE, POS_MAP_SIDE), dtype=np.float64)
    centers = (np.arange(POS_MAP_SIDE) + 0.5) / POS_MAP_SIDE
    rows = (centers >= r0) & (centers < r1)
    cols = (centers >= c0) & (centers < c1)
    occ[np.ix_(rows, cols)] = 1.0
    if occ.sum() == 0.0:
        cr, cc = node.center()
        occ[min(int(cr * POS_MAP_SIDE), POS_MAP_SIDE - 1),
            min(int(cc * POS_MAP_SIDE), POS_MAP_SIDE - 1)] = 1.0

    kernel = _gauss_kernel()
    padded = np.zeros((POS_MAP_SIDE + 2, POS_MAP_SIDE + 2))
    padded[1:-1, 1:-1] = occ
    support = np.zeros_like(padded)
    support[1:-1, 1:-1] = 1.0
    out = np.zeros_like(occ)
    norm = np.zeros_like(occ)
    for di in range(3):
        for dj in range(3):
            out += kernel[di, dj] * padded[di:di + POS_MAP_SIDE, dj:dj + POS_MAP_SIDE]
            norm += kernel[di, dj] * support[di:di + POS_MAP_SIDE, dj:dj + POS_MAP_SIDE]
    return out / norm


def _regions_overlap(a: NodeRegion, b: NodeRegion) -> bool:
    ar0, ac0, ar1, ac1 = a.region
    br0, bc0, br1, bc1 = b.region
    dr = min(ar1, br1) - max(ar0, br0)
    dc = min(ac1, bc1) - max(ac0, bc0)
    return dr > 0 and dc > 0


@dataclass
class GraphTopology:
    """Immutable node/edge structure plus cached pooling operators."""

    nodes: list
    edges: list          # directed (src, dst) pairs, sorted by (dst, src)
    positional_maps: np.ndarray  # (N, 6, 6) float64
    mode: str            # "sparse" | "full"
    scales: tuple
    connectivity: int
    _pool_cache: dict = field(default_factory=dict, repr=False)
    _edge_arrays: Optional[tuple] = field(default=None, repr=False)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def edge_count(self) -> int:
        """Undirected edge count E (directed messages per space stage = 2E)."""
        return len(self.edges) // 2

    def edge_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(src, dst) int arrays in canonical (dst, src) order."""
        if self._edge_arrays is None:
            if self.edges:
                src = np.array([e[0] for e in self.edges], dtype=np.int64)
                dst = np.array([e[1] for e in self.edges], dtype=np.int64)
            else:
                src = np.zeros(0, dtype=np.int64)
                dst = np.zeros(0, dtype=np.int64)
            self._edge_arrays = (src, dst)
        return self._edge_arrays

    def positional_features(self) -> np.ndarray:
        """(N, 36) flattened positional maps."""
        return self.positional_maps.reshape(self.num_nodes, POS_MAP_SIZE)

    def scale_rows(self, scale_index: int) -> np.ndarray:
        return np.array([i for i, n in enumerate(self.nodes)
                         if n.scale_index == scale_index], dtype=np.int64)

    # -- pooling operators ----------------------------------------------------

    def _pool_matrices(self, H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
        """(P, U): P (N, H*W) averages pixels into nodes, U (H*W, N) replicates
        node values back to pixels (summed over scales on application)."""
        key = (H, W)
        if key in self._pool_cache:
            return self._pool_cache[key]
        N = self.num_nodes
        P = np.zeros((N, H * W), dtype=np.float64)
        U = np.zeros((H * W, N), dtype=np.float64)
        row_centers = (np.arange(H) + 0.5) / H
        col_centers = (np.arange(W) + 0.5) / W
        for i, node in enumerate(self.nodes):
            r0, c0, r1, c1 = node.region
            rows = np.nonzero((row_centers >= r0) & (row_centers < r1))[0]
            cols = np.nonzero((col_centers >= c0) & (col_centers < c1))[0]
            if rows.size == 0 or cols.size == 0:
                raise ShapeError(f"feature map {H}x{W} smaller than grid at scale "
                                 f"{self.scales[node.scale_index]}")
            pix = (rows[:, None] * W + cols[None, :]).reshape(-1)
            P[i, pix] = 1.0 / pix.size
            U[pix, i] = 1.0
        self._pool_cache[key] = (P, U)
        return P, U

    def relabeled(self, perm: Sequence[int]) -> "GraphTopology":
        """Topology with node i moved to position perm[i]; edges re-sorted."""
        perm = list(perm)
        N = self.num_nodes
        if sorted(perm) != list(range(N)):
            raise ValueError("perm must be a permutation of node indices")
        nodes = [None] * N
        pos = np.zeros_like(self.positional_maps)
        for old, new in enumerate(perm):
            nodes[new] = self.nodes[old]
            pos[new] = self.positional_maps[old]
        edges = sorted((perm[a], perm[b]) for a, b in self.edges)
        edges = sorted(edges, key=lambda e: (e[1], e[0]))
        return GraphTopology(nodes=nodes, edges=edges, positional_maps=pos,
                             mode=self.mode, scales=self.scales,
                             connectivity=self.connectivity)

    def to_json(self) -> str:
        undirected = sorted({(min(a, b), max(a, b)) for a, b in self.edges})
        payload = {
            "scales": list(self.scales),
            "mode": self.mode,
            "connectivity": self.connectivity,
            "nodes": [
                {"scale": n.scale_index, "row": n.grid_row, "col": n.grid_col,
                 "region": list(n.region)}
                for n in self.nodes
            ],
            "undirected_edges": [list(e) for e in undirected],
        }
        return json.dumps(payload, indent=2)


def build_topology(scales: Sequence[int], mode: str = "sparse",
                   connectivity: int = 8) -> GraphTopology:
    """Create the multi-scale node grid and its adjacency.

    scales: grid sides, e.g. [1, 2, 3] for 1x1 + 2x2 + 3x3 (14 nodes).
    mode: "sparse" (spatial neighbours + overlapping cross-scale regions) or
    "full" (complete digraph).  connectivity: 8 (diagonals) or 4.
    """
    scales = tuple(int(s) for s in scales)
    if not scales:
        raise ValueError("at least one scale is required")
    if any(s < 1 for s in scales):
        raise ValueError(f"grid sizes must be >= 1, got {scales}")
    if mode not in ("sparse", "full"):
        raise ValueError(f"unknown adjacency mode '{mode}'")
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")

    nodes: list[NodeRegion] = []
    for si, g in enumerate(scales):
        for r in range(g):
            for c in range(g):
                region = (r / g, c / g, (r + 1) / g, (c + 1) / g)
                nodes.append(NodeRegion(si, r, c, region))

    N = len(nodes)
    pairs: set[tuple[int, int]] = set()
    if mode == "full":
        pairs = {(a, b) for a in range(N) for b in range(N) if a != b}
    else:
        for a in range(N):
            for b in range(a + 1, N):
                na, nb = nodes[a], nodes[b]
                if na.scale_index == nb.scale_index:
                    dr = abs(na.grid_row - nb.grid_row)
                    dc = abs(na.grid_col - nb.grid_col)
                    linked = (max(dr, dc) == 1 if connectivity == 8
                              else dr + dc == 1)
                else:
                    linked = _regions_overlap(na, nb)
                if linked:
                    pairs.add((a, b))
                    pairs.add((b, a))

    edges = sorted(pairs, key=lambda e: (e[1], e[0]))
    pos = np.stack([positional_map(n) for n in nodes]) if nodes else \
        np.zeros((0, POS_MAP_SIDE, POS_MAP_SIDE))
    return GraphTopology(nodes=nodes, edges=edges, positional_maps=pos,
                         mode=mode, scales=scales, connectivity=connectivity)


# -- feature volume <-> node vectors -------------------------------------------


def region_pool(x: Tensor, topo: GraphTopology) -> Tensor:
    """Average (B, H, W, C) features over each node's region -> (B, N, C)."""
    if x.ndim != 4:
        raise ShapeError(f"region_pool expects (B, H, W, C), got {x.shape}")
    B, H, W, C = x.shape
    P, _ = topo._pool_matrices(H, W)
    Pd = P.astype(x.data.dtype)
    data = np.einsum("nh,bhc->bnc", Pd, x.data.reshape(B, H * W, C))

    def backward_fn(g):
        gx = np.einsum("nh,bnc->bhc", Pd, g)
        return (gx.reshape(B, H, W, C),)

    return Tensor.from_op(data, (x,), backward_fn, "region_pool")


def unpool_nodes(nodes: Tensor, topo: GraphTopology, H: int, W: int) -> Tensor:
    """Replicate node values over their regions and sum across scales.

    nodes: (B, N, C) -> (B, H, W, C); nearest-neighbour upsampling per scale.
    """
    if nodes.ndim != 3 or nodes.shape[1] != topo.num_nodes:
        raise ShapeError(f"unpool expects (B, {topo.num_nodes}, C), got {nodes.shape}")
    B, N, C = nodes.shape
    _, U = topo._pool_matrices(H, W)
    Ud = U.astype(nodes.data.dtype)
    data = np.einsum("hn,bnc->bhc", Ud, nodes.data).reshape(B, H, W, C)

    def backward_fn(g):
        gn = np.einsum("hn,bhc->bnc", Ud, g.reshape(B, H * W, C))
        return (gn,)

    return Tensor.from_op(data, (nodes,), backward_fn, "unpool_nodes")


def pool_to_nodes(frame: Tensor, topo: GraphTopology, projection) -> Tensor:
    """Region-average a frame and project channels to node features.

    frame: (B, H, W, C); projection: Linear C -> D; returns (B*N, D) rows
    ordered batch-major (sample 0 nodes, then sample 1, ...).
    """
    pooled = region_pool(frame, topo)
    B, N, C = pooled.shape
    return projection(pooled.reshape(B * N, C))


def unpool_from_nodes(node_rows: Tensor, topo: GraphTopology, H: int, W: int,
                      batch: int) -> Tensor:
    """Inverse arrangement of pool_to_nodes (without the projection)."""
    N = topo.num_nodes
    C = node_rows.shape[1]
    return unpool_nodes(node_rows.reshape(batch, N, C), topo, H, W)
