"""Cross-stage multi-graph consensus.

Earlier stages' outputs are fused with SE, a k-NN graph is built in feature
space for each of four feature maps, the four graphs are concatenated rank
by rank, aligned by a shared per-edge MLP and aggregated with annular
convolution over affinity-sorted neighbor rings.

Edge tensors are kept as a list with one N x C matrix per neighbor rank.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import ParameterStore, Tensor, concat, record_branch, relu, take_rows
from .blocks import Linear, ResidualMLP, SEFuse

__all__ = [
    "SparseGraph",
    "FusedGraph",
    "StageFeatureBundle",
    "knn_indices",
    "build_knn_graph",
    "concat_graphs",
    "CrossStageFuse",
    "AlignFeatures",
    "AnnularConv",
    "CSMGC",
]


@dataclass
class SparseGraph:
    indices: np.ndarray  # N x k neighbor indices, most affine first
    affinity: np.ndarray  # N x k, negative squared distance (non-increasing per row)
    edges: list[Tensor]  # k tensors of shape N x 2d: [z_i, z_j - z_i]

    @property
    def n(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]


@dataclass
class FusedGraph:
    edges: list[Tensor]  # k tensors of shape N x C

    @property
    def n(self) -> int:
        return self.edges[0].shape[0]

    @property
    def k(self) -> int:
        return len(self.edges)

    @property
    def width(self) -> int:
        return self.edges[0].shape[1]


@dataclass
class StageFeatureBundle:
    z1: Tensor  # after the first attention block
    z2: Tensor  # after PointCN / order-aware / PointCN and the second attention block
    z3: Tensor  # final residual MLP output of the stage


def knn_indices(z: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """k nearest rows of ``z`` for every row (self excluded), nearest first.

    Ties in distance go to the lower index. Returns (indices, affinity) where
    affinity is the negative squared Euclidean distance.
    """
    z = np.asarray(z)
    n = z.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < N, got k={k}, N={n}")
    sq = np.einsum("ij,ij->i", z, z)
    dist = sq[:, None] + sq[None, :] - 2.0 * (z @ z.T)
    np.maximum(dist, 0.0, out=dist)
    np.fill_diagonal(dist, np.inf)
    idx = None
    if k < n - 1:
        part = np.argpartition(dist, k, axis=1)[:, : k + 1]
        cand_d = np.take_along_axis(dist, part, axis=1)
        order = np.lexsort((part, cand_d), axis=1)
        sorted_d = np.take_along_axis(cand_d, order, axis=1)
        # a tie at the cut could hide a lower-index neighbor outside the partition
        if not np.any(sorted_d[:, k - 1] == sorted_d[:, k]):
            idx = np.take_along_axis(part, order[:, :k], axis=1)
    if idx is None:
        idx = np.argsort(dist, axis=1, kind="stable")[:, :k]
    aff = -np.take_along_axis(dist, idx, axis=1)
    record_branch("knn", idx)
    return idx, aff


def build_knn_graph(z: Tensor, k: int) -> SparseGraph:
    idx, aff = knn_indices(z.value, k)
    edges = [concat([z, take_rows(z, idx[:, r]) - z], axis=1) for r in range(k)]
    return SparseGraph(idx, aff, edges)


def concat_graphs(graphs: Sequence[SparseGraph | FusedGraph]) -> FusedGraph:
    """Rank-aligned channel concatenation of edge features."""
    if not graphs:
        raise ValueError("no graphs to concatenate")
    n, k = graphs[0].n, graphs[0].k
    for g in graphs[1:]:
        if g.n != n or g.k != k:
            raise ValueError(f"graph shape mismatch: ({g.n}, {g.k}) vs ({n}, {k})")
    return FusedGraph([concat([g.edges[r] for g in graphs], axis=1) for r in range(k)])


class CrossStageFuse:
    """SE fusion over the stage-final features of stages 1..M-2."""

    def __init__(self, store: ParameterStore, name: str, d: int, n_history: int, ratio: int = 4):
        self.se = SEFuse(store, name, d, n_history, ratio)

    def __call__(self, z3_history: Sequence[Tensor]) -> Tensor:
        if len(z3_history) == 0:
            raise ValueError("cross-stage fusion needs at least one earlier stage (M >= 3)")
        return self.se(list(z3_history))


class AlignFeatures:
    """Shared per-edge linear map + ReLU reducing the fused edge width to d."""

    def __init__(self, store: ParameterStore, name: str, width: int, d: int):
        self.lin = Linear(store, name, width, d)

    def __call__(self, g: FusedGraph) -> FusedGraph:
        return FusedGraph([relu(self.lin(e)) for e in g.edges])


class AnnularConv:
    """Aggregate affinity-sorted neighbors in rings of ``p`` with a 1 x p kernel.

    Ring n computes ``sum_j e_{np+j} @ W_{n,j} + b_n``; the k/p ring outputs
    are concatenated and linearly combined to d channels, then passed through
    a residual per-row MLP.
    """

    def __init__(self, store: ParameterStore, name: str, d: int, k: int, p: int):
        if p < 1 or k % p != 0:
            raise ValueError(f"ring size p={p} must divide k={k}")
        self.k, self.p, self.rings = k, p, k // p
        self.kernels = [[store.uniform(f"{name}.ring{n}.w{j}", (d, d), fan_in=d * p)
                         for j in range(p)] for n in range(self.rings)]
        self.biases = [store.zeros(f"{name}.ring{n}.b", (1, d)) for n in range(self.rings)]
        self.combine = Linear(store, f"{name}.combine", d * self.rings, d)
        self.mlp = ResidualMLP(store, f"{name}.mlp", d)

    def ring_outputs(self, g: FusedGraph) -> list[Tensor]:
        if g.k != self.k:
            raise ValueError(f"graph has k={g.k}, kernel built for k={self.k}")
        outs = []
        for n in range(self.rings):
            acc = self.biases[n]
            for j in range(self.p):
                acc = acc + g.edges[n * self.p + j] @ self.kernels[n][j]
            outs.append(acc)
        return outs

    def __call__(self, g: FusedGraph) -> Tensor:
        rings = self.ring_outputs(g)
        h = self.combine(rings[0] if len(rings) == 1 else concat(rings, axis=1))
        return self.mlp(h)


class CSMGC:
    """Whole cross-stage consensus module: returns an N x d feature map."""

    def __init__(self, store: ParameterStore, name: str, d: int, k: int, p: int,
                 n_history: int, se_ratio: int = 4):
        self.k = k
        self.fuse = CrossStageFuse(store, f"{name}.fuse", d, n_history, se_ratio)
        self.align = AlignFeatures(store, f"{name}.align", 8 * d, d)
        self.conv = AnnularConv(store, f"{name}.conv", d, k, p)

    def graphs(self, z3_history: Sequence[Tensor], prev: StageFeatureBundle) -> list[SparseGraph]:
        z = self.fuse(z3_history)
        return [build_knn_graph(m, self.k) for m in (z, prev.z1, prev.z2, prev.z3)]

    def __call__(self, z3_history: Sequence[Tensor], prev: StageFeatureBundle) -> Tensor:
        fused = concat_graphs(self.graphs(z3_history, prev))
        return self.conv(self.align(fused))
