"""Building blocks shared by every stage: linear maps, normalizations,
the PointCN residual block, the order-aware pooling block and SE fusion.

All blocks act row-wise or through permutation-invariant statistics over
the N rows, so they commute with any reordering of the correspondences.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import (ParameterStore, Tensor, concat, context_norm, layer_norm, relu,
                       sigmoid, softmax_rows)

__all__ = ["Linear", "Affine", "BatchNorm", "PointCN", "OrderAware", "SEFuse", "ResidualMLP"]


class Linear:
    """Per-row affine map ``x @ W + b`` (a kernel-1 convolution)."""

    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int,
                 bias: bool = True, scale: float = 1.0):
        self.weight = store.uniform(f"{name}.weight", (d_in, d_out), fan_in=d_in, scale=scale)
        self.bias = store.zeros(f"{name}.bias", (1, d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Affine:
    """Learned per-channel scale and shift."""

    def __init__(self, store: ParameterStore, name: str, d: int):
        self.gamma = store.ones(f"{name}.gamma", (1, d))
        self.beta = store.zeros(f"{name}.beta", (1, d))

    def __call__(self, x: Tensor) -> Tensor:
        return x * self.gamma + self.beta


class BatchNorm:
    """Batch-style normalization for one correspondence set.

    Statistics are taken over the N rows of the set being processed (there is
    no cross-set batch and no running average), followed by a learned affine.
    A single-row input has no usable statistics, so only the affine applies.
    """

    def __init__(self, store: ParameterStore, name: str, d: int):
        self.affine = Affine(store, name, d)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[0] < 2:
            return self.affine(x)
        return self.affine(context_norm(x))


class ResidualMLP:
    """``x + W2 relu(W1 x)``; the second layer starts small so the map is near identity."""

    def __init__(self, store: ParameterStore, name: str, d: int, out_scale: float = 0.1):
        self.l1 = Linear(store, f"{name}.l1", d, d)
        self.l2 = Linear(store, f"{name}.l2", d, d, scale=out_scale)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.l2(relu(self.l1(x)))


class PointCN:
    """Residual block: two rounds of context norm, ReLU, batch norm, linear map."""

    def __init__(self, store: ParameterStore, name: str, d: int, out_scale: float = 0.1):
        self.layers = []
        for i in range(2):
            scale = out_scale if i == 1 else 1.0
            self.layers.append((BatchNorm(store, f"{name}.bn{i}", d),
                                Linear(store, f"{name}.lin{i}", d, d, scale=scale)))

    def __call__(self, f: Tensor) -> Tensor:
        h = f
        for bn, lin in self.layers:
            h = lin(bn(relu(context_norm(h))))
        return f + h


class OrderAware:
    """Soft cluster pooling to ``m`` clusters, mixing in cluster space, unpooling.

    Each row gets assignment logits over the clusters (softmax per row); a
    cluster's pooled feature is the assignment-weighted mean of the rows.
    Two residual layers then mix across clusters and channels, and a second
    per-row assignment maps the clusters back onto the N rows.
    """

    def __init__(self, store: ParameterStore, name: str, d: int, m: int, out_scale: float = 0.1):
        if m < 1:
            raise ValueError("cluster count must be >= 1")
        self.m = m
        self.pool_bn = BatchNorm(store, f"{name}.pool_bn", d)
        self.pool = Linear(store, f"{name}.pool", d, m)
        self.unpool_bn = BatchNorm(store, f"{name}.unpool_bn", d)
        self.unpool = Linear(store, f"{name}.unpool", d, m)
        self.mix = []
        for i in range(2):
            self.mix.append((
                Affine(store, f"{name}.mix{i}.norm", d),
                Linear(store, f"{name}.mix{i}.channel", d, d),
                store.uniform(f"{name}.mix{i}.cluster", (m, m), fan_in=m, scale=0.5),
            ))
        self.out = Linear(store, f"{name}.out", d, d, scale=out_scale)

    def assignments(self, f: Tensor) -> Tensor:
        return softmax_rows(self.pool(relu(self.pool_bn(context_norm(f)))))

    def pool_features(self, f: Tensor) -> tuple[Tensor, Tensor]:
        """Return (pooled m x d, assignment N x m)."""
        s = self.assignments(f)
        mass = s.sum(axis=0, keepdims=True)  # 1 x m
        pooled = (s.T @ f) / mass.T
        return pooled, s

    def __call__(self, f: Tensor) -> Tensor:
        pooled, _ = self.pool_features(f)
        for norm, channel, cluster in self.mix:
            pooled = pooled + cluster @ channel(relu(norm(layer_norm(pooled))))
        up = softmax_rows(self.unpool(relu(self.unpool_bn(context_norm(f)))))
        return f + self.out(up @ pooled)


class SEFuse:
    """Squeeze-excitation fusion of L feature maps into one N x d map.

    Channel-concatenate to N x dL, squeeze by the column mean, excite through
    a bottleneck of width dL/r with sigmoid gates, rescale, then compress back
    to d channels per row.
    """

    def __init__(self, store: ParameterStore, name: str, d: int, n_inputs: int, ratio: int = 4):
        if n_inputs < 1:
            raise ValueError("SEFuse needs at least one input")
        width = d * n_inputs
        hidden = max(1, width // ratio)
        self.n_inputs = n_inputs
        self.squeeze1 = Linear(store, f"{name}.fc1", width, hidden)
        self.squeeze2 = Linear(store, f"{name}.fc2", hidden, width)
        self.compress = Linear(store, f"{name}.compress", width, d)

    def squeeze(self, z_list: Sequence[Tensor]) -> Tensor:
        return concat(list(z_list), axis=1).mean(axis=0, keepdims=True)

    def gates(self, z_list: Sequence[Tensor]) -> Tensor:
        return sigmoid(self.squeeze2(relu(self.squeeze1(self.squeeze(z_list)))))

    def __call__(self, z_list: Sequence[Tensor]) -> Tensor:
        if len(z_list) == 0:
            raise ValueError("se_fuse needs a non-empty list")
        if len(z_list) != self.n_inputs:
            raise ValueError(f"SEFuse built for {self.n_inputs} inputs, got {len(z_list)}")
        x = concat(list(z_list), axis=1)
        g = self.gates(z_list)
        return self.compress(x * g)


def zero_parameters(store: ParameterStore, prefix: str = "") -> None:
    """Set every parameter under ``prefix`` to zero (used to probe residual paths)."""
    for name, p in store.items():
        if name.startswith(prefix):
            p.value = np.zeros_like(p.value)
