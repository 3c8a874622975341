"""Contextual geometric attention: context-position attention (CPA) and the
multi-branch feed-forward network (MB-FFN)."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .autodiff import ParameterStore, Tensor, as_tensor, gelu, layer_norm, relu, softmax_rows
from .blocks import Affine, BatchNorm, Linear

__all__ = ["AttentionMaps", "ContextPositionAttention", "MultiBranchFFN"]


@dataclass
class AttentionMaps:
    a_f: Tensor  # content attention, N x N
    a_g: Tensor  # geometric attention, N x N
    v: Tensor


class _Projection:
    """linear map -> normalization over the N rows -> ReLU"""

    def __init__(self, store, name, d):
        self.lin = Linear(store, f"{name}.lin", d, d)
        self.norm = BatchNorm(store, f"{name}.bn", d)

    def __call__(self, f):
        return relu(self.norm(self.lin(f)))


class _PositionEncoder:
    def __init__(self, store, name, d):
        self.l1 = Linear(store, f"{name}.l1", 2, d)
        self.l2 = Linear(store, f"{name}.l2", d, d)

    def __call__(self, p):
        return self.l2(relu(self.l1(p)))


class ContextPositionAttention:
    """Fuses content attention softmax(QK'/sqrt(d)) with geometric attention
    softmax(QP') built from the coordinates of both views.

    ``share_encoder`` uses one position encoder for both views;
    ``scale_geometric`` divides the geometric logits by sqrt(d) as well.
    """

    def __init__(self, store: ParameterStore, name: str, d: int,
                 share_encoder: bool = False, scale_geometric: bool = False):
        self.d = d
        self.scale_geometric = scale_geometric
        self.q = _Projection(store, f"{name}.q", d)
        self.k = _Projection(store, f"{name}.k", d)
        self.v = _Projection(store, f"{name}.v", d)
        self.enc1 = _PositionEncoder(store, f"{name}.enc1", d)
        self.enc2 = self.enc1 if share_encoder else _PositionEncoder(store, f"{name}.enc2", d)

    def attention(self, f: Tensor, p1, p2) -> AttentionMaps:
        if f.shape[0] < 2:
            raise ValueError("attention needs at least 2 correspondences")
        q, k, v = self.q(f), self.k(f), self.v(f)
        a_f = softmax_rows((q @ k.T) * (1.0 / math.sqrt(self.d)))
        pos = self.enc1(as_tensor(p1, f.dtype)) + self.enc2(as_tensor(p2, f.dtype))
        logits_g = q @ pos.T
        if self.scale_geometric:
            logits_g = logits_g * (1.0 / math.sqrt(self.d))
        return AttentionMaps(a_f, softmax_rows(logits_g), v)

    def __call__(self, f: Tensor, p1, p2) -> Tensor:
        maps = self.attention(f, p1, p2)
        return (maps.a_g + maps.a_f) @ maps.v


class _CBGC:
    """Linear -> normalization -> GELU -> linear."""

    def __init__(self, store, name, d, pooled: bool, out_scale: float):
        self.l1 = Linear(store, f"{name}.l1", d, d)
        # a pooled branch is a single row: batch statistics are undefined there
        self.norm = Affine(store, f"{name}.bn", d) if pooled else BatchNorm(store, f"{name}.bn", d)
        self.l2 = Linear(store, f"{name}.l2", d, d, scale=out_scale)

    def __call__(self, x):
        return self.l2(gelu(self.norm(self.l1(x))))


class MultiBranchFFN:
    """Layer-normalize rows, then sum three CBGC branches fed with the global
    average pool, the global max pool and the rows themselves."""

    def __init__(self, store: ParameterStore, name: str, d: int, out_scale: float = 1.0):
        self.ln = Affine(store, f"{name}.ln", d)
        self.avg = _CBGC(store, f"{name}.avg", d, pooled=True, out_scale=out_scale)
        self.max = _CBGC(store, f"{name}.max", d, pooled=True, out_scale=out_scale)
        self.local = _CBGC(store, f"{name}.local", d, pooled=False, out_scale=out_scale)

    def branches(self, f_out: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        x = self.ln(layer_norm(f_out))
        return x.mean(axis=0, keepdims=True), x.max(axis=0, keepdims=True), x

    def __call__(self, f_out: Tensor) -> Tensor:
        gap, gmp, x = self.branches(f_out)
        return self.local(x) + self.avg(gap) + self.max(gmp)

