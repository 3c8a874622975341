"""Finite-difference gradient checks for every trainable block and the full loss.

Each check packs the block inputs and all of its parameters into one flat
vector, so a single :func:`finite_diff_report` call probes both input and
parameter gradients. Outputs are reduced to a scalar by a fixed random
projection.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import (FiniteDiffReport, NonSmoothPoint, ParameterStore, Tensor, context_norm,
                       finite_diff_report)
from .blocks import OrderAware, PointCN, SEFuse
from .cga import ContextPositionAttention, MultiBranchFFN
from .csmgc import AlignFeatures, AnnularConv, FusedGraph
from .network import CorrespondenceNet, NetworkConfig, NetworkOutput, StageOutput, hybrid_loss
from .synthgen import SceneConfig, derive_labels, generate_scene

__all__ = ["BLOCK_TOLERANCE", "END_TO_END_TOLERANCE", "BLOCKS", "GradCheckResult",
           "packed_check", "check_block", "run_gradient_suite"]

BLOCK_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3
MAX_RESAMPLES = 5


def packed_check(store: ParameterStore, inputs: Sequence[np.ndarray],
                 loss_fn: Callable[[list[Tensor]], Tensor], coords=None,
                 rng: np.random.Generator | None = None, step: float = 1e-6) -> FiniteDiffReport:
    """Check d loss / d (inputs, parameters) by central differences."""
    params = [store[name] for name in store]
    originals = [p.value.copy() for p in params]
    shapes = [np.shape(a) for a in inputs] + [p.value.shape for p in params]
    sizes = [int(np.prod(s)) for s in shapes]
    bounds = np.cumsum([0] + sizes)
    n_in = len(inputs)
    point = np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in inputs]
                           + [o.ravel() for o in originals]) if sizes else np.zeros(0)

    def split(v):
        return [v[bounds[i]:bounds[i + 1]].reshape(shapes[i]) for i in range(len(shapes))]

    def fn(x: Tensor) -> Tensor:
        parts = split(x.value)
        leaves = [Tensor(parts[i].copy(), requires_grad=True) for i in range(n_in)]
        for p, part in zip(params, parts[n_in:]):
            p.value = part.astype(store.dtype, copy=True)
        out = loss_fn(leaves)
        if not x.requires_grad:
            return Tensor(out.value)

        def backward(g):
            store.zero_grad()
            out.backward(g)
            grads = [np.zeros(s) if t.grad is None else t.grad
                     for t, s in zip(leaves + params, shapes)]
            return (np.concatenate([np.ravel(gr) for gr in grads]),)

        return Tensor.from_op(out.value, [x], backward, "packed")

    try:
        return finite_diff_report(fn, point, step, coords, rng)
    finally:
        for p, o in zip(params, originals):
            p.value = o
        store.zero_grad()


def _project(rng, shape):
    r = rng.standard_normal(shape)
    return lambda t: (t * r).sum()


# ---------------------------------------------------------------------------
# block builders: (store, inputs, loss_fn) for one seed

N_ROWS = 16
WIDTH = 8


def _context_norm(rng):
    store = ParameterStore(np.float64, seed=0)
    proj = _project(rng, (N_ROWS, WIDTH))
    return store, [rng.standard_normal((N_ROWS, WIDTH))], lambda t: proj(context_norm(t[0]))


def _pointcn(rng):
    store = ParameterStore(np.float64, seed=int(rng.integers(2**31)))
    block = PointCN(store, "b", WIDTH)
    proj = _project(rng, (N_ROWS, WIDTH))
    return store, [rng.standard_normal((N_ROWS, WIDTH))], lambda t: proj(block(t[0]))


def _order_aware(rng):
    store = ParameterStore(np.float64, seed=int(rng.integers(2**31)))
    block = OrderAware(store, "b", WIDTH, 4, out_scale=1.0)
    proj = _project(rng, (N_ROWS, WIDTH))
    return store, [rng.standard_normal((N_ROWS, WIDTH))], lambda t: proj(block(t[0]))


def _se_fuse(rng):
    store = ParameterStore(np.float64, seed=int(rng.integers(2**31)))
    block = SEFuse(store, "b", WIDTH, 3)
    proj = _project(rng, (N_ROWS, WIDTH))
    xs = [rng.standard_normal((N_ROWS, WIDTH)) for _ in range(3)]
    return store, xs, lambda t: proj(block(t))


def _cpa(rng):
    store = ParameterStore(np.float64, seed=int(rng.integers(2**31)))
    block = ContextPositionAttention(store, "b", WIDTH)
    p1 = rng.uniform(-1, 1, (N_ROWS, 2))
    p2 = rng.uniform(-1, 1, (N_ROWS, 2))
    proj = _project(rng, (N_ROWS, WIDTH))
    return store, [rng.standard_normal((N_ROWS, WIDTH))], lambda t: proj(block(t[0], p1, p2))


def _mbffn(rng):
    store = ParameterStore(np.float64, seed=int(rng.integers(2**31)))
    block = MultiBranchFFN(store, "b", WIDTH)
    proj = _project(rng, (N_ROWS, WIDTH))
    return store, [rng.standard_normal((N_ROWS, WIDTH))], lambda t: proj(block(t[0]))


def _align(rng):
    k = 3
    store = ParameterStore(np.float64, seed=int(rng.integers(2**31)))
    block = AlignFeatures(store, "b", 8 * WIDTH, WIDTH)
    projs = [_project(rng, (N_ROWS, WIDTH)) for _ in range(k)]
    xs = [rng.standard_normal((N_ROWS, 8 * WIDTH)) for _ in range(k)]

    def loss(t):
        out = block(FusedGraph(list(t)))
        total = projs[0](out.edges[0])
        for pr, e in zip(projs[1:], out.edges[1:]):
            total = total + pr(e)
        return total

    return store, xs, loss


def _annular(rng):
    k, p = 6, 3
    store = ParameterStore(np.float64, seed=int(rng.integers(2**31)))
    block = AnnularConv(store, "b", WIDTH, k, p)
    proj = _project(rng, (N_ROWS, WIDTH))
    xs = [rng.standard_normal((N_ROWS, WIDTH)) for _ in range(k)]
    return store, xs, lambda t: proj(block(FusedGraph(list(t))))


def _scene(rng, n):
    sc = generate_scene(SceneConfig(n_correspondences=n, outlier_ratio=0.5,
                                    seed=int(rng.integers(2**31))), 0)
    return sc, derive_labels(sc.correspondences, sc.essential_gt, 1e-4)


def _hybrid_loss(rng):
    stages = 3
    store = ParameterStore(np.float64, seed=0)
    sc, labels = _scene(rng, N_ROWS * 2)
    n = len(sc)
    logits = [rng.standard_normal((n, 1)) for _ in range(stages)]
    e_hats = [sc.essential_gt + 0.1 * rng.standard_normal((3, 3)) for _ in range(stages)]

    def loss(t):
        outs = [StageOutput(features=None, logits=t[i], weights=None, bundle=None,
                            e_hat=t[stages + i]) for i in range(stages)]
        return hybrid_loss(NetworkOutput(outs), labels, sc.essential_gt,
                           sc.correspondences, 0.5, True).total

    return store, logits + e_hats, loss


def _end_to_end(rng):
    cfg = NetworkConfig(d=WIDTH, n_stages=3, k=3, ring_size=3, oa_clusters=4,
                        dtype="float64", seed=int(rng.integers(2**31)))
    net = CorrespondenceNet(cfg)
    sc, labels = _scene(rng, 32)

    def loss(t):
        out = net.forward(sc.correspondences)
        return hybrid_loss(out, labels, sc.essential_gt, sc.correspondences, cfg.gamma,
                           cfg.deep_supervision).total

    return net.store, [], loss


BLOCKS: dict[str, tuple[Callable, float]] = {
    "context_norm": (_context_norm, BLOCK_TOLERANCE),
    "pointcn": (_pointcn, BLOCK_TOLERANCE),
    "order_aware": (_order_aware, BLOCK_TOLERANCE),
    "se_fuse": (_se_fuse, BLOCK_TOLERANCE),
    "cpa_forward": (_cpa, BLOCK_TOLERANCE),
    "mbffn_forward": (_mbffn, BLOCK_TOLERANCE),
    "align_features": (_align, BLOCK_TOLERANCE),
    "annular_conv": (_annular, BLOCK_TOLERANCE),
    "hybrid_loss": (_hybrid_loss, BLOCK_TOLERANCE),
    "end_to_end": (_end_to_end, END_TO_END_TOLERANCE),
}


@dataclass
class GradCheckResult:
    name: str
    max_relative_error: float
    tolerance: float
    n_seeds: int
    n_checked: int
    n_excluded: int
    seconds: float
    resampled: int = 0

    @property
    def passed(self) -> bool:
        return self.n_checked > 0 and self.max_relative_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} block={self.name} max_rel_err={self.max_relative_error:.3e} "
                f"tol={self.tolerance:.0e} seeds={self.n_seeds} checked={self.n_checked} "
                f"excluded={self.n_excluded} resampled={self.resampled} seconds={self.seconds:.1f}")


def check_block(name: str, seeds: Sequence[int], coords: int | None = 60) -> GradCheckResult:
    builder, tol = BLOCKS[name]
    t0 = time.perf_counter()
    worst, checked, excluded, resampled = 0.0, 0, 0, 0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for _ in range(MAX_RESAMPLES):
            store, inputs, loss = builder(rng)
            try:
                rep = packed_check(store, inputs, loss, coords=coords, rng=rng)
                break
            except NonSmoothPoint:
                # an exact zero reached a ReLU: draw a fresh point
                resampled += 1
        else:
            raise NonSmoothPoint(f"{name}: no smooth point after {MAX_RESAMPLES} draws")
        worst = max(worst, rep.max_relative_error)
        checked += rep.n_checked
        excluded += rep.n_excluded
    return GradCheckResult(name, worst, tol, len(seeds), checked, excluded,
                           time.perf_counter() - t0, resampled)


def run_gradient_suite(n_seeds: int = 20, root_seed: int = 0, coords: int | None = 60,
                       blocks: Sequence[str] | None = None,
                       report: Callable[[str], None] | None = None) -> list[GradCheckResult]:
    seeds = [root_seed * 1000 + i for i in range(n_seeds)]
    results = []
    for name in blocks or list(BLOCKS):
        res = check_block(name, seeds, coords)
        if report is not None:
            report(res.line())
        results.append(res)
    return results
