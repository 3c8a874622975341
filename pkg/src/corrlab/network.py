"""The multi-stage correspondence network, its hybrid loss and training step."""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (Adam, NonFiniteError, ParameterStore, Tensor, as_tensor, concat,
                       log_sigmoid, relu, tanh)
from .blocks import Linear, OrderAware, PointCN, ResidualMLP
from .cga import ContextPositionAttention, MultiBranchFFN
from .csmgc import CSMGC, StageFeatureBundle
from .geometry import MIN_WEIGHT, epipolar_residual_tensor, weighted_eight_point
from .synthgen import ScenePair, derive_labels

__all__ = [
    "NetworkConfig",
    "StageOutput",
    "NetworkOutput",
    "LossBreakdown",
    "TrainRecord",
    "CorrespondenceNet",
    "TrainingDiverged",
    "hybrid_loss",
    "Trainer",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = 1


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class NetworkConfig:
    d: int = 32
    n_stages: int = 3
    k: int = 3
    ring_size: int = 3
    oa_clusters: int = 64
    use_iter: bool = True
    use_cga: bool = True
    use_csmgc: bool = True
    gamma: float = 0.5
    label_threshold: float = 1e-4
    se_ratio: int = 4
    share_pos_encoder: bool = False
    scale_geometric: bool = False
    deep_supervision: bool = True
    inference_threshold: float = 0.0
    lr: float = 1e-3
    grad_clip: float | None = None
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.ring_size < 1 or self.k % self.ring_size != 0:
            raise ValueError(f"ring size {self.ring_size} must divide k={self.k}")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.use_csmgc and (not self.use_iter or self.n_stages < 3):
            raise ValueError("cross-stage consensus needs the iterative structure with M >= 3")
        if self.n_stages < 1:
            raise ValueError("n_stages must be >= 1")

    @classmethod
    def paper_scale(cls, **overrides) -> "NetworkConfig":
        return cls(**{"d": 128, "oa_clusters": 500, **overrides})

    @property
    def stages(self) -> int:
        return self.n_stages if self.use_iter else 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class StageOutput:
    features: Tensor
    logits: Tensor  # N x 1
    weights: Tensor  # N x 1, tanh(relu(logits))
    bundle: StageFeatureBundle
    e_hat: Tensor | None = None
    fallback: bool = False


@dataclass
class NetworkOutput:
    stages: list[StageOutput]

    @property
    def final(self) -> StageOutput:
        return self.stages[-1]

    @property
    def logits(self) -> np.ndarray:
        return self.final.logits.value.reshape(-1)

    @property
    def weights(self) -> np.ndarray:
        return self.final.weights.value.reshape(-1)

    @property
    def e_hat(self) -> np.ndarray:
        return np.asarray(self.final.e_hat.value, dtype=np.float64)

    @property
    def fallback(self) -> bool:
        return self.final.fallback


class _Stage:
    def __init__(self, store, name, cfg: NetworkConfig, in_width: int, with_csmgc: bool,
                 n_history: int):
        d = cfg.d
        self.use_cga = cfg.use_cga
        self.in_width = in_width
        self.embed = Linear(store, f"{name}.embed", in_width, d)
        if cfg.use_cga:
            kw = dict(share_encoder=cfg.share_pos_encoder, scale_geometric=cfg.scale_geometric)
            self.cpa1 = ContextPositionAttention(store, f"{name}.cpa1", d, **kw)
            self.ffn1 = MultiBranchFFN(store, f"{name}.ffn1", d, out_scale=0.1)
            self.cpa2 = ContextPositionAttention(store, f"{name}.cpa2", d, **kw)
            self.ffn2 = MultiBranchFFN(store, f"{name}.ffn2", d, out_scale=0.1)
        self.pcn1 = PointCN(store, f"{name}.pcn1", d)
        self.oa = OrderAware(store, f"{name}.oa", d, cfg.oa_clusters)
        self.pcn2 = PointCN(store, f"{name}.pcn2", d)
        self.csmgc = (CSMGC(store, f"{name}.csmgc", d, cfg.k, cfg.ring_size, n_history,
                            cfg.se_ratio) if with_csmgc else None)
        self.out_mlp = ResidualMLP(store, f"{name}.out", d)
        self.head = Linear(store, f"{name}.head", d, 1)

    def __call__(self, s: Tensor, p1, p2, carry: StageOutput | None, history, prev_bundle):
        if carry is None:
            x = s
        else:
            if carry.logits.shape != (s.shape[0], 1):
                raise ValueError(f"carry shape {carry.logits.shape} does not match N={s.shape[0]}")
            x = concat([s, carry.logits, carry.weights], axis=1)
        if x.shape[1] != self.in_width:
            raise ValueError(f"stage expects input width {self.in_width}, got {x.shape[1]}")
        f = self.embed(x)
        if self.use_cga:
            f = f + self.cpa1(f, p1, p2)
            z1 = f
            f = f + self.ffn1(f)
        else:
            z1 = f
        f = self.pcn2(self.oa(self.pcn1(f)))
        if self.use_cga:
            f = f + self.cpa2(f, p1, p2)
            z2 = f
            f = f + self.ffn2(f)
        else:
            z2 = f
        if self.csmgc is not None:
            f = f + self.csmgc(history, prev_bundle)
        z3 = self.out_mlp(f)
        logits = self.head(z3)
        weights = tanh(relu(logits))
        return StageOutput(z3, logits, weights, StageFeatureBundle(z1, z2, z3))


class CorrespondenceNet:
    """Iterative correspondence classifier followed by weighted eight-point."""

    def __init__(self, config: NetworkConfig | None = None, store: ParameterStore | None = None):
        self.config = config or NetworkConfig()
        cfg = self.config
        self.store = store or ParameterStore(np.dtype(cfg.dtype), seed=cfg.seed)
        m = cfg.stages
        self.stages = []
        for i in range(m):
            with_csmgc = cfg.use_csmgc and i == m - 1
            self.stages.append(_Stage(self.store, f"stage{i}", cfg, 4 if i == 0 else 6,
                                      with_csmgc, n_history=max(m - 2, 1)))

    @property
    def dtype(self):
        return self.store.dtype

    def forward(self, s: np.ndarray, solve: bool = True) -> NetworkOutput:
        s = np.asarray(s, dtype=np.float64)
        if s.ndim != 2 or s.shape[1] != 4:
            raise ValueError(f"correspondences must be N x 4, got {s.shape}")
        if s.shape[0] < 16:
            raise ValueError(f"network needs N >= 16 correspondences, got {s.shape[0]}")
        s_t = as_tensor(s, self.dtype)
        p1, p2 = s_t.value[:, :2], s_t.value[:, 2:]
        outs: list[StageOutput] = []
        m = len(self.stages)
        for i, stage in enumerate(self.stages):
            carry = outs[-1] if outs else None
            history = [o.bundle.z3 for o in outs[: max(m - 2, 0)]]
            prev = outs[m - 2].bundle if (stage.csmgc is not None) else None
            out = stage(s_t, p1, p2, carry, history, prev)
            if solve:
                out.e_hat, out.fallback = self._solve(s, out)
            outs.append(out)
        return NetworkOutput(outs)

    __call__ = forward

    @staticmethod
    def _solve(s: np.ndarray, out: StageOutput) -> tuple[Tensor, bool]:
        w = out.weights.reshape(-1)
        if int(np.sum(w.value > MIN_WEIGHT)) >= 8:
            return weighted_eight_point(s, w), False
        # too few positive weights: uniform weights on the 8 highest logits.
        # This solve carries no gradient; the classification term still does.
        top = np.argsort(-out.logits.value.reshape(-1), kind="stable")[:8]
        mask = np.zeros(len(s))
        mask[top] = 1.0
        return as_tensor(weighted_eight_point(s, mask), w.dtype), True

    def predict(self, s: np.ndarray) -> dict:
        s = np.asarray(s, dtype=np.float64)
        out = self.forward(s)
        logits = out.logits
        e_hat = out.e_hat
        if self.dtype != np.float64 and not out.fallback:
            # a reduced-precision model still gets a full-precision solve
            e_hat = weighted_eight_point(s, out.weights.astype(np.float64))
        return {
            "logits": logits,
            "weights": out.weights,
            "inliers": (logits > self.config.inference_threshold).astype(np.float64),
            "e_hat": e_hat,
            "fallback": out.fallback,
        }

    # -- checkpoints ---------------------------------------------------------
    def save(self, path) -> None:
        self.store.save(path, {"version": CHECKPOINT_VERSION, "config": self.config.to_dict()})

    @classmethod
    def load(cls, path, config: NetworkConfig | None = None) -> "CorrespondenceNet":
        state, meta = ParameterStore.read(path)
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        stored = NetworkConfig.from_dict(meta["config"])
        if config is not None and config.to_dict() != stored.to_dict():
            diff = {k: (v, stored.to_dict()[k]) for k, v in config.to_dict().items()
                    if stored.to_dict()[k] != v}
            raise ValueError(f"checkpoint config mismatch: {diff}")
        net = cls(stored)
        net.store.load_state_dict(state)
        return net


# ---------------------------------------------------------------------------
# loss


@dataclass
class LossBreakdown:
    total: Tensor
    l_c: float
    l_e: float
    stage_l_c: list[float]
    stage_l_e: list[float]
    no_inliers: bool = False

    @property
    def total_value(self) -> float:
        return float(self.total.value)


def _classification_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Class-rebalanced binary cross-entropy on logits (positive weight n_neg/n_pos)."""
    y = labels.reshape(-1, 1).astype(logits.dtype)
    n_pos = float(y.sum())
    n_neg = float(len(y) - n_pos)
    pos_w = n_neg / n_pos if n_pos > 0 else 1.0
    per = -(log_sigmoid(logits) * (pos_w * y) + log_sigmoid(-logits) * (1.0 - y))
    return per.mean()


def _regression_loss(e_hat: Tensor, s: np.ndarray, labels: np.ndarray) -> Tensor | None:
    inl = labels.reshape(-1) > 0.5
    if not np.any(inl):
        return None
    res = epipolar_residual_tensor(e_hat, s[inl, :2], s[inl, 2:])
    return res.mean()


def hybrid_loss(out: NetworkOutput, labels: np.ndarray, e_gt: np.ndarray | None,
                s: np.ndarray, gamma: float = 0.5, deep_supervision: bool = True) -> LossBreakdown:
    """l_c + gamma * l_e, averaged over stages when ``deep_supervision``.

    ``labels`` may be ``None``, in which case they are derived from ``e_gt``
    at the default threshold of 1e-4.
    """
    s = np.asarray(s, dtype=np.float64)
    if labels is None:
        labels = derive_labels(s, e_gt, 1e-4)
    labels = np.asarray(labels, dtype=np.float64)
    stages = out.stages if deep_supervision else out.stages[-1:]
    totals, lcs, les = [], [], []
    no_inliers = False
    for st in stages:
        lc = _classification_loss(st.logits, labels)
        le = _regression_loss(st.e_hat, s, labels) if st.e_hat is not None else None
        if le is None:
            no_inliers = no_inliers or not np.any(labels > 0.5)
            le_value = 0.0
            totals.append(lc)
        else:
            le_value = float(le.value)
            totals.append(lc + le * gamma)
        lcs.append(float(lc.value))
        les.append(le_value)
    total = totals[0]
    for t in totals[1:]:
        total = total + t
    total = total * (1.0 / len(totals))
    return LossBreakdown(total, float(np.mean(lcs)), float(np.mean(les)), lcs, les, no_inliers)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainRecord:
    step: int
    scene_id: int
    stage_l_c: list[float]
    stage_l_e: list[float]
    l_c: float
    l_e: float
    total: float
    grad_norm: float
    wall_time: float
    gamma: float = 0.5
    fallback: bool = False

    def to_log(self) -> str:
        parts = [f"step={self.step}", f"scene={self.scene_id}", f"total={self.total!r}",
                 f"l_c={self.l_c!r}", f"l_e={self.l_e!r}", f"gamma={self.gamma!r}",
                 f"grad_norm={self.grad_norm!r}", f"fallback={int(self.fallback)}",
                 f"wall_time={self.wall_time:.4f}"]
        return " ".join(parts)


@dataclass
class Trainer:
    net: CorrespondenceNet
    optimizer: Adam = None
    step_count: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.optimizer is None:
            self.optimizer = Adam(self.net.store, lr=self.net.config.lr)

    def labels_for(self, scene: ScenePair) -> np.ndarray:
        return derive_labels(scene.correspondences, scene.essential_gt,
                             self.net.config.label_threshold)

    def train_step(self, scene: ScenePair) -> TrainRecord:
        cfg = self.net.config
        t0 = time.perf_counter()
        store = self.net.store
        store.zero_grad()
        s = scene.correspondences
        try:
            out = self.net.forward(s)
            labels = self.labels_for(scene)
            loss = hybrid_loss(out, labels, scene.essential_gt, s, cfg.gamma,
                               cfg.deep_supervision)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite value at step {self.step_count}: {exc}; "
                                   f"{self._diagnostics()}") from exc
        if not math.isfinite(loss.total_value):
            raise TrainingDiverged(f"non-finite loss at step {self.step_count}; "
                                   f"{self._diagnostics(out)}")
        loss.total.backward()
        gnorm = store.grad_norm()
        if not math.isfinite(gnorm):
            raise TrainingDiverged(f"non-finite gradient at step {self.step_count}; "
                                   f"{self._diagnostics(out)}")
        if cfg.grad_clip is not None and gnorm > cfg.grad_clip:
            scale = cfg.grad_clip / gnorm
            for p in store.params.values():
                if p.grad is not None:
                    p.grad = p.grad * scale
        self.optimizer.step()
        self.step_count += 1
        rec = TrainRecord(self.step_count, scene.scene_id, loss.stage_l_c, loss.stage_l_e,
                          loss.l_c, loss.l_e, loss.total_value, gnorm,
                          time.perf_counter() - t0, cfg.gamma, out.fallback)
        self.history.append(rec)
        return rec

    def _diagnostics(self, out: NetworkOutput | None = None) -> str:
        parts = []
        if out is not None:
            for i, st in enumerate(out.stages):
                parts.append(f"stage{i}: |features|={np.linalg.norm(st.features.value):.3e} "
                             f"|logits|={np.linalg.norm(st.logits.value):.3e}")
        pnorm = math.sqrt(sum(float(np.sum(p.value ** 2)) for p in self.net.store.params.values()))
        parts.append(f"|params|={pnorm:.3e}")
        return "; ".join(parts)


def config_json(cfg: NetworkConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)
