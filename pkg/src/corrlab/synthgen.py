"""Synthetic two-view scenes with planted inliers, plus dataset file I/O.

Two on-disk formats share one header line (JSON with ``format``,
``version``, ``count`` and ``fields``):

* text (``.jsonl``, the default): one JSON object per scene. Floats are
  written with ``repr`` so reading them back is bit-exact.
* binary (``.bin``): after the header, each scene is a little-endian uint32
  ``N`` followed by little-endian float64 blocks in this order:
  correspondences (N x 4, row-major), labels (N), rotation (3 x 3,
  row-major), translation (3), essential matrix (3 x 3, row-major).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraPose, axis_angle, compose_essential, epipolar_residual

__all__ = [
    "SceneConfig",
    "ScenePair",
    "SceneGenerationError",
    "DatasetFormatError",
    "generate_scene",
    "generate_scenes",
    "derive_labels",
    "write_dataset",
    "read_dataset",
]

FORMAT_NAME = "corrlab-scenes"
FORMAT_VERSION = 1
FIELDS = ["correspondences", "labels", "rotation", "translation", "essential"]
MAX_TRIES = 200


class SceneGenerationError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass
class SceneConfig:
    n_correspondences: int = 512
    outlier_ratio: float = 0.7
    pixel_noise_std: float = 1e-3
    depth_range: tuple[float, float] = (2.0, 8.0)
    rotation_magnitude_deg: float = 30.0
    seed: int = 0
    fov_limit: float = 1.5
    label_threshold: float = 1e-4

    def __post_init__(self):
        self.depth_range = tuple(float(x) for x in self.depth_range)
        if not 0.0 <= self.outlier_ratio <= 1.0:
            raise ValueError(f"outlier_ratio must lie in [0, 1], got {self.outlier_ratio}")
        if not 0.0 < self.depth_range[0] < self.depth_range[1]:
            raise ValueError(f"invalid depth range {self.depth_range}")
        if self.n_correspondences < 16:
            raise ValueError(f"n_correspondences must be >= 16, got {self.n_correspondences}")
        if self.pixel_noise_std < 0:
            raise ValueError("pixel_noise_std must be nonnegative")


@dataclass
class ScenePair:
    correspondences: np.ndarray  # (N, 4): x1, y1, x2, y2
    labels: np.ndarray  # (N,) planted labels, 1 = inlier
    pose_gt: CameraPose
    essential_gt: np.ndarray
    scene_id: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def p1(self) -> np.ndarray:
        return self.correspondences[:, :2]

    @property
    def p2(self) -> np.ndarray:
        return self.correspondences[:, 2:]

    def __len__(self):
        return len(self.correspondences)

    def equals(self, other: "ScenePair") -> bool:
        """Bit-exact equality of every stored array."""
        return (self.scene_id == other.scene_id
                and np.array_equal(self.correspondences, other.correspondences)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.pose_gt.rotation, other.pose_gt.rotation)
                and np.array_equal(self.pose_gt.translation, other.pose_gt.translation)
                and np.array_equal(self.essential_gt, other.essential_gt))


def _random_rotation(rng, max_deg: float) -> np.ndarray:
    axis = rng.normal(size=3)
    return axis_angle(axis, rng.uniform(0.0, max_deg))


def _random_unit(rng) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _sample_inliers(rng, pose, n, config) -> np.ndarray:
    lim = config.fov_limit
    r, t = pose.rotation, pose.translation
    e = compose_essential(pose)
    out = np.empty((0, 4))
    for _ in range(MAX_TRIES):
        if len(out) >= n:
            break
        m = 2 * (n - len(out)) + 16
        p1 = rng.uniform(-lim, lim, size=(m, 2))
        depth = rng.uniform(*config.depth_range, size=(m, 1))
        x1 = np.concatenate([p1, np.ones((m, 1))], axis=1) * depth
        x2 = x1 @ r.T + t
        ok = x2[:, 2] > 1e-6
        p2 = x2[ok, :2] / x2[ok, 2:]
        cand = np.concatenate([p1[ok], p2], axis=1)
        if config.pixel_noise_std > 0:
            cand = cand + rng.normal(scale=config.pixel_noise_std, size=cand.shape)
            # keep noisy inliers geometrically consistent at the label threshold
            res = epipolar_residual(e, cand[:, :2], cand[:, 2:])
            cand = cand[res < config.label_threshold]
        cand = cand[np.all(np.abs(cand) <= lim, axis=1)]
        out = np.concatenate([out, cand], axis=0)
    if len(out) < n:
        raise SceneGenerationError(
            f"could only place {len(out)} of {n} points in both views after {MAX_TRIES} rounds")
    return out[:n]


def generate_scene(config: SceneConfig, scene_id: int = 0) -> ScenePair:
    """Sample a pose, visible 3-D points, noisy inliers and uniform outliers.

    Deterministic given ``config.seed + scene_id``.
    """
    rng = np.random.default_rng(config.seed + scene_id)
    pose = CameraPose(_random_rotation(rng, config.rotation_magnitude_deg), _random_unit(rng))
    n = config.n_correspondences
    n_out = int(round(config.outlier_ratio * n))
    n_in = n - n_out
    inliers = _sample_inliers(rng, pose, n_in, config) if n_in else np.empty((0, 4))
    lim = config.fov_limit
    outliers = rng.uniform(-lim, lim, size=(n_out, 4))
    corr = np.concatenate([inliers, outliers], axis=0)
    labels = np.concatenate([np.ones(n_in), np.zeros(n_out)])
    order = rng.permutation(n)
    return ScenePair(corr[order], labels[order], pose, compose_essential(pose), scene_id)


def generate_scenes(config: SceneConfig, count: int, start: int = 0) -> list[ScenePair]:
    return [generate_scene(config, start + i) for i in range(count)]


def derive_labels(s: np.ndarray, e_gt: np.ndarray, threshold: float) -> np.ndarray:
    """1 where the epipolar residual under ``e_gt`` is strictly below ``threshold``."""
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    s = np.asarray(s, dtype=np.float64)
    res = epipolar_residual(e_gt, s[:, :2], s[:, 2:])
    return (res < threshold).astype(np.float64)


# ---------------------------------------------------------------------------
# dataset files


def _header(count: int, encoding: str) -> dict:
    return {"format": FORMAT_NAME, "version": FORMAT_VERSION, "encoding": encoding,
            "count": count, "fields": FIELDS}


def _is_binary(path: Path, binary: bool | None) -> bool:
    if binary is not None:
        return binary
    return path.suffix == ".bin"


def write_dataset(scenes, path, binary: bool | None = None) -> None:
    """Write scenes to ``path``; ``.bin`` selects the binary layout."""
    path = Path(path)
    scenes = list(scenes)
    if _is_binary(path, binary):
        with open(path, "wb") as fh:
            fh.write((json.dumps(_header(len(scenes), "binary")) + "\n").encode())
            for sc in scenes:
                n = len(sc)
                fh.write(struct.pack("<I", n))
                fh.write(struct.pack("<q", int(sc.scene_id)))
                blocks = [sc.correspondences, sc.labels, sc.pose_gt.rotation,
                          sc.pose_gt.translation, sc.essential_gt]
                for b in blocks:
                    fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
        return
    with open(path, "w") as fh:
        fh.write(json.dumps(_header(len(scenes), "text")) + "\n")
        for sc in scenes:
            rec = {
                "scene_id": int(sc.scene_id),
                "n": len(sc),
                "correspondences": sc.correspondences.tolist(),
                "labels": sc.labels.tolist(),
                "rotation": sc.pose_gt.rotation.tolist(),
                "translation": sc.pose_gt.translation.tolist(),
                "essential": sc.essential_gt.tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


def _scene_from_arrays(idx, scene_id, corr, labels, rot, trans, ess) -> ScenePair:
    corr = np.asarray(corr, dtype=np.float64)
    if corr.ndim != 2 or corr.shape[1] != 4:
        raise DatasetFormatError(f"scene {idx}: correspondences must be N x 4, got {corr.shape}")
    pose = CameraPose.__new__(CameraPose)
    # bypass re-normalization so the stored values are kept bit-exact
    object.__setattr__(pose, "rotation", np.asarray(rot, dtype=np.float64).reshape(3, 3))
    object.__setattr__(pose, "translation", np.asarray(trans, dtype=np.float64).reshape(3))
    return ScenePair(corr, np.asarray(labels, dtype=np.float64).reshape(-1), pose,
                     np.asarray(ess, dtype=np.float64).reshape(3, 3), int(scene_id))


def read_dataset(path, binary: bool | None = None) -> list[ScenePair]:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.readline()
        try:
            header = json.loads(head.decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DatasetFormatError(f"{path}: unreadable header") from exc
        if header.get("format") != FORMAT_NAME or header.get("version") != FORMAT_VERSION:
            raise DatasetFormatError(f"{path}: not a {FORMAT_NAME} v{FORMAT_VERSION} file")
        count = int(header["count"])
        scenes = []
        if header.get("encoding") == "binary":
            for idx in range(count):
                raw = fh.read(12)
                if len(raw) < 12:
                    raise DatasetFormatError(f"scene {idx}: truncated record header")
                n, scene_id = struct.unpack("<Iq", raw)
                sizes = [4 * n, n, 9, 3, 9]
                blocks = []
                for size in sizes:
                    buf = fh.read(8 * size)
                    if len(buf) < 8 * size:
                        raise DatasetFormatError(f"scene {idx}: truncated record body")
                    blocks.append(np.frombuffer(buf, dtype="<f8").astype(np.float64))
                blocks[0] = blocks[0].reshape(n, 4)
                scenes.append(_scene_from_arrays(idx, scene_id, *blocks))
            if fh.read(1):
                raise DatasetFormatError(f"{path}: trailing data after {count} scenes")
            return scenes
        lines = fh.read().decode().splitlines()
    lines = [ln for ln in lines if ln.strip()]
    for idx, line in enumerate(lines[:count]):
        try:
            rec = json.loads(line)
            scenes.append(_scene_from_arrays(idx, rec["scene_id"], rec["correspondences"],
                                             rec["labels"], rec["rotation"],
                                             rec["translation"], rec["essential"]))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, DatasetFormatError):
                raise
            raise DatasetFormatError(f"scene {idx}: malformed record ({exc})") from exc
    if len(lines) != count:
        raise DatasetFormatError(
            f"scene {min(len(lines), count)}: expected {count} records, found {len(lines)}")
    return scenes


def outlier_fraction(scenes) -> float:
    total = sum(len(sc) for sc in scenes)
    if total == 0:
        return math.nan
    return float(sum(np.sum(sc.labels == 0) for sc in scenes) / total)
