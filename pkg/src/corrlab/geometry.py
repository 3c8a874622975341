"""Two-view epipolar geometry in normalized camera coordinates.

Convention: a 3-D point X1 in the first camera frame maps to the second
frame as ``X2 = R @ X1 + t`` and the essential matrix is ``E = [t]x R``, so
``p2_h.T @ E @ p1_h == 0`` for every true correspondence (``p_h`` is the
homogenized 2-vector).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor

__all__ = [
    "CameraPose",
    "GeometryError",
    "DegenerateConfiguration",
    "skew",
    "compose_essential",
    "epipolar_residual",
    "epipolar_residual_tensor",
    "coefficient_matrix",
    "hartley_transform",
    "weighted_eight_point",
    "project_rank2",
    "decompose_essential",
    "rotation_angle_deg",
    "translation_angle_deg",
    "pose_error",
    "axis_angle",
]

RESIDUAL_DENOM_FLOOR = 1e-15
MIN_WEIGHT = 1e-8
CHEIRALITY_POINTS = 20


class GeometryError(ValueError):
    pass


class DegenerateConfiguration(GeometryError):
    pass


@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise GeometryError(f"rotation must be 3x3, got {r.shape}")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-10) or np.linalg.det(r) < 0:
            raise GeometryError("rotation is not a proper orthonormal matrix")
        norm = np.linalg.norm(t)
        if norm == 0:
            raise GeometryError("translation must be nonzero")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t / norm)


def skew(t) -> np.ndarray:
    tx, ty, tz = np.asarray(t, dtype=np.float64)
    return np.array([[0.0, -tz, ty], [tz, 0.0, -tx], [-ty, tx, 0.0]])


def axis_angle(axis, angle_deg: float) -> np.ndarray:
    """Rotation matrix for a rotation of ``angle_deg`` about ``axis`` (Rodrigues)."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    theta = math.radians(angle_deg)
    k = skew(axis)
    return np.eye(3) + math.sin(theta) * k + (1.0 - math.cos(theta)) * (k @ k)


def compose_essential(pose: CameraPose) -> np.ndarray:
    e = skew(pose.translation) @ pose.rotation
    return e / np.linalg.norm(e)


def _homogenize(p) -> np.ndarray:
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    return np.concatenate([p, np.ones((p.shape[0], 1))], axis=1)


def epipolar_residual(e, p1, p2, return_degenerate: bool = False):
    """Symmetric (Sampson-style) epipolar residual per correspondence.

    ``(p2' E p1)^2 / ((E p1)_1^2 + (E p1)_2^2 + (E' p2)_1^2 + (E' p2)_2^2)``.
    ``p1`` and ``p2`` are (2,) or (N, 2). Denominators below 1e-15 are clamped
    to 1e-15 and reported as degenerate when ``return_degenerate`` is set.
    """
    e = np.asarray(e, dtype=np.float64)
    scalar = np.ndim(p1) == 1
    x1, x2 = _homogenize(p1), _homogenize(p2)
    ex1 = x1 @ e.T
    etx2 = x2 @ e
    num = np.sum(x2 * ex1, axis=1) ** 2
    den = ex1[:, 0] ** 2 + ex1[:, 1] ** 2 + etx2[:, 0] ** 2 + etx2[:, 1] ** 2
    degenerate = den < RESIDUAL_DENOM_FLOOR
    res = num / np.maximum(den, RESIDUAL_DENOM_FLOOR)
    if scalar:
        res, degenerate = float(res[0]), bool(degenerate[0])
    return (res, degenerate) if return_degenerate else res


def epipolar_residual_tensor(e: Tensor, p1: np.ndarray, p2: np.ndarray) -> Tensor:
    """Differentiable version of :func:`epipolar_residual` (N,) for a Tensor E."""
    x1 = as_tensor(_homogenize(p1), e.dtype)
    x2 = as_tensor(_homogenize(p2), e.dtype)
    ex1 = x1 @ e.T
    etx2 = x2 @ e
    num = ((x2 * ex1).sum(axis=1)) ** 2
    den = (ex1[:, 0] ** 2 + ex1[:, 1] ** 2 + etx2[:, 0] ** 2 + etx2[:, 1] ** 2
           + RESIDUAL_DENOM_FLOOR)
    return num / den


# ---------------------------------------------------------------------------
# eight-point estimation


def coefficient_matrix(p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    """Rows ``kron(p2_h, p1_h)`` so that ``row @ E.ravel() == p2_h' E p1_h``."""
    x1, x2 = _homogenize(p1), _homogenize(p2)
    return (x2[:, :, None] * x1[:, None, :]).reshape(len(x1), 9)


def hartley_transform(p: np.ndarray) -> np.ndarray:
    """Similarity moving points to zero mean and sqrt(2) average norm."""
    p = np.asarray(p, dtype=np.float64)
    centroid = p.mean(axis=0)
    mean_dist = np.mean(np.linalg.norm(p - centroid, axis=1))
    s = math.sqrt(2.0) / mean_dist if mean_dist > 0 else 1.0
    return np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])


def _null_vector(x: np.ndarray, w: Tensor) -> Tensor:
    """Smallest right singular vector of ``sqrt(w) * X`` with an eigen-derivative backward.

    The vector is the bottom eigenvector of ``A = X' diag(w) X``. For an
    upstream gradient g, ``dL/dA = sum_j (u_j.g)/(lam_0 - lam_j) u_j v'``,
    and ``dA/dw_i = x_i x_i'``, so ``dL/dw_i = (x_i.v)(x_i.c)`` with
    ``c = sum_j (u_j.g)/(lam_0 - lam_j) u_j``.
    """
    wv = np.asarray(w.value, dtype=np.float64).reshape(-1)
    a = np.sqrt(np.maximum(wv, 0.0))[:, None] * x
    _, sv, vt = np.linalg.svd(a, full_matrices=a.shape[0] < 9)
    lam = np.zeros(9)
    lam[: len(sv)] = sv ** 2
    rank = int(np.sum(sv > 1e-12 * sv[0]))
    if rank < 8:
        raise DegenerateConfiguration(f"weighted coefficient matrix has rank {rank} < 8")
    # rows of vt are eigenvectors of A with eigenvalues lam (descending)
    v = vt[-1].copy()
    lam0 = lam[-1]
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    others = vt[:-1]
    gaps = lam0 - lam[:8]

    def backward(g):
        g = np.asarray(g, dtype=np.float64).reshape(9)
        coeff = (others @ g) / gaps
        c = coeff @ others
        grad_w = (x @ v) * (x @ c)
        return (grad_w.reshape(w.shape).astype(w.dtype),)

    return Tensor.from_op(v.astype(w.dtype), (w,), backward, "null_vector")


def sym_min_eigvec(s: Tensor) -> Tensor:
    """Eigenvector of the smallest eigenvalue of a symmetric 3x3 Tensor."""
    sv = np.asarray(s.value, dtype=np.float64)
    lam, u = np.linalg.eigh(0.5 * (sv + sv.T))
    u0 = u[:, 0].copy()
    if u0[np.argmax(np.abs(u0))] < 0:
        u0 = -u0
    others = u[:, 1:]
    gaps = lam[0] - lam[1:]

    def backward(g):
        g = np.asarray(g, dtype=np.float64).reshape(-1)
        coeff = (others.T @ g) / gaps
        gs = np.outer(others @ coeff, u0)
        return ((0.5 * (gs + gs.T)).astype(s.dtype),)

    return Tensor.from_op(u0.astype(s.dtype), (s,), backward, "sym_min_eigvec")


def project_rank2(e):
    """Remove the smallest singular direction of a 3x3 matrix (Tensor or array).

    Written as ``(I - u u') E`` with ``u`` the bottom eigenvector of ``E E'``,
    which is differentiable whenever the two smallest singular values differ.
    """
    if isinstance(e, Tensor):
        u = sym_min_eigvec(e @ e.T).reshape(3, 1)
        return e - u @ (u.T @ e)
    u_, s_, vt_ = np.linalg.svd(np.asarray(e, dtype=np.float64))
    return e - s_[2] * np.outer(u_[:, 2], vt_[2])


def weighted_eight_point(s: np.ndarray, w):
    """Unit-Frobenius essential matrix minimizing sum_i w_i (p2_i' E p1_i)^2.

    ``s`` is the (N, 4) correspondence array ``(x1, y1, x2, y2)``; ``w`` a
    nonnegative N-vector, either an array (returns an array) or a Tensor
    (returns a Tensor differentiable with respect to ``w``). Points are
    Hartley-normalized before the solve; the result is projected to rank 2.
    """
    s = np.asarray(s, dtype=np.float64)
    differentiable = isinstance(w, Tensor)
    wt = w if differentiable else Tensor(np.asarray(w, dtype=np.float64))
    wv = np.asarray(wt.value).reshape(-1)
    if wv.shape[0] != s.shape[0]:
        raise GeometryError(f"{wv.shape[0]} weights for {s.shape[0]} correspondences")
    if np.any(wv < 0):
        raise GeometryError("weights must be nonnegative")
    n_eff = int(np.sum(wv > MIN_WEIGHT))
    if n_eff < 8:
        raise GeometryError(f"eight-point needs >= 8 weighted correspondences, got {n_eff}")

    t1 = hartley_transform(s[:, :2])
    t2 = hartley_transform(s[:, 2:])
    q1 = _homogenize(s[:, :2]) @ t1.T
    q2 = _homogenize(s[:, 2:]) @ t2.T
    x = coefficient_matrix(q1[:, :2], q2[:, :2])

    v = _null_vector(x, wt.reshape(-1))
    en = v.reshape(3, 3)
    e = as_tensor(t2.T, en.dtype) @ en @ as_tensor(t1, en.dtype)
    e = e / ((e * e).sum() ** 0.5)
    e = project_rank2(e)
    e = e / ((e * e).sum() ** 0.5)
    return e if differentiable else np.asarray(e.value, dtype=np.float64)


# ---------------------------------------------------------------------------
# pose recovery and errors


def decompose_essential(e: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """The four (R, t) candidates consistent with an essential matrix."""
    e = np.asarray(e, dtype=np.float64)
    u, sv, vt = np.linalg.svd(e)
    if sv[1] < 1e-8 * max(sv[0], 1e-300):
        raise GeometryError("essential matrix has rank < 2; decomposition is degenerate")
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    r1 = u @ w @ vt
    r2 = u @ w.T @ vt
    t = u[:, 2]
    return [(r1, t), (r1, -t), (r2, t), (r2, -t)]


def _count_in_front(r, t, p1, p2) -> int:
    x1, x2 = _homogenize(p1), _homogenize(p2)
    count = 0
    for a, b in zip(x1, x2):
        # depth1 * R a + t = depth2 * b
        m = np.stack([r @ a, -b], axis=1)
        depths, *_ = np.linalg.lstsq(m, -t, rcond=None)
        count += int(depths[0] > 0 and depths[1] > 0)
    return count


def rotation_angle_deg(r_est, r_gt) -> float:
    """Geodesic angle between rotations, arccos((tr(R_est' R_gt) - 1) / 2).

    Evaluated through atan2 of the skew and trace parts, which stays accurate
    near 0 and 180 degrees.
    """
    d = np.asarray(r_est).T @ np.asarray(r_gt)
    skew_part = np.array([d[2, 1] - d[1, 2], d[0, 2] - d[2, 0], d[1, 0] - d[0, 1]])
    return math.degrees(math.atan2(0.5 * np.linalg.norm(skew_part), 0.5 * (np.trace(d) - 1.0)))


def _angle_deg(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return math.degrees(math.atan2(np.linalg.norm(np.cross(a, b)), float(a @ b)))


def translation_angle_deg(t_est, t_gt) -> float:
    """Sign-invariant angle between translation directions."""
    ang = _angle_deg(t_est, t_gt)
    return min(ang, 180.0 - ang)


def pose_error(e_est, pose_gt: CameraPose, p1, p2, weights=None) -> tuple[float, float]:
    """(rotation error, translation error) in degrees for an estimated E.

    The (R, t) candidate is chosen by cheirality on the correspondences
    ``p1``/``p2``; when ``weights`` is given only the 20 highest-weighted
    ones vote.
    """
    p1 = np.atleast_2d(np.asarray(p1, dtype=np.float64))
    p2 = np.atleast_2d(np.asarray(p2, dtype=np.float64))
    if weights is not None:
        top = np.argsort(-np.asarray(weights).reshape(-1), kind="stable")[:CHEIRALITY_POINTS]
        p1, p2 = p1[top], p2[top]
    candidates = decompose_essential(e_est)
    counts = [_count_in_front(r, t, p1, p2) for r, t in candidates]
    r, t = candidates[int(np.argmax(counts))]
    return rotation_angle_deg(r, pose_gt.rotation), translation_angle_deg(t, pose_gt.translation)
