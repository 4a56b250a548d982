"""Training objectives for pose estimation and point-cloud generation.

Every loss exists twice: a float64 numpy evaluation (used for metrics and as
the oracle in tests) and a differentiable version built from
:mod:`posegen.autodiff` primitives that operates on whole batches.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .geometry import PointCloud, RigidTransform

KDTREE_MIN_PAIRS = 10_000


@dataclass(frozen=True)
class LossWeights:
    """Weights of the pose term and the two generation terms."""

    pose: float = 1.0
    cano: float = 1.0
    posed: float = 1.0

    def __post_init__(self):
        for name in ("pose", "cano", "posed"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name!r} must be non-negative")


def _points(pc) -> np.ndarray:
    pts = pc.points if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an (n, 3) point array, got shape {pts.shape}")
    if len(pts) == 0:
        raise ValueError("point set must be non-empty")
    return pts


def nearest_distances(query: np.ndarray, ref: np.ndarray, method: str = "auto") -> np.ndarray:
    """Distance from each query point to its nearest reference point.

    ``method`` is ``"kdtree"``, ``"brute"`` or ``"auto"`` (kd-tree once the
    pair count exceeds ``KDTREE_MIN_PAIRS``).
    """
    if method == "auto":
        method = "kdtree" if len(query) * len(ref) > KDTREE_MIN_PAIRS else "brute"
    if method == "kdtree":
        d, _ = cKDTree(ref).query(query, k=1)
        return np.asarray(d, dtype=np.float64)
    if method != "brute":
        raise ValueError(f"unknown nearest-neighbour method {method!r}")
    out = np.empty(len(query))
    for s in range(0, len(query), 1024):
        diff = query[s:s + 1024, None, :] - ref[None, :, :]
        out[s:s + 1024] = np.sqrt(np.min(np.einsum("ijk,ijk->ij", diff, diff), axis=1))
    return out


def pose_loss(gt: RigidTransform, est: RigidTransform, model_points) -> float:
    """Mean distance between model points under the two poses."""
    x = _points(model_points)
    return float(np.mean(np.linalg.norm(gt.apply(x) - est.apply(x), axis=1)))


def sym_pose_loss(gt: RigidTransform, est: RigidTransform, model_points,
                  method: str = "auto") -> float:
    """Mean distance from each ground-truth model point to the closest estimated one."""
    x = _points(model_points)
    return float(np.mean(nearest_distances(gt.apply(x), est.apply(x), method)))


def confidence_pose_loss(gt: RigidTransform, pred, model_points, symmetric: bool = False) -> float:
    """Confidence-weighted sum of per-prediction pose losses."""
    conf = np.asarray(pred.conf, dtype=np.float64)
    if abs(conf.sum() - 1.0) > 1e-6:
        raise ValueError(f"confidences must sum to 1, got {conf.sum()!r}")
    fn = sym_pose_loss if symmetric else pose_loss
    return float(sum(c * fn(gt, pred.pose(i), model_points) for i, c in enumerate(conf)))


def chamfer(S, S_hat, method: str = "auto") -> float:
    """Extended Chamfer distance: the larger of the two directed mean NN distances."""
    a, b = _points(S), _points(S_hat)
    return float(max(nearest_distances(a, b, method).mean(),
                     nearest_distances(b, a, method).mean()))


def total_loss(pose_term, cd_cano, cd_posed, w: LossWeights = LossWeights()):
    """Weighted sum of the three terms; works on floats and on tensors."""
    return w.pose * pose_term + w.cano * cd_cano + w.posed * cd_posed


# ---------------------------------------------------------------------------
# differentiable versions


def quat_to_rotmat_tensor(q: ad.Tensor) -> ad.Tensor:
    """(..., 4) unit quaternions -> (..., 3, 3) rotation matrices."""
    w, x, y, z = (ad.gather_rows(q, [k], axis=-1) for k in range(4))
    xx, yy, zz = ad.square(x), ad.square(y), ad.square(z)
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    one = np.ones(xx.shape, dtype=q.dtype)
    entries = [
        one - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy),
        2.0 * (xy + wz), one - 2.0 * (xx + zz), 2.0 * (yz - wx),
        2.0 * (xz - wy), 2.0 * (yz + wx), one - 2.0 * (xx + yy),
    ]
    return ad.reshape(ad.concat(entries, axis=-1), q.shape[:-1] + (3, 3))


def posed_points_tensor(quat: ad.Tensor, trans: ad.Tensor, model_points: np.ndarray) -> ad.Tensor:
    """Apply every per-point pose hypothesis to the model points.

    Args:
        quat: (B, N, 4) unit quaternions.
        trans: (B, N, 3) translations.
        model_points: (B, M, 3) constant model points.

    Returns:
        (B, N, M, 3) tensor of ``R_i x_j + t_i``.
    """
    B, N = quat.shape[:2]
    M = model_points.shape[1]
    R = quat_to_rotmat_tensor(quat)
    xt = np.broadcast_to(np.swapaxes(model_points, 1, 2)[:, None], (B, N, 3, M))
    rx = ad.transpose(ad.matmul(R, ad.Tensor(xt.astype(quat.dtype))))
    t = ad.broadcast(ad.reshape(trans, (B, N, 1, 3)), (B, N, M, 3))
    return rx + t


_MATCH_KDTREE_PAIRS = 65_536  # per batch item; below this a dense argmin is faster
_MATCH_CHUNK = 1 << 22  # max dense distance entries held at once


def _nearest_index(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Batched argmin_k |query_j - ref_k| over (..., Q, 3) and (..., R, 3)."""
    Q, R = query.shape[-2], ref.shape[-2]
    q = query.astype(np.float64).reshape(-1, Q, 3)
    r = ref.astype(np.float64).reshape(-1, R, 3)
    out = np.empty(q.shape[:2], dtype=np.intp)
    if Q * R > _MATCH_KDTREE_PAIRS:
        for b in range(len(q)):
            out[b] = cKDTree(r[b]).query(q[b])[1]
    else:
        step = max(1, _MATCH_CHUNK // (Q * R))
        for s in range(0, len(q), step):
            qs, rs = q[s:s + step], r[s:s + step]
            d2 = (np.sum(qs * qs, axis=-1)[..., :, None] + np.sum(rs * rs, axis=-1)[..., None, :]
                  - 2.0 * qs @ np.swapaxes(rs, -1, -2))
            out[s:s + step] = np.argmin(d2, axis=-1)
    return out.reshape(query.shape[:-1])


def _gather_matched(ref: ad.Tensor, idx: np.ndarray) -> ad.Tensor:
    """``out[..., j, :] = ref[..., idx[..., j], :]`` for a (..., R, 3) tensor."""
    lead = ref.shape[:-2]
    R = ref.shape[-2]
    offsets = (np.arange(int(np.prod(lead, dtype=np.int64))) * R).reshape(lead + (1,))
    flat = ad.reshape(ref, (-1, 3))
    out = ad.gather_rows(flat, (idx + offsets).ravel(), axis=0)
    return ad.reshape(out, idx.shape + (3,))


def per_point_pose_loss_tensor(quat, trans, gt_points: np.ndarray, model_points: np.ndarray,
                               symmetric: bool = False) -> ad.Tensor:
    """(B, N) pose loss of each hypothesis against ``gt_points`` (B, M, 3).

    For the symmetric form the closest estimated point is found outside the
    tape and only the matched pair is differentiated; value and subgradient
    equal a ``min_rows`` over the full distance matrix.
    """
    pred = posed_points_tensor(quat, trans, model_points)
    gt = np.broadcast_to(gt_points.astype(quat.dtype)[:, None], pred.shape)
    if symmetric:
        pred = _gather_matched(pred, _nearest_index(gt, pred.value))
    return ad.mean(ad.l2_norm_rows(pred - gt), axis=-1)


def per_point_pose_loss_dense(quat, trans, gt_points, model_points, symmetric=False) -> ad.Tensor:
    """Reference composition with ``min_rows`` over the full (M x M) distances."""
    pred = posed_points_tensor(quat, trans, model_points)
    B, N, M, _ = pred.shape
    gt = gt_points.astype(quat.dtype)
    if not symmetric:
        diff = pred - np.broadcast_to(gt[:, None], pred.shape)
        return ad.mean(ad.l2_norm_rows(diff), axis=-1)
    # d[b, i, j, k] = |gt_j - pred_{i,k}|, minimised over k
    pk = ad.broadcast(ad.reshape(pred, (B, N, 1, M, 3)), (B, N, M, M, 3))
    gj = np.broadcast_to(gt[:, None, :, None, :], (B, N, M, M, 3))
    dmin, _ = ad.min_rows(ad.l2_norm_rows(pk - gj))
    return ad.mean(dmin, axis=-1)


def confidence_pose_loss_tensor(quat, trans, conf, gt_points, model_points,
                                symmetric: bool = False) -> ad.Tensor:
    """(B,) confidence-weighted pose loss."""
    per_point = per_point_pose_loss_tensor(quat, trans, gt_points, model_points, symmetric)
    return ad.sum(conf * per_point, axis=-1)


def chamfer_tensor(generated: ad.Tensor, target: np.ndarray) -> ad.Tensor:
    """(B,) extended Chamfer distance between (B, G, 3) generated and (B, T, 3) targets.

    Nearest neighbours are matched outside the tape (see
    :func:`per_point_pose_loss_tensor`); :func:`chamfer_tensor_dense` is the
    full-matrix reference.
    """
    tgt = target.astype(generated.dtype)
    to_target = tgt[np.arange(len(tgt))[:, None], _nearest_index(generated.value, tgt)]
    gen_to_target = ad.l2_norm_rows(generated - to_target)
    matched = _gather_matched(generated, _nearest_index(tgt, generated.value))
    target_to_gen = ad.l2_norm_rows(matched - tgt)
    a = ad.mean(target_to_gen, axis=-1)
    b = ad.mean(gen_to_target, axis=-1)
    return a + ad.relu(b - a)


def chamfer_tensor_dense(generated: ad.Tensor, target: np.ndarray) -> ad.Tensor:
    B, G, _ = generated.shape
    T = target.shape[1]
    g = ad.broadcast(ad.reshape(generated, (B, G, 1, 3)), (B, G, T, 3))
    d = ad.l2_norm_rows(g - np.broadcast_to(target.astype(generated.dtype)[:, None], (B, G, T, 3)))
    gen_to_target, _ = ad.min_rows(d)
    target_to_gen, _ = ad.min_rows(ad.transpose(d))
    a = ad.mean(target_to_gen, axis=-1)
    b = ad.mean(gen_to_target, axis=-1)
    return a + ad.relu(b - a)
