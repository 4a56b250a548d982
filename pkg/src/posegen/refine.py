"""Point-to-point ICP refinement of a pose estimate."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud, RigidTransform


class DegenerateGeometryError(ValueError):
    """Raised for point sets that do not pin down a rigid transform."""


class NoCorrespondenceError(RuntimeError):
    """Raised when no point pair lies within the correspondence distance."""


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 50
    convergence_tol: float = 1e-9
    max_correspondence_dist: float = 0.05

    def __post_init__(self):
        if self.max_iterations <= 0 or self.convergence_tol <= 0 or self.max_correspondence_dist <= 0:
            raise ValueError("ICP settings must be positive")


class IcpResult(NamedTuple):
    transform: RigidTransform
    residual: float
    iterations: int  # alignment rounds run, including a final rejected one
    residuals: list  # mean residual at the initial pose and after each accepted step


def rigid_align(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares ``R, t`` with ``R @ src_i + t ~= dst_i`` (Umeyama, no scale).

    The sign correction on the smallest singular direction rules out
    reflections.
    """
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, mu_d - R @ mu_s


def _check_geometry(name: str, pts: np.ndarray) -> None:
    if len(pts) < 3:
        raise DegenerateGeometryError(f"{name} cloud needs at least 3 points, got {len(pts)}")
    s = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
    if s[0] <= 1e-12 or s[1] <= 1e-9 * s[0]:
        raise DegenerateGeometryError(f"{name} cloud is collinear or coincident")


def icp_refine(initial: RigidTransform, observed: PointCloud, model_points: PointCloud,
               cfg: IcpConfig = IcpConfig()) -> IcpResult:
    """Refine ``initial`` so that it maps ``model_points`` onto ``observed``.

    Each iteration matches every observed point to its nearest model point
    under the current pose (pairs beyond ``max_correspondence_dist`` are
    dropped) and solves the rigid alignment in closed form. A step that would
    raise the mean residual is rejected and ends the loop, as does an
    improvement smaller than ``convergence_tol``.
    """
    obs = observed.points if isinstance(observed, PointCloud) else np.asarray(observed, float)
    model = model_points.points if isinstance(model_points, PointCloud) else np.asarray(model_points, float)
    _check_geometry("observed", obs)
    _check_geometry("model", model)
    tree = cKDTree(model)

    def match(R, t):
        # query in the model frame: R^T (o - t)
        d, idx = tree.query((obs - t) @ R, k=1)
        keep = d < cfg.max_correspondence_dist
        if not np.any(keep):
            raise NoCorrespondenceError(
                f"no correspondences within {cfg.max_correspondence_dist} m")
        return float(d[keep].mean()), idx, keep

    R, t = initial.R, initial.translation.copy()
    residual, idx, keep = match(R, t)
    history = [residual]
    iterations = 0
    accepted = False
    for iterations in range(1, cfg.max_iterations + 1):
        R_new, t_new = rigid_align(model[idx[keep]], obs[keep])
        new_residual, new_idx, new_keep = match(R_new, t_new)
        if new_residual > residual:
            break
        R, t, idx, keep = R_new, t_new, new_idx, new_keep
        accepted = True
        improvement = residual - new_residual
        residual = new_residual
        history.append(residual)
        if improvement < cfg.convergence_tol:
            break
    pose = RigidTransform.from_matrix(R, t) if accepted else initial
    return IcpResult(pose, residual, iterations, history)
