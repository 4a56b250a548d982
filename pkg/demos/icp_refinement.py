"""Refine a perturbed pose against a partial, noisy view with ICP.

Run with ``python3 demos/icp_refinement.py``.
"""
import numpy as np

from posegen.data import CameraIntrinsics, ViewParams, make_object, render_sample
from posegen.geometry import RigidTransform, compose, random_pose, random_unit_quaternion, rotation_error
from posegen.metrics import add_distance
from posegen.refine import icp_refine

rng = np.random.default_rng(7)
obj = make_object("l_block", n_points=2000, seed=0)
gt = RigidTransform(random_unit_quaternion(rng), [0.02, -0.01, 0.9])

# back-facing points culled, 30% of the rest occluded, 1 mm depth noise
sample = render_sample(obj, gt, CameraIntrinsics(), ViewParams(0.001, 0.3), seed=7)
print(f"observed {len(sample.observed)} of {len(obj.cloud_cano)} model points")

start = compose(gt, random_pose(np.radians(10), 0.03, rng))
result = icp_refine(start, sample.observed, obj.cloud_cano)

for name, T in (("start", start), ("refined", result.transform)):
    print(f"{name:8s} rotation error {np.degrees(rotation_error(T, gt)):6.3f} deg, "
          f"translation error {1000 * np.linalg.norm(T.t - gt.t):6.2f} mm, "
          f"ADD {1000 * add_distance(gt, T, obj.cloud_cano):6.2f} mm")
print(f"{result.iterations} iterations, residuals (mm): "
      + " ".join(f"{1000 * r:.2f}" for r in result.residuals[:8])
      + (" ..." if len(result.residuals) > 8 else ""))
