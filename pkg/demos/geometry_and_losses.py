"""Walk through poses, ADD vs ADD-S and the Chamfer distance on the toy objects.

Run with ``python3 demos/geometry_and_losses.py``.
"""
import numpy as np

from posegen import losses
from posegen.data import make_object
from posegen.geometry import Quaternion, RigidTransform, compose, rotation_error

# A pose maps canonical object coordinates into the camera frame.
pose = RigidTransform(Quaternion.from_axis_angle([0, 1, 0], np.pi / 4), [0.0, 0.0, 0.8])
print("pose matrix:\n", np.round(pose.matrix(), 4))

# Spinning a cylinder about its own axis leaves its surface unchanged, so
# ADD (fixed correspondences) is large while ADD-S (closest points) is not.
cyl = make_object("cylinder", n_points=4000, seed=0)
spun = compose(pose, RigidTransform(Quaternion.from_axis_angle([0, 0, 1], 2.0)))
print(f"cylinder diameter      {cyl.diameter:.4f} m")
print(f"rotation error         {np.degrees(rotation_error(pose, spun)):.1f} deg")
print(f"ADD   (pose_loss)      {losses.pose_loss(pose, spun, cyl.cloud_cano):.4f} m")
print(f"ADD-S (sym_pose_loss)  {losses.sym_pose_loss(pose, spun, cyl.cloud_cano):.4f} m")

# The L-shaped block has no rotational symmetry, so ADD-S stays well above
# the cylinder's value even though it is still below ADD.
block = make_object("l_block", n_points=2000, seed=0)
print(f"l_block ADD {losses.pose_loss(pose, spun, block.cloud_cano):.4f} m, "
      f"ADD-S {losses.sym_pose_loss(pose, spun, block.cloud_cano):.4f} m")

# Chamfer is the larger of the two directed mean nearest-neighbour distances.
cube = make_object("cube", n_points=2000, seed=0)
rng = np.random.default_rng(0)
noisy = cube.cloud_cano.points + rng.normal(scale=0.002, size=(2000, 3))
print(f"chamfer(cube, noisy cube)             {losses.chamfer(cube.cloud_cano, noisy):.5f} m")
print(f"chamfer(cube, 1000-point subsample)  "
      f"{losses.chamfer(cube.cloud_cano, cube.cloud_cano.points[:1000]):.5f} m")
for method in ("kdtree", "brute"):
    print(f"  {method:6s} -> {losses.chamfer(cube.cloud_cano, noisy, method):.12f}")
