"""Render the visualization image across head poses.

Sweeps yaw from frontal to near-profile and writes one image per pose,
illustrating how frontability and the depth contest handle rotation:
vertices turning away from the camera fade out and the silhouette side
of the face wins the per-pixel depth contests.
"""

import os

from facevis import RasterConfig, generate_synthetic_model, rasterize_forward
from facevis.cli import _rotation_camera
from facevis.imageio import save_pgm

out_dir = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(out_dir, exist_ok=True)

model = generate_synthetic_model(seed=0, q_target=500, n_id=8, n_exp=4)
size = 96
cfg = RasterConfig(size, size, sigma=1.5, support_radius=3)

for yaw in (0, 20, 40, 60, 80):
    params = _rotation_camera(model, yaw=yaw, pitch=0, roll=0, size=size,
                              scale_frac=0.8)
    out = rasterize_forward(model, params, cfg)
    visible = int(out.visible.sum())
    path = os.path.join(out_dir, "pose_yaw%02d.pgm" % yaw)
    save_pgm(out.image, path)
    print("yaw %2d deg: %4d of %d vertices visible -> %s"
          % (yaw, visible, model.num_vertices, path))
