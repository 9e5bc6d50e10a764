"""Train a small two-block stack end to end on synthetic faces.

Each block renders the current parameter estimate, looks at the input
image alongside it, and emits an additive parameter update; gradients
flow back through the renderer.  A short run is enough to see the
per-block error drop below the bounding-box initialization.  Per-block
renders of the first validation face are dumped for inspection.
"""

import os

import numpy as np

import facevis
from facevis.network import TrainConfig, default_block_config, evaluate, train_toy
from facevis.imageio import save_pgm

out_dir = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(out_dir, exist_ok=True)

model = facevis.generate_synthetic_model(seed=0, q_target=400, n_id=8, n_exp=4)
train_set = facevis.generate_synthetic_dataset(model, seed=10, count=120,
                                               image_size=32)
val_set = facevis.generate_synthetic_dataset(model, seed=11, count=40,
                                             image_size=32)

cfg = default_block_config(model, n_blocks=2, image_size=32)
hyper = TrainConfig(epochs=12, lr=2e-5, seed=0, lr_drops=(0.5, 0.8),
                    lr_drop_factor=0.25, verbose=True)
net, history = train_toy(model, train_set, val_set, cfg, hyper)

rows = evaluate(net, val_set)
print("\nvalidation NME by stage:")
for row in rows:
    label = "initialization" if row["block"] == 0 else "block %d" % row["block"]
    print("  %-14s NME %6.2f%%  MAPE %5.2f px" % (label, row["nme"], row["mape"]))

from facevis.fitting import initialize_params
images = np.stack([s.image for s in val_set[:1]])
p0 = np.stack([initialize_params(s.bbox, model).as_vector() for s in val_set[:1]])
fwd = net.forward(images, p0, train=False)
save_pgm(val_set[0].image, os.path.join(out_dir, "train_input.pgm"))
for bi, renders in enumerate(fwd.renders_per_block):
    save_pgm(renders[0], os.path.join(out_dir, "train_block%d.pgm" % (bi + 1)))
print("wrote per-block renders of one validation face to %s" % out_dir)
