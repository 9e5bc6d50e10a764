"""Paired mask-ablation probe: mask-1 vs no-mask across seeds."""

import sys
import time

import numpy as np

import facevis
from facevis.network import TrainConfig, default_block_config, train_toy
from facevis.raster import RasterConfig, rasterize_forward

design = sys.argv[1]  # "fixed" (photos always mask 1) or "matched"
m = facevis.generate_synthetic_model(0, q_target=400, n_id=8, n_exp=4)


def dataset_with_mask(seed, count, size, mask_kind):
    samples = facevis.generate_synthetic_dataset(m, seed, count, size)
    if mask_kind == "none":
        cfg = RasterConfig(size, size, sigma=1.0, support_radius=2)
        ones = np.ones(m.num_vertices)
        for s in samples:
            s.image = rasterize_forward(m, s.params, cfg, mask=ones).image
    return samples


for seed in (0, 1, 2):
    results = {}
    for mask_kind in ("standard", "none"):
        photo_kind = mask_kind if design == "matched" else "standard"
        train = dataset_with_mask(10 + seed, 200, 32, photo_kind)
        val = dataset_with_mask(1100 + seed, 60, 32, photo_kind)
        cfg = default_block_config(m, n_blocks=2, image_size=32,
                                   mask_kind=mask_kind)
        hyper = TrainConfig(epochs=40, lr=2e-5, seed=seed,
                            lr_drops=(0.5, 0.8), lr_drop_factor=0.25)
        t0 = time.time()
        net, hist = train_toy(m, train, val, cfg, hyper)
        final = [r for r in hist if r["epoch"] == 39]
        results[mask_kind] = final[-1]["nme"]
        print("%s seed %d %-8s final %s (%.0fs)"
              % (design, seed, mask_kind, ["%.2f" % r["nme"] for r in final],
                 time.time() - t0), flush=True)
    gap = results["none"] - results["standard"]
    print("%s seed %d: mask1 %.2f vs none %.2f -> %s by %.2f"
          % (design, seed, results["standard"], results["none"],
             "mask1 wins" if gap >= 0 else "none wins", abs(gap)), flush=True)
